// Python surface over the core library. Arrays cross as float32 numpy.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <complex>
#include <sstream>

#include "trajprior/errors.hpp"
#include "trajprior/fft.hpp"
#include "trajprior/metrics.hpp"
#include "trajprior/retrieval.hpp"
#include "trajprior/trainer.hpp"
#include "trajprior/workbench.hpp"

namespace py = pybind11;
using namespace trajprior;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F32& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::span<const float> vec(const F32& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

py::tuple scores(const HorizonScores& s) { return py::make_tuple(s.h1, s.h2, s.h3, s.avg); }

py::list neighbours(const std::vector<Neighbor>& ns) {
    py::list out;
    for (const auto& n : ns) out.append(py::make_tuple(n.index, n.distance));
    return out;
}

py::array_t<double> trajectory_array(const TrajectoryAnnotation& t) {
    py::array_t<double> out({static_cast<py::ssize_t>(kFutureSteps), py::ssize_t{4}});
    auto m = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < kFutureSteps; ++i) {
        const auto& w = t.waypoints[i];
        m(i, 0) = w.t, m(i, 1) = w.x, m(i, 2) = w.y, m(i, 3) = w.v;
    }
    return out;
}

PipelineConfig make_config(const std::map<std::string, std::string>& overrides) {
    PipelineConfig c;
    for (const auto& [k, v] : overrides) c.set(k, v);
    c.validate();
    return c;
}

} // namespace

PYBIND11_MODULE(_trajprior, m) {
    m.doc() = "trajectory-prior retrieval core";

    // translators are tried newest first, so the base goes in first
    py::register_exception<Error>(m, "Error");
    py::register_exception<StageDependencyError>(m, "StageDependencyError");
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError");

    m.def("fft2d", [](const F32& patch) {
        if (patch.ndim() != 2 || patch.shape(0) != patch.shape(1)) throw DimensionError("fft2d expects a square 2-D patch");
        const std::size_t P = patch.shape(0);
        const ComplexMatrix f = fft2d(vec(patch), P);
        py::array_t<std::complex<double>> out({static_cast<py::ssize_t>(P), static_cast<py::ssize_t>(P)});
        auto* o = out.mutable_data();
        for (std::size_t i = 0; i < P * P; ++i) o[i] = {f.re[i], f.im[i]};
        return out;
    }, py::arg("patch"));

    m.def("cosine_distance", [](const F32& a, const F32& b) { return cosine_distance(vec(a), vec(b)); });
    m.def("l2_at_horizons", [](const std::array<double, kFutureSteps>& l, const std::string& p) {
        return scores(l2_at_horizons(l, parse_protocol(p)));
    }, py::arg("l"), py::arg("protocol") = "noavg");
    m.def("collision_at_horizons", [](const std::array<int, kFutureSteps>& c, const std::string& p) {
        return scores(collision_at_horizons(c, parse_protocol(p)));
    }, py::arg("series"), py::arg("protocol") = "noavg");
    m.def("regression_loss", [](const F32& pred, const F32& truth) {
        if (pred.ndim() != 3 || pred.shape(1) != 3 || pred.shape(2) != 3 || truth.size() != pred.size())
            throw DimensionError("regression_loss expects two (B, 3, 3) arrays");
        std::vector<StageBSample> batch(pred.shape(0));
        for (std::size_t b = 0; b < batch.size(); ++b)
            for (std::size_t h = 0; h < 3; ++h)
                for (std::size_t c = 0; c < 3; ++c) {
                    batch[b].predicted[h][c] = pred.data()[b * 9 + h * 3 + c];
                    batch[b].truth[h][c] = truth.data()[b * 9 + h * 3 + c];
                }
        return trajectory_regression_loss(batch);
    });
    m.def("info_nce", [](const F32& a, const F32& p, const F32& negs, double tau) {
        return info_nce(vec(a), vec(p), negs.size() ? to_tensor(negs) : Tensor(), tau);
    }, py::arg("anchor"), py::arg("positive"), py::arg("negatives"), py::arg("temperature") = 0.07);

    m.def("brute_force_knn", [](const F32& db, const F32& q, std::size_t k) {
        return neighbours(brute_force_knn(to_tensor(db), vec(q), k));
    });
    m.def("kmeans", [](const F32& data, std::size_t n, std::uint64_t seed) {
        const auto r = kmeans(to_tensor(data), n, seed);
        return py::make_tuple(to_numpy(r.centroids), r.labels, r.objective);
    }, py::arg("data"), py::arg("n_clusters"), py::arg("seed") = 0);
    m.def("random_unit_vectors", [](std::size_t n, std::size_t dim, std::uint64_t seed) {
        return to_numpy(random_unit_vectors(n, dim, seed));
    });

    py::class_<RetrievalIndex>(m, "RetrievalIndex")
        .def_static("build", [](const F32& emb, std::size_t n_clusters, std::uint64_t seed, std::size_t M,
                                std::size_t ef_construction) {
            IndexParams p;
            p.n_clusters = n_clusters;
            p.seed = seed;
            p.hnsw.M = M;
            p.hnsw.ef_construction = ef_construction;
            return RetrievalIndex::build(to_tensor(emb), p);
        }, py::arg("embeddings"), py::arg("n_clusters") = 16, py::arg("seed") = 0, py::arg("M") = 16,
           py::arg("ef_construction") = 200)
        .def("query", [](const RetrievalIndex& ix, const F32& q, std::size_t k, std::size_t ef) {
            return neighbours(ix.query(vec(q), k, ef));
        }, py::arg("query"), py::arg("k") = 2, py::arg("ef_search") = 50)
        .def("predict", [](const RetrievalIndex& ix, const F32& q) { return ix.predict(vec(q)); })
        .def_property_readonly("size", &RetrievalIndex::size)
        .def_property_readonly("cluster_count", &RetrievalIndex::cluster_count)
        .def_property_readonly("labels", &RetrievalIndex::labels)
        .def("save", &RetrievalIndex::save)
        .def_static("load", [](const std::string& path) {
            std::vector<std::string> ids;
            RetrievalIndex ix = RetrievalIndex::load(path, &ids);
            return py::make_tuple(std::move(ix), ids);
        });

    py::class_<MemoryQueue>(m, "MemoryQueue")
        .def(py::init<std::size_t, std::size_t>(), py::arg("capacity"), py::arg("dim"))
        .def("enqueue", [](MemoryQueue& q, const F32& rows) { q.enqueue(to_tensor(rows)); })
        .def("snapshot", [](const MemoryQueue& q) { return to_numpy(q.snapshot()); })
        .def("__len__", &MemoryQueue::size)
        .def_property_readonly("capacity", &MemoryQueue::capacity);

    py::class_<Scene>(m, "Scene")
        .def_readonly("id", &Scene::id)
        .def_readonly("label", &Scene::label)
        .def_property_readonly("future", [](const Scene& s) { return trajectory_array(s.future); })
        .def_property_readonly("frames", [](const Scene& s) {
            const std::size_t h = s.clip.height(), w = s.clip.width();
            py::array_t<float> out({py::ssize_t(kClipFrames), py::ssize_t{3}, py::ssize_t(h), py::ssize_t(w)});
            for (std::size_t t = 0; t < kClipFrames; ++t)
                std::copy(s.clip.frames[t].data().begin(), s.clip.frames[t].data().end(), out.mutable_data() + t * 3 * h * w);
            return out;
        });
    m.def("generate_corpus", [](std::size_t count, std::size_t classes, std::uint64_t seed, std::size_t size) {
        return generate_corpus({count, classes, size, size, seed, 0});
    }, py::arg("count"), py::arg("classes") = 16, py::arg("seed") = 0, py::arg("size") = 32);

    m.def("default_config", [] {
        std::map<std::string, std::string> out;
        std::istringstream in(PipelineConfig{}.to_text());
        for (std::string line; std::getline(in, line);) {
            const auto eq = line.find('=');
            out[line.substr(0, eq)] = line.substr(eq + 1);
        }
        return out;
    });
    m.def("run_stage", [](const std::string& stage, const std::map<std::string, std::string>& overrides) {
        const PipelineConfig c = make_config(overrides);
        py::gil_scoped_release nogil;
        run_stage(parse_stage(stage), c);
    }, py::arg("stage"), py::arg("config") = std::map<std::string, std::string>{});
    m.def("run_pipeline", [](const std::map<std::string, std::string>& overrides) {
        const PipelineConfig c = make_config(overrides);
        py::gil_scoped_release nogil;
        run_pipeline(c);
    }, py::arg("config") = std::map<std::string, std::string>{});
    m.def("stages", [] {
        std::vector<std::string> out;
        for (Stage s : all_stages()) out.push_back(stage_name(s));
        return out;
    });
}
