#include "trajprior/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_set>

#include <fmt/format.h>
#include "json.hpp"
#include <spdlog/spdlog.h>

#include "trajprior/binary_io.hpp"
#include "trajprior/seed.hpp"

namespace trajprior {

namespace {

constexpr std::uint32_t kIndexVersion = 1;

double uniform01(std::uint64_t& state) {
    state = splitmix64(state);
    return static_cast<double>(state >> 11) * 0x1.0p-53;
}

// Epoch-tagged visited set, one per thread so const searches stay reentrant.
struct Visited {  // plus per-thread search heaps
    std::vector<std::uint32_t> tags;
    std::uint32_t epoch = 0;
    std::vector<std::pair<float, std::uint32_t>> candidates, results;
    std::vector<std::uint32_t> fresh;

    void reset(std::size_t n) {
        if (tags.size() < n) tags.resize(n, 0);
        if (++epoch == 0) {
            std::fill(tags.begin(), tags.end(), 0);
            epoch = 1;
        }
    }
    bool mark(std::uint32_t id) {
        if (tags[id] == epoch) return false;
        tags[id] = epoch;
        return true;
    }
};

Visited& visited_set() {
    thread_local Visited v;
    return v;
}

float squared_l2(const float* a, const float* b, std::size_t dim) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= dim; i += 8) {
        for (std::size_t j = 0; j < 8; ++j) {
            const float d = a[i + j] - b[i + j];
            acc[j] += d * d;
        }
    }
    for (; i < dim; ++i) acc[0] += (a[i] - b[i]) * (a[i] - b[i]);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

void require_unit(std::span<const float> v, const char* what) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(s) - 1.0) > 1e-4) {
        throw ConfigError(fmt::format("{}: vector norm {} is not 1", what, std::sqrt(s)));
    }
}

// Bounded top-k over (distance, index), ascending.
class TopK {
  public:
    explicit TopK(std::size_t k) : k_(k) {}
    void offer(float d, std::uint32_t i) {
        if (heap_.size() < k_) {
            heap_.emplace_back(d, i);
            std::push_heap(heap_.begin(), heap_.end());
        } else if (std::make_pair(d, i) < heap_.front()) {
            std::pop_heap(heap_.begin(), heap_.end());
            heap_.back() = {d, i};
            std::push_heap(heap_.begin(), heap_.end());
        }
    }
    std::vector<Neighbor> take() {
        std::sort(heap_.begin(), heap_.end());
        std::vector<Neighbor> out;
        out.reserve(heap_.size());
        for (auto& [d, i] : heap_) out.push_back({i, d});
        return out;
    }

  private:
    std::size_t k_;
    std::vector<std::pair<float, std::uint32_t>> heap_;
};

} // namespace

// ---------------------------------------------------------------------------

float unit_distance(const float* x, const float* y, std::size_t dim) noexcept {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= dim; i += 8) {
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
        acc[4] += x[i + 4] * y[i + 4];
        acc[5] += x[i + 5] * y[i + 5];
        acc[6] += x[i + 6] * y[i + 6];
        acc[7] += x[i + 7] * y[i + 7];
    }
    for (; i < dim; ++i) acc[0] += x[i] * y[i];
    const float dot = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    return std::clamp(1.0f - dot, 0.0f, 2.0f);
}

double cosine_distance(std::span<const float> x, std::span<const float> y) {
    if (x.size() != y.size()) throw DimensionError("cosine_distance: vector widths differ");
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xy += static_cast<double>(x[i]) * y[i];
        xx += static_cast<double>(x[i]) * x[i];
        yy += static_cast<double>(y[i]) * y[i];
    }
    if (xx == 0.0 || yy == 0.0) throw ConfigError("cosine_distance: zero vector");
    return std::clamp(1.0 - xy / (std::sqrt(xx) * std::sqrt(yy)), 0.0, 2.0);
}

std::vector<Neighbor> brute_force_knn(const Tensor& database, std::span<const float> query, std::size_t k) {
    if (k == 0) throw ConfigError("brute_force_knn: k must be at least 1");
    if (database.empty()) return {};
    if (database.rank() != 2 || database.dim(1) != query.size()) {
        throw DimensionError("brute_force_knn: database " + shape_string(database.shape()) + " vs query width " +
                             std::to_string(query.size()));
    }
    const std::size_t n = database.dim(0), dim = database.dim(1);
    TopK top(k);
    const float* base = database.data().data();
    for (std::size_t i = 0; i < n; ++i) top.offer(unit_distance(query.data(), base + i * dim, dim), static_cast<std::uint32_t>(i));
    return top.take();
}

// ---------------------------------------------------------------------------

std::uint32_t nearest_centroid(const Tensor& centroids, std::span<const float> x) {
    const std::size_t n = centroids.dim(0), dim = centroids.dim(1);
    if (x.size() != dim) throw DimensionError("nearest_centroid: width mismatch");
    std::uint32_t best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
        const float d = squared_l2(x.data(), centroids.data().data() + c * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
        }
    }
    return best;
}

KMeansResult kmeans(const Tensor& data, std::size_t n_clusters, std::uint64_t seed, std::size_t max_iterations) {
    if (data.rank() != 2) throw DimensionError("kmeans: expected rows x dim data");
    const std::size_t n = data.dim(0), dim = data.dim(1);
    if (n_clusters < 1) throw ConfigError("kmeans: need at least one cluster");
    if (n_clusters > n) throw ConfigError(fmt::format("kmeans: {} clusters requested for {} points", n_clusters, n));
    const float* X = data.data().data();
    auto row = [&](std::size_t i) { return X + i * dim; };

    KMeansResult res;
    res.centroids = Tensor({n_clusters, dim});
    float* C = res.centroids.data().data();

    // k-means++ seeding.
    std::uint64_t state = derive_seed(seed, {0x4b4d});
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = static_cast<std::size_t>(uniform01(state) * n);
    std::copy_n(row(std::min(first, n - 1)), dim, C);
    for (std::size_t c = 1; c < n_clusters; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], static_cast<double>(squared_l2(row(i), C + (c - 1) * dim, dim)));
            total += d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double target = uniform01(state) * total, acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<std::size_t>(uniform01(state) * n);
        }
        std::copy_n(row(pick), dim, C + c * dim);
    }

    res.labels.assign(n, 0);
    std::vector<float> dist(n, 0.0f);
    bool first_pass = true;
    for (std::size_t it = 0; it < max_iterations; ++it) {
        bool changed = first_pass;
        first_pass = false;
        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t best = 0;
            float best_d = std::numeric_limits<float>::infinity();
            for (std::size_t c = 0; c < n_clusters; ++c) {
                const float d = squared_l2(row(i), C + c * dim, dim);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<std::uint32_t>(c);
                }
            }
            if (res.labels[i] != best) changed = true;
            res.labels[i] = best;
            dist[i] = best_d;
            objective += best_d;
        }
        res.objective.push_back(objective);
        res.iterations = it + 1;
        if (!changed) break;

        std::vector<double> sums(n_clusters * dim, 0.0);
        std::vector<std::size_t> counts(n_clusters, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t c = res.labels[i];
            ++counts[c];
            for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += row(i)[d];
        }
        for (std::size_t c = 0; c < n_clusters; ++c) {
            if (counts[c] == 0) {
                // Reseed from the point currently farthest from its centroid.
                std::size_t far = 0;
                for (std::size_t i = 1; i < n; ++i) {
                    if (dist[i] > dist[far]) far = i;
                }
                std::copy_n(row(far), dim, C + c * dim);
                dist[far] = 0.0f;
                ++res.reseeded;
                spdlog::debug("kmeans: reseeded empty cluster {} from point {}", c, far);
                continue;
            }
            for (std::size_t d = 0; d < dim; ++d) C[c * dim + d] = static_cast<float>(sums[c * dim + d] / counts[c]);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------

Hnsw::Hnsw(std::size_t dim, HnswParams params) : dim_(dim), params_(params) {
    if (params.M < 2) throw ConfigError("hnsw: M must be at least 2");
    if (params.ef_construction < params.M) throw ConfigError("hnsw: ef_construction must be at least M");
    if (dim == 0) throw ConfigError("hnsw: dimension must be positive");
    level_mult_ = 1.0 / std::log(static_cast<double>(params.M));
    rng_state_ = derive_seed(params.seed, {0x6e5});
}

Hnsw Hnsw::build(const Tensor& vectors, HnswParams params) {
    if (vectors.rank() != 2) throw DimensionError("hnsw: expected rows x dim vectors");
    Hnsw g(vectors.dim(1), params);
    for (std::size_t i = 0; i < vectors.dim(0); ++i) {
        g.insert(static_cast<std::uint32_t>(i), vectors.data().subspan(i * vectors.dim(1), vectors.dim(1)));
    }
    return g;
}

int Hnsw::draw_level() {
    const double u = uniform01(rng_state_);
    return static_cast<int>(std::floor(-std::log(1.0 - u) * level_mult_));
}

float Hnsw::dist(const float* a, std::uint32_t b) const noexcept { return unit_distance(a, vector(b), dim_); }

const std::vector<std::uint32_t>& Hnsw::neighbors(std::uint32_t node, int level) const {
    if (node >= links_.size() || level < 0 || level > levels_[node]) throw DimensionError("hnsw: no such node/level");
    return links_[node][static_cast<std::size_t>(level)];
}

std::vector<Hnsw::Cand> Hnsw::search_layer(const float* q, std::uint32_t entry, std::size_t ef, int level) const {
    Visited& visited = visited_set();
    visited.reset(size());
    // Heaps live in the thread's scratch so a query does not allocate them.
    auto& candidates = visited.candidates;  // min-heap via greater<>
    auto& results = visited.results;        // max-heap
    candidates.clear();
    results.clear();
    const auto lv = static_cast<std::size_t>(level);
    const Cand start{dist(q, entry), entry};
    visited.mark(entry);
    candidates.push_back(start);
    results.push_back(start);
    while (!candidates.empty()) {
        const Cand c = candidates.front();
        if (results.size() >= ef && c > results.front()) break;
        std::pop_heap(candidates.begin(), candidates.end(), std::greater<>{});
        candidates.pop_back();
        // Gather unvisited neighbours first so their vectors can be prefetched together.
        auto& fresh = visited.fresh;
        fresh.clear();
        for (std::uint32_t nb : links_[c.second][lv]) {
            if (!visited.mark(nb)) continue;
            fresh.push_back(nb);
            const char* p = reinterpret_cast<const char*>(vector(nb));
            for (std::size_t off = 0; off < dim_ * sizeof(float); off += 64) __builtin_prefetch(p + off);
        }
        for (std::uint32_t nb : fresh) {
            const Cand cand{dist(q, nb), nb};
            if (results.size() < ef || cand < results.front()) {
                candidates.push_back(cand);
                std::push_heap(candidates.begin(), candidates.end(), std::greater<>{});
                results.push_back(cand);
                std::push_heap(results.begin(), results.end());
                if (results.size() > ef) {
                    std::pop_heap(results.begin(), results.end());
                    results.pop_back();
                }
            }
        }
    }
    std::vector<Cand> out(results.begin(), results.end());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::uint32_t> Hnsw::select_neighbors(const float* base, std::vector<Cand> candidates, std::size_t m,
                                                  bool keep_pruned) const {
    (void)base;
    std::sort(candidates.begin(), candidates.end());
    std::vector<std::uint32_t> chosen, pruned;
    for (const auto& [d, id] : candidates) {
        if (chosen.size() >= m) break;
        bool diverse = true;
        for (std::uint32_t r : chosen) {
            if (unit_distance(vector(id), vector(r), dim_) < d) {
                diverse = false;
                break;
            }
        }
        (diverse ? chosen : pruned).push_back(id);
    }
    if (keep_pruned) {
        for (std::size_t i = 0; i < pruned.size() && chosen.size() < m; ++i) chosen.push_back(pruned[i]);
    }
    return chosen;
}

void Hnsw::insert(std::uint32_t id, std::span<const float> vec) {
    if (vec.size() != dim_) throw DimensionError("hnsw: vector width does not match the graph");
    if (id < size()) throw ConfigError(fmt::format("hnsw: duplicate internal id {}", id));
    if (id != size()) throw ConfigError(fmt::format("hnsw: ids must be inserted densely, expected {}", size()));
    data_.insert(data_.end(), vec.begin(), vec.end());
    const int level = draw_level();
    levels_.push_back(level);
    links_.emplace_back(static_cast<std::size_t>(level) + 1);
    if (max_level_ < 0) {
        entry_ = id;
        max_level_ = level;
        return;
    }
    const float* q = vector(id);
    std::uint32_t cur = entry_;
    float cur_d = dist(q, cur);
    for (int l = max_level_; l > level; --l) {
        for (bool moved = true; moved;) {
            moved = false;
            for (std::uint32_t nb : links_[cur][static_cast<std::size_t>(l)]) {
                const float d = dist(q, nb);
                if (d < cur_d) {
                    cur_d = d;
                    cur = nb;
                    moved = true;
                }
            }
        }
    }
    for (int l = std::min(level, max_level_); l >= 0; --l) {
        const auto found = search_layer(q, cur, params_.ef_construction, l);
        auto chosen = select_neighbors(q, found, params_.M, false);
        const auto lv = static_cast<std::size_t>(l);
        links_[id][lv] = chosen;
        const std::size_t cap = max_degree(l);
        for (std::uint32_t nb : chosen) {
            auto& lst = links_[nb][lv];
            lst.push_back(id);
            if (lst.size() > cap) {
                std::vector<Cand> cands;
                cands.reserve(lst.size());
                for (std::uint32_t x : lst) cands.emplace_back(unit_distance(vector(nb), vector(x), dim_), x);
                lst = select_neighbors(vector(nb), std::move(cands), cap, false);
            }
        }
        cur = found.front().second;
    }
    if (level > max_level_) {
        max_level_ = level;
        entry_ = id;
    }
}

std::vector<Neighbor> Hnsw::search(std::span<const float> query, std::size_t k, std::size_t ef) const {
    if (k == 0) throw ConfigError("hnsw: k must be at least 1");
    if (size() == 0) return {};
    if (query.size() != dim_) throw DimensionError("hnsw: query width does not match the graph");
    const float* q = query.data();
    std::uint32_t cur = entry_;
    float cur_d = dist(q, cur);
    for (int l = max_level_; l > 0; --l) {
        for (bool moved = true; moved;) {
            moved = false;
            for (std::uint32_t nb : links_[cur][static_cast<std::size_t>(l)]) {
                const float d = dist(q, nb);
                if (d < cur_d || (d == cur_d && nb < cur)) {
                    cur_d = d;
                    cur = nb;
                    moved = true;
                }
            }
        }
    }
    const auto found = search_layer(q, cur, std::max(ef, k), 0);
    std::vector<Neighbor> out;
    for (std::size_t i = 0; i < found.size() && i < k; ++i) out.push_back({found[i].second, found[i].first});
    return out;
}

void Hnsw::restore(std::size_t dim, HnswParams params, std::vector<float> data, std::vector<int> levels,
                   std::vector<std::vector<std::vector<std::uint32_t>>> links, std::uint32_t entry, int max_level) {
    *this = Hnsw(dim, params);
    const std::size_t n = levels.size();
    if (data.size() != n * dim || links.size() != n) throw FormatError("hnsw snapshot: inconsistent sizes");
    if (n > 0 && (entry >= n || max_level != levels[entry])) throw FormatError("hnsw snapshot: bad entry point");
    for (std::size_t i = 0; i < n; ++i) {
        if (levels[i] < 0 || links[i].size() != static_cast<std::size_t>(levels[i]) + 1) {
            throw FormatError("hnsw snapshot: level/link mismatch");
        }
        for (std::size_t l = 0; l < links[i].size(); ++l) {
            if (links[i][l].size() > max_degree(static_cast<int>(l))) throw FormatError("hnsw snapshot: degree bound");
            for (std::uint32_t nb : links[i][l]) {
                if (nb >= n || static_cast<std::size_t>(levels[nb]) < l) throw FormatError("hnsw snapshot: bad link");
            }
        }
    }
    data_ = std::move(data);
    levels_ = std::move(levels);
    links_ = std::move(links);
    entry_ = entry;
    max_level_ = n == 0 ? -1 : max_level;
}

// ---------------------------------------------------------------------------

Tensor Database::matrix() const {
    const std::size_t n = size(), d = dim();
    Tensor m({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        if (records[i].embedding.size() != d) throw DimensionError("database: embedding widths differ");
        std::copy(records[i].embedding.begin(), records[i].embedding.end(), m.data().begin() + i * d);
    }
    return m;
}

void Database::validate() const {
    std::unordered_set<std::string> ids;
    for (const auto& r : records) {
        if (!ids.insert(r.id).second) throw FormatError("database: duplicate id '" + r.id + "'");
        if (r.embedding.size() != dim()) throw FormatError("database: embedding widths differ at '" + r.id + "'");
        require_unit(r.embedding, ("database record " + r.id).c_str());
        r.trajectory.validate();
    }
}

void save_database(const std::string& path, const Database& db) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : db.records) {
        nlohmann::ordered_json traj = nlohmann::ordered_json::array();
        for (const auto& w : r.trajectory.waypoints) traj.push_back({{"t", w.t}, {"x", w.x}, {"y", w.y}, {"v", w.v}});
        arr.push_back({{"id", r.id}, {"embedding", r.embedding}, {"trajectory", traj}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    // nlohmann serializes floating point with round-trip precision.
    out << arr.dump(1) << '\n';
    if (!out) throw FormatError("write to '" + path + "' failed");
}

Database load_database(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open database '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    if (!j.is_array()) throw FormatError(path + ": expected an array of records");
    Database db;
    try {
        for (const auto& rec : j) {
            DatabaseRecord r;
            r.id = rec.at("id").get<std::string>();
            r.embedding = rec.at("embedding").get<std::vector<float>>();
            const auto& traj = rec.at("trajectory");
            if (!traj.is_array() || traj.size() != kFutureSteps) throw FormatError(path + ": trajectory must have 6 waypoints");
            for (std::size_t i = 0; i < kFutureSteps; ++i) {
                r.trajectory.waypoints[i] = {traj[i].at("t").get<double>(), traj[i].at("x").get<double>(),
                                             traj[i].at("y").get<double>(), traj[i].at("v").get<double>()};
            }
            db.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    db.validate();
    return db;
}

// ---------------------------------------------------------------------------

RetrievalIndex RetrievalIndex::build(const Tensor& embeddings, IndexParams params) {
    if (embeddings.rank() != 2 || embeddings.dim(0) == 0) throw ConfigError("build_index: database is empty");
    const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1);
    RetrievalIndex idx;
    idx.params_ = params;
    KMeansResult km = kmeans(embeddings, params.n_clusters, params.seed);
    idx.centroids_ = std::move(km.centroids);
    idx.labels_ = std::move(km.labels);
    idx.members_.assign(params.n_clusters, {});
    for (std::size_t i = 0; i < n; ++i) idx.members_[idx.labels_[i]].push_back(static_cast<std::uint32_t>(i));
    for (std::size_t c = 0; c < params.n_clusters; ++c) {
        HnswParams hp = params.hnsw;
        hp.seed = derive_seed(params.hnsw.seed, {c});
        Hnsw g(dim, hp);
        for (std::size_t local = 0; local < idx.members_[c].size(); ++local) {
            g.insert(static_cast<std::uint32_t>(local), embeddings.data().subspan(idx.members_[c][local] * dim, dim));
        }
        idx.graphs_.push_back(std::move(g));
    }
    std::size_t covered = 0;
    for (const auto& g : idx.graphs_) covered += g.size();
    if (covered != n) throw Error("build_index: clusters do not partition the database");
    return idx;
}

std::uint32_t RetrievalIndex::predict(std::span<const float> query) const { return nearest_centroid(centroids_, query); }

std::vector<Neighbor> RetrievalIndex::query(std::span<const float> query, std::size_t k, std::size_t ef_search,
                                            const Tensor* fallback, std::size_t n_probe) const {
    if (k == 0) throw ConfigError("query: k must be at least 1");
    if (ef_search < k) throw ConfigError(fmt::format("query: ef_search {} is smaller than k {}", ef_search, k));
    std::vector<std::uint32_t> probes;
    if (n_probe <= 1) {
        probes.push_back(predict(query));
    } else {
        std::vector<std::pair<float, std::uint32_t>> order;
        const std::size_t dim = centroids_.dim(1);
        for (std::size_t c = 0; c < centroids_.dim(0); ++c) {
            order.emplace_back(squared_l2(query.data(), centroids_.data().data() + c * dim, dim), static_cast<std::uint32_t>(c));
        }
        std::sort(order.begin(), order.end());
        for (std::size_t i = 0; i < std::min(n_probe, order.size()); ++i) probes.push_back(order[i].second);
    }
    TopK top(k);
    bool any = false;
    for (std::uint32_t c : probes) {
        if (graphs_[c].size() == 0) continue;
        any = true;
        for (const Neighbor& nb : graphs_[c].search(query, k, ef_search)) top.offer(nb.distance, members_[c][nb.index]);
    }
    if (!any) {
        spdlog::warn("query: assigned cluster {} is empty, falling back to brute force", probes.front());
        if (!fallback) throw Error("query: assigned cluster is empty and no fallback database was given");
        return brute_force_knn(*fallback, query, k);
    }
    return top.take();
}

void RetrievalIndex::save(const std::string& path, const std::vector<std::string>& ids) const {
    if (ids.size() != size()) throw ConfigError("index snapshot: id map size does not match the index");
    BinaryWriter w(path);
    w.put_array("TPIX", 4);
    w.put<std::uint32_t>(kIndexVersion);
    w.put<std::uint64_t>(params_.n_clusters);
    w.put<std::uint64_t>(params_.hnsw.M);
    w.put<std::uint64_t>(params_.hnsw.ef_construction);
    w.put<std::uint64_t>(params_.hnsw.seed);
    w.put<std::uint64_t>(params_.seed);
    w.put_tensor(centroids_);
    w.put<std::uint64_t>(labels_.size());
    w.put_array(labels_.data(), labels_.size());
    for (std::size_t c = 0; c < graphs_.size(); ++c) {
        const Hnsw& g = graphs_[c];
        w.put<std::uint64_t>(g.size());
        w.put_array(members_[c].data(), members_[c].size());
        w.put<std::uint64_t>(g.params().seed);
        w.put<std::uint32_t>(g.entry_point());
        w.put<std::int32_t>(g.max_level());
        w.put_array(g.data().data(), g.data().size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            w.put<std::int32_t>(g.levels()[i]);
            for (const auto& lst : g.links()[i]) {
                w.put<std::uint32_t>(static_cast<std::uint32_t>(lst.size()));
                w.put_array(lst.data(), lst.size());
            }
        }
    }
    for (const auto& id : ids) w.put_string(id);
    w.close();
}

RetrievalIndex RetrievalIndex::load(const std::string& path, std::vector<std::string>* ids) {
    BinaryReader r(path);
    r.expect_magic("TPIX");
    const auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion) throw FormatError(path + ": unsupported index version " + std::to_string(version));
    RetrievalIndex idx;
    idx.params_.n_clusters = r.get<std::uint64_t>();
    idx.params_.hnsw.M = r.get<std::uint64_t>();
    idx.params_.hnsw.ef_construction = r.get<std::uint64_t>();
    idx.params_.hnsw.seed = r.get<std::uint64_t>();
    idx.params_.seed = r.get<std::uint64_t>();
    idx.centroids_ = r.get_tensor();
    if (idx.centroids_.rank() != 2 || idx.centroids_.dim(0) != idx.params_.n_clusters) {
        throw FormatError(path + ": centroid table does not match the cluster count");
    }
    const std::size_t dim = idx.centroids_.dim(1);
    const auto n = r.get<std::uint64_t>();
    idx.labels_.resize(n);
    r.get_array(idx.labels_.data(), n);
    for (std::size_t c = 0; c < idx.params_.n_clusters; ++c) {
        const auto count = r.get<std::uint64_t>();
        if (count > n) throw FormatError(path + ": cluster larger than the database");
        std::vector<std::uint32_t> members(count);
        r.get_array(members.data(), count);
        HnswParams hp = idx.params_.hnsw;
        hp.seed = r.get<std::uint64_t>();
        const auto entry = r.get<std::uint32_t>();
        const auto max_level = r.get<std::int32_t>();
        std::vector<float> data(count * dim);
        r.get_array(data.data(), data.size());
        std::vector<int> levels(count);
        std::vector<std::vector<std::vector<std::uint32_t>>> links(count);
        for (std::size_t i = 0; i < count; ++i) {
            levels[i] = r.get<std::int32_t>();
            if (levels[i] < 0 || levels[i] > 64) throw FormatError(path + ": implausible node level");
            links[i].resize(static_cast<std::size_t>(levels[i]) + 1);
            for (auto& lst : links[i]) {
                const auto deg = r.get<std::uint32_t>();
                if (deg > 4 * hp.M) throw FormatError(path + ": implausible degree");
                lst.resize(deg);
                r.get_array(lst.data(), deg);
            }
        }
        Hnsw g;
        g.restore(dim, hp, std::move(data), std::move(levels), std::move(links), entry, max_level);
        for (std::uint32_t m : members) {
            if (m >= n || idx.labels_[m] != c) throw FormatError(path + ": member list disagrees with labels");
        }
        idx.members_.push_back(std::move(members));
        idx.graphs_.push_back(std::move(g));
    }
    std::vector<std::string> id_map(n);
    for (auto& s : id_map) s = r.get_string();
    if (ids) *ids = std::move(id_map);
    return idx;
}

QueryResult retrieve(const RetrievalIndex& index, const Database& db, std::span<const float> query, std::size_t k,
                     std::size_t ef_search) {
    require_unit(query, "retrieve query");
    if (index.size() != db.size()) throw ConfigError("retrieve: index and database sizes differ");
    const Tensor all = db.matrix();
    QueryResult out;
    for (const Neighbor& nb : index.query(query, k, std::max(ef_search, k), &all)) {
        const auto& rec = db.records[nb.index];
        out.push_back({rec.id, nb.distance, rec.trajectory});
    }
    return out;
}

// ---------------------------------------------------------------------------

const char* strategy_name(Strategy s) {
    switch (s) {
    case Strategy::Simple: return "simple";
    case Strategy::KMeansOnly: return "kmeans-only";
    case Strategy::HnswOnly: return "hnsw-only";
    case Strategy::KMeansHnsw: return "kmeans+hnsw";
    }
    return "?";
}

Strategy parse_strategy(const std::string& name) {
    for (Strategy s : {Strategy::Simple, Strategy::KMeansOnly, Strategy::HnswOnly, Strategy::KMeansHnsw}) {
        if (name == strategy_name(s)) return s;
    }
    throw ConfigError("unknown retrieval strategy '" + name + "'");
}

std::vector<BenchRow> bench(const Tensor& database, const Tensor& queries, const BenchConfig& config) {
    if (config.repetitions < 100) throw ConfigError("bench: repetitions must be at least 100");
    if (queries.rank() != 2 || queries.dim(0) == 0) throw ConfigError("bench: need at least one query");
    const std::size_t dim = database.dim(1), nq = queries.dim(0);
    const std::size_t n_c = std::min(config.n_clusters, database.dim(0));

    // kmeans-only keeps each cluster's rows contiguous, like an inverted file.
    KMeansResult km = kmeans(database, n_c, config.seed);
    std::vector<Tensor> lists(n_c);
    std::vector<std::vector<std::uint32_t>> list_ids(n_c);
    for (std::size_t i = 0; i < database.dim(0); ++i) list_ids[km.labels[i]].push_back(static_cast<std::uint32_t>(i));
    for (std::size_t c = 0; c < n_c; ++c) {
        lists[c] = Tensor({list_ids[c].size(), dim});
        for (std::size_t j = 0; j < list_ids[c].size(); ++j) {
            std::copy_n(database.data().begin() + list_ids[c][j] * dim, dim, lists[c].data().begin() + j * dim);
        }
    }
    const Hnsw flat = Hnsw::build(database, config.hnsw);
    IndexParams ip;
    ip.n_clusters = n_c;
    ip.hnsw = config.hnsw;
    ip.seed = config.seed;
    const RetrievalIndex combined = RetrievalIndex::build(database, ip);

    auto run = [&](Strategy s, std::span<const float> q, std::size_t k) -> std::vector<Neighbor> {
        switch (s) {
        case Strategy::Simple: return brute_force_knn(database, q, k);
        case Strategy::KMeansOnly: {
            const std::uint32_t c = nearest_centroid(km.centroids, q);
            auto res = brute_force_knn(lists[c], q, k);
            for (auto& nb : res) nb.index = list_ids[c][nb.index];
            return res;
        }
        case Strategy::HnswOnly: return flat.search(q, k, std::max(config.ef_search, k));
        case Strategy::KMeansHnsw: return combined.query(q, k, std::max(config.ef_search, k), &database);
        }
        return {};
    };

    // Each (strategy, k) block is warmed then timed back to back, so every
    // strategy is measured in its own steady cache state.
    std::vector<BenchRow> rows;
    volatile float sink = 0.0f;
    for (Strategy s : config.strategies) {
        BenchRow row{s, {}, 0.0};
        for (std::size_t k = 1; k <= 5; ++k) {
            for (std::size_t i = 0; i < config.warmup; ++i) {
                auto r = run(s, queries.data().subspan((i % nq) * dim, dim), k);
                if (!r.empty()) sink = sink + r[0].distance;
            }
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t i = 0; i < config.repetitions; ++i) {
                auto r = run(s, queries.data().subspan((i % nq) * dim, dim), k);
                if (!r.empty()) sink = sink + r[0].distance;
            }
            const auto t1 = std::chrono::steady_clock::now();
            row.ms[k - 1] = std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(config.repetitions);
        }
        row.overall = std::accumulate(row.ms.begin(), row.ms.end(), 0.0) / 5.0;
        rows.push_back(row);
    }
    (void)sink;
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string out = "strategy,top1_ms,top2_ms,top3_ms,top4_ms,top5_ms,overall_ms\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", strategy_name(r.strategy), r.ms[0], r.ms[1],
                           r.ms[2], r.ms[3], r.ms[4], r.overall);
    }
    return out;
}

Tensor random_unit_vectors(std::size_t n, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor out({n, dim});
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (auto& x : v) {
            x = g(rng);
            s += x * x;
        }
        s = std::sqrt(s);
        for (std::size_t d = 0; d < dim; ++d) out[i * dim + d] = static_cast<float>(v[d] / s);
    }
    return out;
}

Tensor clustered_unit_vectors(std::size_t n, std::size_t dim, std::size_t clusters, double spread, std::uint64_t seed,
                              std::vector<std::uint32_t>* labels) {
    const Tensor centres = random_unit_vectors(clusters, dim, derive_seed(seed, {0xce}));
    std::mt19937_64 rng(derive_seed(seed, {0xd0}));
    std::normal_distribution<double> g(0.0, spread / std::sqrt(static_cast<double>(dim)));
    Tensor out({n, dim});
    if (labels) labels->assign(n, 0);
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % clusters;
        if (labels) (*labels)[i] = static_cast<std::uint32_t>(c);
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            v[d] = centres[c * dim + d] + g(rng);
            s += v[d] * v[d];
        }
        s = std::sqrt(s);
        for (std::size_t d = 0; d < dim; ++d) out[i * dim + d] = static_cast<float>(v[d] / s);
    }
    return out;
}

} // namespace trajprior
