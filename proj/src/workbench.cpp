#include "trajprior/workbench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"
#include "trajprior/binary_io.hpp"
#include "trajprior/seed.hpp"
#include "trajprior/trainer.hpp"

namespace trajprior {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kSceneVersion = 1;
constexpr double kPixelsPerMeter = 0.4;
constexpr double kBlobSigma = 3.0;
constexpr double kObstacleOffset = 2.6;  // lateral gap to the obstacle, m
constexpr double kAnchorJitter = 1.0;    // px

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

} // namespace

Velocity class_velocity(std::uint32_t label) {
    if (label == 0) return {};
    static constexpr double kHeadings[4] = {-45.0, -15.0, 15.0, 45.0};
    const std::uint32_t k = label - 1;
    const double heading = deg2rad(kHeadings[k % 4]);
    const double speed = 2.0 + static_cast<double>(k / 4) * 8.0 / 3.0;
    return {speed * std::cos(heading), speed * std::sin(heading)};
}

Scene make_scene(const std::string& id, std::uint32_t label, Velocity velocity, std::size_t height, std::size_t width,
                 std::uint64_t seed) {
    if (height < 16 || width < 16) throw ConfigError(fmt::format("scene size {}x{} is too small", height, width));
    Scene s;
    s.id = id;
    s.label = label;
    s.velocity = velocity;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // The blob is drawn in the present ego frame: at frame time t it sits at
    // anchor + v * t, with x along columns and y toward the top. The anchor
    // (where the ego is now) gets a small seeded jitter only; letting it roam
    // the whole image makes absolute position, not motion, the dominant
    // signal after global pooling.
    const double anchor_r = 0.5 * static_cast<double>(height - 1) + (2.0 * u01(rng) - 1.0) * kAnchorJitter;
    const double anchor_c = 0.7 * static_cast<double>(width - 1) + (2.0 * u01(rng) - 1.0) * kAnchorJitter;
    const double amplitude = 0.6 + 0.3 * u01(rng);
    const double background = 0.05 + 0.1 * u01(rng);
    std::normal_distribution<double> pixel_noise(0.0, 0.02);

    s.clip.frames.reserve(kClipFrames);
    for (std::size_t f = 0; f < kClipFrames; ++f) {
        const double t = kFrameTimes[f];
        const double rc = anchor_r - kPixelsPerMeter * velocity.vy * t;
        const double cc = anchor_c + kPixelsPerMeter * velocity.vx * t;
        Tensor frame({3, height, width});
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const double ry = static_cast<double>(y) - rc, rx = static_cast<double>(x) - cc;
                const double g = amplitude * std::exp(-(ry * ry + rx * rx) / (2.0 * kBlobSigma * kBlobSigma));
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    const double v = background + g + pixel_noise(rng);
                    frame[(ch * height + y) * width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
        s.clip.frames.push_back(std::move(frame));
    }

    const double speed = std::hypot(velocity.vx, velocity.vy) * kMpsToKmh;
    for (std::size_t i = 0; i < kHistorySteps; ++i) {
        const double t = -3.0 + 0.5 * static_cast<double>(i);
        s.history[i] = {t, velocity.vx * t, velocity.vy * t, speed};
    }
    s.future = constant_velocity_trajectory(velocity.vx, velocity.vy);
    // Obstacle one lane over from the 3 s position, on the side the ego drifts
    // toward, so the true future never overlaps it.
    double side = velocity.vy > 0.0 ? 1.0 : velocity.vy < 0.0 ? -1.0 : (u01(rng) < 0.5 ? -1.0 : 1.0);
    const Waypoint& last = s.future.waypoints.back();
    s.obstacle = Box{last.x, last.y + side * kObstacleOffset, 4.0, 1.8};
    return s;
}

std::vector<Scene> generate_corpus(const CorpusSpec& spec) {
    if (spec.classes < 1 || spec.count < spec.classes) {
        throw ConfigError(fmt::format("corpus needs count >= classes >= 1 (count {}, classes {})", spec.count, spec.classes));
    }
    std::vector<Scene> out;
    out.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t index = spec.first_index + i;
        const auto label = static_cast<std::uint32_t>(index % spec.classes);
        const std::uint64_t seed = derive_seed(spec.seed, {0xc0, index});
        std::mt19937_64 rng(derive_seed(seed, {0x7e1}));
        Velocity v = class_velocity(label);
        if (label != 0) {
            std::normal_distribution<double> speed_noise(0.0, 0.03), heading_noise(0.0, deg2rad(2.0));
            const double speed = std::hypot(v.vx, v.vy) * (1.0 + speed_noise(rng));
            const double heading = std::atan2(v.vy, v.vx) + heading_noise(rng);
            v = {speed * std::cos(heading), speed * std::sin(heading)};
        }
        out.push_back(make_scene(fmt::format("clip-{:06d}", index), label, v, spec.height, spec.width, seed));
    }
    return out;
}

void save_scenes(const std::string& path, const std::vector<Scene>& scenes) {
    BinaryWriter w(path);
    w.put_array("TPCS", 4);
    w.put<std::uint32_t>(kSceneVersion);
    w.put<std::uint64_t>(scenes.size());
    for (const Scene& s : scenes) {
        s.clip.validate();
        w.put_string(s.id);
        w.put<std::uint32_t>(s.label);
        w.put<double>(s.velocity.vx);
        w.put<double>(s.velocity.vy);
        for (const auto& h : s.history) {
            for (double v : {h.t, h.x, h.y, h.v}) w.put<double>(v);
        }
        for (const auto& p : s.future.waypoints) {
            for (double v : {p.t, p.x, p.y, p.v}) w.put<double>(v);
        }
        for (double v : {s.obstacle.cx, s.obstacle.cy, s.obstacle.length, s.obstacle.width}) w.put<double>(v);
        for (const Tensor& f : s.clip.frames) w.put_tensor(f);
    }
    w.close();
}

std::vector<Scene> load_scenes(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("TPCS");
    const auto version = r.get<std::uint32_t>();
    if (version != kSceneVersion) throw FormatError(path + ": unsupported clip-set version " + std::to_string(version));
    const auto n = r.get<std::uint64_t>();
    if (n > (1u << 24)) throw FormatError(path + ": implausible scene count");
    std::vector<Scene> out(n);
    for (Scene& s : out) {
        s.id = r.get_string();
        s.label = r.get<std::uint32_t>();
        s.velocity.vx = r.get<double>();
        s.velocity.vy = r.get<double>();
        for (auto& h : s.history) {
            for (double* v : {&h.t, &h.x, &h.y, &h.v}) *v = r.get<double>();
        }
        for (auto& p : s.future.waypoints) {
            for (double* v : {&p.t, &p.x, &p.y, &p.v}) *v = r.get<double>();
        }
        for (double* v : {&s.obstacle.cx, &s.obstacle.cy, &s.obstacle.length, &s.obstacle.width}) *v = r.get<double>();
        s.clip.frames.resize(kClipFrames);
        for (Tensor& f : s.clip.frames) f = r.get_tensor();
        s.clip.validate();
        s.future.validate();
    }
    if (!r.at_end()) throw FormatError(path + ": trailing bytes");
    return out;
}

Separation class_separation(const Tensor& e, const std::vector<std::uint32_t>& labels) {
    if (e.rank() != 2 || e.dim(0) != labels.size()) throw DimensionError("class_separation: rows and labels differ");
    const std::size_t n = e.dim(0), d = e.dim(1);
    double within = 0.0, between = 0.0;
    std::size_t nw = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(e[i * d + k]) * e[j * d + k];
            if (labels[i] == labels[j]) {
                within += dot;
                ++nw;
            } else {
                between += dot;
                ++nb;
            }
        }
    }
    return {nw ? within / static_cast<double>(nw) : 0.0, nb ? between / static_cast<double>(nb) : 0.0};
}

Tensor embed_scenes(const std::vector<Scene>& scenes, const Checkpoint& model) {
    std::vector<const Clip*> clips;
    clips.reserve(scenes.size());
    for (const auto& s : scenes) clips.push_back(&s.clip);
    const std::vector<Tensor> feats = encode_clips(clips, model.encoder_params, model.encoder);
    const std::size_t c = model.encoder.fused_channels;
    Tensor h({scenes.size(), c});
    for (std::size_t i = 0; i < feats.size(); ++i) std::copy(feats[i].data().begin(), feats[i].data().end(), h.data().begin() + i * c);
    Tensor z = project(h, model.head_params, model.encoder);
    // Renormalize in double so stored vectors sit on the sphere to float precision.
    const std::size_t m = z.dim(1);
    for (std::size_t i = 0; i < z.dim(0); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k) s += static_cast<double>(z[i * m + k]) * z[i * m + k];
        s = std::sqrt(s);
        if (s == 0.0) throw NumericalError("embedding of " + scenes[i].id + " is the zero vector");
        for (std::size_t k = 0; k < m; ++k) z[i * m + k] = static_cast<float>(z[i * m + k] / s);
    }
    return z;
}

// ---------------------------------------------------------------------------

std::vector<std::string> default_constraints() {
    return {"collision avoidance", "velocity smoothness", "adherence to drivable areas"};
}

std::array<std::string, kClipFrames> frame_ids(const std::string& scene_id) {
    std::array<std::string, kClipFrames> ids;
    for (std::size_t i = 0; i < kClipFrames; ++i) ids[i] = fmt::format("{}/frame-{}", scene_id, i);
    return ids;
}

namespace {

std::string join(const std::vector<std::string>& items, const char* sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

std::string constraint_phrase(const std::vector<std::string>& c) {
    if (c.empty()) return "";
    if (c.size() == 1) return c[0];
    if (c.size() == 2) return c[0] + " and " + c[1];
    return join({c.begin(), c.end() - 1}, ", ") + ", and " + c.back();
}

void scene_lines(std::string& out, const PromptScene& s) {
    out += fmt::format("Frames ({}): {}\n", "3.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.0 seconds before the present",
                       join({s.frames.begin(), s.frames.end()}, ", "));
    std::vector<std::string> hist;
    for (const auto& h : s.history) hist.push_back(fmt::format("({:.1f}s: x={:.2f}, y={:.2f}, v={:.2f})", h.t, h.x, h.y, h.v));
    out += "History positions and velocities: " + (hist.empty() ? std::string("none") : join(hist, ", ")) + "\n";
    if (s.waypoint) out += fmt::format("Way-point: (x={:.2f}, y={:.2f})\n", s.waypoint->x, s.waypoint->y);
}

} // namespace

std::string assemble_prompt(const PromptBundle& b) {
    std::string out;
    out += "You are the planning module of an autonomous vehicle. Coordinates are ego-centric: x forward and y left "
           "in meters, speed v in km/h.\n";
    if (!b.references.empty()) {
        out += fmt::format("The following {} reference scene{} were retrieved as similar driving situations, most "
                           "similar first.\n",
                           b.references.size(), b.references.size() == 1 ? "" : "s");
    }
    for (std::size_t i = 0; i < b.references.size(); ++i) {
        const ReferenceScene& r = b.references[i];
        out += fmt::format("\n[Reference scene {}: {}]\n", i + 1, r.id);
        scene_lines(out, r);
        std::vector<std::string> fut;
        for (const auto& w : r.future.waypoints) fut.push_back(fmt::format("({:.1f}s: x={:.2f}, y={:.2f}, v={:.2f})", w.t, w.x, w.y, w.v));
        out += "Ground-truth future trajectory: " + join(fut, ", ") + "\n";
    }
    out += fmt::format("\n[Target scene: {}]\n", b.target.id);
    scene_lines(out, b.target);
    if (b.target.ego) {
        out += fmt::format("Ego status: v={:.2f} km/h, a={:.2f} m/s^2, yaw={:.2f} deg\n", b.target.ego->v, b.target.ego->a,
                           b.target.ego->yaw);
    }
    out += "\nThink step by step. Consider " + constraint_phrase(b.constraints) + ".\n";
    out += "Output format: six future way-points at 0.5 s intervals, one per line, as \"t: (x, y, v)\" for "
           "t = 0.5, 1.0, 1.5, 2.0, 2.5, 3.0.\n";
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("config key '{}': '{}' is not a non-negative integer", key, v));
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("bad");
        return x;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("config key '{}': '{}' is not a number", key, v));
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError(fmt::format("config key '{}': '{}' is not a boolean", key, v));
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
    const std::string& v = value;
    if (key == "out") out = v;
    else if (key == "seed") seed = parse_size(key, v);
    else if (key == "db_clips") db_clips = parse_size(key, v);
    else if (key == "query_clips") query_clips = parse_size(key, v);
    else if (key == "classes") classes = parse_size(key, v);
    else if (key == "height") height = parse_size(key, v);
    else if (key == "width") width = parse_size(key, v);
    else if (key == "train_clips") train_clips = parse_size(key, v);
    else if (key == "epochs") epochs = parse_size(key, v);
    else if (key == "batch") batch = parse_size(key, v);
    else if (key == "temperature") temperature = parse_real(key, v);
    else if (key == "hard_negatives") hard_negatives = parse_size(key, v);
    else if (key == "queue_capacity") queue_capacity = parse_size(key, v);
    else if (key == "lr_encoder") lr_encoder = parse_real(key, v);
    else if (key == "lr_head") lr_head = parse_real(key, v);
    else if (key == "weight_decay") weight_decay = parse_real(key, v);
    else if (key == "top_k") top_k = parse_size(key, v);
    else if (key == "n_clusters") n_clusters = parse_size(key, v);
    else if (key == "ef_search") ef_search = parse_size(key, v);
    else if (key == "hnsw_m") hnsw_m = parse_size(key, v);
    else if (key == "ef_construction") ef_construction = parse_size(key, v);
    else if (key == "ego_status") ego_status = parse_bool(key, v);
    else if (key == "protocol") {
        if (v != "both") parse_protocol(v);
        protocol = v;
    }
    else if (key == "bench_entries") bench_entries = parse_size(key, v);
    else if (key == "bench_queries") bench_queries = parse_size(key, v);
    else if (key == "bench_repetitions") bench_repetitions = parse_size(key, v);
    else if (key == "bench_clusters") bench_clusters = parse_size(key, v);
    else if (key == "bench_ef") bench_ef = parse_size(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
}

void PipelineConfig::validate() const {
    if (out.empty()) throw ConfigError("out directory must be set");
    if (classes < 1 || db_clips < classes) throw ConfigError("db_clips must be >= classes >= 1");
    if (query_clips < classes) throw ConfigError("query_clips must be at least classes");
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
    if (n_clusters < 1 || n_clusters > db_clips) throw ConfigError("n_clusters must be in [1, db_clips]");
    if (ef_search < top_k) throw ConfigError("ef_search must be at least top_k");
    if (train_clips > db_clips) throw ConfigError("train_clips cannot exceed db_clips");
    if (bench_entries < 1 || bench_clusters > bench_entries) throw ConfigError("bench sizes are inconsistent");
    if (bench_repetitions < 100) throw ConfigError("bench_repetitions must be at least 100");
}

std::string PipelineConfig::to_text() const {
    std::string s;
    auto kv = [&](const char* k, const auto& v) { s += fmt::format("{}={}\n", k, v); };
    kv("out", out);
    kv("seed", seed);
    kv("db_clips", db_clips);
    kv("query_clips", query_clips);
    kv("classes", classes);
    kv("height", height);
    kv("width", width);
    kv("train_clips", train_clips);
    kv("epochs", epochs);
    kv("batch", batch);
    kv("temperature", temperature);
    kv("hard_negatives", hard_negatives);
    kv("queue_capacity", queue_capacity);
    kv("lr_encoder", lr_encoder);
    kv("lr_head", lr_head);
    kv("weight_decay", weight_decay);
    kv("top_k", top_k);
    kv("n_clusters", n_clusters);
    kv("ef_search", ef_search);
    kv("hnsw_m", hnsw_m);
    kv("ef_construction", ef_construction);
    kv("ego_status", ego_status ? "true" : "false");
    kv("protocol", protocol);
    kv("bench_entries", bench_entries);
    kv("bench_queries", bench_queries);
    kv("bench_repetitions", bench_repetitions);
    kv("bench_clusters", bench_clusters);
    kv("bench_ef", bench_ef);
    return s;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    PipelineConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("{}:{}: expected key=value", path, lineno));
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

// ---------------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s{Stage::GenData, Stage::Train,  Stage::Embed, Stage::BuildIndex,
                                      Stage::Query,   Stage::Prompt, Stage::Bench, Stage::Eval};
    return s;
}

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::GenData: return "gen-data";
    case Stage::Train: return "train";
    case Stage::Embed: return "embed";
    case Stage::BuildIndex: return "build-index";
    case Stage::Query: return "query";
    case Stage::Prompt: return "prompt";
    case Stage::Bench: return "bench";
    case Stage::Eval: return "eval";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    for (Stage s : all_stages()) {
        if (name == stage_name(s)) return s;
    }
    throw ConfigError("unknown stage '" + name + "'");
}

namespace {

struct Paths {
    fs::path dir;
    fs::path database_scenes() const { return dir / "database.tpcs"; }
    fs::path query_scenes() const { return dir / "queries.tpcs"; }
    fs::path model() const { return dir / "model.tpck"; }
    fs::path loss_history() const { return dir / "loss_history.csv"; }
    fs::path validation() const { return dir / "validation_loss.csv"; }
    fs::path database() const { return dir / "database.json"; }
    fs::path query_embeddings() const { return dir / "queries.json"; }
    fs::path separation() const { return dir / "separation.csv"; }
    fs::path index() const { return dir / "index.tpix"; }
    fs::path results_json() const { return dir / "query_results.json"; }
    fs::path results_csv() const { return dir / "query_results.csv"; }
    fs::path bundles() const { return dir / "prompt_bundles.json"; }
    fs::path prompts() const { return dir / "prompts"; }
    fs::path bench() const { return dir / "bench.csv"; }
    fs::path bench_neighbors() const { return dir / "bench_neighbors.csv"; }
    fs::path eval() const { return dir / "eval.csv"; }
    fs::path eval_baseline() const { return dir / "eval_baseline.csv"; }
    fs::path eval_summary() const { return dir / "eval_summary.csv"; }
};

void require(const fs::path& p, Stage needed_by, Stage producer) {
    if (!fs::exists(p)) {
        throw StageDependencyError(fmt::format("stage '{}' needs {} which stage '{}' produces; run it first",
                                               stage_name(needed_by), p.string(), stage_name(producer)));
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + p.string() + "' for writing");
    out << text;
    if (!out) throw FormatError("write to '" + p.string() + "' failed");
}

Database to_database(const std::vector<Scene>& scenes, const Tensor& z) {
    Database db;
    const std::size_t m = z.dim(1);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        db.records.push_back({scenes[i].id, std::vector<float>(z.data().begin() + i * m, z.data().begin() + (i + 1) * m),
                              scenes[i].future});
    }
    return db;
}

std::vector<QueryResult> load_results(const fs::path& p, const Database& db, std::vector<std::string>& query_ids) {
    std::map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < db.size(); ++i) row[db.records[i].id] = i;
    std::ifstream in(p);
    nlohmann::json j;
    in >> j;
    std::vector<QueryResult> out;
    for (const auto& q : j) {
        query_ids.push_back(q.at("query").get<std::string>());
        QueryResult r;
        for (const auto& h : q.at("hits")) {
            const std::string id = h.at("id").get<std::string>();
            const auto it = row.find(id);
            if (it == row.end()) throw FormatError(p.string() + ": unknown database id " + id);
            r.push_back({id, h.at("distance").get<double>(), db.records[it->second].trajectory});
        }
        out.push_back(std::move(r));
    }
    return out;
}

PromptBundle make_bundle(const Scene& target, const QueryResult& hits, const std::map<std::string, const Scene*>& db,
                         bool ego_status) {
    PromptBundle b;
    for (const QueryHit& h : hits) {
        const Scene& s = *db.at(h.id);
        ReferenceScene r;
        r.id = s.id;
        r.frames = frame_ids(s.id);
        r.history.assign(s.history.begin(), s.history.end());
        r.waypoint = Point2{s.future.waypoints.back().x, s.future.waypoints.back().y};
        r.future = h.trajectory;
        b.references.push_back(std::move(r));
    }
    b.target.id = target.id;
    b.target.frames = frame_ids(target.id);
    b.target.history.assign(target.history.begin(), target.history.end());
    if (ego_status) {
        const double yaw = std::atan2(target.velocity.vy, target.velocity.vx) * 180.0 / std::numbers::pi;
        b.target.ego = EgoStatus{std::hypot(target.velocity.vx, target.velocity.vy) * kMpsToKmh, 0.0, yaw};
    }
    return b;
}

nlohmann::ordered_json bundle_json(const PromptBundle& b) {
    auto scene = [](const PromptScene& s) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["frames"] = s.frames;
        nlohmann::ordered_json h = nlohmann::ordered_json::array();
        for (const auto& p : s.history) h.push_back({{"t", p.t}, {"x", p.x}, {"y", p.y}, {"v", p.v}});
        j["history"] = h;
        if (s.waypoint) j["waypoint"] = {{"x", s.waypoint->x}, {"y", s.waypoint->y}};
        return j;
    };
    nlohmann::ordered_json j;
    nlohmann::ordered_json refs = nlohmann::ordered_json::array();
    for (const auto& r : b.references) {
        auto rj = scene(r);
        nlohmann::ordered_json fut = nlohmann::ordered_json::array();
        for (const auto& w : r.future.waypoints) fut.push_back({{"t", w.t}, {"x", w.x}, {"y", w.y}, {"v", w.v}});
        rj["future"] = fut;
        refs.push_back(rj);
    }
    j["references"] = refs;
    auto tj = scene(b.target);
    if (b.target.ego) tj["ego"] = {{"v", b.target.ego->v}, {"a", b.target.ego->a}, {"yaw", b.target.ego->yaw}};
    j["target"] = tj;
    j["constraints"] = b.constraints;
    return j;
}

std::vector<Protocol> protocols_of(const PipelineConfig& c) {
    if (c.protocol == "both") return {Protocol::NoAvg, Protocol::TemAvg};
    return {parse_protocol(c.protocol)};
}

void stage_gen_data(const PipelineConfig& c, const Paths& p) {
    save_scenes(p.database_scenes().string(), generate_corpus({c.db_clips, c.classes, c.height, c.width, c.seed, 0}));
    // Queries continue the id sequence, so they are fresh draws of the same classes.
    save_scenes(p.query_scenes().string(),
                generate_corpus({c.query_clips, c.classes, c.height, c.width, c.seed, c.db_clips}));
    spdlog::info("gen-data: {} database and {} query scenes", c.db_clips, c.query_clips);
}

void stage_train(const PipelineConfig& c, const Paths& p) {
    require(p.database_scenes(), Stage::Train, Stage::GenData);
    const std::vector<Scene> scenes = load_scenes(p.database_scenes().string());
    const std::size_t n = c.train_clips == 0 ? scenes.size() : std::min(c.train_clips, scenes.size());
    std::vector<Clip> corpus;
    corpus.reserve(n);
    for (std::size_t i = 0; i < n; ++i) corpus.push_back(scenes[i].clip);
    EncoderConfig enc;
    enc.height = c.height;
    enc.width = c.width;
    TrainerConfig tc;
    tc.batch = c.batch;
    tc.epochs = c.epochs;
    tc.temperature = c.temperature;
    tc.hard_negatives = c.hard_negatives;
    tc.queue_capacity = c.queue_capacity;
    tc.lr_encoder = c.lr_encoder;
    tc.lr_head = c.lr_head;
    tc.weight_decay = c.weight_decay;
    tc.seed = c.seed;
    TrainResult res = train(corpus, enc, tc, [](std::size_t epoch, double val) {
        spdlog::info("train: epoch {} validation loss {:.6f}", epoch, val);
    });
    save_checkpoint(p.model().string(), res.best);
    write_text(p.loss_history(), history_csv(res.history));
    std::string val = "epoch,validation_loss\n";
    for (std::size_t e = 0; e < res.validation_losses.size(); ++e) val += fmt::format("{},{:.9g}\n", e, res.validation_losses[e]);
    write_text(p.validation(), val);
    spdlog::info("train: best epoch {}", res.best_epoch);
}

void stage_embed(const PipelineConfig&, const Paths& p) {
    require(p.model(), Stage::Embed, Stage::Train);
    require(p.database_scenes(), Stage::Embed, Stage::GenData);
    require(p.query_scenes(), Stage::Embed, Stage::GenData);
    const Checkpoint model = load_checkpoint(p.model().string());
    const auto db_scenes = load_scenes(p.database_scenes().string());
    const auto q_scenes = load_scenes(p.query_scenes().string());
    const Tensor zd = embed_scenes(db_scenes, model);
    const Tensor zq = embed_scenes(q_scenes, model);
    save_database(p.database().string(), to_database(db_scenes, zd));
    save_database(p.query_embeddings().string(), to_database(q_scenes, zq));
    std::vector<std::uint32_t> labels;
    for (const auto& s : db_scenes) labels.push_back(s.label);
    const Separation sep = class_separation(zd, labels);
    write_text(p.separation(), fmt::format("within,between,gap\n{:.9g},{:.9g},{:.9g}\n", sep.within, sep.between, sep.gap()));
    spdlog::info("embed: within-class cosine {:.4f}, between {:.4f}", sep.within, sep.between);
}

void stage_build_index(const PipelineConfig& c, const Paths& p) {
    require(p.database(), Stage::BuildIndex, Stage::Embed);
    const Database db = load_database(p.database().string());
    IndexParams ip;
    ip.n_clusters = c.n_clusters;
    ip.hnsw.M = c.hnsw_m;
    ip.hnsw.ef_construction = c.ef_construction;
    ip.hnsw.seed = derive_seed(c.seed, {0x4e5});
    ip.seed = derive_seed(c.seed, {0x4b});
    const RetrievalIndex index = RetrievalIndex::build(db.matrix(), ip);
    std::vector<std::string> ids;
    for (const auto& r : db.records) ids.push_back(r.id);
    index.save(p.index().string(), ids);
    spdlog::info("build-index: {} entries in {} clusters", index.size(), index.cluster_count());
}

void stage_query(const PipelineConfig& c, const Paths& p) {
    require(p.index(), Stage::Query, Stage::BuildIndex);
    require(p.database(), Stage::Query, Stage::Embed);
    require(p.query_embeddings(), Stage::Query, Stage::Embed);
    const Database db = load_database(p.database().string());
    std::vector<std::string> ids;
    const RetrievalIndex index = RetrievalIndex::load(p.index().string(), &ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i >= db.size() || ids[i] != db.records[i].id) throw FormatError("index id map does not match database.json");
    }
    const Database queries = load_database(p.query_embeddings().string());
    nlohmann::ordered_json all = nlohmann::ordered_json::array();
    std::string csv = "query_id,rank,database_id,distance\n";
    for (const auto& q : queries.records) {
        const QueryResult r = retrieve(index, db, q.embedding, c.top_k, c.ef_search);
        nlohmann::ordered_json hits = nlohmann::ordered_json::array();
        for (std::size_t k = 0; k < r.size(); ++k) {
            hits.push_back({{"id", r[k].id}, {"distance", r[k].distance}});
            csv += fmt::format("{},{},{},{:.9g}\n", q.id, k + 1, r[k].id, r[k].distance);
        }
        all.push_back({{"query", q.id}, {"hits", hits}});
    }
    write_text(p.results_json(), all.dump(1) + "\n");
    write_text(p.results_csv(), csv);
    spdlog::info("query: {} queries, top-{}", queries.size(), c.top_k);
}

void stage_prompt(const PipelineConfig& c, const Paths& p) {
    require(p.results_json(), Stage::Prompt, Stage::Query);
    require(p.database(), Stage::Prompt, Stage::Embed);
    const Database db = load_database(p.database().string());
    std::vector<std::string> qids;
    const std::vector<QueryResult> results = load_results(p.results_json(), db, qids);
    const auto db_scenes = load_scenes(p.database_scenes().string());
    const auto q_scenes = load_scenes(p.query_scenes().string());
    std::map<std::string, const Scene*> by_id, q_by_id;
    for (const auto& s : db_scenes) by_id[s.id] = &s;
    for (const auto& s : q_scenes) q_by_id[s.id] = &s;
    fs::create_directories(p.prompts());
    nlohmann::ordered_json bundles = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto it = q_by_id.find(qids[i]);
        if (it == q_by_id.end()) throw FormatError("query " + qids[i] + " is not in queries.tpcs");
        const PromptBundle b = make_bundle(*it->second, results[i], by_id, c.ego_status);
        bundles.push_back(bundle_json(b));
        write_text(p.prompts() / (qids[i] + ".txt"), assemble_prompt(b));
    }
    write_text(p.bundles(), bundles.dump(1) + "\n");
    spdlog::info("prompt: {} bundles", results.size());
}

void stage_bench(const PipelineConfig& c, const Paths& p) {
    const Tensor data = random_unit_vectors(c.bench_entries, 128, derive_seed(c.seed, {0xbe, 1}));
    const Tensor queries = random_unit_vectors(c.bench_queries, 128, derive_seed(c.seed, {0xbe, 2}));
    BenchConfig bc;
    bc.n_clusters = c.bench_clusters;
    bc.ef_search = c.bench_ef;
    bc.repetitions = c.bench_repetitions;
    bc.seed = derive_seed(c.seed, {0xbe, 3});
    bc.hnsw.M = c.hnsw_m;
    bc.hnsw.ef_construction = c.ef_construction;
    const auto rows = bench(data, queries, bc);
    write_text(p.bench(), bench_csv(rows));

    // Deterministic companion: what each strategy returned (timings are not reproducible).
    IndexParams ip;
    ip.n_clusters = std::min(c.bench_clusters, c.bench_entries);
    ip.hnsw = bc.hnsw;
    ip.seed = bc.seed;
    const RetrievalIndex index = RetrievalIndex::build(data, ip);
    const Hnsw flat = Hnsw::build(data, bc.hnsw);
    std::string csv = "query,strategy,rank,index,distance\n";
    const std::size_t k = 5;
    for (std::size_t q = 0; q < queries.dim(0); ++q) {
        auto qv = queries.data().subspan(q * 128, 128);
        const std::pair<const char*, std::vector<Neighbor>> runs[] = {
            {strategy_name(Strategy::Simple), brute_force_knn(data, qv, k)},
            {strategy_name(Strategy::HnswOnly), flat.search(qv, k, std::max(c.bench_ef, k))},
            {strategy_name(Strategy::KMeansHnsw), index.query(qv, k, std::max(c.bench_ef, k), &data)},
        };
        for (const auto& [name, res] : runs) {
            for (std::size_t r = 0; r < res.size(); ++r) csv += fmt::format("{},{},{},{},{:.9g}\n", q, name, r + 1, res[r].index, res[r].distance);
        }
    }
    write_text(p.bench_neighbors(), csv);
    for (const auto& r : rows) spdlog::info("bench: {} {:.6f} ms", strategy_name(r.strategy), r.overall);
}

void stage_eval(const PipelineConfig& c, const Paths& p) {
    require(p.results_json(), Stage::Eval, Stage::Query);
    require(p.database(), Stage::Eval, Stage::Embed);
    const Database db = load_database(p.database().string());
    std::vector<std::string> qids;
    const std::vector<QueryResult> results = load_results(p.results_json(), db, qids);
    const auto q_scenes = load_scenes(p.query_scenes().string());
    std::map<std::string, const Scene*> q_by_id;
    for (const auto& s : q_scenes) q_by_id[s.id] = &s;
    std::vector<Scene> ordered;
    std::vector<TrajectoryPair> top1, random;
    std::vector<std::array<int, kFutureSteps>> c_top1, c_random;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const Scene& q = *q_by_id.at(qids[i]);
        ordered.push_back(q);
        const auto pick = derive_seed(c.seed, {0xba5e, i}) % db.size();
        const auto truth = q.future.points();
        const auto pred = results[i].front().trajectory.points();
        const auto rnd = db.records[pick].trajectory.points();
        top1.push_back({pred, truth});
        random.push_back({rnd, truth});
        c_top1.push_back(collision_series(pred, q.obstacle));
        c_random.push_back(collision_series(rnd, q.obstacle));
    }
    std::vector<EvalRow> rows, base;
    for (Protocol pr : protocols_of(c)) {
        rows.push_back(evaluate_dataset(top1, c_top1, pr));
        base.push_back(evaluate_dataset(random, c_random, pr));
    }
    write_text(p.eval(), eval_csv(rows));
    write_text(p.eval_baseline(), eval_csv(base));
    const BaselineComparison cmp = compare_to_random(ordered, results, db, c.seed);
    write_text(p.eval_summary(), fmt::format("queries,top1_l2,random_l2,z\n{},{:.9g},{:.9g},{:.9g}\n", cmp.queries, cmp.top1_l2,
                                             cmp.random_l2, cmp.z));
    spdlog::info("eval: top-1 L2 {:.3f} m vs random {:.3f} m (z = {:.2f})", cmp.top1_l2, cmp.random_l2, cmp.z);
}

} // namespace

BaselineComparison compare_to_random(const std::vector<Scene>& queries, const std::vector<QueryResult>& results,
                                     const Database& db, std::uint64_t seed) {
    if (queries.size() != results.size()) throw DimensionError("compare_to_random: query and result counts differ");
    if (db.size() == 0) throw ConfigError("compare_to_random: empty database");
    BaselineComparison out;
    out.queries = queries.size();
    if (queries.empty()) return out;
    std::vector<double> diff;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (results[i].empty()) throw ConfigError("compare_to_random: empty result for " + queries[i].id);
        const auto truth = queries[i].future.points();
        const auto pick = derive_seed(seed, {0xba5e, i}) % db.size();
        const double a = l2_at_horizons(per_step_l2({results[i].front().trajectory.points(), truth}), Protocol::NoAvg).avg;
        const double b = l2_at_horizons(per_step_l2({db.records[pick].trajectory.points(), truth}), Protocol::NoAvg).avg;
        out.top1_l2 += a;
        out.random_l2 += b;
        diff.push_back(b - a);
    }
    const double n = static_cast<double>(diff.size());
    out.top1_l2 /= n;
    out.random_l2 /= n;
    const double mean = out.random_l2 - out.top1_l2;
    double var = 0.0;
    for (double d : diff) var += (d - mean) * (d - mean);
    var = diff.size() > 1 ? var / (n - 1.0) : 0.0;
    const double se = std::sqrt(var / n);
    out.z = se > 0.0 ? mean / se : (mean > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    return out;
}

void run_stage(Stage stage, const PipelineConfig& config) {
    config.validate();
    Paths p{config.out};
    fs::create_directories(p.dir);
    switch (stage) {
    case Stage::GenData: stage_gen_data(config, p); break;
    case Stage::Train: stage_train(config, p); break;
    case Stage::Embed: stage_embed(config, p); break;
    case Stage::BuildIndex: stage_build_index(config, p); break;
    case Stage::Query: stage_query(config, p); break;
    case Stage::Prompt: stage_prompt(config, p); break;
    case Stage::Bench: stage_bench(config, p); break;
    case Stage::Eval: stage_eval(config, p); break;
    }
}

void run_pipeline(const PipelineConfig& config) {
    for (Stage s : all_stages()) run_stage(s, config);
}

} // namespace trajprior
