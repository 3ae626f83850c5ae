#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trajprior/encoder.hpp"
#include "trajprior/metrics.hpp"
#include "trajprior/retrieval.hpp"
#include "trajprior/trajectory.hpp"

namespace trajprior {

// --- Synthetic corpus -----------------------------------------------------

inline constexpr std::size_t kHistorySteps = 6;  // -3.0 .. -0.5 s

struct HistoryPoint {
    double t = 0.0, x = 0.0, y = 0.0, v = 0.0;  // s, m, m, km/h
    friend bool operator==(const HistoryPoint&, const HistoryPoint&) = default;
};

struct Velocity {
    double vx = 0.0, vy = 0.0;  // m/s, ego frame
};

/// Latent motion archetype. Class 0 is static; class c >= 1 has heading
/// {-45, -15, 15, 45} deg by (c-1) % 4 and speed 2 + ((c-1) / 4) * 8/3 m/s.
Velocity class_velocity(std::uint32_t label);

struct Scene {
    std::string id;
    std::uint32_t label = 0;
    Velocity velocity;
    Clip clip;
    std::array<HistoryPoint, kHistorySteps> history{};
    TrajectoryAnnotation future;
    Box obstacle;
    friend bool operator==(const Scene& a, const Scene& b) {
        return a.id == b.id && a.label == b.label && a.velocity.vx == b.velocity.vx && a.velocity.vy == b.velocity.vy &&
               a.clip == b.clip && a.history == b.history && a.future == b.future && a.obstacle.cx == b.obstacle.cx &&
               a.obstacle.cy == b.obstacle.cy;
    }
};

/// Renders one scene moving at `velocity` (no velocity noise applied here).
Scene make_scene(const std::string& id, std::uint32_t label, Velocity velocity, std::size_t height, std::size_t width,
                 std::uint64_t seed);

struct CorpusSpec {
    std::size_t count = 1000;
    std::size_t classes = 16;
    std::size_t height = 32;
    std::size_t width = 32;
    std::uint64_t seed = 0;
    std::size_t first_index = 0;  // ids run clip-<first_index>...
};

/// Labels cycle through the classes; moving classes get small seeded speed
/// and heading noise. Same spec -> bitwise-identical corpus.
std::vector<Scene> generate_corpus(const CorpusSpec& spec);

void save_scenes(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> load_scenes(const std::string& path);

/// Mean pairwise cosine similarity of unit rows within and between labels.
struct Separation {
    double within = 0.0, between = 0.0;
    double gap() const { return within - between; }
};
Separation class_separation(const Tensor& embeddings, const std::vector<std::uint32_t>& labels);

/// Unit-norm 128-d embeddings for scenes under a trained checkpoint.
Tensor embed_scenes(const std::vector<Scene>& scenes, const Checkpoint& model);

// --- Prompt assembly ------------------------------------------------------

struct EgoStatus {
    double v = 0.0;    // km/h
    double a = 0.0;    // m/s^2
    double yaw = 0.0;  // deg
    friend bool operator==(const EgoStatus&, const EgoStatus&) = default;
};

struct PromptScene {
    std::string id;
    std::array<std::string, kClipFrames> frames;  // frame identifiers, oldest first
    std::vector<HistoryPoint> history;
    std::optional<Point2> waypoint;
};

struct ReferenceScene : PromptScene {
    TrajectoryAnnotation future;
};

struct TargetScene : PromptScene {
    std::optional<EgoStatus> ego;
};

std::vector<std::string> default_constraints();

struct PromptBundle {
    std::vector<ReferenceScene> references;  // retrieval rank order
    TargetScene target;
    std::vector<std::string> constraints = default_constraints();
};

/// Frame identifiers "<id>/frame-0" .. "<id>/frame-6".
std::array<std::string, kClipFrames> frame_ids(const std::string& scene_id);

/// Deterministic prompt text; a pure function of the bundle.
std::string assemble_prompt(const PromptBundle& bundle);

// --- Pipeline -------------------------------------------------------------

struct PipelineConfig {
    std::string out = "run";
    std::uint64_t seed = 0;
    // data
    std::size_t db_clips = 1000;
    std::size_t query_clips = 100;
    std::size_t classes = 16;
    std::size_t height = 32;
    std::size_t width = 32;
    // training
    std::size_t train_clips = 320;  // leading database clips used for training; 0 = all
    std::size_t epochs = 50;
    std::size_t batch = 8;
    double temperature = 0.07;
    std::size_t hard_negatives = 10;
    std::size_t queue_capacity = 1024;
    double lr_encoder = 1e-5;
    double lr_head = 1e-4;
    double weight_decay = 1e-4;
    // retrieval
    std::size_t top_k = 2;
    std::size_t n_clusters = 16;
    std::size_t ef_search = 50;
    std::size_t hnsw_m = 16;
    std::size_t ef_construction = 200;
    // prompts / eval
    bool ego_status = true;
    std::string protocol = "both";  // noavg | temavg | both
    // latency bench (full-synthetic scale)
    std::size_t bench_entries = 9062;
    std::size_t bench_queries = 200;
    std::size_t bench_repetitions = 200;
    std::size_t bench_clusters = 5;
    std::size_t bench_ef = 10;

    void set(const std::string& key, const std::string& value);
    void validate() const;
    std::string to_text() const;
};

/// Flat key=value file; '#' starts a comment; unknown keys -> ConfigError.
PipelineConfig load_config(const std::string& path);

enum class Stage { GenData, Train, Embed, BuildIndex, Query, Prompt, Bench, Eval };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

void run_stage(Stage stage, const PipelineConfig& config);
/// gen-data -> train -> embed -> build-index -> query -> prompt -> bench -> eval.
void run_pipeline(const PipelineConfig& config);

/// Paired comparison of per-query L2 (NoAvg Avg) for Top-1 retrieval vs a
/// seeded uniformly random database trajectory.
struct BaselineComparison {
    double top1_l2 = 0.0;
    double random_l2 = 0.0;
    double z = 0.0;  // mean(random - top1) / standard error
    std::size_t queries = 0;
};
BaselineComparison compare_to_random(const std::vector<Scene>& queries, const std::vector<QueryResult>& results,
                                     const Database& db, std::uint64_t seed);

} // namespace trajprior
