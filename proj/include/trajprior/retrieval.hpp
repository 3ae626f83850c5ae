#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trajprior/tensor.hpp"
#include "trajprior/trajectory.hpp"

namespace trajprior {

/// 1 - x.y / (|x| |y|), in [0, 2]. Zero vector -> ConfigError.
double cosine_distance(std::span<const float> x, std::span<const float> y);

/// 1 - x.y for vectors already on the unit sphere (8-way unrolled dot).
float unit_distance(const float* x, const float* y, std::size_t dim) noexcept;

struct Neighbor {
    std::uint32_t index = 0;  // row in whatever set was searched
    float distance = 0.0f;
    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Exact top-k by full scan; ties by ascending index.
std::vector<Neighbor> brute_force_knn(const Tensor& database, std::span<const float> query, std::size_t k);

struct KMeansResult {
    Tensor centroids;                  // n_c x dim
    std::vector<std::uint32_t> labels;  // per row
    std::vector<double> objective;     // after each assignment step
    std::size_t iterations = 0;
    std::size_t reseeded = 0;
};

/// k-means++ seeding then Lloyd iterations until the assignment is a
/// fixpoint or max_iterations. Empty clusters take the point farthest from
/// its centroid.
KMeansResult kmeans(const Tensor& data, std::size_t n_clusters, std::uint64_t seed, std::size_t max_iterations = 100);

/// Nearest centroid (squared Euclidean), ties to the lowest index.
std::uint32_t nearest_centroid(const Tensor& centroids, std::span<const float> x);

struct HnswParams {
    std::size_t M = 16;
    std::size_t ef_construction = 200;
    std::uint64_t seed = 100;
    friend bool operator==(const HnswParams&, const HnswParams&) = default;
};

/// Layered navigable small-world graph under 1 - dot on unit vectors.
class Hnsw {
  public:
    Hnsw() = default;
    Hnsw(std::size_t dim, HnswParams params);

    /// Inserts vectors with internal ids 0..n-1 in row order.
    static Hnsw build(const Tensor& vectors, HnswParams params);

    /// Inserts one vector under internal id `id`; ids must be new and dense
    /// (== size()). Duplicate or out-of-order ids -> ConfigError.
    void insert(std::uint32_t id, std::span<const float> vector);

    /// Approximate k nearest, ascending (distance, id). Empty graph -> {}.
    std::vector<Neighbor> search(std::span<const float> query, std::size_t k, std::size_t ef) const;

    std::size_t size() const noexcept { return levels_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const HnswParams& params() const noexcept { return params_; }
    int max_level() const noexcept { return max_level_; }
    std::uint32_t entry_point() const noexcept { return entry_; }
    int level(std::uint32_t node) const { return levels_.at(node); }
    const std::vector<std::uint32_t>& neighbors(std::uint32_t node, int level) const;
    std::size_t max_degree(int level) const noexcept { return level == 0 ? 2 * params_.M : params_.M; }
    const float* vector(std::uint32_t node) const noexcept { return data_.data() + static_cast<std::size_t>(node) * dim_; }

    friend bool operator==(const Hnsw& a, const Hnsw& b) {
        return a.dim_ == b.dim_ && a.levels_ == b.levels_ && a.links_ == b.links_ && a.entry_ == b.entry_ &&
               a.max_level_ == b.max_level_ && a.data_ == b.data_;
    }

    // Serialization helpers used by the index snapshot.
    void restore(std::size_t dim, HnswParams params, std::vector<float> data, std::vector<int> levels,
                 std::vector<std::vector<std::vector<std::uint32_t>>> links, std::uint32_t entry, int max_level);
    const std::vector<std::vector<std::vector<std::uint32_t>>>& links() const noexcept { return links_; }
    const std::vector<int>& levels() const noexcept { return levels_; }
    const std::vector<float>& data() const noexcept { return data_; }

  private:
    using Cand = std::pair<float, std::uint32_t>;
    std::vector<Cand> search_layer(const float* q, std::uint32_t entry, std::size_t ef, int level) const;
    std::vector<std::uint32_t> select_neighbors(const float* base, std::vector<Cand> candidates, std::size_t m,
                                                bool keep_pruned) const;
    float dist(const float* a, std::uint32_t b) const noexcept;
    int draw_level();

    std::size_t dim_ = 0;
    HnswParams params_;
    double level_mult_ = 0.0;
    std::uint64_t rng_state_ = 0;
    std::vector<float> data_;
    std::vector<int> levels_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // [node][level] -> ids
    std::uint32_t entry_ = 0;
    int max_level_ = -1;
};

// --- Database -------------------------------------------------------------

struct DatabaseRecord {
    std::string id;
    std::vector<float> embedding;  // 128 unit-norm values
    TrajectoryAnnotation trajectory;
    friend bool operator==(const DatabaseRecord&, const DatabaseRecord&) = default;
};

struct Database {
    std::vector<DatabaseRecord> records;

    std::size_t size() const noexcept { return records.size(); }
    std::size_t dim() const noexcept { return records.empty() ? 0 : records[0].embedding.size(); }
    /// Embedding matrix, one row per record (rows in record order).
    Tensor matrix() const;
    /// Throws unless ids are unique, widths agree, vectors are unit norm and
    /// trajectories are valid.
    void validate() const;
    friend bool operator==(const Database&, const Database&) = default;
};

void save_database(const std::string& path, const Database& db);
Database load_database(const std::string& path);

// --- Index ----------------------------------------------------------------

struct IndexParams {
    std::size_t n_clusters = 16;
    HnswParams hnsw;
    std::uint64_t seed = 0;
    friend bool operator==(const IndexParams&, const IndexParams&) = default;
};

class RetrievalIndex {
  public:
    static RetrievalIndex build(const Tensor& embeddings, IndexParams params);

    /// Nearest-centroid cluster for a query.
    std::uint32_t predict(std::span<const float> query) const;
    /// Probes the n_probe nearest clusters (1 = faithful default), maps graph
    /// ids back to database rows. Falls back to `fallback` (brute force over
    /// all rows) when every probed cluster is empty.
    std::vector<Neighbor> query(std::span<const float> query, std::size_t k, std::size_t ef_search,
                                const Tensor* fallback = nullptr, std::size_t n_probe = 1) const;

    std::size_t cluster_count() const noexcept { return graphs_.size(); }
    const Tensor& centroids() const noexcept { return centroids_; }
    const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }
    const Hnsw& graph(std::size_t c) const { return graphs_.at(c); }
    const std::vector<std::uint32_t>& members(std::size_t c) const { return members_.at(c); }
    const IndexParams& params() const noexcept { return params_; }
    std::size_t size() const noexcept { return labels_.size(); }

    friend bool operator==(const RetrievalIndex&, const RetrievalIndex&) = default;

    void save(const std::string& path, const std::vector<std::string>& ids) const;
    /// Loads a snapshot; `ids` receives the stored id map (row -> database id).
    static RetrievalIndex load(const std::string& path, std::vector<std::string>* ids = nullptr);

  private:
    IndexParams params_;
    Tensor centroids_;
    std::vector<std::uint32_t> labels_;
    std::vector<std::vector<std::uint32_t>> members_;  // cluster -> database rows (graph-local order)
    std::vector<Hnsw> graphs_;
};

struct QueryHit {
    std::string id;
    double distance = 0.0;
    TrajectoryAnnotation trajectory;
    friend bool operator==(const QueryHit&, const QueryHit&) = default;
};

using QueryResult = std::vector<QueryHit>;

/// Cluster-probe retrieval plus trajectory lookup. Query must be unit norm.
QueryResult retrieve(const RetrievalIndex& index, const Database& db, std::span<const float> query, std::size_t k,
                     std::size_t ef_search = 50);

// --- Latency bench --------------------------------------------------------

enum class Strategy { Simple, KMeansOnly, HnswOnly, KMeansHnsw };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct BenchConfig {
    std::size_t n_clusters = 5;
    std::size_t ef_search = 10;
    HnswParams hnsw;
    std::size_t repetitions = 200;  // timed queries per (strategy, k)
    std::size_t warmup = 20;
    std::uint64_t seed = 0;
    std::vector<Strategy> strategies{Strategy::Simple, Strategy::KMeansOnly, Strategy::HnswOnly, Strategy::KMeansHnsw};
};

struct BenchRow {
    Strategy strategy;
    std::array<double, 5> ms{};  // mean ms per query for Top-1..5
    double overall = 0.0;
};

std::vector<BenchRow> bench(const Tensor& database, const Tensor& queries, const BenchConfig& config);
std::string bench_csv(const std::vector<BenchRow>& rows);

/// n random unit vectors (Gaussian then normalized).
Tensor random_unit_vectors(std::size_t n, std::size_t dim, std::uint64_t seed);
/// n unit vectors around `clusters` random centres with angular noise `spread`.
Tensor clustered_unit_vectors(std::size_t n, std::size_t dim, std::size_t clusters, double spread, std::uint64_t seed,
                              std::vector<std::uint32_t>* labels = nullptr);

} // namespace trajprior
