#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "trajprior/encoder.hpp"

namespace trajprior {

struct AugmentationPolicy {
    // Defaults are milder than the usual image recipe. The clips encode
    // motion: a mirror reverses it and a tight crop rescales it, which pushes
    // the contrastive objective toward collapse with this small encoder.
    double crop_scale_min = 0.8;  // area fraction of the random square crop
    double crop_scale_max = 1.0;
    double flip_prob = 0.0;
    double brightness = 0.1;  // factor drawn from [1 - b, 1 + b]
    double contrast = 0.1;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 1.0;
    static AugmentationPolicy identity() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.1, 1.0}; }
    void validate() const;
};

/// One stochastic view of a clip. The same crop, flip, jitter and blur are
/// applied to all 7 frames. Same seed -> identical output.
Clip augment(const Clip& clip, const AugmentationPolicy& policy, std::uint64_t seed);
Tensor flip_horizontal(const Tensor& frame);

struct TrainerConfig {
    std::size_t batch = 8;         // B
    std::size_t epochs = 50;       // E
    double temperature = 0.07;     // tau
    std::size_t hard_negatives = 10;  // K
    std::size_t queue_capacity = 1024;  // M
    double lr_encoder = 1e-5;
    double lr_head = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
    ProjectionConfig head;
    AugmentationPolicy augmentation;

    void validate() const;
};

/// FIFO of unit m-vectors with fixed capacity; oldest evicted first.
class MemoryQueue {
  public:
    MemoryQueue(std::size_t capacity, std::size_t dim);

    /// Appends every row of `rows` (n x dim) in order, evicting the oldest
    /// entries beyond capacity. `sources` optionally tags each row with the
    /// clip it came from (-1 = unknown).
    void enqueue(const Tensor& rows, std::span<const std::int64_t> sources = {});
    std::size_t size() const noexcept { return count_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t dim() const noexcept { return dim_; }
    /// size x dim, oldest first (empty tensor when the queue is empty).
    Tensor snapshot() const;
    /// Like snapshot() but without rows tagged with any of `sources`.
    Tensor snapshot_excluding(std::span<const std::int64_t> sources) const;
    /// Row `i` counted from the oldest entry.
    std::vector<float> entry(std::size_t i) const;
    std::int64_t source(std::size_t i) const;

  private:
    std::size_t capacity_, dim_;
    std::size_t head_ = 0;  // slot of the oldest entry
    std::size_t count_ = 0;
    std::vector<float> ring_;
    std::vector<std::int64_t> sources_;
};

/// Indices of the K candidates (rows) with the largest inner product with
/// the anchor, most similar first; ties go to the lower index. Returns all
/// candidates when K exceeds their count. K <= 0 -> ConfigError.
std::vector<std::size_t> mine_hard_negatives(std::span<const float> anchor, const Tensor& candidates, long k);

/// -log(exp(s+) / (exp(s+) + sum exp(s-))) with temperature, evaluated in
/// double with max subtraction. Inputs must be unit norm within 1e-4.
double info_nce(std::span<const float> anchor, std::span<const float> positive, const Tensor& negatives,
                double temperature);

/// Encoder (2B clips: view 1 rows then view 2 rows) + head + InfoNCE with
/// in-graph hard-negative mining. Returns the scalar loss node.
template <typename Real>
NodeId build_contrastive_graph(Tape<Real>& tape, const EncoderConfig& config, const ParamMap& encoder,
                               const ParamMap& head, std::size_t batch, const Tensor& queue,
                               std::size_t hard_negatives, double temperature, BatchNormMode mode,
                               NodeId* projections = nullptr);

struct LossRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
    std::size_t queue_size = 0;
    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

std::string history_csv(const std::vector<LossRecord>& history);

class AdamW {
  public:
    AdamW(double beta1, double beta2, double epsilon, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(epsilon), wd_(weight_decay) {}
    using LearningRate = std::function<double(const std::string&)>;
    struct Group {
        ParamMap* params;
        const std::map<std::string, Tensor>* grads;
        LearningRate lr;
    };
    /// One decoupled-weight-decay Adam update of every parameter that has a
    /// gradient. All groups share the step count used for bias correction.
    void step(const std::vector<Group>& groups);
    void step(ParamMap& params, const std::map<std::string, Tensor>& grads, const LearningRate& lr) {
        step({Group{&params, &grads, lr}});
    }
    std::size_t steps() const noexcept { return t_; }

  private:
    void update(ParamMap& params, const std::map<std::string, Tensor>& grads, const LearningRate& lr);

    double beta1_, beta2_, eps_, wd_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

class ContrastiveTrainer {
  public:
    ContrastiveTrainer(EncoderConfig encoder_config, TrainerConfig config, ParamMap encoder, ParamMap head);

    /// Loss on (view1[i], view2[i]) pairs. Train mode uses batch statistics.
    double evaluate_loss(const std::vector<const Clip*>& view1, const std::vector<const Clip*>& view2,
                         const Tensor& queue, BatchNormMode mode) const;
    /// One AdamW update on a batch against the current queue, then enqueues
    /// the view-2 projections. Returns the pre-update loss. When `sources`
    /// names the clip behind each pair, older queue entries of those clips
    /// are left out of the negative pool.
    double step(const std::vector<const Clip*>& view1, const std::vector<const Clip*>& view2,
                const std::string& batch_ids = {}, const std::vector<std::int64_t>& sources = {});

    const ParamMap& encoder_params() const { return encoder_; }
    const ParamMap& head_params() const { return head_; }
    ParamMap& encoder_params() { return encoder_; }
    ParamMap& head_params() { return head_; }
    MemoryQueue& queue() { return queue_; }
    const EncoderConfig& encoder_config() const { return encoder_config_; }
    std::size_t steps() const { return optimizer_.steps(); }

  private:
    EncoderConfig encoder_config_;
    TrainerConfig config_;
    ParamMap encoder_, head_;
    MemoryQueue queue_;
    AdamW optimizer_;
};

struct TrainResult {
    Checkpoint best;               // minimum validation loss
    std::vector<LossRecord> history;
    std::vector<double> validation_losses;  // per epoch
    std::size_t best_epoch = 0;
    std::vector<std::size_t> train_indices, validation_indices;
};

TrainResult train(const std::vector<Clip>& corpus, const EncoderConfig& encoder_config, const TrainerConfig& config,
                  const std::function<void(std::size_t epoch, double val_loss)>& on_epoch = {});

} // namespace trajprior
