#include "trajprior/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "trajprior/seed.hpp"

namespace trajprior {

namespace {

double norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

void require_unit(std::span<const float> v, const char* what) {
    const double n = norm(v);
    if (std::abs(n - 1.0) > 1e-4) throw ConfigError(fmt::format("{}: vector norm {} is not 1", what, n));
}

double dotd(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

// Bilinear resample of a square crop back to full size (align corners false).
Tensor crop_resize(const Tensor& frame, double top, double left, double side_h, double side_w) {
    const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    Tensor out(frame.shape());
    for (std::size_t r = 0; r < H; ++r) {
        double sy = top + (r + 0.5) * side_h / H - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - y0;
        for (std::size_t c = 0; c < W; ++c) {
            double sx = left + (c + 0.5) * side_w / W - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
            const auto x0 = static_cast<std::size_t>(sx);
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const double fx = sx - x0;
            for (std::size_t ch = 0; ch < C; ++ch) {
                const float* p = frame.data().data() + ch * H * W;
                const double top_v = p[y0 * W + x0] + fx * (p[y0 * W + x1] - p[y0 * W + x0]);
                const double bot_v = p[y1 * W + x0] + fx * (p[y1 * W + x1] - p[y1 * W + x0]);
                out[(ch * H + r) * W + c] = static_cast<float>(top_v + fy * (bot_v - top_v));
            }
        }
    }
    return out;
}

Tensor blur3(const Tensor& frame, double sigma) {
    const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    const double w = std::exp(-1.0 / (2.0 * sigma * sigma));
    const float k0 = static_cast<float>(1.0 / (1.0 + 2.0 * w)), k1 = static_cast<float>(w / (1.0 + 2.0 * w));
    Tensor tmp(frame.shape()), out(frame.shape());
    for (std::size_t ch = 0; ch < C; ++ch) {
        const float* p = frame.data().data() + ch * H * W;
        float* t = tmp.data().data() + ch * H * W;
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) {
                const float l = p[r * W + (c ? c - 1 : 0)], rr = p[r * W + std::min(c + 1, W - 1)];
                t[r * W + c] = k0 * p[r * W + c] + k1 * (l + rr);
            }
        }
        float* o = out.data().data() + ch * H * W;
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) {
                const float u = t[(r ? r - 1 : 0) * W + c], d = t[std::min(r + 1, H - 1) * W + c];
                o[r * W + c] = k0 * t[r * W + c] + k1 * (u + d);
            }
        }
    }
    return out;
}

std::vector<const Clip*> pointers(const std::vector<Clip>& clips) {
    std::vector<const Clip*> out;
    for (const auto& c : clips) out.push_back(&c);
    return out;
}

} // namespace

void AugmentationPolicy::validate() const {
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
        throw ConfigError(fmt::format("crop scale range [{}, {}] must lie in (0, 1]", crop_scale_min, crop_scale_max));
    }
    if (!(flip_prob >= 0 && flip_prob <= 1) || !(blur_prob >= 0 && blur_prob <= 1)) {
        throw ConfigError("augmentation probabilities must lie in [0, 1]");
    }
    if (!(brightness >= 0 && brightness < 1) || !(contrast >= 0 && contrast < 1)) {
        throw ConfigError("jitter strengths must lie in [0, 1)");
    }
    if (!(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max)) throw ConfigError("bad blur sigma range");
}

Tensor flip_horizontal(const Tensor& frame) {
    if (frame.rank() != 3) throw DimensionError("flip_horizontal: expected C x H x W");
    const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    Tensor out(frame.shape());
    for (std::size_t ch = 0; ch < C; ++ch) {
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) out[(ch * H + r) * W + c] = frame[(ch * H + r) * W + (W - 1 - c)];
        }
    }
    return out;
}

Clip augment(const Clip& clip, const AugmentationPolicy& policy, std::uint64_t seed) {
    policy.validate();
    clip.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    // Every draw happens unconditionally so the stream layout is fixed.
    const double scale = policy.crop_scale_min + (policy.crop_scale_max - policy.crop_scale_min) * unit(rng);
    const double off_y = unit(rng), off_x = unit(rng);
    const bool flip = unit(rng) < policy.flip_prob;
    const double bright = 1.0 + policy.brightness * (2.0 * unit(rng) - 1.0);
    const double contrast = 1.0 + policy.contrast * (2.0 * unit(rng) - 1.0);
    const bool blur = unit(rng) < policy.blur_prob;
    const double sigma = policy.blur_sigma_min + (policy.blur_sigma_max - policy.blur_sigma_min) * unit(rng);

    const std::size_t H = clip.height(), W = clip.width();
    const double side_h = std::sqrt(scale) * H, side_w = std::sqrt(scale) * W;
    const double top = off_y * (H - side_h), left = off_x * (W - side_w);
    Clip out;
    for (const Tensor& src : clip.frames) {
        Tensor f = scale < 1.0 ? crop_resize(src, top, left, side_h, side_w) : src;
        if (flip) f = flip_horizontal(f);
        if (bright != 1.0 || contrast != 1.0) {
            double mean = 0.0;
            for (float v : f.data()) mean += v;
            mean = mean * bright / static_cast<double>(f.size());
            for (float& v : f.data()) v = static_cast<float>(std::clamp((v * bright - mean) * contrast + mean, 0.0, 1.0));
        }
        if (blur) f = blur3(f, sigma);
        out.frames.push_back(std::move(f));
    }
    return out;
}

void TrainerConfig::validate() const {
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (hard_negatives < 1) throw ConfigError("hard-negative count K must be at least 1");
    if (batch < 2) throw ConfigError("batch size must be at least 2");
    if (queue_capacity < 1) throw ConfigError("queue capacity must be positive");
    if (!(lr_encoder >= 0) || !(lr_head >= 0) || !(weight_decay >= 0)) throw ConfigError("rates must be non-negative");
    if (!(validation_fraction >= 0 && validation_fraction < 1)) throw ConfigError("validation fraction must be in [0, 1)");
    augmentation.validate();
}

// ---------------------------------------------------------------------------

MemoryQueue::MemoryQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), ring_(capacity * dim, 0.0f), sources_(capacity, -1) {
    if (capacity == 0 || dim == 0) throw ConfigError("queue capacity and width must be positive");
}

void MemoryQueue::enqueue(const Tensor& rows, std::span<const std::int64_t> sources) {
    if (rows.empty()) return;
    if (rows.rank() != 2 || rows.dim(1) != dim_) {
        throw DimensionError("queue: expected n x " + std::to_string(dim_) + " rows, got " + shape_string(rows.shape()));
    }
    if (!sources.empty() && sources.size() != rows.dim(0)) {
        throw DimensionError(fmt::format("queue: {} source tags for {} rows", sources.size(), rows.dim(0)));
    }
    for (std::size_t r = 0; r < rows.dim(0); ++r) {
        std::span<const float> row(rows.data().data() + r * dim_, dim_);
        require_unit(row, "queue");
        const std::size_t slot = (head_ + count_) % capacity_;
        std::copy(row.begin(), row.end(), ring_.begin() + static_cast<std::ptrdiff_t>(slot * dim_));
        sources_[slot] = sources.empty() ? -1 : sources[r];
        if (count_ < capacity_) {
            ++count_;
        } else {
            head_ = (head_ + 1) % capacity_;
        }
    }
}

Tensor MemoryQueue::snapshot() const {
    if (count_ == 0) return Tensor({0, dim_});
    Tensor out({count_, dim_});
    for (std::size_t i = 0; i < count_; ++i) {
        const std::size_t slot = (head_ + i) % capacity_;
        std::copy_n(ring_.begin() + static_cast<std::ptrdiff_t>(slot * dim_), dim_, out.data().begin() + i * dim_);
    }
    return out;
}

Tensor MemoryQueue::snapshot_excluding(std::span<const std::int64_t> sources) const {
    if (sources.empty()) return snapshot();
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < count_; ++i) {
        const std::int64_t s = sources_[(head_ + i) % capacity_];
        if (s < 0 || std::find(sources.begin(), sources.end(), s) == sources.end()) keep.push_back(i);
    }
    Tensor out({keep.size(), dim_});
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const std::size_t slot = (head_ + keep[r]) % capacity_;
        std::copy_n(ring_.begin() + static_cast<std::ptrdiff_t>(slot * dim_), dim_, out.data().begin() + r * dim_);
    }
    return out;
}

std::int64_t MemoryQueue::source(std::size_t i) const {
    if (i >= count_) throw DimensionError("queue index out of range");
    return sources_[(head_ + i) % capacity_];
}

std::vector<float> MemoryQueue::entry(std::size_t i) const {
    if (i >= count_) throw DimensionError("queue index out of range");
    const std::size_t slot = (head_ + i) % capacity_;
    return {ring_.begin() + static_cast<std::ptrdiff_t>(slot * dim_),
            ring_.begin() + static_cast<std::ptrdiff_t>((slot + 1) * dim_)};
}

std::vector<std::size_t> mine_hard_negatives(std::span<const float> anchor, const Tensor& candidates, long k) {
    if (k <= 0) throw ConfigError("hard-negative count K must be positive");
    if (candidates.empty()) return {};
    if (candidates.rank() != 2 || candidates.dim(1) != anchor.size()) {
        throw DimensionError("mine_hard_negatives: candidates " + shape_string(candidates.shape()) +
                             " do not match anchor width " + std::to_string(anchor.size()));
    }
    const std::size_t n = candidates.dim(0), m = anchor.size();
    std::vector<float> sims(n);
    for (std::size_t i = 0; i < n; ++i) {
        // float accumulation in the same order as the training graph
        float s = 0;
        const float* row = candidates.data().data() + i * m;
        float acc[4] = {0, 0, 0, 0};
        std::size_t d = 0;
        for (; d + 4 <= m; d += 4) {
            acc[0] += anchor[d] * row[d];
            acc[1] += anchor[d + 1] * row[d + 1];
            acc[2] += anchor[d + 2] * row[d + 2];
            acc[3] += anchor[d + 3] * row[d + 3];
        }
        for (; d < m; ++d) acc[0] += anchor[d] * row[d];
        s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        sims[i] = s;
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), [&](std::size_t a, std::size_t b) {
        return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
    });
    idx.resize(kk);
    return idx;
}

double info_nce(std::span<const float> anchor, std::span<const float> positive, const Tensor& negatives,
                double temperature) {
    if (!(temperature > 0)) throw ConfigError("info_nce: temperature must be positive");
    if (anchor.size() != positive.size()) throw DimensionError("info_nce: anchor and positive widths differ");
    require_unit(anchor, "info_nce anchor");
    require_unit(positive, "info_nce positive");
    const double pos = dotd(anchor, positive) / temperature;
    std::vector<double> logits{pos};
    if (!negatives.empty()) {
        if (negatives.rank() != 2 || negatives.dim(1) != anchor.size()) {
            throw DimensionError("info_nce: negatives shape " + shape_string(negatives.shape()));
        }
        for (std::size_t i = 0; i < negatives.dim(0); ++i) {
            std::span<const float> neg(negatives.data().data() + i * anchor.size(), anchor.size());
            require_unit(neg, "info_nce negative");
            logits.push_back(dotd(anchor, neg) / temperature);
        }
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    return std::max(0.0, mx + std::log(denom) - pos);
}

template <typename Real>
NodeId build_contrastive_graph(Tape<Real>& tape, const EncoderConfig& config, const ParamMap& encoder,
                               const ParamMap& head, std::size_t batch, const Tensor& queue,
                               std::size_t hard_negatives, double temperature, BatchNormMode mode,
                               NodeId* projections) {
    auto nodes = build_encoder(tape, config, encoder, 2 * batch, mode);
    NodeId z = build_head(tape, nodes.output, head, mode, config);
    if (projections) *projections = z;
    NodeId loss = tape.info_nce(z, batch, queue.template cast<Real>(), hard_negatives, static_cast<Real>(temperature));
    tape.set_label(loss, "info_nce.loss");
    return loss;
}

template NodeId build_contrastive_graph(Tape<float>&, const EncoderConfig&, const ParamMap&, const ParamMap&,
                                        std::size_t, const Tensor&, std::size_t, double, BatchNormMode, NodeId*);
template NodeId build_contrastive_graph(Tape<double>&, const EncoderConfig&, const ParamMap&, const ParamMap&,
                                        std::size_t, const Tensor&, std::size_t, double, BatchNormMode, NodeId*);

std::string history_csv(const std::vector<LossRecord>& history) {
    std::string out = "epoch,step,loss,queue_size\n";
    for (const auto& r : history) out += fmt::format("{},{},{:.9g},{}\n", r.epoch, r.step, r.loss, r.queue_size);
    return out;
}

void AdamW::step(const std::vector<Group>& groups) {
    ++t_;
    for (const Group& g : groups) update(*g.params, *g.grads, g.lr);
}

void AdamW::update(ParamMap& params, const std::map<std::string, Tensor>& grads, const LearningRate& lr) {
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) continue;
        Tensor& p = it->second;
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() != p.size()) {
            m.assign(p.size(), 0.0);
            v.assign(p.size(), 0.0);
        }
        const double rate = lr(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            double value = p[i];
            value -= rate * wd_ * value;
            value -= rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            p[i] = static_cast<float>(value);
        }
    }
}

// ---------------------------------------------------------------------------

ContrastiveTrainer::ContrastiveTrainer(EncoderConfig encoder_config, TrainerConfig config, ParamMap encoder,
                                       ParamMap head)
    : encoder_config_(encoder_config),
      config_(config),
      encoder_(std::move(encoder)),
      head_(std::move(head)),
      queue_(config.queue_capacity, config.head.out),
      optimizer_(config.beta1, config.beta2, config.adam_epsilon, config.weight_decay) {
    config_.validate();
    encoder_config_.validate();
}

double ContrastiveTrainer::evaluate_loss(const std::vector<const Clip*>& view1, const std::vector<const Clip*>& view2,
                                         const Tensor& queue, BatchNormMode mode) const {
    if (view1.size() != view2.size() || view1.empty()) throw ConfigError("evaluate_loss: views must pair up");
    std::vector<const Clip*> all(view1);
    all.insert(all.end(), view2.begin(), view2.end());
    EncoderInputs in = prepare_inputs(all, encoder_config_);
    Tape<float> tape;
    tape.set_track_running_stats(false);
    NodeId loss = build_contrastive_graph(tape, encoder_config_, encoder_, head_, view1.size(), queue,
                                          config_.hard_negatives, config_.temperature, mode);
    tape.evaluate({{"rgb", std::move(in.rgb)}, {"gray", std::move(in.gray)}, {"stats", std::move(in.stats)}});
    return tape.value(loss)[0];
}

double ContrastiveTrainer::step(const std::vector<const Clip*>& view1, const std::vector<const Clip*>& view2,
                                const std::string& batch_ids, const std::vector<std::int64_t>& sources) {
    if (view1.size() != view2.size() || view1.empty()) throw ConfigError("step: views must pair up");
    const std::size_t B = view1.size();
    if (!sources.empty() && sources.size() != B) throw ConfigError("step: one source id per pair");
    std::vector<const Clip*> all(view1);
    all.insert(all.end(), view2.begin(), view2.end());
    EncoderInputs in = prepare_inputs(all, encoder_config_);
    Tape<float> tape;
    NodeId z;
    NodeId loss = build_contrastive_graph(tape, encoder_config_, encoder_, head_, B, queue_.snapshot_excluding(sources),
                                          config_.hard_negatives, config_.temperature, BatchNormMode::Train, &z);
    tape.evaluate({{"rgb", std::move(in.rgb)}, {"gray", std::move(in.gray)}, {"stats", std::move(in.stats)}});
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value)) {
        throw NumericalError(fmt::format("non-finite loss {} at step {} (batch {})", value, optimizer_.steps(),
                                         batch_ids.empty() ? "?" : batch_ids));
    }
    auto grads = tape.backpropagate(loss);
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) {
            throw NumericalError(fmt::format("non-finite gradient for '{}' at step {} (batch {})", name,
                                             optimizer_.steps(), batch_ids.empty() ? "?" : batch_ids));
        }
    }
    // Running statistics were updated in place on the tape.
    read_back(tape, encoder_);
    read_back(tape, head_);
    std::map<std::string, Tensor> enc_grads, head_grads;
    for (auto& [name, g] : grads) (name.rfind("head.", 0) == 0 ? head_grads : enc_grads)[name] = std::move(g);
    const double lr_e = config_.lr_encoder, lr_h = config_.lr_head;
    optimizer_.step({{&encoder_, &enc_grads, [lr_e](const std::string&) { return lr_e; }},
                     {&head_, &head_grads, [lr_h](const std::string&) { return lr_h; }}});

    const Tensor& zv = tape.value(z);
    const std::size_t m = zv.dim(1);
    queue_.enqueue(Tensor({B, m}, std::vector<float>(zv.data().begin() + B * m, zv.data().end())), sources);
    return value;
}

// ---------------------------------------------------------------------------

TrainResult train(const std::vector<Clip>& corpus, const EncoderConfig& encoder_config, const TrainerConfig& config,
                  const std::function<void(std::size_t, double)>& on_epoch) {
    config.validate();
    encoder_config.validate();
    if (corpus.size() < config.batch) {
        throw ConfigError(fmt::format("corpus of {} clips is smaller than the batch size {}", corpus.size(), config.batch));
    }
    TrainResult result;
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 split_rng(derive_seed(config.seed, {0x5711}));
    std::shuffle(order.begin(), order.end(), split_rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * corpus.size()));
    if (corpus.size() - n_val < config.batch) n_val = corpus.size() - config.batch;
    result.validation_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    result.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(result.validation_indices.begin(), result.validation_indices.end());
    std::sort(result.train_indices.begin(), result.train_indices.end());

    ContrastiveTrainer trainer(encoder_config, config, init_encoder_params(encoder_config, derive_seed(config.seed, {1})),
                               init_head_params(encoder_config.fused_channels, config.head, derive_seed(config.seed, {2})));

    // Validation views are fixed for the whole run.
    std::vector<Clip> val1, val2;
    for (std::size_t idx : result.validation_indices) {
        val1.push_back(augment(corpus[idx], config.augmentation, derive_seed(config.seed, {0xa1, idx})));
        val2.push_back(augment(corpus[idx], config.augmentation, derive_seed(config.seed, {0xa2, idx})));
    }
    const auto vp1 = pointers(val1), vp2 = pointers(val2);

    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> train_order = result.train_indices;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 epoch_rng(derive_seed(config.seed, {0xe0, epoch}));
        std::shuffle(train_order.begin(), train_order.end(), epoch_rng);
        for (std::size_t start = 0; start + config.batch <= train_order.size(); start += config.batch) {
            std::vector<Clip> v1, v2;
            std::string ids;
            std::vector<std::int64_t> sources;
            for (std::size_t j = 0; j < config.batch; ++j) {
                const std::size_t idx = train_order[start + j];
                v1.push_back(augment(corpus[idx], config.augmentation, derive_seed(config.seed, {0xb1, epoch, idx})));
                v2.push_back(augment(corpus[idx], config.augmentation, derive_seed(config.seed, {0xb2, epoch, idx})));
                ids += (j ? " " : "") + std::to_string(idx);
                sources.push_back(static_cast<std::int64_t>(idx));
            }
            // The queue outlives an epoch when M exceeds the training split, so
            // it can hold stale projections of the very clips in this batch.
            const double loss = trainer.step(pointers(v1), pointers(v2), ids, sources);
            result.history.push_back({epoch, global_step++, loss, trainer.queue().size()});
        }

        double val_loss = 0.0;
        std::size_t val_batches = 0;
        const std::size_t vb = std::min(config.batch, vp1.size());
        if (vb >= 2) {
            for (std::size_t start = 0; start + vb <= vp1.size(); start += vb) {
                std::vector<const Clip*> a(vp1.begin() + static_cast<std::ptrdiff_t>(start),
                                           vp1.begin() + static_cast<std::ptrdiff_t>(start + vb));
                std::vector<const Clip*> b(vp2.begin() + static_cast<std::ptrdiff_t>(start),
                                           vp2.begin() + static_cast<std::ptrdiff_t>(start + vb));
                val_loss += trainer.evaluate_loss(a, b, Tensor(), BatchNormMode::Inference);
                ++val_batches;
            }
            val_loss /= static_cast<double>(val_batches);
        } else {
            // Nothing held out: fall back to the mean training loss of the epoch.
            double s = 0.0;
            std::size_t n = 0;
            for (const auto& r : result.history) {
                if (r.epoch == epoch) s += r.loss, ++n;
            }
            val_loss = n ? s / n : 0.0;
        }
        result.validation_losses.push_back(val_loss);
        spdlog::info("epoch {}/{}: validation loss {:.5f}", epoch + 1, config.epochs, val_loss);
        if (val_loss < best) {
            best = val_loss;
            result.best_epoch = epoch;
            result.best = Checkpoint{encoder_config, config.head, trainer.encoder_params(), trainer.head_params()};
        }
        if (on_epoch) on_epoch(epoch, val_loss);
    }
    if (config.epochs == 0) {
        result.best = Checkpoint{encoder_config, config.head, trainer.encoder_params(), trainer.head_params()};
    }
    return result;
}

} // namespace trajprior
