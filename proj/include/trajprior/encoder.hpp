#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trajprior/tape.hpp"
#include "trajprior/tensor.hpp"

namespace trajprior {

inline constexpr std::size_t kClipFrames = 7;
inline constexpr std::array<double, kClipFrames> kFrameTimes{-3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.0};

/// T = 7 RGB frames, each 3 x H x W with intensities in [0, 1].
struct Clip {
    std::vector<Tensor> frames;

    std::size_t height() const { return frames.empty() ? 0 : frames[0].dim(1); }
    std::size_t width() const { return frames.empty() ? 0 : frames[0].dim(2); }
    /// Throws DimensionError unless there are exactly 7 frames of shape 3 x H x W.
    void validate() const;
    friend bool operator==(const Clip&, const Clip&) = default;
};

struct EncoderConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t patch = 8;
    std::size_t fused_channels = 16;  // C'
    std::size_t layers = 2;           // L
    std::size_t heads = 2;
    std::array<std::size_t, 4> pyramid_channels{8, 16, 32, 64};
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    void validate() const;
    std::size_t patch_count() const { return (height / patch) * (width / patch); }
    std::size_t freq_hidden() const { return std::max<std::size_t>(4, patch_count() / 2); }
    std::size_t spatial_channels() const;
    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ProjectionConfig {
    std::size_t hidden = 128;
    std::size_t out = 128;  // m
    friend bool operator==(const ProjectionConfig&, const ProjectionConfig&) = default;
};

/// Named parameter tensors. Names ending in ".running_mean" / ".running_var"
/// are batch-norm statistics and never trained.
using ParamMap = std::map<std::string, Tensor>;

bool is_running_stat(const std::string& name);

ParamMap init_encoder_params(const EncoderConfig& config, std::uint64_t seed);
ParamMap init_head_params(std::size_t in_dim, const ProjectionConfig& config, std::uint64_t seed);

/// Luminance weighting 0.299 R + 0.587 G + 0.114 B; 3 x H x W -> 1 x H x W.
Tensor to_grayscale(const Tensor& image);

/// Per-patch statistic a: mean FFT amplitude of every P x P patch of a
/// 1 x H x W (or H x W) image, in row-major patch order.
Tensor patch_statistics(const Tensor& gray, std::size_t patch);

// Batched constant inputs for a set of clips, frames clip-major.
struct EncoderInputs {
    Tensor rgb;    // N x 3 x H x W
    Tensor gray;   // N x 1 x H x W
    Tensor stats;  // N x N_p
};

EncoderInputs prepare_inputs(const std::vector<const Clip*>& clips, const EncoderConfig& config);

template <typename Real>
struct EncoderNodes {
    NodeId rgb, gray, stats;
    NodeId freq_weights;  // N x N_p
    NodeId freq_out;      // N x 1 x H x W
    NodeId spatial;       // N x C_s x H x W
    NodeId fused;         // N x C' x H x W
    NodeId frame_features;  // N x C'
    NodeId output;        // clips x C'
};

/// Appends the encoder for `clips` clips to a tape. Parameters are added as
/// leaves under their names (running stats as non-trainable leaves) unless
/// already present. Inputs are named "rgb", "gray", "stats".
template <typename Real>
EncoderNodes<Real> build_encoder(Tape<Real>& tape, const EncoderConfig& config, const ParamMap& params,
                                 std::size_t clips, BatchNormMode mode);

/// Projection head: fc -> BN -> ReLU -> fc -> BN -> ReLU -> fc -> l2 normalize.
template <typename Real>
NodeId build_head(Tape<Real>& tape, NodeId features, const ParamMap& params, BatchNormMode mode,
                  const EncoderConfig& config);

/// Copies (possibly updated) leaf values back into a parameter map.
template <typename Real>
void read_back(Tape<Real>& tape, ParamMap& params);

// Standalone single-image operations (inference, small float tapes).
Tensor frequency_attention(const Tensor& gray, const ParamMap& params, const EncoderConfig& config);
Tensor frequency_weights(const Tensor& gray, const ParamMap& params, const EncoderConfig& config);
Tensor spatial_pyramid(const Tensor& image, const ParamMap& params, const EncoderConfig& config);
Tensor fuse(const Tensor& freq, const Tensor& spatial, const ParamMap& params, const EncoderConfig& config,
            BatchNormMode mode = BatchNormMode::Inference);
/// frame_features: T vectors of length C' (already pooled) or T maps C' x H x W.
Tensor temporal_encode(const std::vector<Tensor>& frame_features, const ParamMap& params,
                       const EncoderConfig& config);

/// Encoder output (C') for each clip, inference mode.
std::vector<Tensor> encode_clips(const std::vector<const Clip*>& clips, const ParamMap& params,
                                 const EncoderConfig& config);
Tensor encode_clip(const Clip& clip, const ParamMap& params, const EncoderConfig& config);

/// Unit-norm m-vectors, BN in inference mode. rows x C' -> rows x m.
Tensor project(const Tensor& features, const ParamMap& head, const EncoderConfig& config);

// Checkpoint: magic "TPCK", version, configs, then named float32 LE tensors.
struct Checkpoint {
    EncoderConfig encoder;
    ProjectionConfig head_config;
    ParamMap encoder_params;
    ParamMap head_params;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

} // namespace trajprior
