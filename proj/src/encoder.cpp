#include "trajprior/encoder.hpp"

#include <cmath>
#include <random>

#include "trajprior/binary_io.hpp"
#include "trajprior/fft.hpp"

namespace trajprior {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::string str(std::size_t v) { return std::to_string(v); }

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (float& v : t.data()) v = static_cast<float>(dist(rng));
    return t;
}

void add_bn(ParamMap& p, const std::string& prefix, std::size_t channels) {
    p[prefix + ".gamma"] = Tensor::full({channels}, 1.0f);
    p[prefix + ".beta"] = Tensor({channels});
    p[prefix + ".running_mean"] = Tensor({channels});
    p[prefix + ".running_var"] = Tensor::full({channels}, 1.0f);
}

const Tensor& get(const ParamMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
}

template <typename Real>
NodeId leaf(Tape<Real>& tape, const ParamMap& params, const std::string& name) {
    if (tape.has_leaf(name)) return tape.leaf(name);
    return tape.parameter(name, get(params, name).template cast<Real>(), !is_running_stat(name));
}

template <typename Real>
NodeId dense(Tape<Real>& tape, NodeId x, const ParamMap& params, const std::string& prefix) {
    return tape.add_row_vector(tape.matmul(x, leaf(tape, params, prefix + ".w")), leaf(tape, params, prefix + ".b"));
}

template <typename Real>
NodeId batch_norm(Tape<Real>& tape, NodeId x, const ParamMap& params, const std::string& prefix,
                  BatchNormMode mode, const EncoderConfig& config) {
    return tape.batch_norm(x, leaf(tape, params, prefix + ".gamma"), leaf(tape, params, prefix + ".beta"),
                           leaf(tape, params, prefix + ".running_mean"), leaf(tape, params, prefix + ".running_var"),
                           mode, BatchNormSettings{config.bn_momentum, config.bn_epsilon});
}

// Eq. 5/6 equivalent: MLP over patch statistics, sigmoid, per-patch rescale.
template <typename Real>
std::pair<NodeId, NodeId> frequency_branch(Tape<Real>& tape, NodeId stats, NodeId gray, const ParamMap& params,
                                           const EncoderConfig& config) {
    NodeId h = tape.relu(dense(tape, stats, params, "freq.fc1"));
    NodeId w = tape.sigmoid(dense(tape, h, params, "freq.fc2"));
    return {w, tape.patch_scale(gray, w, config.patch)};
}

template <typename Real>
NodeId pyramid_branch(Tape<Real>& tape, NodeId rgb, const ParamMap& params, const EncoderConfig& config) {
    std::vector<NodeId> stages;
    NodeId x = rgb;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t k = s == 0 ? 4 : 2;
        const std::string prefix = "pyramid" + str(s);
        x = tape.relu(tape.conv2d(x, leaf(tape, params, prefix + ".w"), leaf(tape, params, prefix + ".b"), k, 0));
        stages.push_back(tape.upsample_bilinear(x, config.height, config.width));
    }
    return tape.concat(stages, 1);
}

template <typename Real>
NodeId fusion_branch(Tape<Real>& tape, NodeId freq, NodeId spatial, const ParamMap& params, BatchNormMode mode,
                     const EncoderConfig& config) {
    NodeId x = tape.concat({freq, spatial}, 1);
    x = tape.conv2d(x, leaf(tape, params, "fuse.w"), leaf(tape, params, "fuse.b"), 1, 0);
    return tape.relu(batch_norm(tape, x, params, "fuse.bn", mode, config));
}

// frames: (clips * T) x C', clip-major. Returns clips x C' (CLS outputs).
template <typename Real>
NodeId temporal_branch(Tape<Real>& tape, NodeId frames, std::size_t clips, const ParamMap& params,
                       const EncoderConfig& config) {
    const std::size_t seq = kClipFrames + 1;
    NodeId tokens = tape.concat({leaf(tape, params, "temporal.cls"), frames}, 0);
    std::vector<std::size_t> order, pos_rows;
    for (std::size_t c = 0; c < clips; ++c) {
        order.push_back(0);
        for (std::size_t t = 0; t < kClipFrames; ++t) order.push_back(1 + c * kClipFrames + t);
        for (std::size_t t = 0; t < seq; ++t) pos_rows.push_back(t);
    }
    NodeId x = tape.add(tape.gather_rows(tokens, order),
                        tape.gather_rows(leaf(tape, params, "temporal.pos"), pos_rows));
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = "temporal.layer" + str(l);
        NodeId n1 = tape.layer_norm(x, leaf(tape, params, p + ".ln1.gamma"), leaf(tape, params, p + ".ln1.beta"));
        NodeId q = dense(tape, n1, params, p + ".q");
        NodeId k = dense(tape, n1, params, p + ".k");
        NodeId v = dense(tape, n1, params, p + ".v");
        NodeId att = dense(tape, tape.attention(q, k, v, config.heads, seq), params, p + ".o");
        x = tape.add(x, att);
        NodeId n2 = tape.layer_norm(x, leaf(tape, params, p + ".ln2.gamma"), leaf(tape, params, p + ".ln2.beta"));
        NodeId m = dense(tape, tape.relu(dense(tape, n2, params, p + ".mlp1")), params, p + ".mlp2");
        x = tape.add(x, m);
    }
    std::vector<std::size_t> cls_rows;
    for (std::size_t c = 0; c < clips; ++c) cls_rows.push_back(c * seq);
    return tape.gather_rows(x, cls_rows);
}

Tensor single(const Tensor& t, const char* what, std::size_t channels) {
    if (t.rank() != 3 || (channels != 0 && t.dim(0) != channels)) {
        throw DimensionError(std::string(what) + ": expected " + (channels ? str(channels) : "C") +
                             " x H x W, got " + shape_string(t.shape()));
    }
    return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
}

void check_image_size(const EncoderConfig& config, std::size_t h, std::size_t w, const char* what) {
    if (h != config.height || w != config.width) {
        throw DimensionError(std::string(what) + ": image " + str(h) + "x" + str(w) + " does not match config " +
                             str(config.height) + "x" + str(config.width));
    }
}

} // namespace

void Clip::validate() const {
    if (frames.size() != kClipFrames) {
        throw DimensionError("clip must have " + str(kClipFrames) + " frames, got " + str(frames.size()));
    }
    for (const auto& f : frames) {
        if (f.rank() != 3 || f.dim(0) != 3 || f.shape() != frames[0].shape()) {
            throw DimensionError("clip frame has shape " + shape_string(f.shape()) + ", expected 3 x H x W");
        }
    }
}

void EncoderConfig::validate() const {
    if (!is_power_of_two(patch)) throw ConfigError("patch size " + str(patch) + " is not a power of two");
    if (height == 0 || width == 0 || height % 32 || width % 32) {
        throw ConfigError("image size " + str(height) + "x" + str(width) + " must be a positive multiple of 32");
    }
    if (height % patch || width % patch) throw ConfigError("image size not divisible by the patch size");
    if (heads == 0 || fused_channels == 0 || fused_channels % heads) {
        throw ConfigError("fused channels " + str(fused_channels) + " not divisible by " + str(heads) + " heads");
    }
    for (std::size_t c : pyramid_channels) {
        if (c == 0) throw ConfigError("pyramid channel counts must be positive");
    }
    if (!(bn_epsilon > 0) || !(bn_momentum >= 0 && bn_momentum <= 1)) throw ConfigError("bad batch-norm settings");
}

std::size_t EncoderConfig::spatial_channels() const {
    return pyramid_channels[0] + pyramid_channels[1] + pyramid_channels[2] + pyramid_channels[3];
}

bool is_running_stat(const std::string& name) {
    auto ends = [&](const std::string& suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends(".running_mean") || ends(".running_var");
}

ParamMap init_encoder_params(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ParamMap p;
    const std::size_t np = config.patch_count(), hid = config.freq_hidden(), c = config.fused_channels;
    p["freq.fc1.w"] = normal_tensor({np, hid}, std::sqrt(2.0 / np), rng);
    p["freq.fc1.b"] = Tensor({hid});
    p["freq.fc2.w"] = normal_tensor({hid, np}, std::sqrt(1.0 / hid), rng);
    p["freq.fc2.b"] = Tensor({np});
    std::size_t in = 3;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t k = s == 0 ? 4 : 2, out = config.pyramid_channels[s];
        p["pyramid" + str(s) + ".w"] = normal_tensor({out, in, k, k}, std::sqrt(2.0 / (in * k * k)), rng);
        p["pyramid" + str(s) + ".b"] = Tensor({out});
        in = out;
    }
    const std::size_t fin = config.spatial_channels() + 1;
    p["fuse.w"] = normal_tensor({c, fin, 1, 1}, std::sqrt(2.0 / fin), rng);
    p["fuse.b"] = Tensor({c});
    add_bn(p, "fuse.bn", c);
    p["temporal.cls"] = normal_tensor({1, c}, 0.1, rng);
    p["temporal.pos"] = normal_tensor({kClipFrames + 1, c}, 0.1, rng);
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string pre = "temporal.layer" + str(l);
        for (const char* ln : {".ln1", ".ln2"}) {
            p[pre + ln + ".gamma"] = Tensor::full({c}, 1.0f);
            p[pre + ln + ".beta"] = Tensor({c});
        }
        for (const char* proj : {".q", ".k", ".v", ".o"}) {
            p[pre + proj + ".w"] = normal_tensor({c, c}, std::sqrt(1.0 / c), rng);
            p[pre + proj + ".b"] = Tensor({c});
        }
        p[pre + ".mlp1.w"] = normal_tensor({c, 2 * c}, std::sqrt(2.0 / c), rng);
        p[pre + ".mlp1.b"] = Tensor({2 * c});
        p[pre + ".mlp2.w"] = normal_tensor({2 * c, c}, std::sqrt(1.0 / (2 * c)), rng);
        p[pre + ".mlp2.b"] = Tensor({c});
    }
    return p;
}

ParamMap init_head_params(std::size_t in_dim, const ProjectionConfig& config, std::uint64_t seed) {
    if (in_dim == 0 || config.hidden == 0 || config.out == 0) throw ConfigError("projection sizes must be positive");
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    ParamMap p;
    const std::size_t h = config.hidden;
    p["head.fc1.w"] = normal_tensor({in_dim, h}, std::sqrt(2.0 / in_dim), rng);
    p["head.fc1.b"] = Tensor({h});
    add_bn(p, "head.bn1", h);
    p["head.fc2.w"] = normal_tensor({h, h}, std::sqrt(2.0 / h), rng);
    p["head.fc2.b"] = Tensor({h});
    add_bn(p, "head.bn2", h);
    p["head.fc3.w"] = normal_tensor({h, config.out}, std::sqrt(1.0 / h), rng);
    p["head.fc3.b"] = Tensor({config.out});
    return p;
}

Tensor to_grayscale(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("to_grayscale: expected 3 x H x W, got " + shape_string(image.shape()));
    }
    const std::size_t hw = image.dim(1) * image.dim(2);
    Tensor out({1, image.dim(1), image.dim(2)});
    for (std::size_t i = 0; i < hw; ++i) {
        out[i] = 0.299f * image[i] + 0.587f * image[hw + i] + 0.114f * image[2 * hw + i];
    }
    return out;
}

Tensor patch_statistics(const Tensor& gray, std::size_t patch) {
    if (!(gray.rank() == 2 || (gray.rank() == 3 && gray.dim(0) == 1))) {
        throw DimensionError("patch_statistics: expected 1 x H x W, got " + shape_string(gray.shape()));
    }
    const std::size_t H = gray.dim(gray.rank() - 2), W = gray.dim(gray.rank() - 1);
    if (!is_power_of_two(patch)) throw DimensionError("patch size " + str(patch) + " is not a power of two");
    if (H % patch || W % patch) {
        throw DimensionError("image " + str(H) + "x" + str(W) + " not divisible into " + str(patch) + "-pixel patches");
    }
    const std::size_t pw = W / patch;
    Tensor stats({(H / patch) * pw});
    std::vector<float> block(patch * patch);
    for (std::size_t pr = 0; pr < H / patch; ++pr) {
        for (std::size_t pc = 0; pc < pw; ++pc) {
            for (std::size_t r = 0; r < patch; ++r) {
                for (std::size_t c = 0; c < patch; ++c) {
                    block[r * patch + c] = gray[(pr * patch + r) * W + pc * patch + c];
                }
            }
            const Tensor amp = amplitude(fft2d(block, patch));
            double acc = 0.0;
            for (float v : amp.data()) acc += v;
            stats[pr * pw + pc] = static_cast<float>(acc / static_cast<double>(patch * patch));
        }
    }
    return stats;
}

EncoderInputs prepare_inputs(const std::vector<const Clip*>& clips, const EncoderConfig& config) {
    config.validate();
    const std::size_t N = clips.size() * kClipFrames, H = config.height, W = config.width, np = config.patch_count();
    EncoderInputs in{Tensor({N, 3, H, W}), Tensor({N, 1, H, W}), Tensor({N, np})};
    std::size_t n = 0;
    for (const Clip* clip : clips) {
        clip->validate();
        check_image_size(config, clip->height(), clip->width(), "encoder");
        for (const Tensor& frame : clip->frames) {
            std::copy(frame.data().begin(), frame.data().end(), in.rgb.data().begin() + n * 3 * H * W);
            const Tensor g = to_grayscale(frame);
            std::copy(g.data().begin(), g.data().end(), in.gray.data().begin() + n * H * W);
            const Tensor a = patch_statistics(g, config.patch);
            std::copy(a.data().begin(), a.data().end(), in.stats.data().begin() + n * np);
            ++n;
        }
    }
    return in;
}

template <typename Real>
EncoderNodes<Real> build_encoder(Tape<Real>& tape, const EncoderConfig& config, const ParamMap& params,
                                 std::size_t clips, BatchNormMode mode) {
    config.validate();
    if (clips == 0) throw ConfigError("build_encoder: need at least one clip");
    const std::size_t N = clips * kClipFrames, H = config.height, W = config.width;
    EncoderNodes<Real> e;
    e.rgb = tape.input("rgb", {N, 3, H, W});
    e.gray = tape.input("gray", {N, 1, H, W});
    e.stats = tape.input("stats", {N, config.patch_count()});
    std::tie(e.freq_weights, e.freq_out) = frequency_branch(tape, e.stats, e.gray, params, config);
    e.spatial = pyramid_branch(tape, e.rgb, params, config);
    e.fused = fusion_branch(tape, e.freq_out, e.spatial, params, mode, config);
    e.frame_features = tape.global_avg_pool(e.fused);
    e.output = temporal_branch(tape, e.frame_features, clips, params, config);
    tape.set_label(e.output, "encoder.output");
    return e;
}

template <typename Real>
NodeId build_head(Tape<Real>& tape, NodeId features, const ParamMap& params, BatchNormMode mode,
                  const EncoderConfig& config) {
    NodeId x = tape.relu(batch_norm(tape, dense(tape, features, params, "head.fc1"), params, "head.bn1", mode, config));
    x = tape.relu(batch_norm(tape, dense(tape, x, params, "head.fc2"), params, "head.bn2", mode, config));
    NodeId z = tape.l2_normalize(dense(tape, x, params, "head.fc3"));
    tape.set_label(z, "head.output");
    return z;
}

template <typename Real>
void read_back(Tape<Real>& tape, ParamMap& params) {
    for (auto& [name, value] : params) {
        if (tape.has_leaf(name)) value = tape.value(tape.leaf(name)).template cast<float>();
    }
}

Tensor frequency_weights(const Tensor& gray, const ParamMap& params, const EncoderConfig& config) {
    const Tensor g4 = single(gray, "frequency_weights", 1);
    check_image_size(config, g4.dim(2), g4.dim(3), "frequency_weights");
    Tape<float> tape;
    NodeId stats = tape.input("stats", {1, config.patch_count()});
    NodeId g = tape.input("gray", g4.shape());
    auto [w, out] = frequency_branch(tape, stats, g, params, config);
    (void)out;
    tape.evaluate({{"stats", patch_statistics(gray, config.patch).reshaped({1, config.patch_count()})}, {"gray", g4}});
    return tape.value(w).reshaped({config.patch_count()});
}

Tensor frequency_attention(const Tensor& gray, const ParamMap& params, const EncoderConfig& config) {
    const Tensor g4 = single(gray, "frequency_attention", 1);
    if (g4.dim(2) % config.patch || g4.dim(3) % config.patch) {
        throw DimensionError("frequency_attention: image " + str(g4.dim(2)) + "x" + str(g4.dim(3)) +
                             " not divisible into " + str(config.patch) + "-pixel patches");
    }
    check_image_size(config, g4.dim(2), g4.dim(3), "frequency_attention");
    Tape<float> tape;
    NodeId stats = tape.input("stats", {1, config.patch_count()});
    NodeId g = tape.input("gray", g4.shape());
    auto [w, out] = frequency_branch(tape, stats, g, params, config);
    (void)w;
    tape.evaluate({{"stats", patch_statistics(gray, config.patch).reshaped({1, config.patch_count()})}, {"gray", g4}});
    return tape.value(out).reshaped(gray.shape());
}

Tensor spatial_pyramid(const Tensor& image, const ParamMap& params, const EncoderConfig& config) {
    const Tensor x4 = single(image, "spatial_pyramid", 3);
    if (x4.dim(2) % 32 || x4.dim(3) % 32) {
        throw DimensionError("spatial_pyramid: image " + str(x4.dim(2)) + "x" + str(x4.dim(3)) +
                             " not divisible by 32");
    }
    check_image_size(config, x4.dim(2), x4.dim(3), "spatial_pyramid");
    Tape<float> tape;
    NodeId rgb = tape.input("rgb", x4.shape());
    NodeId out = pyramid_branch(tape, rgb, params, config);
    tape.evaluate({{"rgb", x4}});
    const Tensor& v = tape.value(out);
    return v.reshaped({v.dim(1), v.dim(2), v.dim(3)});
}

Tensor fuse(const Tensor& freq, const Tensor& spatial, const ParamMap& params, const EncoderConfig& config,
            BatchNormMode mode) {
    const Tensor f4 = single(freq, "fuse", 1);
    const Tensor s4 = single(spatial, "fuse", 0);
    if (f4.dim(2) != s4.dim(2) || f4.dim(3) != s4.dim(3)) {
        throw DimensionError("fuse: frequency map " + shape_string(freq.shape()) + " and spatial map " +
                             shape_string(spatial.shape()) + " differ in size");
    }
    Tape<float> tape;
    tape.set_track_running_stats(false);
    NodeId f = tape.input("freq", f4.shape());
    NodeId s = tape.input("spatial", s4.shape());
    NodeId out = fusion_branch(tape, f, s, params, mode, config);
    tape.evaluate({{"freq", f4}, {"spatial", s4}});
    const Tensor& v = tape.value(out);
    return v.reshaped({v.dim(1), v.dim(2), v.dim(3)});
}

Tensor temporal_encode(const std::vector<Tensor>& frame_features, const ParamMap& params,
                       const EncoderConfig& config) {
    if (frame_features.size() != kClipFrames) {
        throw DimensionError("temporal_encode: expected " + str(kClipFrames) + " frame features, got " +
                             str(frame_features.size()));
    }
    const std::size_t c = config.fused_channels;
    Tensor stacked({kClipFrames, c});
    for (std::size_t t = 0; t < kClipFrames; ++t) {
        const Tensor& f = frame_features[t];
        if (f.rank() == 1 && f.dim(0) == c) {
            std::copy(f.data().begin(), f.data().end(), stacked.data().begin() + t * c);
        } else if (f.rank() == 3 && f.dim(0) == c) {
            const std::size_t hw = f.dim(1) * f.dim(2);
            for (std::size_t ch = 0; ch < c; ++ch) {
                float acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += f[ch * hw + i];
                stacked[t * c + ch] = acc / static_cast<float>(hw);
            }
        } else {
            throw DimensionError("temporal_encode: frame feature has shape " + shape_string(f.shape()));
        }
    }
    Tape<float> tape;
    NodeId frames = tape.input("frames", {kClipFrames, c});
    NodeId out = temporal_branch(tape, frames, 1, params, config);
    tape.evaluate({{"frames", stacked}});
    return tape.value(out).reshaped({c});
}

std::vector<Tensor> encode_clips(const std::vector<const Clip*>& clips, const ParamMap& params,
                                 const EncoderConfig& config) {
    constexpr std::size_t kChunk = 8;
    std::vector<Tensor> out;
    out.reserve(clips.size());
    for (std::size_t start = 0; start < clips.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, clips.size() - start);
        std::vector<const Clip*> chunk(clips.begin() + static_cast<std::ptrdiff_t>(start),
                                       clips.begin() + static_cast<std::ptrdiff_t>(start + n));
        EncoderInputs in = prepare_inputs(chunk, config);
        Tape<float> tape;
        tape.set_track_running_stats(false);
        auto nodes = build_encoder(tape, config, params, n, BatchNormMode::Inference);
        tape.evaluate({{"rgb", std::move(in.rgb)}, {"gray", std::move(in.gray)}, {"stats", std::move(in.stats)}});
        const Tensor& v = tape.value(nodes.output);
        const std::size_t c = config.fused_channels;
        for (std::size_t i = 0; i < n; ++i) {
            out.emplace_back(Shape{c}, std::vector<float>(v.data().begin() + i * c, v.data().begin() + (i + 1) * c));
        }
    }
    return out;
}

Tensor encode_clip(const Clip& clip, const ParamMap& params, const EncoderConfig& config) {
    return encode_clips({&clip}, params, config).front();
}

Tensor project(const Tensor& features, const ParamMap& head, const EncoderConfig& config) {
    Tensor x = features.rank() == 1 ? features.reshaped({1, features.dim(0)}) : features;
    if (x.rank() != 2) throw DimensionError("project: expected rows x d, got " + shape_string(features.shape()));
    Tape<float> tape;
    tape.set_track_running_stats(false);
    NodeId in = tape.input("h", x.shape());
    NodeId z = build_head(tape, in, head, BatchNormMode::Inference, config);
    tape.evaluate({{"h", x}});
    return tape.value(z);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    BinaryWriter w(path);
    w.put_array("TPCK", 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const EncoderConfig& e = ck.encoder;
    for (std::size_t v : {e.height, e.width, e.patch, e.fused_channels, e.layers, e.heads}) w.put<std::uint64_t>(v);
    for (std::size_t v : e.pyramid_channels) w.put<std::uint64_t>(v);
    w.put<double>(e.bn_momentum);
    w.put<double>(e.bn_epsilon);
    w.put<std::uint64_t>(ck.head_config.hidden);
    w.put<std::uint64_t>(ck.head_config.out);
    w.put<std::uint64_t>(ck.encoder_params.size() + ck.head_params.size());
    for (const ParamMap* m : {&ck.encoder_params, &ck.head_params}) {
        for (const auto& [name, t] : *m) {
            w.put_string(name);
            w.put_tensor(t);
        }
    }
    w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("TPCK");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    EncoderConfig& e = ck.encoder;
    for (std::size_t* v : {&e.height, &e.width, &e.patch, &e.fused_channels, &e.layers, &e.heads}) {
        *v = static_cast<std::size_t>(r.get<std::uint64_t>());
    }
    for (std::size_t& v : e.pyramid_channels) v = static_cast<std::size_t>(r.get<std::uint64_t>());
    e.bn_momentum = r.get<double>();
    e.bn_epsilon = r.get<double>();
    e.validate();
    ck.head_config.hidden = static_cast<std::size_t>(r.get<std::uint64_t>());
    ck.head_config.out = static_cast<std::size_t>(r.get<std::uint64_t>());
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.get_string();
        Tensor t = r.get_tensor();
        if (!t.all_finite()) throw FormatError(path + ": tensor '" + name + "' has non-finite values");
        (name.rfind("head.", 0) == 0 ? ck.head_params : ck.encoder_params)[name] = std::move(t);
    }
    return ck;
}

template EncoderNodes<float> build_encoder(Tape<float>&, const EncoderConfig&, const ParamMap&, std::size_t,
                                           BatchNormMode);
template EncoderNodes<double> build_encoder(Tape<double>&, const EncoderConfig&, const ParamMap&, std::size_t,
                                            BatchNormMode);
template NodeId build_head(Tape<float>&, NodeId, const ParamMap&, BatchNormMode, const EncoderConfig&);
template NodeId build_head(Tape<double>&, NodeId, const ParamMap&, BatchNormMode, const EncoderConfig&);
template void read_back(Tape<float>&, ParamMap&);
template void read_back(Tape<double>&, ParamMap&);

} // namespace trajprior
