#include "trajprior/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace trajprior {

const char* op_name(OpKind op) noexcept {
    switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddRowVector: return "add_row_vector";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::UpsampleBilinear: return "upsample_bilinear";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Concat: return "concat";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::Attention: return "attention";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::PatchScale: return "patch_scale";
    case OpKind::Sum: return "sum";
    case OpKind::LogClamped: return "log_clamped";
    case OpKind::InfoNce: return "info_nce";
    case OpKind::Reshape: return "reshape";
    }
    return "unknown";
}

namespace {

// Source index and weight pair for align-corners-false bilinear sampling.
struct Tap {
    std::size_t lo, hi;
    double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        taps[o] = {lo, hi, src - static_cast<double>(lo)};
    }
    return taps;
}

template <typename Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
    Real acc[4] = {0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) acc[0] += a[i] * b[i];
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

} // namespace

// ---------------------------------------------------------------------------
// Graph construction

template <typename Real>
NodeId Tape<Real>::push(Node node) {
    const auto id = NodeId{static_cast<std::uint32_t>(nodes_.size())};
    if (node.label.empty()) {
        node.label = std::string(op_name(node.op)) + "#" + std::to_string(id.index);
    }
    if (node.op != OpKind::Parameter && node.op != OpKind::Input && node.op != OpKind::Constant) {
        for (NodeId in : node.inputs) {
            if (in.index >= nodes_.size()) fail(node, "input node id out of range");
            node.requires_grad = node.requires_grad || nodes_[in.index].requires_grad;
        }
    }
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    return id;
}

template <typename Real>
typename Tape<Real>::Node& Tape<Real>::at(NodeId id) {
    if (id.index >= nodes_.size()) throw DimensionError("tape: node id out of range");
    return nodes_[id.index];
}

template <typename Real>
const typename Tape<Real>::Node& Tape<Real>::at(NodeId id) const {
    if (id.index >= nodes_.size()) throw DimensionError("tape: node id out of range");
    return nodes_[id.index];
}

template <typename Real>
void Tape<Real>::fail(const Node& node, const std::string& what) const {
    throw DimensionError("node '" + node.label + "': " + what);
}

template <typename Real>
NodeId Tape<Real>::input(const std::string& name, Shape shape) {
    if (leaves_.count(name)) throw ConfigError("tape: duplicate leaf name '" + name + "'");
    Node n;
    n.op = OpKind::Input;
    n.name = name;
    n.label = name;
    n.shape = std::move(shape);
    const NodeId id = push(std::move(n));
    leaves_[name] = id;
    return id;
}

template <typename Real>
NodeId Tape<Real>::constant(TensorT value, std::string label) {
    Node n;
    n.op = OpKind::Constant;
    n.label = std::move(label);
    n.shape = value.shape();
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::parameter(const std::string& name, TensorT value, bool trainable) {
    if (leaves_.count(name)) throw ConfigError("tape: duplicate leaf name '" + name + "'");
    Node n;
    n.op = OpKind::Parameter;
    n.name = name;
    n.label = name;
    n.shape = value.shape();
    n.value = std::move(value);
    n.trainable = trainable;
    n.requires_grad = trainable;
    const NodeId id = push(std::move(n));
    leaves_[name] = id;
    return id;
}

template <typename Real>
NodeId Tape<Real>::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::MatMul;
    n.inputs = {a, b};
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        n.label = "matmul#" + std::to_string(nodes_.size());
        fail(n, "cannot multiply " + shape_string(sa) + " by " + shape_string(sb));
    }
    n.shape = {sa[0], sb[1]};
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::add(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Add;
    n.inputs = {a, b};
    n.label = "add#" + std::to_string(nodes_.size());
    if (at(a).shape != at(b).shape) {
        fail(n, "shape mismatch " + shape_string(at(a).shape) + " vs " + shape_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::sub(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Sub;
    n.inputs = {a, b};
    n.label = "sub#" + std::to_string(nodes_.size());
    if (at(a).shape != at(b).shape) {
        fail(n, "shape mismatch " + shape_string(at(a).shape) + " vs " + shape_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::mul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Mul;
    n.inputs = {a, b};
    n.label = "mul#" + std::to_string(nodes_.size());
    if (at(a).shape != at(b).shape) {
        fail(n, "shape mismatch " + shape_string(at(a).shape) + " vs " + shape_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::scale(NodeId x, Real factor) {
    Node n;
    n.op = OpKind::Scale;
    n.inputs = {x};
    n.scalar = factor;
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::add_row_vector(NodeId x, NodeId bias) {
    Node n;
    n.op = OpKind::AddRowVector;
    n.inputs = {x, bias};
    n.label = "add_row_vector#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    const Shape& sb = at(bias).shape;
    if (sx.empty() || sb.size() != 1 || sb[0] != sx.back()) {
        fail(n, "bias " + shape_string(sb) + " does not match last axis of " + shape_string(sx));
    }
    n.shape = sx;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::relu(NodeId x) {
    Node n;
    n.op = OpKind::Relu;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::sigmoid(NodeId x) {
    Node n;
    n.op = OpKind::Sigmoid;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::log_clamped(NodeId x, Real floor) {
    Node n;
    n.op = OpKind::LogClamped;
    n.inputs = {x};
    n.scalar = floor;
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::sum(NodeId x) {
    Node n;
    n.op = OpKind::Sum;
    n.inputs = {x};
    n.shape = {1};
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::reshape(NodeId x, Shape shape) {
    Node n;
    n.op = OpKind::Reshape;
    n.inputs = {x};
    n.label = "reshape#" + std::to_string(nodes_.size());
    if (shape_size(shape) != shape_size(at(x).shape)) {
        fail(n, "cannot reshape " + shape_string(at(x).shape) + " to " + shape_string(shape));
    }
    n.shape = std::move(shape);
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t padding) {
    Node n;
    n.op = OpKind::Conv2d;
    n.inputs = {x, weight, bias};
    n.stride = stride;
    n.padding = padding;
    n.label = "conv2d#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    const Shape& sw = at(weight).shape;
    const Shape& sb = at(bias).shape;
    if (stride == 0) fail(n, "stride must be positive");
    if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1]) {
        fail(n, "kernel " + shape_string(sw) + " incompatible with input " + shape_string(sx));
    }
    if (sb.size() != 1 || sb[0] != sw[0]) fail(n, "bias " + shape_string(sb) + " does not match kernel");
    if (sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3]) fail(n, "kernel larger than padded input");
    const std::size_t oh = (sx[2] + 2 * padding - sw[2]) / stride + 1;
    const std::size_t ow = (sx[3] + 2 * padding - sw[3]) / stride + 1;
    n.shape = {sx[0], sw[0], oh, ow};
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::upsample_bilinear(NodeId x, std::size_t out_h, std::size_t out_w) {
    Node n;
    n.op = OpKind::UpsampleBilinear;
    n.inputs = {x};
    n.label = "upsample_bilinear#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    if (sx.size() != 4 || out_h == 0 || out_w == 0) fail(n, "expected N x C x H x W input");
    n.shape = {sx[0], sx[1], out_h, out_w};
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::global_avg_pool(NodeId x) {
    Node n;
    n.op = OpKind::GlobalAvgPool;
    n.inputs = {x};
    n.label = "global_avg_pool#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    if (sx.size() != 4) fail(n, "expected N x C x H x W input, got " + shape_string(sx));
    n.shape = {sx[0], sx[1]};
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::patch_scale(NodeId image, NodeId weights, std::size_t patch) {
    Node n;
    n.op = OpKind::PatchScale;
    n.inputs = {image, weights};
    n.patch = patch;
    n.label = "patch_scale#" + std::to_string(nodes_.size());
    const Shape& si = at(image).shape;
    const Shape& sw = at(weights).shape;
    if (si.size() != 4 || si[1] != 1) fail(n, "expected N x 1 x H x W image, got " + shape_string(si));
    if (patch == 0 || si[2] % patch != 0 || si[3] % patch != 0) {
        fail(n, "image " + shape_string(si) + " not divisible into " + std::to_string(patch) + "-pixel patches");
    }
    const std::size_t np = (si[2] / patch) * (si[3] / patch);
    if (sw.size() != 2 || sw[0] != si[0] || sw[1] != np) {
        fail(n, "weights " + shape_string(sw) + " do not match " + std::to_string(np) + " patches");
    }
    n.shape = si;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                              BatchNormMode mode, BatchNormSettings settings) {
    Node n;
    n.op = OpKind::BatchNorm;
    n.inputs = {x, gamma, beta, running_mean, running_var};
    n.bn_mode = mode;
    n.bn = settings;
    n.label = "batch_norm#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    if (sx.size() != 2 && sx.size() != 4) fail(n, "expected rank 2 or 4 input, got " + shape_string(sx));
    for (std::size_t i = 1; i < 5; ++i) {
        const Shape& s = at(n.inputs[i]).shape;
        if (s.size() != 1 || s[0] != sx[1]) fail(n, "per-channel tensor has shape " + shape_string(s));
    }
    for (std::size_t i = 3; i < 5; ++i) {
        const Node& leafnode = at(n.inputs[i]);
        if (leafnode.op != OpKind::Parameter || leafnode.trainable) {
            fail(n, "running statistics must be non-trainable parameter leaves");
        }
    }
    n.shape = sx;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::layer_norm(NodeId x, NodeId gamma, NodeId beta, Real epsilon) {
    Node n;
    n.op = OpKind::LayerNorm;
    n.inputs = {x, gamma, beta};
    n.scalar = epsilon;
    n.label = "layer_norm#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    if (sx.size() != 2) fail(n, "expected rows x C input, got " + shape_string(sx));
    if (at(gamma).shape != Shape{sx[1]} || at(beta).shape != Shape{sx[1]}) fail(n, "scale/shift size mismatch");
    n.shape = sx;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::softmax(NodeId x) {
    Node n;
    n.op = OpKind::Softmax;
    n.inputs = {x};
    n.label = "softmax#" + std::to_string(nodes_.size());
    if (at(x).shape.size() != 2) fail(n, "expected rank-2 input");
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::l2_normalize(NodeId x) {
    Node n;
    n.op = OpKind::L2Normalize;
    n.inputs = {x};
    n.label = "l2_normalize#" + std::to_string(nodes_.size());
    if (at(x).shape.size() != 2) fail(n, "expected rank-2 input");
    n.shape = at(x).shape;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::concat(const std::vector<NodeId>& parts, std::size_t axis) {
    Node n;
    n.op = OpKind::Concat;
    n.inputs = parts;
    n.axis = axis;
    n.label = "concat#" + std::to_string(nodes_.size());
    if (parts.empty()) fail(n, "nothing to concatenate");
    Shape out = at(parts[0]).shape;
    if (axis >= out.size()) fail(n, "axis out of range");
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const Shape& s = at(parts[i]).shape;
        if (s.size() != out.size()) fail(n, "rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != out[d]) {
                fail(n, "shape " + shape_string(s) + " incompatible with " + shape_string(at(parts[0]).shape));
            }
        }
        out[axis] += s[axis];
    }
    n.shape = std::move(out);
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::gather_rows(NodeId x, std::vector<std::size_t> rows) {
    Node n;
    n.op = OpKind::GatherRows;
    n.inputs = {x};
    n.label = "gather_rows#" + std::to_string(nodes_.size());
    const Shape& sx = at(x).shape;
    if (sx.size() != 2) fail(n, "expected rank-2 input");
    for (std::size_t r : rows) {
        if (r >= sx[0]) fail(n, "row index " + std::to_string(r) + " out of range");
    }
    n.shape = {rows.size(), sx[1]};
    n.indices = std::move(rows);
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::attention(NodeId q, NodeId k, NodeId v, std::size_t heads, std::size_t seq_len) {
    Node n;
    n.op = OpKind::Attention;
    n.inputs = {q, k, v};
    n.heads = heads;
    n.seq_len = seq_len;
    n.label = "attention#" + std::to_string(nodes_.size());
    const Shape& sq = at(q).shape;
    if (sq.size() != 2 || at(k).shape != sq || at(v).shape != sq) fail(n, "q, k, v must share a rank-2 shape");
    if (heads == 0 || sq[1] % heads != 0) fail(n, "width " + std::to_string(sq[1]) + " not divisible by heads");
    if (seq_len == 0 || sq[0] % seq_len != 0) fail(n, "row count not a multiple of the sequence length");
    n.shape = sq;
    return push(std::move(n));
}

template <typename Real>
NodeId Tape<Real>::info_nce(NodeId z, std::size_t batch, TensorT queue, std::size_t hard_negatives,
                            Real temperature) {
    Node n;
    n.op = OpKind::InfoNce;
    n.inputs = {z};
    n.batch = batch;
    n.k = hard_negatives;
    n.scalar = temperature;
    n.label = "info_nce#" + std::to_string(nodes_.size());
    const Shape& sz = at(z).shape;
    if (!(temperature > 0)) throw ConfigError("info_nce: temperature must be positive");
    if (hard_negatives == 0) throw ConfigError("info_nce: hard-negative count must be positive");
    if (sz.size() != 2 || batch == 0 || sz[0] != 2 * batch) fail(n, "expected 2*batch rows, got " + shape_string(sz));
    if (!queue.empty() && (queue.rank() != 2 || queue.dim(1) != sz[1])) {
        fail(n, "queue shape " + shape_string(queue.shape()) + " does not match embedding width");
    }
    n.aux = std::move(queue);
    n.shape = {1};
    return push(std::move(n));
}

template <typename Real>
void Tape<Real>::set_label(NodeId node, std::string label) {
    at(node).label = std::move(label);
}

template <typename Real>
const std::string& Tape<Real>::label(NodeId node) const {
    return at(node).label;
}

template <typename Real>
void Tape<Real>::mark_output(const std::string& name, NodeId node) {
    at(node);
    outputs_.emplace_back(name, node);
}

template <typename Real>
const typename Tape<Real>::TensorT& Tape<Real>::value(NodeId node) const {
    const Node& n = at(node);
    if (!evaluated_ && n.op != OpKind::Parameter && n.op != OpKind::Constant) {
        throw Error("tape: value of '" + n.label + "' requested before evaluate()");
    }
    return n.value;
}

template <typename Real>
const Shape& Tape<Real>::shape(NodeId node) const {
    return at(node).shape;
}

template <typename Real>
OpKind Tape<Real>::op(NodeId node) const {
    return at(node).op;
}

template <typename Real>
NodeId Tape<Real>::leaf(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw ConfigError("tape: no leaf named '" + name + "'");
    return it->second;
}

template <typename Real>
typename Tape<Real>::TensorT& Tape<Real>::parameter_value(const std::string& name) {
    Node& n = at(leaf(name));
    if (n.op != OpKind::Parameter) throw ConfigError("tape: '" + name + "' is not a parameter");
    evaluated_ = false;
    return n.value;
}

template <typename Real>
std::vector<std::string> Tape<Real>::parameter_names(bool trainable_only) const {
    std::vector<std::string> names;
    for (const Node& n : nodes_) {
        if (n.op == OpKind::Parameter && (n.trainable || !trainable_only)) names.push_back(n.name);
    }
    return names;
}

template <typename Real>
bool Tape<Real>::depends_on(NodeId node, NodeId source) const {
    if (node == source) return true;
    std::vector<bool> seen(nodes_.size(), false);
    at(node);
    std::vector<std::uint32_t> stack{node.index};
    while (!stack.empty()) {
        const std::uint32_t cur = stack.back();
        stack.pop_back();
        if (cur == source.index) return true;
        if (seen[cur]) continue;
        seen[cur] = true;
        for (NodeId in : nodes_[cur].inputs) stack.push_back(in.index);
    }
    return false;
}

template <typename Real>
void Tape<Real>::mix(std::uint64_t v) noexcept {
    signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
}

// ---------------------------------------------------------------------------
// Forward

template <typename Real>
std::map<std::string, typename Tape<Real>::TensorT> Tape<Real>::evaluate(
    const std::map<std::string, TensorT>& inputs) {
    signature_ = 0xcbf29ce484222325ULL;
    for (Node& n : nodes_) {
        if (n.op == OpKind::Input) {
            auto it = inputs.find(n.name);
            if (it == inputs.end()) throw ConfigError("evaluate: missing input '" + n.name + "'");
            if (it->second.shape() != n.shape) {
                fail(n, "input shape " + shape_string(it->second.shape()) + " does not match declared " +
                            shape_string(n.shape));
            }
            n.value = it->second;
        } else if (n.op != OpKind::Parameter && n.op != OpKind::Constant) {
            forward(n);
        }
    }
    evaluated_ = true;
    std::map<std::string, TensorT> out;
    for (const auto& [name, id] : outputs_) out[name] = at(id).value;
    return out;
}

template <typename Real>
void Tape<Real>::forward(Node& node) {
    auto in = [&](std::size_t i) -> const TensorT& { return nodes_[node.inputs[i].index].value; };
    TensorT out(node.shape);
    Real* y = out.data().data();

    switch (node.op) {
    case OpKind::MatMul: {
        const TensorT& a = in(0);
        const TensorT& b = in(1);
        const std::size_t m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
        for (std::size_t i = 0; i < m; ++i) {
            Real* yr = y + i * nn;
            for (std::size_t p = 0; p < kk; ++p) {
                const Real av = a[i * kk + p];
                if (av == Real(0)) continue;
                const Real* br = b.data().data() + p * nn;
                for (std::size_t j = 0; j < nn; ++j) yr[j] += av * br[j];
            }
        }
        break;
    }
    case OpKind::Add:
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = in(0)[i] + in(1)[i];
        break;
    case OpKind::Sub:
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = in(0)[i] - in(1)[i];
        break;
    case OpKind::Mul:
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = in(0)[i] * in(1)[i];
        break;
    case OpKind::Scale:
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = node.scalar * in(0)[i];
        break;
    case OpKind::AddRowVector: {
        const TensorT& b = in(1);
        const std::size_t c = b.size();
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = in(0)[i] + b[i % c];
        break;
    }
    case OpKind::Relu: {
        const TensorT& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
        if (track_branches_) {
            // FNV-1a over the sign pattern; a rotate-xor hash let pairs of
            // flips 64 elements apart cancel.
            std::uint64_t h = 0xcbf29ce484222325ULL;
            for (std::size_t i = 0; i < x.size(); ++i) h = (h ^ static_cast<std::uint64_t>(x[i] > Real(0))) * 0x100000001b3ULL;
            mix(h);
        }
        break;
    }
    case OpKind::Sigmoid: {
        const TensorT& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const Real v = x[i];
            y[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
        }
        break;
    }
    case OpKind::LogClamped: {
        const TensorT& x = in(0);
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const bool clamped = !(x[i] > node.scalar);
            y[i] = std::log(clamped ? node.scalar : x[i]);
            h = (h ^ static_cast<std::uint64_t>(clamped)) * 0x100000001b3ULL;
        }
        if (track_branches_) mix(h);
        break;
    }
    case OpKind::Sum: {
        double acc = 0.0;
        for (Real v : in(0).data()) acc += v;
        y[0] = static_cast<Real>(acc);
        break;
    }
    case OpKind::Reshape:
        std::copy(in(0).data().begin(), in(0).data().end(), y);
        break;
    case OpKind::Conv2d: {
        const TensorT& x = in(0);
        const TensorT& w = in(1);
        const TensorT& b = in(2);
        const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
        const std::size_t OH = node.shape[2], OW = node.shape[3];
        const std::size_t s = node.stride, pad = node.padding;
        const bool pointwise = KH == 1 && KW == 1 && s == 1 && pad == 0;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t co = 0; co < Co; ++co) {
                Real* yp = y + (n * Co + co) * OH * OW;
                std::fill(yp, yp + OH * OW, b[co]);
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const Real* xp = x.data().data() + (n * Ci + ci) * H * W;
                    const Real* wp = w.data().data() + (co * Ci + ci) * KH * KW;
                    if (pointwise) {
                        const Real wv = wp[0];
                        for (std::size_t i = 0; i < H * W; ++i) yp[i] += wv * xp[i];
                        continue;
                    }
                    for (std::size_t kh = 0; kh < KH; ++kh) {
                        for (std::size_t kw = 0; kw < KW; ++kw) {
                            const Real wv = wp[kh * KW + kw];
                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) -
                                                          static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) -
                                                              static_cast<std::ptrdiff_t>(pad);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                    yp[oh * OW + ow] += wv * xp[static_cast<std::size_t>(ih) * W +
                                                                static_cast<std::size_t>(iw)];
                                }
                            }
                        }
                    }
                }
            }
        }
        break;
    }
    case OpKind::UpsampleBilinear: {
        const TensorT& x = in(0);
        const std::size_t NC = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t H = node.shape[2], W = node.shape[3];
        const auto rows = bilinear_taps(h, H);
        const auto cols = bilinear_taps(w, W);
        for (std::size_t p = 0; p < NC; ++p) {
            const Real* xp = x.data().data() + p * h * w;
            Real* yp = y + p * H * W;
            for (std::size_t r = 0; r < H; ++r) {
                const Real fr = static_cast<Real>(rows[r].frac);
                const Real* r0 = xp + rows[r].lo * w;
                const Real* r1 = xp + rows[r].hi * w;
                for (std::size_t c = 0; c < W; ++c) {
                    const Real fc = static_cast<Real>(cols[c].frac);
                    const Real top = r0[cols[c].lo] + fc * (r0[cols[c].hi] - r0[cols[c].lo]);
                    const Real bot = r1[cols[c].lo] + fc * (r1[cols[c].hi] - r1[cols[c].lo]);
                    yp[r * W + c] = top + fr * (bot - top);
                }
            }
        }
        break;
    }
    case OpKind::GlobalAvgPool: {
        const TensorT& x = in(0);
        const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
        for (std::size_t p = 0; p < NC; ++p) {
            const Real* xp = x.data().data() + p * HW;
            Real acc = 0;
            for (std::size_t i = 0; i < HW; ++i) acc += xp[i];
            y[p] = acc / static_cast<Real>(HW);
        }
        break;
    }
    case OpKind::PatchScale: {
        const TensorT& x = in(0);
        const TensorT& wts = in(1);
        const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), P = node.patch;
        const std::size_t pw = W / P, np = (H / P) * pw;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t c = 0; c < W; ++c) {
                    const std::size_t idx = (n * H + r) * W + c;
                    y[idx] = wts[n * np + (r / P) * pw + c / P] * x[idx];
                }
            }
        }
        break;
    }
    case OpKind::BatchNorm: {
        const TensorT& x = in(0);
        const TensorT& gamma = in(1);
        const TensorT& beta = in(2);
        Node& rm = nodes_[node.inputs[3].index];
        Node& rv = nodes_[node.inputs[4].index];
        const std::size_t N = x.dim(0), C = x.dim(1);
        const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
        const std::size_t count = N * inner;
        const Real eps = static_cast<Real>(node.bn.epsilon);
        node.cache.assign(x.size() + C, Real(0));  // xhat then inv_std per channel
        Real* xhat = node.cache.data();
        Real* inv_std = node.cache.data() + x.size();
        for (std::size_t c = 0; c < C; ++c) {
            Real mean, var;
            if (node.bn_mode == BatchNormMode::Train) {
                double s = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const Real* xp = x.data().data() + (n * C + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) s += xp[i];
                }
                const double m = s / static_cast<double>(count);
                double ss = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const Real* xp = x.data().data() + (n * C + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) ss += (xp[i] - m) * (xp[i] - m);
                }
                mean = static_cast<Real>(m);
                var = static_cast<Real>(ss / static_cast<double>(count));
                if (track_running_stats_) {
                    const Real mom = static_cast<Real>(node.bn.momentum);
                    const Real unbiased =
                        count > 1 ? static_cast<Real>(ss / static_cast<double>(count - 1)) : var;
                    rm.value[c] = (Real(1) - mom) * rm.value[c] + mom * mean;
                    rv.value[c] = (Real(1) - mom) * rv.value[c] + mom * unbiased;
                }
            } else {
                mean = rm.value[c];
                var = rv.value[c];
            }
            inv_std[c] = Real(1) / std::sqrt(var + eps);
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const Real xh = (x[base + i] - mean) * inv_std[c];
                    xhat[base + i] = xh;
                    y[base + i] = gamma[c] * xh + beta[c];
                }
            }
        }
        break;
    }
    case OpKind::LayerNorm: {
        const TensorT& x = in(0);
        const TensorT& gamma = in(1);
        const TensorT& beta = in(2);
        const std::size_t R = x.dim(0), C = x.dim(1);
        node.cache.assign(x.size() + R, Real(0));
        Real* xhat = node.cache.data();
        Real* inv_std = node.cache.data() + x.size();
        for (std::size_t r = 0; r < R; ++r) {
            const Real* xr = x.data().data() + r * C;
            Real mean = 0;
            for (std::size_t c = 0; c < C; ++c) mean += xr[c];
            mean /= static_cast<Real>(C);
            Real var = 0;
            for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
            var /= static_cast<Real>(C);
            inv_std[r] = Real(1) / std::sqrt(var + node.scalar);
            for (std::size_t c = 0; c < C; ++c) {
                const Real xh = (xr[c] - mean) * inv_std[r];
                xhat[r * C + c] = xh;
                y[r * C + c] = gamma[c] * xh + beta[c];
            }
        }
        break;
    }
    case OpKind::Softmax: {
        const TensorT& x = in(0);
        const std::size_t R = x.dim(0), C = x.dim(1);
        for (std::size_t r = 0; r < R; ++r) {
            const Real* xr = x.data().data() + r * C;
            Real* yr = y + r * C;
            const Real mx = *std::max_element(xr, xr + C);
            Real total = 0;
            for (std::size_t c = 0; c < C; ++c) {
                yr[c] = std::exp(xr[c] - mx);
                total += yr[c];
            }
            for (std::size_t c = 0; c < C; ++c) yr[c] /= total;
        }
        break;
    }
    case OpKind::L2Normalize: {
        const TensorT& x = in(0);
        const std::size_t R = x.dim(0), C = x.dim(1);
        node.cache.assign(R, Real(0));
        node.index_cache.assign(R, 0);
        for (std::size_t r = 0; r < R; ++r) {
            const Real* xr = x.data().data() + r * C;
            Real norm = std::sqrt(dot(xr, xr, C));
            Real* yr = y + r * C;
            if (norm == Real(0)) {
                // Degenerate row: perturb every component by 1e-12 before normalizing.
                node.index_cache[r] = 1;
                const Real eps = static_cast<Real>(1e-12);
                norm = std::sqrt(static_cast<Real>(C)) * eps;
                for (std::size_t c = 0; c < C; ++c) yr[c] = (xr[c] + eps) / norm;
            } else {
                for (std::size_t c = 0; c < C; ++c) yr[c] = xr[c] / norm;
            }
            node.cache[r] = norm;
        }
        if (track_branches_) {
            for (std::size_t r = 0; r < R; ++r) mix(node.index_cache[r]);
        }
        break;
    }
    case OpKind::Concat: {
        const std::size_t axis = node.axis;
        std::size_t outer = 1, inner = 1;
        for (std::size_t d = 0; d < axis; ++d) outer *= node.shape[d];
        for (std::size_t d = axis + 1; d < node.shape.size(); ++d) inner *= node.shape[d];
        const std::size_t out_span = node.shape[axis] * inner;
        std::size_t offset = 0;
        for (std::size_t p = 0; p < node.inputs.size(); ++p) {
            const TensorT& x = in(p);
            const std::size_t span = x.dim(axis) * inner;
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy_n(x.data().data() + o * span, span, y + o * out_span + offset);
            }
            offset += span;
        }
        break;
    }
    case OpKind::GatherRows: {
        const TensorT& x = in(0);
        const std::size_t C = x.dim(1);
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
            std::copy_n(x.data().data() + node.indices[i] * C, C, y + i * C);
        }
        break;
    }
    case OpKind::Attention: {
        const TensorT& q = in(0);
        const TensorT& k = in(1);
        const TensorT& v = in(2);
        const std::size_t R = q.dim(0), C = q.dim(1), L = node.seq_len, Hh = node.heads, dh = C / Hh;
        const std::size_t S = R / L;
        const Real sc = Real(1) / std::sqrt(static_cast<Real>(dh));
        node.cache.assign(S * Hh * L * L, Real(0));
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t hd = 0; hd < Hh; ++hd) {
                Real* P = node.cache.data() + (s * Hh + hd) * L * L;
                for (std::size_t i = 0; i < L; ++i) {
                    const Real* qi = q.data().data() + (s * L + i) * C + hd * dh;
                    Real mx = -std::numeric_limits<Real>::infinity();
                    for (std::size_t j = 0; j < L; ++j) {
                        const Real* kj = k.data().data() + (s * L + j) * C + hd * dh;
                        P[i * L + j] = dot(qi, kj, dh) * sc;
                        mx = std::max(mx, P[i * L + j]);
                    }
                    Real total = 0;
                    for (std::size_t j = 0; j < L; ++j) {
                        P[i * L + j] = std::exp(P[i * L + j] - mx);
                        total += P[i * L + j];
                    }
                    for (std::size_t j = 0; j < L; ++j) P[i * L + j] /= total;
                    Real* yi = y + (s * L + i) * C + hd * dh;
                    for (std::size_t j = 0; j < L; ++j) {
                        const Real pij = P[i * L + j];
                        const Real* vj = v.data().data() + (s * L + j) * C + hd * dh;
                        for (std::size_t d = 0; d < dh; ++d) yi[d] += pij * vj[d];
                    }
                }
            }
        }
        break;
    }
    case OpKind::InfoNce: {
        const TensorT& z = in(0);
        const TensorT& queue = node.aux;
        const std::size_t B = node.batch, m = z.dim(1);
        const std::size_t Q = queue.empty() ? 0 : queue.dim(0);
        const std::size_t pool = 2 * B - 2 + Q;
        const std::size_t K = std::min(node.k, pool);
        const Real inv_t = Real(1) / node.scalar;
        // index_cache: per anchor K candidate ids (into z rows 0..2B, then 2B + queue row).
        // cache: per anchor K+1 softmax probabilities (positive first).
        node.index_cache.assign(B * K, 0);
        node.cache.assign(B * (K + 1), Real(0));
        std::vector<std::size_t> cand(pool);
        std::vector<Real> sims(2 * B + Q);
        auto row = [&](std::size_t id) -> const Real* {
            return id < 2 * B ? z.data().data() + id * m : queue.data().data() + (id - 2 * B) * m;
        };
        double total = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            const Real* anchor = row(i);
            std::size_t c = 0;
            for (std::size_t id = 0; id < 2 * B + Q; ++id) {
                if (id == i || id == B + i) continue;
                cand[c++] = id;
                sims[id] = dot(anchor, row(id), m);
            }
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(K), cand.end(),
                              [&](std::size_t a, std::size_t b) {
                                  return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                              });
            const Real pos = dot(anchor, row(B + i), m) * inv_t;
            Real mx = pos;
            for (std::size_t j = 0; j < K; ++j) mx = std::max(mx, sims[cand[j]] * inv_t);
            Real* probs = node.cache.data() + i * (K + 1);
            probs[0] = std::exp(pos - mx);
            Real denom = probs[0];
            for (std::size_t j = 0; j < K; ++j) {
                node.index_cache[i * K + j] = cand[j];
                probs[j + 1] = std::exp(sims[cand[j]] * inv_t - mx);
                denom += probs[j + 1];
            }
            for (std::size_t j = 0; j <= K; ++j) probs[j] /= denom;
            total += static_cast<double>(mx + std::log(denom) - pos);
            if (track_branches_) {
                for (std::size_t j = 0; j < K; ++j) mix(cand[j] + 1000003ULL * i);
            }
        }
        y[0] = static_cast<Real>(total / static_cast<double>(B));
        break;
    }
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
        return;
    }
    node.value = std::move(out);
}

// ---------------------------------------------------------------------------
// Backward

template <typename Real>
typename Tape<Real>::TensorT& Tape<Real>::grad_of(NodeId id) {
    Node& n = nodes_[id.index];
    if (n.grad.shape() != n.shape) n.grad = TensorT(n.shape);
    return n.grad;
}

template <typename Real>
typename Tape<Real>::Gradients Tape<Real>::backpropagate(NodeId loss) {
    Node& ln = at(loss);
    if (shape_size(ln.shape) != 1) {
        throw DimensionError("backpropagate: loss '" + ln.label + "' is not a scalar (shape " +
                             shape_string(ln.shape) + ")");
    }
    if (!evaluated_) throw Error("backpropagate: call evaluate() first");
    for (Node& n : nodes_) n.grad = TensorT();
    grad_of(loss).data()[0] = Real(1);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.op == OpKind::Parameter || n.op == OpKind::Input || n.op == OpKind::Constant) continue;
        backward(n);
    }
    Gradients grads;
    for (Node& n : nodes_) {
        if (n.op == OpKind::Parameter && n.trainable) {
            grads[n.name] = n.grad.empty() ? TensorT(n.shape) : n.grad;
        }
    }
    return grads;
}

template <typename Real>
void Tape<Real>::backward(Node& node) {
    const TensorT& dy = node.grad;
    auto in = [&](std::size_t i) -> const TensorT& { return nodes_[node.inputs[i].index].value; };
    auto wants = [&](std::size_t i) { return nodes_[node.inputs[i].index].requires_grad; };
    auto g = [&](std::size_t i) -> TensorT& { return grad_of(node.inputs[i]); };

    switch (node.op) {
    case OpKind::MatMul: {
        const TensorT& a = in(0);
        const TensorT& b = in(1);
        const std::size_t m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
        if (wants(0)) {
            TensorT& da = g(0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < kk; ++p) {
                    da[i * kk + p] += dot(dy.data().data() + i * nn, b.data().data() + p * nn, nn);
                }
            }
        }
        if (wants(1)) {
            TensorT& db = g(1);
            for (std::size_t i = 0; i < m; ++i) {
                const Real* dyr = dy.data().data() + i * nn;
                for (std::size_t p = 0; p < kk; ++p) {
                    const Real av = a[i * kk + p];
                    if (av == Real(0)) continue;
                    Real* dbr = db.data().data() + p * nn;
                    for (std::size_t j = 0; j < nn; ++j) dbr[j] += av * dyr[j];
                }
            }
        }
        break;
    }
    case OpKind::Add:
        if (wants(0)) {
            TensorT& d = g(0);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        }
        if (wants(1)) {
            TensorT& d = g(1);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        }
        break;
    case OpKind::Sub:
        if (wants(0)) {
            TensorT& d = g(0);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        }
        if (wants(1)) {
            TensorT& d = g(1);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] -= dy[i];
        }
        break;
    case OpKind::Mul:
        if (wants(0)) {
            TensorT& d = g(0);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * in(1)[i];
        }
        if (wants(1)) {
            TensorT& d = g(1);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * in(0)[i];
        }
        break;
    case OpKind::Scale: {
        TensorT& d = g(0);
        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += node.scalar * dy[i];
        break;
    }
    case OpKind::AddRowVector: {
        if (wants(0)) {
            TensorT& d = g(0);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        }
        if (wants(1)) {
            TensorT& d = g(1);
            const std::size_t c = d.size();
            for (std::size_t i = 0; i < dy.size(); ++i) d[i % c] += dy[i];
        }
        break;
    }
    case OpKind::Relu: {
        TensorT& d = g(0);
        const TensorT& x = in(0);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            if (x[i] > Real(0)) d[i] += dy[i];
        }
        break;
    }
    case OpKind::Sigmoid: {
        TensorT& d = g(0);
        const TensorT& s = node.value;
        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * s[i] * (Real(1) - s[i]);
        break;
    }
    case OpKind::LogClamped: {
        TensorT& d = g(0);
        const TensorT& x = in(0);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            if (x[i] > node.scalar) d[i] += dy[i] / x[i];
        }
        break;
    }
    case OpKind::Sum: {
        TensorT& d = g(0);
        for (Real& v : d.data()) v += dy[0];
        break;
    }
    case OpKind::Reshape: {
        TensorT& d = g(0);
        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        break;
    }
    case OpKind::Conv2d: {
        const TensorT& x = in(0);
        const TensorT& w = in(1);
        const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
        const std::size_t OH = node.shape[2], OW = node.shape[3];
        const std::size_t s = node.stride, pad = node.padding;
        const bool pointwise = KH == 1 && KW == 1 && s == 1 && pad == 0;
        TensorT* dx = wants(0) ? &g(0) : nullptr;
        TensorT* dw = wants(1) ? &g(1) : nullptr;
        if (wants(2)) {
            TensorT& db = g(2);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Co; ++co) {
                    const Real* dyp = dy.data().data() + (n * Co + co) * OH * OW;
                    Real acc = 0;
                    for (std::size_t i = 0; i < OH * OW; ++i) acc += dyp[i];
                    db[co] += acc;
                }
            }
        }
        if (!dx && !dw) break;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t co = 0; co < Co; ++co) {
                const Real* dyp = dy.data().data() + (n * Co + co) * OH * OW;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const Real* xp = x.data().data() + (n * Ci + ci) * H * W;
                    const Real* wp = w.data().data() + (co * Ci + ci) * KH * KW;
                    Real* dxp = dx ? dx->data().data() + (n * Ci + ci) * H * W : nullptr;
                    Real* dwp = dw ? dw->data().data() + (co * Ci + ci) * KH * KW : nullptr;
                    if (pointwise) {
                        if (dwp) dwp[0] += dot(dyp, xp, H * W);
                        if (dxp) {
                            const Real wv = wp[0];
                            for (std::size_t i = 0; i < H * W; ++i) dxp[i] += wv * dyp[i];
                        }
                        continue;
                    }
                    for (std::size_t kh = 0; kh < KH; ++kh) {
                        for (std::size_t kw = 0; kw < KW; ++kw) {
                            const Real wv = wp[kh * KW + kw];
                            Real acc = 0;
                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) -
                                                          static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) -
                                                              static_cast<std::ptrdiff_t>(pad);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                    const std::size_t xi =
                                        static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
                                    const Real d = dyp[oh * OW + ow];
                                    acc += d * xp[xi];
                                    if (dxp) dxp[xi] += wv * d;
                                }
                            }
                            if (dwp) dwp[kh * KW + kw] += acc;
                        }
                    }
                }
            }
        }
        break;
    }
    case OpKind::UpsampleBilinear: {
        const TensorT& x = in(0);
        TensorT& dx = g(0);
        const std::size_t NC = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t H = node.shape[2], W = node.shape[3];
        const auto rows = bilinear_taps(h, H);
        const auto cols = bilinear_taps(w, W);
        for (std::size_t p = 0; p < NC; ++p) {
            Real* dxp = dx.data().data() + p * h * w;
            const Real* dyp = dy.data().data() + p * H * W;
            for (std::size_t r = 0; r < H; ++r) {
                const Real fr = static_cast<Real>(rows[r].frac);
                Real* r0 = dxp + rows[r].lo * w;
                Real* r1 = dxp + rows[r].hi * w;
                for (std::size_t c = 0; c < W; ++c) {
                    const Real fc = static_cast<Real>(cols[c].frac);
                    const Real d = dyp[r * W + c];
                    const Real top = d * (Real(1) - fr);
                    const Real bot = d * fr;
                    r0[cols[c].lo] += top * (Real(1) - fc);
                    r0[cols[c].hi] += top * fc;
                    r1[cols[c].lo] += bot * (Real(1) - fc);
                    r1[cols[c].hi] += bot * fc;
                }
            }
        }
        break;
    }
    case OpKind::GlobalAvgPool: {
        TensorT& dx = g(0);
        const std::size_t NC = node.shape[0] * node.shape[1];
        const std::size_t HW = dx.size() / NC;
        const Real inv = Real(1) / static_cast<Real>(HW);
        for (std::size_t p = 0; p < NC; ++p) {
            const Real d = dy[p] * inv;
            Real* dxp = dx.data().data() + p * HW;
            for (std::size_t i = 0; i < HW; ++i) dxp[i] += d;
        }
        break;
    }
    case OpKind::PatchScale: {
        const TensorT& x = in(0);
        const TensorT& wts = in(1);
        const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), P = node.patch;
        const std::size_t pw = W / P, np = (H / P) * pw;
        TensorT* dx = wants(0) ? &g(0) : nullptr;
        TensorT* dw = wants(1) ? &g(1) : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t c = 0; c < W; ++c) {
                    const std::size_t idx = (n * H + r) * W + c;
                    const std::size_t pi = n * np + (r / P) * pw + c / P;
                    if (dx) (*dx)[idx] += dy[idx] * wts[pi];
                    if (dw) (*dw)[pi] += dy[idx] * x[idx];
                }
            }
        }
        break;
    }
    case OpKind::BatchNorm: {
        const TensorT& x = in(0);
        const TensorT& gamma = in(1);
        const std::size_t N = x.dim(0), C = x.dim(1);
        const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
        const std::size_t count = N * inner;
        const Real* xhat = node.cache.data();
        const Real* inv_std = node.cache.data() + x.size();
        TensorT* dx = wants(0) ? &g(0) : nullptr;
        TensorT* dgamma = wants(1) ? &g(1) : nullptr;
        TensorT* dbeta = wants(2) ? &g(2) : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    sum_dy += dy[base + i];
                    sum_dy_xhat += dy[base + i] * xhat[base + i];
                }
            }
            if (dgamma) (*dgamma)[c] += static_cast<Real>(sum_dy_xhat);
            if (dbeta) (*dbeta)[c] += static_cast<Real>(sum_dy);
            if (!dx) continue;
            const Real k = gamma[c] * inv_std[c];
            if (node.bn_mode == BatchNormMode::Train) {
                const Real mean_dy = static_cast<Real>(sum_dy / static_cast<double>(count));
                const Real mean_dy_xhat = static_cast<Real>(sum_dy_xhat / static_cast<double>(count));
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        (*dx)[base + i] += k * (dy[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
                    }
                }
            } else {
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) (*dx)[base + i] += k * dy[base + i];
                }
            }
        }
        break;
    }
    case OpKind::LayerNorm: {
        const TensorT& x = in(0);
        const TensorT& gamma = in(1);
        const std::size_t R = x.dim(0), C = x.dim(1);
        const Real* xhat = node.cache.data();
        const Real* inv_std = node.cache.data() + x.size();
        TensorT* dx = wants(0) ? &g(0) : nullptr;
        TensorT* dgamma = wants(1) ? &g(1) : nullptr;
        TensorT* dbeta = wants(2) ? &g(2) : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
            Real sum_d = 0, sum_d_xhat = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = r * C + c;
                if (dgamma) (*dgamma)[c] += dy[i] * xhat[i];
                if (dbeta) (*dbeta)[c] += dy[i];
                const Real dxh = dy[i] * gamma[c];
                sum_d += dxh;
                sum_d_xhat += dxh * xhat[i];
            }
            if (!dx) continue;
            const Real invc = Real(1) / static_cast<Real>(C);
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = r * C + c;
                const Real dxh = dy[i] * gamma[c];
                (*dx)[i] += inv_std[r] * (dxh - sum_d * invc - xhat[i] * sum_d_xhat * invc);
            }
        }
        break;
    }
    case OpKind::Softmax: {
        TensorT& dx = g(0);
        const TensorT& s = node.value;
        const std::size_t R = s.dim(0), C = s.dim(1);
        for (std::size_t r = 0; r < R; ++r) {
            const Real inner = dot(dy.data().data() + r * C, s.data().data() + r * C, C);
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = r * C + c;
                dx[i] += s[i] * (dy[i] - inner);
            }
        }
        break;
    }
    case OpKind::L2Normalize: {
        TensorT& dx = g(0);
        const TensorT& yv = node.value;
        const std::size_t R = yv.dim(0), C = yv.dim(1);
        for (std::size_t r = 0; r < R; ++r) {
            const Real inner = dot(dy.data().data() + r * C, yv.data().data() + r * C, C);
            const Real inv = Real(1) / node.cache[r];
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = r * C + c;
                dx[i] += (dy[i] - yv[i] * inner) * inv;
            }
        }
        break;
    }
    case OpKind::Concat: {
        const std::size_t axis = node.axis;
        std::size_t outer = 1, inner = 1;
        for (std::size_t d = 0; d < axis; ++d) outer *= node.shape[d];
        for (std::size_t d = axis + 1; d < node.shape.size(); ++d) inner *= node.shape[d];
        const std::size_t out_span = node.shape[axis] * inner;
        std::size_t offset = 0;
        for (std::size_t p = 0; p < node.inputs.size(); ++p) {
            const std::size_t span = nodes_[node.inputs[p].index].shape[axis] * inner;
            if (wants(p)) {
                TensorT& d = g(p);
                for (std::size_t o = 0; o < outer; ++o) {
                    const Real* src = dy.data().data() + o * out_span + offset;
                    Real* dst = d.data().data() + o * span;
                    for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
                }
            }
            offset += span;
        }
        break;
    }
    case OpKind::GatherRows: {
        TensorT& dx = g(0);
        const std::size_t C = node.shape[1];
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
            Real* dst = dx.data().data() + node.indices[i] * C;
            const Real* src = dy.data().data() + i * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
        break;
    }
    case OpKind::Attention: {
        const TensorT& q = in(0);
        const TensorT& k = in(1);
        const TensorT& v = in(2);
        const std::size_t R = q.dim(0), C = q.dim(1), L = node.seq_len, Hh = node.heads, dh = C / Hh;
        const std::size_t S = R / L;
        const Real sc = Real(1) / std::sqrt(static_cast<Real>(dh));
        TensorT* dq = wants(0) ? &g(0) : nullptr;
        TensorT* dk = wants(1) ? &g(1) : nullptr;
        TensorT* dv = wants(2) ? &g(2) : nullptr;
        std::vector<Real> dP(L * L);
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t hd = 0; hd < Hh; ++hd) {
                const Real* P = node.cache.data() + (s * Hh + hd) * L * L;
                auto off = [&](std::size_t row) { return (s * L + row) * C + hd * dh; };
                for (std::size_t i = 0; i < L; ++i) {
                    for (std::size_t j = 0; j < L; ++j) {
                        dP[i * L + j] = dot(dy.data().data() + off(i), v.data().data() + off(j), dh);
                        if (dv) {
                            const Real pij = P[i * L + j];
                            Real* dvj = dv->data().data() + off(j);
                            const Real* dyi = dy.data().data() + off(i);
                            for (std::size_t d = 0; d < dh; ++d) dvj[d] += pij * dyi[d];
                        }
                    }
                }
                for (std::size_t i = 0; i < L; ++i) {
                    Real inner = 0;
                    for (std::size_t j = 0; j < L; ++j) inner += dP[i * L + j] * P[i * L + j];
                    for (std::size_t j = 0; j < L; ++j) {
                        const Real ds = P[i * L + j] * (dP[i * L + j] - inner) * sc;
                        if (ds == Real(0)) continue;
                        if (dq) {
                            Real* dqi = dq->data().data() + off(i);
                            const Real* kj = k.data().data() + off(j);
                            for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
                        }
                        if (dk) {
                            Real* dkj = dk->data().data() + off(j);
                            const Real* qi = q.data().data() + off(i);
                            for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
        break;
    }
    case OpKind::InfoNce: {
        const TensorT& z = in(0);
        TensorT& dz = g(0);
        const std::size_t B = node.batch, m = z.dim(1);
        const std::size_t K = node.index_cache.size() / B;
        const Real scale_factor = dy[0] / (static_cast<Real>(B) * node.scalar);
        for (std::size_t i = 0; i < B; ++i) {
            const Real* probs = node.cache.data() + i * (K + 1);
            const Real* anchor = z.data().data() + i * m;
            Real* danchor = dz.data().data() + i * m;
            const Real gpos = (probs[0] - Real(1)) * scale_factor;
            const Real* positive = z.data().data() + (B + i) * m;
            Real* dpositive = dz.data().data() + (B + i) * m;
            for (std::size_t d = 0; d < m; ++d) {
                danchor[d] += gpos * positive[d];
                dpositive[d] += gpos * anchor[d];
            }
            for (std::size_t j = 0; j < K; ++j) {
                const std::size_t id = node.index_cache[i * K + j];
                const Real gneg = probs[j + 1] * scale_factor;
                const Real* other =
                    id < 2 * B ? z.data().data() + id * m : node.aux.data().data() + (id - 2 * B) * m;
                for (std::size_t d = 0; d < m; ++d) danchor[d] += gneg * other[d];
                if (id < 2 * B) {
                    Real* dother = dz.data().data() + id * m;
                    for (std::size_t d = 0; d < m; ++d) dother[d] += gneg * anchor[d];
                }
            }
        }
        break;
    }
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
        break;
    }
}

template class Tape<float>;
template class Tape<double>;

} // namespace trajprior
