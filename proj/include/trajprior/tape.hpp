#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trajprior/tensor.hpp"

namespace trajprior {

struct NodeId {
    std::uint32_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

enum class BatchNormMode { Train, Inference };

struct BatchNormSettings {
    double momentum = 0.1;
    double epsilon = 1e-5;
};

enum class OpKind {
    Input,
    Parameter,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVector,
    Conv2d,
    UpsampleBilinear,
    BatchNorm,
    LayerNorm,
    Relu,
    Sigmoid,
    Softmax,
    GlobalAvgPool,
    Concat,
    L2Normalize,
    Attention,
    GatherRows,
    PatchScale,
    Sum,
    LogClamped,
    InfoNce,
    Reshape,
};

const char* op_name(OpKind op) noexcept;

/// Static computation graph over dense tensors with reverse-mode
/// differentiation. Nodes are appended in topological order; shapes are
/// checked when a node is added. `evaluate` runs the forward pass for the
/// current leaf values and `backpropagate` returns d(loss)/d(parameter) for
/// every trainable leaf.
template <typename Real>
class Tape {
  public:
    using TensorT = BasicTensor<Real>;
    using Gradients = std::map<std::string, TensorT>;

    // Leaves.
    NodeId input(const std::string& name, Shape shape);
    NodeId constant(TensorT value, std::string label = {});
    NodeId parameter(const std::string& name, TensorT value, bool trainable = true);

    // Linear algebra and elementwise.
    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, Real factor);
    NodeId add_row_vector(NodeId x, NodeId bias);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId log_clamped(NodeId x, Real floor);
    NodeId sum(NodeId x);
    NodeId reshape(NodeId x, Shape shape);

    // Image ops on N x C x H x W.
    NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t padding);
    NodeId upsample_bilinear(NodeId x, std::size_t out_h, std::size_t out_w);
    NodeId global_avg_pool(NodeId x);
    /// Scales each P x P patch of an N x 1 x H x W image by weights[n, patch].
    NodeId patch_scale(NodeId image, NodeId weights, std::size_t patch);

    // Normalization.
    /// Per-channel batch norm over N (and H, W for rank-4 input). The running
    /// statistics are non-trainable leaves updated in place in Train mode
    /// while running-stat tracking is enabled.
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                      BatchNormMode mode, BatchNormSettings settings = {});
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, Real epsilon = Real(1e-5));
    NodeId softmax(NodeId x);
    NodeId l2_normalize(NodeId x);

    // Structural.
    NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
    NodeId gather_rows(NodeId x, std::vector<std::size_t> rows);

    /// Scaled dot-product multi-head self-attention over consecutive blocks
    /// of `seq_len` rows of q, k, v (each rows x C, C divisible by heads).
    NodeId attention(NodeId q, NodeId k, NodeId v, std::size_t heads, std::size_t seq_len);

    /// Mean InfoNCE over a batch. Rows [0, batch) of z are anchors, rows
    /// [batch, 2*batch) their positives. Negatives for anchor i are every
    /// other row of z except i and its positive, plus the rows of `queue`;
    /// only the `hard_negatives` most similar are kept (ties: lowest index).
    NodeId info_nce(NodeId z, std::size_t batch, TensorT queue, std::size_t hard_negatives,
                    Real temperature);

    void set_label(NodeId node, std::string label);
    const std::string& label(NodeId node) const;
    void mark_output(const std::string& name, NodeId node);

    /// Runs the forward pass. Every Input leaf must be supplied with its
    /// declared shape. Returns the marked outputs.
    std::map<std::string, TensorT> evaluate(const std::map<std::string, TensorT>& inputs = {});

    /// Reverse pass from a scalar node. Returns a gradient for every
    /// trainable parameter (zero where the loss does not depend on it).
    Gradients backpropagate(NodeId loss);

    const TensorT& value(NodeId node) const;
    const Shape& shape(NodeId node) const;
    OpKind op(NodeId node) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    NodeId leaf(const std::string& name) const;
    bool has_leaf(const std::string& name) const { return leaves_.count(name) != 0; }
    TensorT& parameter_value(const std::string& name);
    std::vector<std::string> parameter_names(bool trainable_only = true) const;

    /// True when `node` is reachable from `source` through op inputs.
    bool depends_on(NodeId node, NodeId source) const;

    void set_track_running_stats(bool on) noexcept { track_running_stats_ = on; }
    bool track_running_stats() const noexcept { return track_running_stats_; }

    /// When enabled, evaluate() hashes every piecewise decision (ReLU signs,
    /// log clamping, hard-negative selections) into branch_signature().
    void set_track_branches(bool on) noexcept { track_branches_ = on; }
    std::uint64_t branch_signature() const noexcept { return signature_; }

  private:
    struct Node {
        OpKind op = OpKind::Constant;
        std::string label;
        std::string name;
        std::vector<NodeId> inputs;
        Shape shape;
        bool trainable = false;
        bool requires_grad = false;
        // Attributes.
        std::size_t stride = 0, padding = 0, heads = 0, seq_len = 0, patch = 0, axis = 0, batch = 0, k = 0;
        Real scalar = 0;
        BatchNormMode bn_mode = BatchNormMode::Inference;
        BatchNormSettings bn;
        std::vector<std::size_t> indices;
        TensorT aux;
        // State.
        TensorT value;
        TensorT grad;
        std::vector<Real> cache;
        std::vector<std::size_t> index_cache;
    };

    NodeId push(Node node);
    Node& at(NodeId id);
    const Node& at(NodeId id) const;
    [[noreturn]] void fail(const Node& node, const std::string& what) const;
    void forward(Node& node);
    void backward(Node& node);
    TensorT& grad_of(NodeId id);
    void mix(std::uint64_t v) noexcept;

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> leaves_;
    std::vector<std::pair<std::string, NodeId>> outputs_;
    bool evaluated_ = false;
    bool track_running_stats_ = true;
    bool track_branches_ = false;
    std::uint64_t signature_ = 0;
};

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace trajprior
