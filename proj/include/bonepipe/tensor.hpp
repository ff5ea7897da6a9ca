#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace bonepipe::nn {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated on demand, same length as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // propagates this->grad into parents

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

// Reverse-mode differentiable N-D tensor with shared-node value semantics:
// copies alias the same storage, ops build a fresh graph per forward pass.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }
    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    double item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return node_->values[0];
    }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    // Reverse-mode accumulation from a scalar loss. Gradients are added into
    // existing .grad buffers of reachable nodes (zero them between steps).
    void backward() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor pow_const(const Tensor& a, double exponent);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- reductions / shape ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// ---- linear algebra / conv ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [N,K] x [K,M]
Tensor add_bias_rows(const Tensor& a, const Tensor& bias);  // [N,M] + [M] per row

// x: [N,C,H,W], w: [OC,C,KH,KW], bias: [OC] (pass undefined Tensor for none)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);

Tensor maxpool2d(const Tensor& x, int k, int stride, int padding = 0);
Tensor avgpool2d(const Tensor& x, int k, int stride);
Tensor upsample_nearest2d(const Tensor& x, int factor);
Tensor concat_channels(const std::vector<Tensor>& xs);  // along dim 1 of [N,C,H,W]

// Spatially flipped, in/out-channel-swapped view of a conv kernel; used for
// tied encoder/decoder weights.
Tensor transpose_kernel(const Tensor& w);

// Batch normalization over [N,C,H,W]. In training mode batch statistics are
// used and running stats (plain buffers) are updated in place with
// r = (1 - momentum) * r + momentum * batch. Inference uses running stats.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   bool training, double momentum, double eps);

// ---- heads / losses ----
Tensor softmax_rows(const Tensor& logits);  // [N,C]

// Mean over rows of -sum_j y_j log softmax(logits)_j, log-sum-exp stabilized.
// labels must be one-hot rows.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot_labels);

// Mean over all entries of -[y log p + (1-y) log(1-p)], p clamped at 1e-7.
Tensor binary_cross_entropy(const Tensor& probs, const Tensor& labels);

}  // namespace bonepipe::nn
