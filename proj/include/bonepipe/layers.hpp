#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "bonepipe/tensor.hpp"

namespace bonepipe::nn {

struct LayerSpec {
    enum class Kind { conv, batchnorm, relu, maxpool, avgpool, fullyconnected, sigmoid, softmax, upsample };
    Kind kind = Kind::relu;
    // conv
    int kernel = 3;
    int stride = 1;
    int padding = 0;
    int out_channels = 0;
    // batchnorm
    double eps = 1e-5;
    double momentum = 0.1;
    // pooling (avgpool kernel 0 means global: kernel = spatial extent at build time)
    int pool_k = 2;
    int pool_stride = 2;
    int pool_pad = 0;
    // fullyconnected
    int out_dim = 0;
    // upsample
    int factor = 2;

    static LayerSpec conv2d(int out_channels, int kernel, int stride = 1, int padding = 0);
    static LayerSpec batchnorm2d(double eps = 1e-5, double momentum = 0.1);
    static LayerSpec relu_();
    static LayerSpec maxpool(int k, int stride, int pad = 0);
    static LayerSpec avgpool(int k, int stride);
    static LayerSpec global_avgpool();  // avgpool over the full spatial extent
    static LayerSpec fullyconnected(int out_dim);
    static LayerSpec sigmoid_();
    static LayerSpec softmax_();
    static LayerSpec upsample(int factor);
};

const char* kind_name(LayerSpec::Kind k);

// Densely connected group: each conv block sees the concatenation of the
// block input and every previous block output. A conv block is
// BN - ReLU - 1x1 conv (4*growth) - BN - ReLU - 3x3 conv (growth).
struct DenseBlockSpec {
    int n_conv_blocks = 4;
    int growth = 8;
};

using NetItem = std::variant<LayerSpec, DenseBlockSpec>;

// A network instance: the item list plus instantiated parameters and
// batchnorm running-stat buffers. Parameter layout is fixed by the item
// list and input geometry, which is what the checkpoint format serializes.
class Network {
public:
    Network() = default;
    Network(std::vector<NetItem> items, int in_channels, int in_h, int in_w, std::uint64_t seed);

    // training=true uses batch statistics and updates running stats.
    Tensor forward(const Tensor& x, bool training) const;

    // Also records the output of every item (after the item is applied);
    // used by CAM to reach the feature maps entering the global pool.
    Tensor forward_collect(const Tensor& x, bool training, std::vector<Tensor>& item_outputs) const;

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    std::vector<std::vector<double>>& buffers() { return buffers_; }
    const std::vector<std::vector<double>>& buffers() const { return buffers_; }
    const std::vector<NetItem>& items() const { return items_; }
    int in_channels() const { return in_c_; }
    int in_height() const { return in_h_; }
    int in_width() const { return in_w_; }

    // Index into parameters() of the weight of the final fully-connected
    // layer, or -1 if the network does not end with one.
    int head_weight_param() const;

private:
    friend struct NetworkAccess;
    std::vector<NetItem> items_;
    int in_c_ = 0, in_h_ = 0, in_w_ = 0;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> buffers_;

    // per-item bookkeeping built during construction
    struct ItemPlan {
        int first_param = 0;   // index into params_
        int first_buffer = 0;  // index into buffers_
        int in_c = 0, in_h = 0, in_w = 0;
        int out_c = 0, out_h = 0, out_w = 0;
        int resolved_pool_k = 0;  // avgpool with global kernel
    };
    std::vector<ItemPlan> plans_;

    Tensor apply_item(std::size_t idx, const Tensor& x, bool training) const;
};

// He-uniform fan-in initialization for conv / fully-connected weights.
void he_uniform_fill(std::vector<double>& values, int fan_in, std::uint64_t seed);

}  // namespace bonepipe::nn
