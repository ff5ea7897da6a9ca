#include "bonepipe/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "bonepipe/rng.hpp"

namespace bonepipe::nn {

LayerSpec LayerSpec::conv2d(int out_channels, int kernel, int stride, int padding) {
    LayerSpec s;
    s.kind = Kind::conv;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}
LayerSpec LayerSpec::batchnorm2d(double eps, double momentum) {
    LayerSpec s;
    s.kind = Kind::batchnorm;
    s.eps = eps;
    s.momentum = momentum;
    return s;
}
LayerSpec LayerSpec::relu_() {
    LayerSpec s;
    s.kind = Kind::relu;
    return s;
}
LayerSpec LayerSpec::maxpool(int k, int stride, int pad) {
    LayerSpec s;
    s.kind = Kind::maxpool;
    s.pool_k = k;
    s.pool_stride = stride;
    s.pool_pad = pad;
    return s;
}
LayerSpec LayerSpec::avgpool(int k, int stride) {
    LayerSpec s;
    s.kind = Kind::avgpool;
    s.pool_k = k;
    s.pool_stride = stride;
    return s;
}
LayerSpec LayerSpec::global_avgpool() {
    LayerSpec s;
    s.kind = Kind::avgpool;
    s.pool_k = 0;  // resolved to the spatial extent at build time
    s.pool_stride = 1;
    return s;
}
LayerSpec LayerSpec::fullyconnected(int out_dim) {
    LayerSpec s;
    s.kind = Kind::fullyconnected;
    s.out_dim = out_dim;
    return s;
}
LayerSpec LayerSpec::sigmoid_() {
    LayerSpec s;
    s.kind = Kind::sigmoid;
    return s;
}
LayerSpec LayerSpec::softmax_() {
    LayerSpec s;
    s.kind = Kind::softmax;
    return s;
}
LayerSpec LayerSpec::upsample(int factor) {
    LayerSpec s;
    s.kind = Kind::upsample;
    s.factor = factor;
    return s;
}

const char* kind_name(LayerSpec::Kind k) {
    switch (k) {
        case LayerSpec::Kind::conv: return "conv";
        case LayerSpec::Kind::batchnorm: return "batchnorm";
        case LayerSpec::Kind::relu: return "relu";
        case LayerSpec::Kind::maxpool: return "maxpool";
        case LayerSpec::Kind::avgpool: return "avgpool";
        case LayerSpec::Kind::fullyconnected: return "fullyconnected";
        case LayerSpec::Kind::sigmoid: return "sigmoid";
        case LayerSpec::Kind::softmax: return "softmax";
        case LayerSpec::Kind::upsample: return "upsample";
    }
    return "?";
}

void he_uniform_fill(std::vector<double>& values, int fan_in, std::uint64_t seed) {
    Rng rng(seed);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : values) v = rng.uniform(-limit, limit);
}

namespace {

struct Geometry {
    int c, h, w;
};

}  // namespace

Network::Network(std::vector<NetItem> items, int in_channels, int in_h, int in_w,
                 std::uint64_t seed)
    : items_(std::move(items)), in_c_(in_channels), in_h_(in_h), in_w_(in_w) {
    Geometry g{in_channels, in_h, in_w};
    std::uint64_t param_counter = 0;

    auto add_conv = [&](int in_c, int out_c, int kernel) {
        Tensor w = Tensor::zeros({out_c, in_c, kernel, kernel}, true);
        he_uniform_fill(w.values(), in_c * kernel * kernel, mix_seed(seed, param_counter++));
        params_.push_back(w);
        params_.push_back(Tensor::zeros({out_c}, true));  // bias
        param_counter++;
    };
    auto add_bn = [&](int c) {
        params_.push_back(Tensor::full({c}, 1.0, true));  // gamma
        params_.push_back(Tensor::zeros({c}, true));      // beta
        param_counter += 2;
        buffers_.emplace_back(c, 0.0);  // running mean
        buffers_.emplace_back(c, 1.0);  // running var
    };

    for (const NetItem& item : items_) {
        ItemPlan plan;
        plan.first_param = static_cast<int>(params_.size());
        plan.first_buffer = static_cast<int>(buffers_.size());
        plan.in_c = g.c;
        plan.in_h = g.h;
        plan.in_w = g.w;

        if (const auto* spec = std::get_if<LayerSpec>(&item)) {
            switch (spec->kind) {
                case LayerSpec::Kind::conv: {
                    if (spec->out_channels < 1) throw std::invalid_argument("conv: out_channels");
                    add_conv(g.c, spec->out_channels, spec->kernel);
                    g.c = spec->out_channels;
                    g.h = (g.h + 2 * spec->padding - spec->kernel) / spec->stride + 1;
                    g.w = (g.w + 2 * spec->padding - spec->kernel) / spec->stride + 1;
                    break;
                }
                case LayerSpec::Kind::batchnorm:
                    add_bn(g.c);
                    break;
                case LayerSpec::Kind::relu:
                case LayerSpec::Kind::sigmoid:
                    break;
                case LayerSpec::Kind::softmax:
                    if (g.h != 1 || g.w != 1)
                        throw std::invalid_argument("softmax: expected flattened input");
                    break;
                case LayerSpec::Kind::maxpool: {
                    g.h = (g.h + 2 * spec->pool_pad - spec->pool_k) / spec->pool_stride + 1;
                    g.w = (g.w + 2 * spec->pool_pad - spec->pool_k) / spec->pool_stride + 1;
                    break;
                }
                case LayerSpec::Kind::avgpool: {
                    int k = spec->pool_k;
                    if (k == 0) {  // global
                        if (g.w != g.h)
                            throw std::invalid_argument("global avgpool: non-square input");
                        k = g.h;
                        plan.resolved_pool_k = k;
                        g.h = 1;
                        g.w = 1;
                    } else {
                        plan.resolved_pool_k = k;
                        g.h = (g.h - k) / spec->pool_stride + 1;
                        g.w = (g.w - k) / spec->pool_stride + 1;
                    }
                    break;
                }
                case LayerSpec::Kind::fullyconnected: {
                    if (spec->out_dim < 1) throw std::invalid_argument("fullyconnected: out_dim");
                    const int in_dim = g.c * g.h * g.w;
                    Tensor w = Tensor::zeros({in_dim, spec->out_dim}, true);
                    he_uniform_fill(w.values(), in_dim, mix_seed(seed, param_counter++));
                    params_.push_back(w);
                    params_.push_back(Tensor::zeros({spec->out_dim}, true));
                    param_counter++;
                    g.c = spec->out_dim;
                    g.h = 1;
                    g.w = 1;
                    break;
                }
                case LayerSpec::Kind::upsample:
                    g.h *= spec->factor;
                    g.w *= spec->factor;
                    break;
            }
            if (g.h < 1 || g.w < 1)
                throw std::invalid_argument(std::string("layer '") + kind_name(spec->kind) +
                                            "' produces empty output");
        } else {
            const auto& db = std::get<DenseBlockSpec>(item);
            if (db.n_conv_blocks < 1 || db.growth < 1)
                throw std::invalid_argument("dense block: bad spec");
            int c = g.c;
            for (int b = 0; b < db.n_conv_blocks; ++b) {
                const int bottleneck = 4 * db.growth;
                add_bn(c);
                add_conv(c, bottleneck, 1);
                add_bn(bottleneck);
                add_conv(bottleneck, db.growth, 3);
                c += db.growth;
            }
            g.c = c;  // input channels + n_conv_blocks * growth
        }

        plan.out_c = g.c;
        plan.out_h = g.h;
        plan.out_w = g.w;
        plans_.push_back(plan);
    }
}

Tensor Network::apply_item(std::size_t idx, const Tensor& x, bool training) const {
    const NetItem& item = items_[idx];
    const ItemPlan& plan = plans_[idx];
    auto& self = const_cast<Network&>(*this);

    if (const auto* spec = std::get_if<LayerSpec>(&item)) {
        switch (spec->kind) {
            case LayerSpec::Kind::conv:
                return conv2d(x, params_[plan.first_param], params_[plan.first_param + 1],
                              spec->stride, spec->padding);
            case LayerSpec::Kind::batchnorm:
                return batchnorm2d(x, params_[plan.first_param], params_[plan.first_param + 1],
                                   self.buffers_[plan.first_buffer],
                                   self.buffers_[plan.first_buffer + 1], training, spec->momentum,
                                   spec->eps);
            case LayerSpec::Kind::relu:
                return relu(x);
            case LayerSpec::Kind::sigmoid:
                return sigmoid(x);
            case LayerSpec::Kind::softmax: {
                Tensor flat = reshape(x, {x.shape()[0], plan.in_c});
                Tensor sm = softmax_rows(flat);
                return reshape(sm, {x.shape()[0], plan.in_c, 1, 1});
            }
            case LayerSpec::Kind::maxpool:
                return maxpool2d(x, spec->pool_k, spec->pool_stride, spec->pool_pad);
            case LayerSpec::Kind::avgpool:
                return avgpool2d(x, plan.resolved_pool_k, spec->pool_stride);
            case LayerSpec::Kind::fullyconnected: {
                const int n = x.shape()[0];
                Tensor flat = reshape(x, {n, plan.in_c * plan.in_h * plan.in_w});
                Tensor out = matmul(flat, params_[plan.first_param]);
                // broadcast bias by rows
                const auto& b = params_[plan.first_param + 1];
                Tensor brow = reshape(b, {1, spec->out_dim});
                std::vector<double> tiled(static_cast<std::size_t>(n) * spec->out_dim);
                for (int i = 0; i < n; ++i)
                    std::copy(b.values().begin(), b.values().end(),
                              tiled.begin() + static_cast<std::size_t>(i) * spec->out_dim);
                Tensor btile = Tensor::from({n, spec->out_dim}, std::move(tiled));
                // route gradient back to the bias parameter
                if (b.requires_grad()) {
                    auto pb = b.node();
                    auto pt = btile.node();
                    pt->requires_grad = true;
                    pt->parents = {pb};
                    const int od = spec->out_dim;
                    pt->backward_fn = [pb, n, od](TensorNode& selfn) {
                        pb->ensure_grad();
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < od; ++j)
                                pb->grad[j] += selfn.grad[static_cast<std::size_t>(i) * od + j];
                    };
                }
                Tensor res = add(out, btile);
                return reshape(res, {n, spec->out_dim, 1, 1});
            }
            case LayerSpec::Kind::upsample:
                return upsample_nearest2d(x, spec->factor);
        }
        throw std::logic_error("unreachable layer kind");
    }

    const auto& db = std::get<DenseBlockSpec>(item);
    int p = plan.first_param;
    int buf = plan.first_buffer;
    Tensor features = x;
    for (int b = 0; b < db.n_conv_blocks; ++b) {
        Tensor h = batchnorm2d(features, params_[p], params_[p + 1], self.buffers_[buf],
                               self.buffers_[buf + 1], training, 0.1, 1e-5);
        h = relu(h);
        h = conv2d(h, params_[p + 2], params_[p + 3], 1, 0);  // 1x1 bottleneck
        h = batchnorm2d(h, params_[p + 4], params_[p + 5], self.buffers_[buf + 2],
                        self.buffers_[buf + 3], training, 0.1, 1e-5);
        h = relu(h);
        h = conv2d(h, params_[p + 6], params_[p + 7], 1, 1);  // 3x3, growth channels
        features = concat_channels({features, h});
        p += 8;
        buf += 4;
    }
    return features;
}

Tensor Network::forward(const Tensor& x, bool training) const {
    std::vector<Tensor> scratch;
    return forward_collect(x, training, scratch);
}

Tensor Network::forward_collect(const Tensor& x, bool training,
                                std::vector<Tensor>& item_outputs) const {
    if (x.shape().size() != 4 || x.shape()[1] != in_c_ || x.shape()[2] != in_h_ ||
        x.shape()[3] != in_w_)
        throw std::invalid_argument("forward: input shape " + shape_str(x.shape()) +
                                    " does not match network input [N," +
                                    std::to_string(in_c_) + "," + std::to_string(in_h_) + "," +
                                    std::to_string(in_w_) + "]");
    item_outputs.clear();
    Tensor cur = x;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        try {
            cur = apply_item(i, cur, training);
        } catch (const std::exception& e) {
            throw std::runtime_error("layer " + std::to_string(i) + " (" +
                                     (std::holds_alternative<LayerSpec>(items_[i])
                                          ? kind_name(std::get<LayerSpec>(items_[i]).kind)
                                          : "dense_block") +
                                     "): " + e.what());
        }
        item_outputs.push_back(cur);
    }
    return cur;
}

int Network::head_weight_param() const {
    for (std::size_t i = items_.size(); i-- > 0;) {
        if (const auto* spec = std::get_if<LayerSpec>(&items_[i])) {
            if (spec->kind == LayerSpec::Kind::sigmoid || spec->kind == LayerSpec::Kind::softmax)
                continue;
            if (spec->kind == LayerSpec::Kind::fullyconnected) return plans_[i].first_param;
        }
        break;
    }
    return -1;
}

}  // namespace bonepipe::nn
