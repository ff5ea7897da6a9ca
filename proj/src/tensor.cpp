#include "bonepipe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace bonepipe::nn {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d < 1) throw std::invalid_argument("shape dims must be >= 1");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream ss;
    ss << "[";
    for (std::size_t i = 0; i < s.size(); ++i) ss << (i ? "," : "") << s[i];
    ss << "]";
    return ss.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
        throw std::invalid_argument("Tensor::from: values length does not match shape");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

void Tensor::backward() const {
    if (!node_) throw std::invalid_argument("backward: undefined tensor");
    if (numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!node_->requires_grad)
        throw std::invalid_argument("backward: loss does not require grad (no forward recorded)");

    // Iterative post-order DFS for the topological order.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [cur, idx] = stack.back();
        if (idx < cur->parents.size()) {
            TensorNode* p = cur->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(cur);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

namespace {

Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<std::shared_ptr<TensorNode>> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->values[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->values[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / b.values()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] / pb->values[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] -= self.grad[i] * pa->values[i] / (pb->values[i] * pb->values[i]);
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + s;
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa, s](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * s;
    });
}

Tensor pow_const(const Tensor& a, double exponent) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::pow(a.values()[i], exponent);
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa, exponent](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * exponent * std::pow(pa->values[i], exponent - 1.0);
    });
}

Tensor exp_t(const Tensor& a) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * self.values[i];
    });
}

Tensor log_t(const Tensor& a) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.values()[i]);
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] / pa->values[i];
    });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (pa->values[i] > 0.0) pa->grad[i] += self.grad[i];
    });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a.values()[i]));
    auto pa = a.node();
    return make_op(a.shape(), std::move(v), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * self.values[i] * (1.0 - self.values[i]);
    });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    auto pa = a.node();
    return make_op({1}, {acc}, {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        const double g = self.grad[0];
        for (double& gi : pa->grad) gi += g;
    });
}

Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    auto pa = a.node();
    return make_op({1}, {acc / n}, {pa}, [pa, n](TensorNode& self) {
        pa->ensure_grad();
        const double g = self.grad[0] / n;
        for (double& gi : pa->grad) gi += g;
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    auto pa = a.node();
    return make_op(std::move(shape), a.values(), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    std::vector<double> v(static_cast<std::size_t>(n) * m, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += av[i * k + t] * bv[t * m + j];
            v[static_cast<std::size_t>(i) * m + j] = acc;
        }
    auto pa = a.node(), pb = b.node();
    return make_op({n, m}, std::move(v), {pa, pb}, [pa, pb, n, k, m](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j)
                        acc += self.grad[static_cast<std::size_t>(i) * m + j] * pb->values[t * m + j];
                    pa->grad[static_cast<std::size_t>(i) * k + t] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i)
                        acc += pa->values[i * k + t] * self.grad[static_cast<std::size_t>(i) * m + j];
                    pb->grad[static_cast<std::size_t>(t) * m + j] += acc;
                }
        }
    });
}

namespace {

struct ConvDims {
    int n, ic, h, w, oc, kh, kw, oh, ow, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw std::invalid_argument("conv2d: expected 4-D input and kernel");
    if (x.shape()[1] != w.shape()[1])
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    ConvDims d;
    d.n = x.shape()[0];
    d.ic = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.oc = w.shape()[0];
    d.kh = w.shape()[2];
    d.kw = w.shape()[3];
    d.stride = stride;
    d.pad = padding;
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
    if (d.oh < 1 || d.ow < 1)
        throw std::invalid_argument("conv2d: output would be empty for input " +
                                    shape_str(x.shape()));
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    const ConvDims d = conv_dims(x, w, stride, padding);
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != d.oc))
        throw std::invalid_argument("conv2d: bias must be [out_channels]");

    std::vector<double> out(static_cast<std::size_t>(d.n) * d.oc * d.oh * d.ow, 0.0);
    const auto& xv = x.values();
    const auto& wv = w.values();
    const double* bv = bias.defined() ? bias.values().data() : nullptr;

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int oc = 0; oc < d.oc; ++oc) {
            const std::size_t obase = ((static_cast<std::size_t>(n) * d.oc + oc) * d.oh) * d.ow;
            for (int oy = 0; oy < d.oh; ++oy) {
                for (int ox = 0; ox < d.ow; ++ox) {
                    double acc = bv ? bv[oc] : 0.0;
                    for (int ic = 0; ic < d.ic; ++ic) {
                        const std::size_t xbase =
                            (static_cast<std::size_t>(n) * d.ic + ic) * d.h;
                        const std::size_t wbase =
                            (static_cast<std::size_t>(oc) * d.ic + ic) * d.kh;
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int iy = oy * d.stride - d.pad + ky;
                            if (iy < 0 || iy >= d.h) continue;
                            const std::size_t xrow = (xbase + iy) * d.w;
                            const std::size_t wrow = (wbase + ky) * d.kw;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int ix = ox * d.stride - d.pad + kx;
                                if (ix < 0 || ix >= d.w) continue;
                                acc += xv[xrow + ix] * wv[wrow + kx];
                            }
                        }
                    }
                    out[obase + static_cast<std::size_t>(oy) * d.ow + ox] = acc;
                }
            }
        }
    }

    auto px = x.node(), pw = w.node();
    auto pbias = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode>> parents{px, pw};
    if (pbias) parents.push_back(pbias);

    return make_op({d.n, d.oc, d.oh, d.ow}, std::move(out), std::move(parents),
                   [px, pw, pbias, d](TensorNode& self) {
        const auto& g = self.grad;
        if (px->requires_grad) {
            px->ensure_grad();
            auto& gx = px->grad;
#pragma omp parallel for collapse(2) schedule(static)
            for (int n = 0; n < d.n; ++n) {
                for (int ic = 0; ic < d.ic; ++ic) {
                    for (int iy = 0; iy < d.h; ++iy) {
                        for (int ix = 0; ix < d.w; ++ix) {
                            double acc = 0.0;
                            for (int oc = 0; oc < d.oc; ++oc) {
                                const std::size_t gbase =
                                    (static_cast<std::size_t>(n) * d.oc + oc) * d.oh;
                                const std::size_t wbase =
                                    (static_cast<std::size_t>(oc) * d.ic + ic) * d.kh;
                                for (int ky = 0; ky < d.kh; ++ky) {
                                    const int num_y = iy + d.pad - ky;
                                    if (num_y < 0 || num_y % d.stride) continue;
                                    const int oy = num_y / d.stride;
                                    if (oy >= d.oh) continue;
                                    for (int kx = 0; kx < d.kw; ++kx) {
                                        const int num_x = ix + d.pad - kx;
                                        if (num_x < 0 || num_x % d.stride) continue;
                                        const int ox = num_x / d.stride;
                                        if (ox >= d.ow) continue;
                                        acc += pw->values[(wbase + ky) * d.kw + kx] *
                                               g[(gbase + oy) * d.ow + ox];
                                    }
                                }
                            }
                            gx[((static_cast<std::size_t>(n) * d.ic + ic) * d.h + iy) * d.w +
                               ix] += acc;
                        }
                    }
                }
            }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            auto& gw = pw->grad;
#pragma omp parallel for collapse(2) schedule(static)
            for (int oc = 0; oc < d.oc; ++oc) {
                for (int ic = 0; ic < d.ic; ++ic) {
                    for (int ky = 0; ky < d.kh; ++ky) {
                        for (int kx = 0; kx < d.kw; ++kx) {
                            double acc = 0.0;
                            for (int n = 0; n < d.n; ++n) {
                                const std::size_t gbase =
                                    (static_cast<std::size_t>(n) * d.oc + oc) * d.oh;
                                const std::size_t xbase =
                                    (static_cast<std::size_t>(n) * d.ic + ic) * d.h;
                                for (int oy = 0; oy < d.oh; ++oy) {
                                    const int iy = oy * d.stride - d.pad + ky;
                                    if (iy < 0 || iy >= d.h) continue;
                                    for (int ox = 0; ox < d.ow; ++ox) {
                                        const int ix = ox * d.stride - d.pad + kx;
                                        if (ix < 0 || ix >= d.w) continue;
                                        acc += px->values[(xbase + iy) * d.w + ix] *
                                               g[(gbase + oy) * d.ow + ox];
                                    }
                                }
                            }
                            gw[((static_cast<std::size_t>(oc) * d.ic + ic) * d.kh + ky) * d.kw +
                               kx] += acc;
                        }
                    }
                }
            }
        }
        if (pbias && pbias->requires_grad) {
            pbias->ensure_grad();
            for (int oc = 0; oc < d.oc; ++oc) {
                double acc = 0.0;
                for (int n = 0; n < d.n; ++n) {
                    const std::size_t gbase = (static_cast<std::size_t>(n) * d.oc + oc) * d.oh;
                    for (int i = 0; i < d.oh * d.ow; ++i) acc += g[gbase * d.ow + i];
                }
                pbias->grad[oc] += acc;
            }
        }
    });
}

namespace {

struct PoolDims {
    int n, c, h, w, k, stride, pad, oh, ow;
};

PoolDims pool_dims(const Tensor& x, int k, int stride, int pad, const char* op) {
    if (x.shape().size() != 4) throw std::invalid_argument(std::string(op) + ": expected 4-D input");
    if (k < 1 || stride < 1 || pad < 0) throw std::invalid_argument(std::string(op) + ": bad params");
    PoolDims d;
    d.n = x.shape()[0];
    d.c = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.k = k;
    d.stride = stride;
    d.pad = pad;
    d.oh = (d.h + 2 * pad - k) / stride + 1;
    d.ow = (d.w + 2 * pad - k) / stride + 1;
    if (d.oh < 1 || d.ow < 1)
        throw std::invalid_argument(std::string(op) + ": output would be empty for input " +
                                    shape_str(x.shape()));
    return d;
}

}  // namespace

Tensor maxpool2d(const Tensor& x, int k, int stride, int padding) {
    const PoolDims d = pool_dims(x, k, stride, padding, "maxpool2d");
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(d.n) * d.c * d.oh * d.ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const std::size_t xbase = (static_cast<std::size_t>(n) * d.c + c) * d.h;
            const std::size_t obase = (static_cast<std::size_t>(n) * d.c + c) * d.oh;
            for (int oy = 0; oy < d.oh; ++oy) {
                for (int ox = 0; ox < d.ow; ++ox) {
                    double best = -1e300;
                    std::size_t best_idx = 0;
                    for (int ky = 0; ky < d.k; ++ky) {
                        const int iy = oy * d.stride - d.pad + ky;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = 0; kx < d.k; ++kx) {
                            const int ix = ox * d.stride - d.pad + kx;
                            if (ix < 0 || ix >= d.w) continue;
                            const std::size_t idx = (xbase + iy) * d.w + ix;
                            if (xv[idx] > best) {  // first max wins on ties
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const std::size_t oi = (obase + oy) * d.ow + ox;
                    out[oi] = best;
                    (*argmax)[oi] = best_idx;
                }
            }
        }
    }

    auto px = x.node();
    return make_op({d.n, d.c, d.oh, d.ow}, std::move(out), {px},
                   [px, argmax, d](TensorNode& self) {
        px->ensure_grad();
        auto& gx = px->grad;
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int c = 0; c < d.c; ++c) {
                const std::size_t obase = (static_cast<std::size_t>(n) * d.c + c) * d.oh * d.ow;
                for (std::size_t i = 0; i < static_cast<std::size_t>(d.oh) * d.ow; ++i)
                    gx[(*argmax)[obase + i]] += self.grad[obase + i];
            }
        }
    });
}

Tensor avgpool2d(const Tensor& x, int k, int stride) {
    const PoolDims d = pool_dims(x, k, stride, 0, "avgpool2d");
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(d.n) * d.c * d.oh * d.ow);
    const double inv = 1.0 / (static_cast<double>(k) * k);

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const std::size_t xbase = (static_cast<std::size_t>(n) * d.c + c) * d.h;
            const std::size_t obase = (static_cast<std::size_t>(n) * d.c + c) * d.oh;
            for (int oy = 0; oy < d.oh; ++oy) {
                for (int ox = 0; ox < d.ow; ++ox) {
                    double acc = 0.0;
                    for (int ky = 0; ky < d.k; ++ky)
                        for (int kx = 0; kx < d.k; ++kx)
                            acc += xv[(xbase + oy * d.stride + ky) * d.w + ox * d.stride + kx];
                    out[(obase + oy) * d.ow + ox] = acc * inv;
                }
            }
        }
    }

    auto px = x.node();
    return make_op({d.n, d.c, d.oh, d.ow}, std::move(out), {px}, [px, d, inv](TensorNode& self) {
        px->ensure_grad();
        auto& gx = px->grad;
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int c = 0; c < d.c; ++c) {
                const std::size_t xbase = (static_cast<std::size_t>(n) * d.c + c) * d.h;
                const std::size_t obase = (static_cast<std::size_t>(n) * d.c + c) * d.oh;
                for (int oy = 0; oy < d.oh; ++oy)
                    for (int ox = 0; ox < d.ow; ++ox) {
                        const double g = self.grad[(obase + oy) * d.ow + ox] * inv;
                        for (int ky = 0; ky < d.k; ++ky)
                            for (int kx = 0; kx < d.k; ++kx)
                                gx[(xbase + oy * d.stride + ky) * d.w + ox * d.stride + kx] += g;
                    }
            }
        }
    });
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
    if (x.shape().size() != 4) throw std::invalid_argument("upsample: expected 4-D input");
    if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const int oh = h * factor, ow = w * factor;
    std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
    const auto& xv = x.values();
    for (int nc = 0; nc < n * c; ++nc) {
        const std::size_t xbase = static_cast<std::size_t>(nc) * h * w;
        const std::size_t obase = static_cast<std::size_t>(nc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy / factor;
            for (int ox = 0; ox < ow; ++ox)
                out[obase + static_cast<std::size_t>(oy) * ow + ox] =
                    xv[xbase + static_cast<std::size_t>(iy) * w + ox / factor];
        }
    }
    auto px = x.node();
    return make_op({n, c, oh, ow}, std::move(out), {px},
                   [px, n, c, h, w, factor](TensorNode& self) {
        px->ensure_grad();
        const int oh = h * factor, ow = w * factor;
        for (int nc = 0; nc < n * c; ++nc) {
            const std::size_t xbase = static_cast<std::size_t>(nc) * h * w;
            const std::size_t obase = static_cast<std::size_t>(nc) * oh * ow;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    px->grad[xbase + static_cast<std::size_t>(oy / factor) * w + ox / factor] +=
                        self.grad[obase + static_cast<std::size_t>(oy) * ow + ox];
        }
    });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    const int n = xs[0].shape()[0], h = xs[0].shape()[2], w = xs[0].shape()[3];
    int c_total = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != 4 || x.shape()[0] != n || x.shape()[2] != h || x.shape()[3] != w)
            throw std::invalid_argument("concat_channels: incompatible shapes");
        c_total += x.shape()[1];
    }
    std::vector<double> out(static_cast<std::size_t>(n) * c_total * h * w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::size_t c_off = 0;
    for (const auto& x : xs) {
        const int c = x.shape()[1];
        for (int ni = 0; ni < n; ++ni)
            std::copy_n(x.values().data() + static_cast<std::size_t>(ni) * c * plane, c * plane,
                        out.data() + (static_cast<std::size_t>(ni) * c_total + c_off) * plane);
        c_off += c;
    }
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int> channels;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        channels.push_back(x.shape()[1]);
    }
    return make_op({n, c_total, h, w}, std::move(out), parents,
                   [parents, channels, n, c_total, plane](TensorNode& self) {
        std::size_t c_off = 0;
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
            const auto& p = parents[pi];
            const int c = channels[pi];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int ni = 0; ni < n; ++ni) {
                    const double* src =
                        self.grad.data() + (static_cast<std::size_t>(ni) * c_total + c_off) * plane;
                    double* dst = p->grad.data() + static_cast<std::size_t>(ni) * c * plane;
                    for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
            }
            c_off += c;
        }
    });
}

Tensor transpose_kernel(const Tensor& w) {
    if (w.shape().size() != 4) throw std::invalid_argument("transpose_kernel: expected 4-D kernel");
    const int oc = w.shape()[0], ic = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    std::vector<double> out(w.values().size());
    const auto& wv = w.values();
    auto src_idx = [=](int a, int b, int y, int x) {
        return ((static_cast<std::size_t>(a) * ic + b) * kh + y) * kw + x;
    };
    auto dst_idx = [=](int a, int b, int y, int x) {
        return ((static_cast<std::size_t>(a) * oc + b) * kh + y) * kw + x;
    };
    for (int a = 0; a < oc; ++a)
        for (int b = 0; b < ic; ++b)
            for (int y = 0; y < kh; ++y)
                for (int x = 0; x < kw; ++x)
                    out[dst_idx(b, a, kh - 1 - y, kw - 1 - x)] = wv[src_idx(a, b, y, x)];
    auto pw = w.node();
    return make_op({ic, oc, kh, kw}, std::move(out), {pw}, [pw, oc, ic, kh, kw](TensorNode& self) {
        pw->ensure_grad();
        for (int a = 0; a < oc; ++a)
            for (int b = 0; b < ic; ++b)
                for (int y = 0; y < kh; ++y)
                    for (int x = 0; x < kw; ++x)
                        pw->grad[((static_cast<std::size_t>(a) * ic + b) * kh + y) * kw + x] +=
                            self.grad[((static_cast<std::size_t>(b) * oc + a) * kh + kh - 1 - y) *
                                          kw +
                                      kw - 1 - x];
    });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   bool training, double momentum, double eps) {
    if (x.shape().size() != 4) throw std::invalid_argument("batchnorm2d: expected 4-D input");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (gamma.numel() != c || beta.numel() != c ||
        running_mean.size() != static_cast<std::size_t>(c) ||
        running_var.size() != static_cast<std::size_t>(c))
        throw std::invalid_argument("batchnorm2d: parameter size mismatch");

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double count = static_cast<double>(n) * plane;
    const auto& xv = x.values();

    std::vector<double> mu(c), var(c);
    if (training) {
        for (int ci = 0; ci < c; ++ci) {
            double s = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const double* p = xv.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            mu[ci] = s / count;
            double sq = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const double* p = xv.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
                for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu[ci]) * (p[i] - mu[ci]);
            }
            var[ci] = sq / count;  // biased, also stored in the running buffer
            running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mu[ci];
            running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * var[ci];
        }
    } else {
        mu.assign(running_mean.begin(), running_mean.end());
        var.assign(running_var.begin(), running_var.end());
    }

    auto inv_std = std::make_shared<std::vector<double>>(c);
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    for (int ci = 0; ci < c; ++ci) (*inv_std)[ci] = 1.0 / std::sqrt(var[ci] + eps);
    std::vector<double> out(xv.size());
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double xh = (xv[base + i] - mu[ci]) * (*inv_std)[ci];
                (*xhat)[base + i] = xh;
                out[base + i] = gv[ci] * xh + bv[ci];
            }
        }
    }

    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make_op({n, c, h, w}, std::move(out), {px, pg, pb},
                   [px, pg, pb, xhat, inv_std, n, c, plane, count, training](TensorNode& self) {
        const auto& g = self.grad;
        // Per-channel sums of dy and dy*xhat, shared by all three grads.
        std::vector<double> sum_dy(c, 0.0), sum_dy_xh(c, 0.0);
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci) {
                const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_dy[ci] += g[base + i];
                    sum_dy_xh[ci] += g[base + i] * (*xhat)[base + i];
                }
            }
        if (pg->requires_grad) {
            pg->ensure_grad();
            for (int ci = 0; ci < c; ++ci) pg->grad[ci] += sum_dy_xh[ci];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int ci = 0; ci < c; ++ci) pb->grad[ci] += sum_dy[ci];
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (int ni = 0; ni < n; ++ni)
                for (int ci = 0; ci < c; ++ci) {
                    const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
                    const double gamma_inv = pg->values[ci] * (*inv_std)[ci];
                    if (training) {
                        const double m_dy = sum_dy[ci] / count;
                        const double m_dy_xh = sum_dy_xh[ci] / count;
                        for (std::size_t i = 0; i < plane; ++i)
                            px->grad[base + i] +=
                                gamma_inv * (g[base + i] - m_dy - (*xhat)[base + i] * m_dy_xh);
                    } else {
                        for (std::size_t i = 0; i < plane; ++i)
                            px->grad[base + i] += gamma_inv * g[base + i];
                    }
                }
        }
    });
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.shape().size() != 2) throw std::invalid_argument("softmax_rows: expected [N,C]");
    const int n = logits.shape()[0], c = logits.shape()[1];
    std::vector<double> out(logits.values().size());
    const auto& lv = logits.values();
    for (int i = 0; i < n; ++i) {
        double hi = -1e300;
        for (int j = 0; j < c; ++j) hi = std::max(hi, lv[static_cast<std::size_t>(i) * c + j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(lv[static_cast<std::size_t>(i) * c + j] - hi);
            out[static_cast<std::size_t>(i) * c + j] = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] /= z;
    }
    auto pl = logits.node();
    return make_op({n, c}, std::move(out), {pl}, [pl, n, c](TensorNode& self) {
        pl->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += self.grad[base + j] * self.values[base + j];
            for (int j = 0; j < c; ++j)
                pl->grad[base + j] += self.values[base + j] * (self.grad[base + j] - dot);
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot_labels) {
    check_same_shape(logits, onehot_labels, "softmax_cross_entropy");
    if (logits.shape().size() != 2 || logits.shape()[1] < 2)
        throw std::invalid_argument("softmax_cross_entropy: expected [N,C], C >= 2");
    const int n = logits.shape()[0], c = logits.shape()[1];
    const auto& yv = onehot_labels.values();
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < c; ++j) {
            const double y = yv[static_cast<std::size_t>(i) * c + j];
            if (y != 0.0 && y != 1.0)
                throw std::invalid_argument("softmax_cross_entropy: labels must be one-hot");
            row += y;
        }
        if (row != 1.0) throw std::invalid_argument("softmax_cross_entropy: labels must be one-hot");
    }

    const auto& lv = logits.values();
    auto probs = std::make_shared<std::vector<double>>(lv.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double hi = -1e300;
        for (int j = 0; j < c; ++j) hi = std::max(hi, lv[base + j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(lv[base + j] - hi);
        const double log_z = std::log(z) + hi;
        for (int j = 0; j < c; ++j) {
            (*probs)[base + j] = std::exp(lv[base + j] - log_z);
            if (yv[base + j] == 1.0) loss += log_z - lv[base + j];
        }
    }
    loss /= static_cast<double>(n);

    auto pl = logits.node(), py = onehot_labels.node();
    return make_op({1}, {loss}, {pl, py}, [pl, py, probs, n, c](TensorNode& self) {
        if (!pl->requires_grad) return;
        pl->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < pl->values.size(); ++i)
            pl->grad[i] += g * ((*probs)[i] - py->values[i]);
    });
}

namespace {
constexpr double kBceClamp = 1e-7;
}

Tensor binary_cross_entropy(const Tensor& probs, const Tensor& labels) {
    check_same_shape(probs, labels, "binary_cross_entropy");
    constexpr double kClamp = kBceClamp;
    const auto& pv = probs.values();
    const auto& yv = labels.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double p = std::clamp(pv[i], kClamp, 1.0 - kClamp);
        loss -= yv[i] * std::log(p) + (1.0 - yv[i]) * std::log(1.0 - p);
    }
    loss /= static_cast<double>(pv.size());

    auto pp = probs.node(), py = labels.node();
    return make_op({1}, {loss}, {pp, py}, [pp, py](TensorNode& self) {
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(pp->values.size());
        for (std::size_t i = 0; i < pp->values.size(); ++i) {
            const double p = std::clamp(pp->values[i], kBceClamp, 1.0 - kBceClamp);
            pp->grad[i] += g * (p - py->values[i]) / (p * (1.0 - p));
        }
    });
}

}  // namespace bonepipe::nn
