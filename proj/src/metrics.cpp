#include "bonepipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace bonepipe {

MsSsimParams MsSsimParams::for_scales(int m) {
    MsSsimParams p;
    if (m < 1 || m > static_cast<int>(p.weights.size()))
        throw std::invalid_argument("ms_ssim: scales must be in [1, 5]");
    p.scales = m;
    p.weights.resize(m);
    const double sum = std::accumulate(p.weights.begin(), p.weights.end(), 0.0);
    for (double& w : p.weights) w /= sum;
    return p;
}

double mse(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

double mse(const GrayImage& a, const GrayImage& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
    return mse(a.data, b.data);
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(size);
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

// Separable valid-mode filter: output is (h-k+1) x (w-k+1).
struct FilteredField {
    int width = 0, height = 0;
    std::vector<double> data;
    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

FilteredField gauss_filter_valid(const std::vector<double>& img, int w, int h,
                                 const std::vector<double>& win) {
    const int k = static_cast<int>(win.size());
    FilteredField out;
    out.width = w - k + 1;
    out.height = h - k + 1;
    std::vector<double> tmp(static_cast<std::size_t>(out.width) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < out.width; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[i] * img[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * out.width + x] = acc;
        }
    }
    out.data.resize(static_cast<std::size_t>(out.width) * out.height);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i)
                acc += win[i] * tmp[static_cast<std::size_t>(y + i) * out.width + x];
            out.data[static_cast<std::size_t>(y) * out.width + x] = acc;
        }
    }
    return out;
}

struct SsimTerms {
    double mean_ssim = 0.0;  // mean of l*cs map
    double mean_cs = 0.0;    // mean of cs map
};

SsimTerms ssim_terms(const GrayImage& a, const GrayImage& b, const SsimParams& p) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    if (p.window < 3 || p.window % 2 == 0)
        throw std::invalid_argument("ssim: window must be odd and >= 3");
    if (a.width < p.window || a.height < p.window)
        throw std::invalid_argument("ssim: image smaller than window");

    const std::vector<double> win = gaussian_window(p.window, p.sigma);
    const std::size_t n = a.size();
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a.data[i] * a.data[i];
        bb[i] = b.data[i] * b.data[i];
        ab[i] = a.data[i] * b.data[i];
    }
    const FilteredField mu_a = gauss_filter_valid(a.data, a.width, a.height, win);
    const FilteredField mu_b = gauss_filter_valid(b.data, a.width, a.height, win);
    const FilteredField m_aa = gauss_filter_valid(aa, a.width, a.height, win);
    const FilteredField m_bb = gauss_filter_valid(bb, a.width, a.height, win);
    const FilteredField m_ab = gauss_filter_valid(ab, a.width, a.height, win);

    const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
    const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);

    double sum_ssim = 0.0, sum_cs = 0.0;
    const std::size_t m = mu_a.data.size();
    for (std::size_t i = 0; i < m; ++i) {
        const double ma = mu_a.data[i], mb = mu_b.data[i];
        const double va = m_aa.data[i] - ma * ma;
        const double vb = m_bb.data[i] - mb * mb;
        const double cov = m_ab.data[i] - ma * mb;
        const double l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        const double cs = (2.0 * cov + c2) / (va + vb + c2);
        sum_ssim += l * cs;
        sum_cs += cs;
    }
    return {sum_ssim / static_cast<double>(m), sum_cs / static_cast<double>(m)};
}

}  // namespace

double ssim(const GrayImage& a, const GrayImage& b, const SsimParams& p) {
    return ssim_terms(a, b, p).mean_ssim;
}

GrayImage downsample2x(const GrayImage& img) {
    const int w = img.width / 2, h = img.height / 2;
    if (w < 1 || h < 1) throw std::invalid_argument("downsample2x: image too small");
    GrayImage out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(x, y) = 0.25 * (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) +
                                   img.at(2 * x, 2 * y + 1) + img.at(2 * x + 1, 2 * y + 1));
    return out;
}

double ms_ssim(const GrayImage& a, const GrayImage& b, const MsSsimParams& p) {
    if (p.scales < 1 || p.scales != static_cast<int>(p.weights.size()))
        throw std::invalid_argument("ms_ssim: weights must match scale count");
    double wsum = 0.0;
    for (double w : p.weights) {
        if (w <= 0.0) throw std::invalid_argument("ms_ssim: weights must be positive");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw std::invalid_argument("ms_ssim: weights must sum to 1");
    const int min_dim = std::min(a.width, a.height) >> (p.scales - 1);
    if (min_dim < p.ssim.window)
        throw std::invalid_argument("ms_ssim: image too small for requested scale count");

    GrayImage ca = a, cb = b;
    double result = 1.0;
    for (int s = 0; s < p.scales; ++s) {
        const SsimTerms t = ssim_terms(ca, cb, p.ssim);
        const double term = s == p.scales - 1 ? t.mean_ssim : t.mean_cs;
        result *= std::pow(std::max(term, 0.0), p.weights[s]);
        if (s + 1 < p.scales) {
            ca = downsample2x(ca);
            cb = downsample2x(cb);
        }
    }
    return result;
}

double composite_loss(const GrayImage& pred, const GrayImage& target, double alpha,
                      const MsSsimParams& p) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("composite_loss: alpha in [0,1]");
    const double msssim_term = alpha > 0.0 ? 1.0 - ms_ssim(pred, target, p) : 0.0;
    return alpha * msssim_term + (1.0 - alpha) * mse(pred, target);
}

double euclidean_distance(const DiseaseVector& u, const DiseaseVector& v) {
    if (u.size() != v.size() || u.empty())
        throw std::invalid_argument("euclidean_distance: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - v[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

double auroc(const std::vector<BinaryScorePair>& pairs) {
    std::size_t n_pos = 0, n_neg = 0;
    for (const auto& p : pairs) (p.label ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("auroc: need at least one positive and one negative");

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return pairs[i].score < pairs[j].score; });

    // Average ranks over tied groups, then the Mann-Whitney U statistic.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && pairs[order[j + 1]].score == pairs[order[i]].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (pairs[order[k]].label) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

AccuracyF1 accuracy_f1(const std::vector<BinaryScorePair>& pairs, double threshold) {
    if (pairs.empty()) throw std::invalid_argument("accuracy_f1: empty input");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (const auto& p : pairs) {
        const int pred = p.score > threshold ? 1 : 0;
        if (pred == 1 && p.label == 1) ++tp;
        else if (pred == 1 && p.label == 0) ++fp;
        else if (pred == 0 && p.label == 0) ++tn;
        else ++fn;
    }
    AccuracyF1 out;
    out.accuracy = static_cast<double>(tp + tn) / static_cast<double>(pairs.size());
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    out.f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    return out;
}

}  // namespace bonepipe
