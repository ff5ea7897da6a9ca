#include "bonepipe/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bonepipe/rng.hpp"

namespace bonepipe {

namespace {

struct Mat2 {
    double a = 1, b = 0, c = 0, d = 1;  // [[a b], [c d]]

    Mat2 operator*(const Mat2& o) const {
        return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
    }
    Mat2 inverse() const {
        const double det = a * d - b * c;
        if (std::abs(det) < 1e-12) throw std::invalid_argument("affine: singular transform");
        return {d / det, -b / det, -c / det, a / det};
    }
};

double sample_clamped(const GrayImage& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 > img.width - 2) x0 = std::max(img.width - 2, 0);
    if (y0 > img.height - 2) y0 = std::max(img.height - 2, 0);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wx = x - x0, wy = y - y0;
    return (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
           wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
}

}  // namespace

GrayImage apply_affine(const GrayImage& img, const AffineParams& p) {
    if (p.zoom <= 0.0) throw std::invalid_argument("affine: zoom must be > 0");
    const Mat2 flip{p.flip_h ? -1.0 : 1.0, 0, 0, 1.0};
    const Mat2 zoom{p.zoom, 0, 0, p.zoom};
    const Mat2 shear{1.0, std::tan(p.shear), 0, 1.0};
    const Mat2 rot{std::cos(p.rotate), -std::sin(p.rotate), std::sin(p.rotate),
                   std::cos(p.rotate)};
    const Mat2 fwd = rot * shear * zoom * flip;
    const Mat2 inv = fwd.inverse();

    const double cx = (img.width - 1) / 2.0;
    const double cy = (img.height - 1) / 2.0;
    const double tx = p.shift_x * img.width;
    const double ty = p.shift_y * img.height;

    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double dx = x - cx - tx;
            const double dy = y - cy - ty;
            const double sx = inv.a * dx + inv.b * dy + cx;
            const double sy = inv.c * dx + inv.d * dy + cy;
            out.at(x, y) = sample_clamped(img, sx, sy);
        }
    }
    return out;
}

AffineParams sample_affine(const AffineRanges& r, std::uint64_t stream_seed) {
    Rng rng(stream_seed);
    AffineParams p;
    p.flip_h = r.allow_flip ? rng.bernoulli(0.5) : false;
    p.zoom = rng.uniform(r.zoom_min, r.zoom_max);
    p.shear = rng.uniform(r.shear_min, r.shear_max);
    p.shift_x = rng.uniform(r.shift_min, r.shift_max);
    p.shift_y = rng.uniform(r.shift_min, r.shift_max);
    p.rotate = rng.uniform(r.rotate_min, r.rotate_max);
    return p;
}

std::vector<AugmentedPair> generate_pairs(const std::vector<ImagePair>& seed_pairs,
                                          std::size_t n_out, const AffineRanges& ranges,
                                          std::uint64_t rng_seed) {
    if (seed_pairs.empty()) throw std::invalid_argument("generate_pairs: empty seed set");
    if (n_out < 1) throw std::invalid_argument("generate_pairs: n_out must be >= 1");
    for (const auto& sp : seed_pairs)
        if (!sp.source.same_shape(sp.target))
            throw std::invalid_argument("generate_pairs: source/target dimensions differ");

    std::vector<AugmentedPair> out(n_out);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n_out); ++i) {
        const std::size_t si = static_cast<std::size_t>(i) % seed_pairs.size();
        const ImagePair& seed = seed_pairs[si];
        AugmentedPair ap;
        ap.seed_index = si;
        ap.params = sample_affine(ranges, mix_seed(rng_seed, static_cast<std::uint64_t>(i)));
        ap.pair.source = apply_affine(seed.source, ap.params);
        ap.pair.target = apply_affine(seed.target, ap.params);
        ap.pair.patient_id = seed.patient_id;
        out[static_cast<std::size_t>(i)] = std::move(ap);
    }
    return out;
}

}  // namespace bonepipe
