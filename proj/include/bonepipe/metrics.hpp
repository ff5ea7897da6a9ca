#pragma once

#include <utility>
#include <vector>

#include "bonepipe/image.hpp"
#include "bonepipe/types.hpp"

namespace bonepipe {

struct SsimParams {
    int window = 11;       // odd, >= 3
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

struct MsSsimParams {
    SsimParams ssim;
    int scales = 5;
    // Canonical five-scale weights; must stay positive and sum to 1.
    std::vector<double> weights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

    // Weights for a reduced scale count: the canonical prefix, renormalized.
    static MsSsimParams for_scales(int m);
};

double mse(const GrayImage& a, const GrayImage& b);
double mse(const std::vector<double>& a, const std::vector<double>& b);

// Mean local SSIM with Gaussian-weighted moments over valid window positions.
double ssim(const GrayImage& a, const GrayImage& b, const SsimParams& p = {});

// Product over the dyadic pyramid of mean contrast-structure terms raised to
// their weights; the luminance term enters only at the coarsest scale (the
// full SSIM map is used there), so scales == 1 reduces to plain ssim.
// Negative per-scale means are clamped to 0.
double ms_ssim(const GrayImage& a, const GrayImage& b, const MsSsimParams& p = {});

// alpha * (1 - ms_ssim) + (1 - alpha) * mse
double composite_loss(const GrayImage& pred, const GrayImage& target, double alpha,
                      const MsSsimParams& p = {});

double euclidean_distance(const DiseaseVector& u, const DiseaseVector& v);

struct BinaryScorePair {
    double score = 0.0;
    int label = 0;
};

// Rank-sum AUROC, ties counted 1/2 (Mann-Whitney convention).
// Requires at least one positive and one negative label.
double auroc(const std::vector<BinaryScorePair>& pairs);

// Predict 1 iff score > threshold (strict). F1 is 0 when precision+recall = 0.
struct AccuracyF1 {
    double accuracy = 0.0;
    double f1 = 0.0;
};
AccuracyF1 accuracy_f1(const std::vector<BinaryScorePair>& pairs, double threshold);

// 2x2 mean-pool downsample (odd trailing row/column dropped).
GrayImage downsample2x(const GrayImage& img);

}  // namespace bonepipe
