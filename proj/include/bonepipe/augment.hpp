#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bonepipe/image.hpp"

namespace bonepipe {

struct AffineParams {
    bool flip_h = false;
    double zoom = 1.0;     // scale factor, > 0
    double shear = 0.0;    // radians
    double shift_x = 0.0;  // fraction of width
    double shift_y = 0.0;  // fraction of height
    double rotate = 0.0;   // radians, about the image center
};

struct AffineRanges {
    bool allow_flip = true;
    double zoom_min = 0.9, zoom_max = 1.1;
    double shear_min = -0.1, shear_max = 0.1;
    double shift_min = -0.05, shift_max = 0.05;
    double rotate_min = -0.087, rotate_max = 0.087;  // about +/- 5 degrees
};

// Composite radiograph plus its soft-tissue ground truth.
struct ImagePair {
    GrayImage source;
    GrayImage target;
    std::string patient_id;
};

struct AugmentedPair {
    ImagePair pair;
    AffineParams params;
    std::size_t seed_index = 0;  // which seed pair it was derived from
};

// flip -> zoom -> shear -> rotate about center, then shift; inverse-mapped
// with bilinear sampling and edge-clamped out-of-bounds reads.
GrayImage apply_affine(const GrayImage& img, const AffineParams& p);

// Each output draws one AffineParams from `ranges` and applies the same
// transform to source and target. Seed pairs are cycled in order; output i
// uses an RNG stream derived from (rng_seed, i), so the corpus is
// schedule-independent.
std::vector<AugmentedPair> generate_pairs(const std::vector<ImagePair>& seed_pairs,
                                          std::size_t n_out, const AffineRanges& ranges,
                                          std::uint64_t rng_seed);

AffineParams sample_affine(const AffineRanges& ranges, std::uint64_t stream_seed);

}  // namespace bonepipe
