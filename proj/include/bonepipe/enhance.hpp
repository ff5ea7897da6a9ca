#pragma once

#include <vector>

#include "bonepipe/image.hpp"

namespace bonepipe {

// clip_limit is a multiple of the uniform tile histogram height
// (tile_pixels / bins); infinity disables clipping, which is plain AHE.
struct ClaheConfig {
    double clip_limit = 3.0;
    int tiles_x = 8;
    int tiles_y = 8;
    int bins = 256;
};

// Plain histogram equalization: v -> CDF(v) over `bins` levels.
GrayImage equalize_global(const GrayImage& img, int bins = 256);

// Contrast-limited adaptive histogram equalization. Per-tile histograms are
// clipped at clip_limit * tile_pixels / bins, the excess is redistributed
// uniformly across all bins in a single pass, and per-tile CDF mappings are
// blended by bilinear interpolation between the four surrounding tile
// centers (edge-clamped at the borders). Non-divisible image dimensions are
// handled by extending the last row/column of tiles.
GrayImage clahe(const GrayImage& img, const ClaheConfig& cfg);

// Absolute mean brightness error on the 0-255 scale.
double ambe(const GrayImage& a, const GrayImage& b);

// Test hook: per-tile histograms (row-major over the tile grid) right after
// clipping, before the excess is redistributed.
std::vector<std::vector<double>> clahe_clipped_histograms(const GrayImage& img,
                                                          const ClaheConfig& cfg);

}  // namespace bonepipe
