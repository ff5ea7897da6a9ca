#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace bonepipe {

// Row-major grayscale image, intensities kept as reals in [0, 1].
// Quantization to 8/16-bit levels happens only at file boundaries.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    GrayImage() = default;
    GrayImage(int w, int h, double fill = 0.0);

    double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const GrayImage& other) const {
        return width == other.width && height == other.height;
    }
};

struct ImageStats {
    double mean = 0.0;
    double std = 1.0;
};

// Loads an 8- or 16-bit grayscale PGM (P5) or PNG; intensities are scaled
// by the format maximum. Color, palette and sub-8-bit files are rejected.
GrayImage load_image(const std::string& path);

// Writes PGM or PNG depending on the file extension (.pgm/.png).
// depth must be 8 or 16; values are rounded to the nearest level.
// The file is written atomically (temp file + rename).
void save_image(const GrayImage& img, const std::string& path, int depth = 16);

// Bilinear resize with corner-aligned sampling.
GrayImage resize(const GrayImage& img, int new_w, int new_h);

// Mean and population standard deviation over all pixels of all images.
// Throws on an empty corpus or zero variance.
ImageStats compute_stats(const std::vector<GrayImage>& images);

// (img - mean) / std, returned as an unbounded row-major field.
std::vector<double> standardize(const GrayImage& img, const ImageStats& stats);

}  // namespace bonepipe
