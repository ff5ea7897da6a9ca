#pragma once

#include <string>
#include <vector>

namespace bonepipe {

// Per-class disease probabilities (multi-label, no sum-to-1 constraint).
using DiseaseVector = std::vector<double>;

// Axis-aligned box in pixel coordinates, tagged with the disease class it annotates.
struct BBox {
    int x = 0;
    int y = 0;
    int w = 1;
    int h = 1;
    int class_index = 0;
};

}  // namespace bonepipe
