#include "bonepipe/enhance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bonepipe {

namespace {

inline int bin_of(double v, int bins) {
    int b = static_cast<int>(v * bins);
    if (b >= bins) b = bins - 1;
    if (b < 0) b = 0;
    return b;
}

struct TileGrid {
    int tiles_x, tiles_y;
    std::vector<int> x0, x1;  // [x0, x1) extents per tile column/row
    std::vector<int> y0, y1;
    std::vector<double> cx, cy;  // tile centers in pixel coords
};

TileGrid make_grid(const GrayImage& img, int tiles_x, int tiles_y) {
    if (tiles_x < 1 || tiles_y < 1) throw std::invalid_argument("clahe: tile counts must be >= 1");
    if (img.width < tiles_x || img.height < tiles_y)
        throw std::invalid_argument("clahe: image smaller than tile grid");
    TileGrid g;
    g.tiles_x = tiles_x;
    g.tiles_y = tiles_y;
    const int tw = img.width / tiles_x;
    const int th = img.height / tiles_y;
    for (int i = 0; i < tiles_x; ++i) {
        g.x0.push_back(i * tw);
        g.x1.push_back(i == tiles_x - 1 ? img.width : (i + 1) * tw);  // last tile absorbs remainder
        g.cx.push_back(0.5 * (g.x0.back() + g.x1.back() - 1));
    }
    for (int j = 0; j < tiles_y; ++j) {
        g.y0.push_back(j * th);
        g.y1.push_back(j == tiles_y - 1 ? img.height : (j + 1) * th);
        g.cy.push_back(0.5 * (g.y0.back() + g.y1.back() - 1));
    }
    return g;
}

std::vector<double> tile_histogram(const GrayImage& img, const TileGrid& g, int ti, int tj,
                                   int bins) {
    std::vector<double> hist(bins, 0.0);
    for (int y = g.y0[tj]; y < g.y1[tj]; ++y)
        for (int x = g.x0[ti]; x < g.x1[ti]; ++x) hist[bin_of(img.at(x, y), bins)] += 1.0;
    return hist;
}

void clip_histogram(std::vector<double>& hist, double clip_limit, double tile_pixels) {
    if (!std::isfinite(clip_limit)) return;
    const double ceiling = clip_limit * tile_pixels / static_cast<double>(hist.size());
    double excess = 0.0;
    for (double& h : hist) {
        if (h > ceiling) {
            excess += h - ceiling;
            h = ceiling;
        }
    }
    if (excess > 0.0) {
        const double share = excess / static_cast<double>(hist.size());
        for (double& h : hist) h += share;
    }
}

// Equalization mapping: bin b -> CDF(b), inclusive of the bin's own mass.
std::vector<double> cdf_mapping(const std::vector<double>& hist) {
    std::vector<double> map(hist.size());
    double total = 0.0;
    for (double h : hist) total += h;
    double acc = 0.0;
    for (std::size_t i = 0; i < hist.size(); ++i) {
        acc += hist[i];
        map[i] = acc / total;
    }
    return map;
}

// Index of the left neighbor among sorted centers plus the blend weight
// toward the right neighbor; edge-clamped.
inline void blend_coords(const std::vector<double>& centers, double p, int& i0, int& i1,
                         double& w) {
    const int n = static_cast<int>(centers.size());
    if (p <= centers.front()) {
        i0 = i1 = 0;
        w = 0.0;
        return;
    }
    if (p >= centers.back()) {
        i0 = i1 = n - 1;
        w = 0.0;
        return;
    }
    int i = 0;
    while (i + 1 < n && centers[i + 1] <= p) ++i;
    i0 = i;
    i1 = i + 1;
    w = (p - centers[i0]) / (centers[i1] - centers[i0]);
}

}  // namespace

GrayImage equalize_global(const GrayImage& img, int bins) {
    if (bins < 2) throw std::invalid_argument("equalize_global: bins must be >= 2");
    std::vector<double> hist(bins, 0.0);
    for (double v : img.data) hist[bin_of(v, bins)] += 1.0;
    const std::vector<double> map = cdf_mapping(hist);
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = map[bin_of(img.data[i], bins)];
    return out;
}

GrayImage clahe(const GrayImage& img, const ClaheConfig& cfg) {
    if (cfg.bins < 2) throw std::invalid_argument("clahe: bins must be >= 2");
    if (cfg.clip_limit <= 0.0) throw std::invalid_argument("clahe: clip_limit must be > 0");
    const TileGrid g = make_grid(img, cfg.tiles_x, cfg.tiles_y);

    std::vector<std::vector<double>> maps(static_cast<std::size_t>(g.tiles_x) * g.tiles_y);
    for (int tj = 0; tj < g.tiles_y; ++tj) {
        for (int ti = 0; ti < g.tiles_x; ++ti) {
            std::vector<double> hist = tile_histogram(img, g, ti, tj, cfg.bins);
            const double pixels =
                static_cast<double>(g.x1[ti] - g.x0[ti]) * (g.y1[tj] - g.y0[tj]);
            clip_histogram(hist, cfg.clip_limit, pixels);
            maps[static_cast<std::size_t>(tj) * g.tiles_x + ti] = cdf_mapping(hist);
        }
    }

    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        int j0, j1;
        double wy;
        blend_coords(g.cy, y, j0, j1, wy);
        for (int x = 0; x < img.width; ++x) {
            int i0, i1;
            double wx;
            blend_coords(g.cx, x, i0, i1, wx);
            const int b = bin_of(img.at(x, y), cfg.bins);
            const double m00 = maps[static_cast<std::size_t>(j0) * g.tiles_x + i0][b];
            const double m10 = maps[static_cast<std::size_t>(j0) * g.tiles_x + i1][b];
            const double m01 = maps[static_cast<std::size_t>(j1) * g.tiles_x + i0][b];
            const double m11 = maps[static_cast<std::size_t>(j1) * g.tiles_x + i1][b];
            const double v = (1 - wy) * ((1 - wx) * m00 + wx * m10) +
                             wy * ((1 - wx) * m01 + wx * m11);
            out.at(x, y) = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

double ambe(const GrayImage& a, const GrayImage& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ambe: dimension mismatch");
    double ma = 0.0, mb = 0.0;
    for (double v : a.data) ma += v;
    for (double v : b.data) mb += v;
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    return std::abs(ma - mb) * 255.0;
}

std::vector<std::vector<double>> clahe_clipped_histograms(const GrayImage& img,
                                                          const ClaheConfig& cfg) {
    const TileGrid g = make_grid(img, cfg.tiles_x, cfg.tiles_y);
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(g.tiles_x) * g.tiles_y);
    for (int tj = 0; tj < g.tiles_y; ++tj) {
        for (int ti = 0; ti < g.tiles_x; ++ti) {
            std::vector<double> hist = tile_histogram(img, g, ti, tj, cfg.bins);
            if (std::isfinite(cfg.clip_limit)) {
                const double pixels =
                    static_cast<double>(g.x1[ti] - g.x0[ti]) * (g.y1[tj] - g.y0[tj]);
                const double ceiling = cfg.clip_limit * pixels / cfg.bins;
                for (double& h : hist) h = std::min(h, ceiling);
            }
            out.push_back(std::move(hist));
        }
    }
    return out;
}

}  // namespace bonepipe
