#include "bonepipe/image.hpp"

#include <png.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bonepipe {

GrayImage::GrayImage(int w, int h, double fill) : width(w), height(h) {
    if (w < 1 || h < 1) throw std::invalid_argument("GrayImage dimensions must be >= 1");
    data.assign(static_cast<std::size_t>(w) * h, fill);
}

namespace {

int pgm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok.empty() ? EOF : 0;
}

GrayImage load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image: " + path);
    std::string tok;
    if (pgm_next_token(in, tok) || tok != "P5")
        throw std::runtime_error("unsupported PGM (want binary P5): " + path);
    long w = 0, h = 0, maxval = 0;
    if (pgm_next_token(in, tok)) throw std::runtime_error("truncated PGM header: " + path);
    w = std::stol(tok);
    if (pgm_next_token(in, tok)) throw std::runtime_error("truncated PGM header: " + path);
    h = std::stol(tok);
    if (pgm_next_token(in, tok)) throw std::runtime_error("truncated PGM header: " + path);
    maxval = std::stol(tok);
    if (w < 1 || h < 1) throw std::runtime_error("bad PGM dimensions: " + path);
    if (maxval != 255 && maxval != 65535)
        throw std::runtime_error("unsupported PGM bit depth (maxval " + std::to_string(maxval) +
                                 "): " + path);

    GrayImage img(static_cast<int>(w), static_cast<int>(h));
    const std::size_t n = img.size();
    if (maxval == 255) {
        std::vector<unsigned char> buf(n);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw std::runtime_error("truncated PGM raster: " + path);
        for (std::size_t i = 0; i < n; ++i) img.data[i] = buf[i] / 255.0;
    } else {
        std::vector<unsigned char> buf(n * 2);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 2));
        if (static_cast<std::size_t>(in.gcount()) != n * 2)
            throw std::runtime_error("truncated PGM raster: " + path);
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned v = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];
            img.data[i] = v / 65535.0;
        }
    }
    return img;
}

std::string pgm_bytes(const GrayImage& img, int depth) {
    const int maxval = depth == 8 ? 255 : 65535;
    std::ostringstream out;
    out << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
    if (depth == 8) {
        for (double v : img.data)
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    } else {
        for (double v : img.data) {
            const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
            out.put(static_cast<char>((q >> 8) & 0xff));
            out.put(static_cast<char>(q & 0xff));
        }
    }
    return out.str();
}

struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

GrayImage load_png(const std::string& path) {
    PngReadCloser c;
    c.fp = std::fopen(path.c_str(), "rb");
    if (!c.fp) throw std::runtime_error("cannot open image: " + path);
    c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) throw std::runtime_error("libpng init failed");
    c.info = png_create_info_struct(c.png);
    if (!c.info) throw std::runtime_error("libpng init failed");
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("corrupt PNG: " + path);

    png_init_io(c.png, c.fp);
    png_read_info(c.png, c.info);
    const png_uint_32 w = png_get_image_width(c.png, c.info);
    const png_uint_32 h = png_get_image_height(c.png, c.info);
    const int color = png_get_color_type(c.png, c.info);
    const int depth = png_get_bit_depth(c.png, c.info);
    if (color != PNG_COLOR_TYPE_GRAY)
        throw std::runtime_error("unsupported PNG color type (grayscale only): " + path);
    if (depth != 8 && depth != 16)
        throw std::runtime_error("unsupported PNG bit depth " + std::to_string(depth) + ": " + path);

    GrayImage img(static_cast<int>(w), static_cast<int>(h));
    const std::size_t stride = static_cast<std::size_t>(w) * (depth / 8);
    std::vector<unsigned char> raster(stride * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raster.data() + y * stride;
    png_read_image(c.png, rows.data());
    png_read_end(c.png, nullptr);

    if (depth == 8) {
        for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = raster[i] / 255.0;
    } else {  // PNG 16-bit samples are big-endian
        for (std::size_t i = 0; i < img.size(); ++i) {
            const unsigned v = (static_cast<unsigned>(raster[2 * i]) << 8) | raster[2 * i + 1];
            img.data[i] = v / 65535.0;
        }
    }
    return img;
}

struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

void save_png(const GrayImage& img, const std::string& path, int depth) {
    PngWriteCloser c;
    c.fp = std::fopen(path.c_str(), "wb");
    if (!c.fp) throw std::runtime_error("cannot open for writing: " + path);
    c.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) throw std::runtime_error("libpng init failed");
    c.info = png_create_info_struct(c.png);
    if (!c.info) throw std::runtime_error("libpng init failed");
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("PNG write failed: " + path);

    png_init_io(c.png, c.fp);
    png_set_IHDR(c.png, c.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(c.png, c.info);

    const std::size_t stride = static_cast<std::size_t>(img.width) * (depth / 8);
    std::vector<unsigned char> raster(stride * img.height);
    if (depth == 8) {
        for (std::size_t i = 0; i < img.size(); ++i)
            raster[i] = static_cast<unsigned char>(std::lround(img.data[i] * 255.0));
    } else {
        for (std::size_t i = 0; i < img.size(); ++i) {
            const auto q = static_cast<unsigned>(std::lround(img.data[i] * 65535.0));
            raster[2 * i] = static_cast<unsigned char>((q >> 8) & 0xff);
            raster[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
        }
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = raster.data() + static_cast<std::size_t>(y) * stride;
    png_write_image(c.png, rows.data());
    png_write_end(c.png, nullptr);
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    if (s.size() < suffix.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(), [](char a, char b) {
        return std::tolower(static_cast<unsigned char>(a)) == std::tolower(static_cast<unsigned char>(b));
    });
}

}  // namespace

GrayImage load_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw std::runtime_error("cannot open image: " + path);
    unsigned char magic[2] = {0, 0};
    probe.read(reinterpret_cast<char*>(magic), 2);
    probe.close();
    if (magic[0] == 'P' && magic[1] == '5') return load_pgm(path);
    if (magic[0] == 0x89 && magic[1] == 'P') return load_png(path);
    throw std::runtime_error("unsupported image format (want P5 PGM or grayscale PNG): " + path);
}

void save_image(const GrayImage& img, const std::string& path, int depth) {
    if (depth != 8 && depth != 16) throw std::invalid_argument("depth must be 8 or 16");
    if (img.width < 1 || img.height < 1 || img.data.size() != img.size())
        throw std::invalid_argument("invalid GrayImage");
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.parent_path() /
                         (target.filename().string() + ".tmp." + std::to_string(::getpid()));
    if (has_suffix(path, ".png")) {
        save_png(img, tmp.string(), depth);
    } else {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        const std::string bytes = pgm_bytes(img, depth);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw std::runtime_error("rename failed for " + target.string() + ": " + ec.message());
    }
}

GrayImage resize(const GrayImage& img, int new_w, int new_h) {
    if (new_w < 1 || new_h < 1) throw std::invalid_argument("resize target must be >= 1 pixel");
    if (new_w == img.width && new_h == img.height) return img;
    GrayImage out(new_w, new_h);
    const double sx = new_w > 1 ? static_cast<double>(img.width - 1) / (new_w - 1) : 0.0;
    const double sy = new_h > 1 ? static_cast<double>(img.height - 1) / (new_h - 1) : 0.0;
    for (int y = 0; y < new_h; ++y) {
        const double fy = y * sy;
        int y0 = static_cast<int>(fy);
        if (y0 >= img.height - 1) y0 = img.height - 2 >= 0 ? img.height - 2 : 0;
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_w; ++x) {
            const double fx = x * sx;
            int x0 = static_cast<int>(fx);
            if (x0 >= img.width - 1) x0 = img.width - 2 >= 0 ? img.width - 2 : 0;
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
                             wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
            out.at(x, y) = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

ImageStats compute_stats(const std::vector<GrayImage>& images) {
    if (images.empty()) throw std::invalid_argument("compute_stats: empty corpus");
    long double sum = 0.0L;
    std::size_t n = 0;
    for (const auto& img : images) {
        for (double v : img.data) sum += v;
        n += img.size();
    }
    if (n == 0) throw std::invalid_argument("compute_stats: empty corpus");
    const double mean = static_cast<double>(sum / n);
    long double sq = 0.0L;
    for (const auto& img : images)
        for (double v : img.data) sq += (v - mean) * (v - mean);
    const double var = static_cast<double>(sq / n);
    if (var <= 0.0)
        throw std::invalid_argument("compute_stats: zero variance (all pixels identical)");
    return {mean, std::sqrt(var)};
}

std::vector<double> standardize(const GrayImage& img, const ImageStats& stats) {
    if (stats.std <= 0.0) throw std::invalid_argument("standardize: std must be > 0");
    std::vector<double> out(img.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (img.data[i] - stats.mean) / stats.std;
    return out;
}

}  // namespace bonepipe
