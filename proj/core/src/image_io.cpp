#include "img2st/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace img2st {

namespace {

long clamp_byte(double v) { return std::clamp(std::lround(v), 0L, 255L); }

std::string read_pnm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {  // comment to end of line
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

}  // namespace

void write_ppm(const std::string& path, const TensorF& rgb) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3) {
        throw std::invalid_argument("write_ppm expects a 3xHxW tensor, got " + rgb.shape_str());
    }
    const int h = rgb.dim(1), w = rgb.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                row[static_cast<std::size_t>(x) * 3 + ch] =
                    static_cast<unsigned char>(clamp_byte(255.0 * rgb.at(ch, y, x)));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

TensorF read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    const std::string magic = read_pnm_token(in);
    if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not binary PPM (P6)");
    const int w = std::stoi(read_pnm_token(in));
    const int h = std::stoi(read_pnm_token(in));
    const int maxval = std::stoi(read_pnm_token(in));
    if (w <= 0 || h <= 0) throw std::runtime_error("read_ppm: bad dimensions in " + path);
    if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported, " + path);
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    }
    TensorF rgb({3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                rgb.at(ch, y, x) = static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + ch]) / 255.0f;
            }
        }
    }
    return rgb;
}

void write_pgm16(const std::string& path, const TensorF& map, float lo, float hi) {
    if (map.ndim() != 2) throw std::invalid_argument("write_pgm16 expects a 2-axis map");
    const int h = map.dim(0), w = map.dim(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm16: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n65535\n";
    const double span = static_cast<double>(hi) - static_cast<double>(lo);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            long q = 0;
            if (span > 0.0) {
                q = std::clamp(std::lround((map.at(y, x) - lo) / span * 65535.0), 0L, 65535L);
            }
            row[static_cast<std::size_t>(x) * 2] = static_cast<unsigned char>((q >> 8) & 0xff);
            row[static_cast<std::size_t>(x) * 2 + 1] = static_cast<unsigned char>(q & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_pgm16: write failed for " + path);
}

}  // namespace img2st
