#include "img2st/st_data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "img2st/format.hpp"
#include "img2st/image_io.hpp"
#include "img2st/rng.hpp"

namespace fs = std::filesystem;

namespace img2st {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over seed ^ salt
    std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

// nearest index with ties toward the lower coordinate
int half_down_round(double v) { return static_cast<int>(std::ceil(v - 0.5)); }

std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return out;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

[[noreturn]] void parse_fail(const std::string& path, int line_no, const std::string& what) {
    throw std::runtime_error(path + " line " + std::to_string(line_no) + ": " + what);
}

std::int64_t parse_int(const std::string& tok, const std::string& path, int line_no,
                       const char* field) {
    std::int64_t v = 0;
    const char* b = tok.data();
    const char* e = tok.data() + tok.size();
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e || tok.empty()) {
        parse_fail(path, line_no, std::string("cannot parse integer field '") + field + "' from \"" + tok + "\"");
    }
    return v;
}

double parse_double(const std::string& tok, const std::string& path, int line_no, const char* field) {
    if (tok.empty()) parse_fail(path, line_no, std::string("empty numeric field '") + field + "'");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || !std::isfinite(v)) {
        parse_fail(path, line_no, std::string("cannot parse number field '") + field + "' from \"" + tok + "\"");
    }
    return v;
}

std::ifstream open_or_fail(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return in;
}

void fnv_bytes(std::uint64_t& h, const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
}

void fnv_i64(std::uint64_t& h, std::int64_t v) { fnv_bytes(h, &v, sizeof(v)); }

void fnv_f64(std::uint64_t& h, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    fnv_bytes(h, &bits, sizeof(bits));
}

void fnv_str(std::uint64_t& h, const std::string& s) {
    fnv_i64(h, static_cast<std::int64_t>(s.size()));
    fnv_bytes(h, s.data(), s.size());
}

void put_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw std::runtime_error(path + ": truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32_le(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u32_le(out, bits);
}

float get_f32_le(std::istream& in, const std::string& path) {
    const std::uint32_t bits = get_u32_le(in, path);
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace

void validate_bin_table(const BinTable& table) {
    if (table.bin_size_um != 8.0 && table.bin_size_um != 16.0) {
        throw std::runtime_error("bin_size_um must be 8 or 16, got " + fmt_g(table.bin_size_um));
    }
    std::map<std::pair<int, int>, std::size_t> seen;
    for (std::size_t i = 0; i < table.bins.size(); ++i) {
        const auto& b = table.bins[i];
        const auto key = std::make_pair(b.array_row, b.array_col);
        auto [it, inserted] = seen.emplace(key, i);
        if (!inserted) {
            throw std::runtime_error("duplicate bin grid coordinate (" + std::to_string(b.array_row) +
                                     "," + std::to_string(b.array_col) + "): bins '" +
                                     table.bins[it->second].id + "' and '" + b.id + "'");
        }
        if (!std::isfinite(b.pixel_x) || !std::isfinite(b.pixel_y)) {
            throw std::runtime_error("bin '" + b.id + "' has non-finite pixel center");
        }
    }
    const auto n_bins = static_cast<std::int64_t>(table.bins.size());
    const auto n_genes = static_cast<std::int64_t>(table.gene_names.size());
    for (const auto& t : table.counts) {
        if (t.bin < 0 || t.bin >= n_bins) {
            throw std::runtime_error("count triplet bin index " + std::to_string(t.bin) + " out of range");
        }
        if (t.gene < 0 || t.gene >= n_genes) {
            throw std::runtime_error("count triplet gene index " + std::to_string(t.gene) + " out of range");
        }
        if (t.count < 0) {
            throw std::runtime_error("negative count " + std::to_string(t.count) + " at bin " +
                                     std::to_string(t.bin) + ", gene " + std::to_string(t.gene));
        }
    }
}

BinTable load_bin_table(const std::string& genes_path, const std::string& bins_path,
                        const std::string& matrix_path, double bin_size_um) {
    BinTable table;
    table.bin_size_um = bin_size_um;
    {
        auto in = open_or_fail(genes_path);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            line = strip_cr(line);
            if (line_no == 1) {
                if (line != "gene_name") parse_fail(genes_path, 1, "expected header 'gene_name'");
                continue;
            }
            if (line.empty()) parse_fail(genes_path, line_no, "empty gene name");
            table.gene_names.push_back(line);
        }
    }
    {
        auto in = open_or_fail(bins_path);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            line = strip_cr(line);
            if (line_no == 1) {
                if (line != "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y") {
                    parse_fail(bins_path, 1, "unexpected header");
                }
                continue;
            }
            if (line.empty()) continue;
            const auto f = split_tsv(line);
            if (f.size() != 5) {
                parse_fail(bins_path, line_no, "expected 5 fields, got " + std::to_string(f.size()));
            }
            BinInfo b;
            b.id = f[0];
            b.array_row = static_cast<int>(parse_int(f[1], bins_path, line_no, "array_row"));
            b.array_col = static_cast<int>(parse_int(f[2], bins_path, line_no, "array_col"));
            b.pixel_x = parse_double(f[3], bins_path, line_no, "pixel_x");
            b.pixel_y = parse_double(f[4], bins_path, line_no, "pixel_y");
            table.bins.push_back(std::move(b));
        }
    }
    {
        auto in = open_or_fail(matrix_path);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            line = strip_cr(line);
            if (line_no == 1) {
                if (line != "bin_index\tgene_index\tcount") parse_fail(matrix_path, 1, "unexpected header");
                continue;
            }
            if (line.empty()) continue;
            const auto f = split_tsv(line);
            if (f.size() != 3) {
                parse_fail(matrix_path, line_no, "expected 3 fields, got " + std::to_string(f.size()));
            }
            CountTriplet t;
            t.bin = static_cast<int>(parse_int(f[0], matrix_path, line_no, "bin_index"));
            t.gene = static_cast<int>(parse_int(f[1], matrix_path, line_no, "gene_index"));
            t.count = parse_int(f[2], matrix_path, line_no, "count");
            table.counts.push_back(t);
        }
    }
    validate_bin_table(table);
    return table;
}

void save_bin_table(const BinTable& table, const std::string& genes_path,
                    const std::string& bins_path, const std::string& matrix_path) {
    {
        std::ofstream out(genes_path);
        if (!out) throw std::runtime_error("cannot open " + genes_path);
        out << "gene_name\n";
        for (const auto& g : table.gene_names) out << g << "\n";
    }
    {
        std::ofstream out(bins_path);
        if (!out) throw std::runtime_error("cannot open " + bins_path);
        out << "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n";
        for (const auto& b : table.bins) {
            out << b.id << '\t' << b.array_row << '\t' << b.array_col << '\t' << fmt_g(b.pixel_x)
                << '\t' << fmt_g(b.pixel_y) << "\n";
        }
    }
    {
        std::ofstream out(matrix_path);
        if (!out) throw std::runtime_error("cannot open " + matrix_path);
        out << "bin_index\tgene_index\tcount\n";
        for (const auto& t : table.counts) {
            out << t.bin << '\t' << t.gene << '\t' << t.count << "\n";
        }
    }
}

GenePanel select_gene_panel(const BinTable& table, int k) {
    const int n_genes = static_cast<int>(table.gene_names.size());
    if (k < 1 || k > n_genes) {
        throw std::invalid_argument("gene panel size " + std::to_string(k) + " out of range [1," +
                                    std::to_string(n_genes) + "]");
    }
    std::vector<double> sums(static_cast<std::size_t>(n_genes), 0.0);
    for (const auto& t : table.counts) sums[static_cast<std::size_t>(t.gene)] += static_cast<double>(t.count);
    const double denom = table.bins.empty() ? 1.0 : static_cast<double>(table.bins.size());
    std::vector<int> order(static_cast<std::size_t>(n_genes));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double ma = sums[static_cast<std::size_t>(a)];
        const double mb = sums[static_cast<std::size_t>(b)];
        if (ma != mb) return ma > mb;
        return a < b;
    });
    GenePanel panel;
    panel.genes.assign(order.begin(), order.begin() + k);
    panel.means.reserve(static_cast<std::size_t>(k));
    for (int g : panel.genes) panel.means.push_back(sums[static_cast<std::size_t>(g)] / denom);
    return panel;
}

std::vector<double> normalize_counts(const std::vector<double>& raw) {
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!(raw[i] >= 0.0)) {
            throw std::invalid_argument("normalize_counts: negative count " + fmt_g(raw[i]) +
                                        " at index " + std::to_string(i));
        }
        out[i] = std::log1p(raw[i]);
    }
    return out;
}

int ExpressionGrid::valid_count() const {
    int n = 0;
    for (auto v : valid) n += v != 0;
    return n;
}

ImageSource::ImageSource(int tile_px) : tile_px_(tile_px) {
    if (tile_px <= 0) throw std::invalid_argument("tile_px must be positive");
}

void ImageSource::add_tile(std::int64_t x0, std::int64_t y0, TensorF rgb) {
    if (x0 % tile_px_ != 0 || y0 % tile_px_ != 0) {
        throw std::invalid_argument("tile origin must lie on the tile lattice");
    }
    if (rgb.ndim() != 3 || rgb.dim(0) != 3 || rgb.dim(1) != tile_px_ || rgb.dim(2) != tile_px_) {
        throw std::invalid_argument("tile must be 3x" + std::to_string(tile_px_) + "x" +
                                    std::to_string(tile_px_) + ", got " + rgb.shape_str());
    }
    auto [it, inserted] = tiles_.emplace(std::make_pair(x0, y0), std::move(rgb));
    if (!inserted) {
        throw std::invalid_argument("duplicate tile at (" + std::to_string(x0) + "," + std::to_string(y0) + ")");
    }
}

ImageSource ImageSource::load_dir(const std::string& tiles_dir, int tile_px) {
    if (!fs::is_directory(tiles_dir)) throw std::runtime_error("tiles directory not found: " + tiles_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(tiles_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (tile_px <= 0) {  // infer from the first tile
        if (files.empty()) throw std::runtime_error("no .ppm tiles in " + tiles_dir);
        tile_px = read_ppm(files.front().string()).dim(1);
    }
    ImageSource src(tile_px);
    for (const auto& p : files) {
        const std::string stem = p.stem().string();
        std::int64_t x = 0, y = 0;
        if (std::sscanf(stem.c_str(), "tile_%ld_%ld", &x, &y) != 2) {
            throw std::runtime_error("unrecognized tile filename: " + p.string());
        }
        src.add_tile(x, y, read_ppm(p.string()));
    }
    return src;
}

void ImageSource::save_dir(const std::string& tiles_dir) const {
    fs::create_directories(tiles_dir);
    for (const auto& [key, rgb] : tiles_) {
        std::ostringstream name;
        name << "tile_" << key.first << "_" << key.second << ".ppm";
        write_ppm((fs::path(tiles_dir) / name.str()).string(), rgb);
    }
}

TensorF ImageSource::read_patch(std::int64_t x0, std::int64_t y0, int w, int h, bool* clipped) const {
    TensorF out({3, h, w});
    bool clip = false;
    const TensorF* cached = nullptr;
    std::pair<std::int64_t, std::int64_t> cached_key{0, 0};
    for (int y = 0; y < h; ++y) {
        const std::int64_t gy = y0 + y;
        for (int x = 0; x < w; ++x) {
            const std::int64_t gx = x0 + x;
            const std::pair<std::int64_t, std::int64_t> key{floor_div(gx, tile_px_) * tile_px_,
                                                            floor_div(gy, tile_px_) * tile_px_};
            if (cached == nullptr || key != cached_key) {
                auto it = tiles_.find(key);
                cached = (it == tiles_.end()) ? nullptr : &it->second;
                cached_key = key;
                if (cached == nullptr) {
                    clip = true;
                    continue;  // zeros already in place
                }
            }
            if (cached == nullptr) {
                clip = true;
                continue;
            }
            const int lx = static_cast<int>(gx - key.first);
            const int ly = static_cast<int>(gy - key.second);
            for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = cached->at(ch, ly, lx);
        }
    }
    if (clipped) *clipped = clip;
    return out;
}

bool ImageSource::covers(double px, double py) const {
    const auto gx = static_cast<std::int64_t>(std::floor(px));
    const auto gy = static_cast<std::int64_t>(std::floor(py));
    const std::pair<std::int64_t, std::int64_t> key{floor_div(gx, tile_px_) * tile_px_,
                                                    floor_div(gy, tile_px_) * tile_px_};
    return tiles_.count(key) != 0;
}

namespace {

// per-bin counts restricted to panel genes, as dense panel-slot vectors
std::vector<std::vector<std::int64_t>> panel_counts_by_bin(const BinTable& table, const GenePanel& panel) {
    std::vector<int> slot_of_gene(table.gene_names.size(), -1);
    for (std::size_t s = 0; s < panel.genes.size(); ++s) {
        const int g = panel.genes[s];
        if (g < 0 || g >= static_cast<int>(table.gene_names.size())) {
            throw std::invalid_argument("panel gene index out of range");
        }
        slot_of_gene[static_cast<std::size_t>(g)] = static_cast<int>(s);
    }
    std::vector<std::vector<std::int64_t>> by_bin(table.bins.size(),
                                                  std::vector<std::int64_t>(panel.genes.size(), 0));
    for (const auto& t : table.counts) {
        const int slot = slot_of_gene[static_cast<std::size_t>(t.gene)];
        if (slot >= 0) by_bin[static_cast<std::size_t>(t.bin)][static_cast<std::size_t>(slot)] += t.count;
    }
    return by_bin;
}

}  // namespace

std::vector<RegionSample> tile_regions(const BinTable& table, const ImageSource& image,
                                       int region_px, int bins_per_side, const GenePanel& panel) {
    if (bins_per_side < 1 || region_px < 1 || region_px % bins_per_side != 0) {
        throw std::invalid_argument("region_px " + std::to_string(region_px) +
                                    " not divisible by bins_per_side " + std::to_string(bins_per_side));
    }
    const int pitch = region_px / bins_per_side;
    const auto by_bin = panel_counts_by_bin(table, panel);
    const int c = static_cast<int>(panel.genes.size());

    struct CellAssign {
        std::size_t bin;
        double dist2;
    };
    // (ry, rx) -> cell index -> assignment
    std::map<std::pair<std::int64_t, std::int64_t>, std::map<int, CellAssign>> regions;

    for (std::size_t bi = 0; bi < table.bins.size(); ++bi) {
        const auto& b = table.bins[bi];
        if (!image.covers(b.pixel_x, b.pixel_y)) {
            throw std::runtime_error("bin '" + b.id + "' center (" + fmt_g(b.pixel_x) + "," +
                                     fmt_g(b.pixel_y) + ") outside image bounds");
        }
        const auto rx = static_cast<std::int64_t>(std::floor(b.pixel_x / region_px));
        const auto ry = static_cast<std::int64_t>(std::floor(b.pixel_y / region_px));
        const double lx = b.pixel_x - static_cast<double>(rx * region_px);
        const double ly = b.pixel_y - static_cast<double>(ry * region_px);
        const int j = std::clamp(half_down_round(lx / pitch - 0.5), 0, bins_per_side - 1);
        const int i = std::clamp(half_down_round(ly / pitch - 0.5), 0, bins_per_side - 1);
        const double cxp = (j + 0.5) * pitch;
        const double cyp = (i + 0.5) * pitch;
        const double d2 = (lx - cxp) * (lx - cxp) + (ly - cyp) * (ly - cyp);
        auto& cells = regions[{ry, rx}];
        const int cell = i * bins_per_side + j;
        auto it = cells.find(cell);
        if (it == cells.end()) {
            cells.emplace(cell, CellAssign{bi, d2});
        } else {
            // the cell keeps the nearest bin center, ties toward lower (y, x)
            const auto& held = table.bins[it->second.bin];
            const bool replace =
                d2 < it->second.dist2 ||
                (d2 == it->second.dist2 &&
                 std::make_pair(b.pixel_y, b.pixel_x) < std::make_pair(held.pixel_y, held.pixel_x));
            if (replace) it->second = CellAssign{bi, d2};
        }
    }

    std::vector<RegionSample> out;
    out.reserve(regions.size());
    for (const auto& [key, cells] : regions) {
        const auto [ry, rx] = key;
        RegionSample s;
        s.origin_x = static_cast<double>(rx * region_px);
        s.origin_y = static_cast<double>(ry * region_px);
        s.image = image.read_patch(rx * region_px, ry * region_px, region_px, region_px);
        s.expression.values = TensorF({c, bins_per_side, bins_per_side});
        s.expression.valid.assign(static_cast<std::size_t>(bins_per_side) * bins_per_side, 0);
        for (const auto& [cell, assign] : cells) {
            s.expression.valid[static_cast<std::size_t>(cell)] = 1;
            const int i = cell / bins_per_side;
            const int j = cell % bins_per_side;
            const auto& counts = by_bin[assign.bin];
            for (int g = 0; g < c; ++g) {
                s.expression.values.at(g, i, j) =
                    static_cast<float>(std::log1p(static_cast<double>(counts[static_cast<std::size_t>(g)])));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SpotSample> tile_spots(const BinTable& table, const ImageSource& image, int patch_px,
                                   const GenePanel& panel) {
    if (patch_px < 1) throw std::invalid_argument("patch_px must be positive");
    const auto by_bin = panel_counts_by_bin(table, panel);
    std::vector<SpotSample> out;
    out.reserve(table.bins.size());
    for (std::size_t bi = 0; bi < table.bins.size(); ++bi) {
        const auto& b = table.bins[bi];
        SpotSample s;
        s.center_x = b.pixel_x;
        s.center_y = b.pixel_y;
        const std::int64_t x0 = std::llround(b.pixel_x) - patch_px / 2;
        const std::int64_t y0 = std::llround(b.pixel_y) - patch_px / 2;
        bool clipped = false;
        s.image = image.read_patch(x0, y0, patch_px, patch_px, &clipped);
        s.edge_clamped = clipped;
        const auto& counts = by_bin[bi];
        s.expression.resize(counts.size());
        for (std::size_t g = 0; g < counts.size(); ++g) {
            s.expression[g] = static_cast<float>(std::log1p(static_cast<double>(counts[g])));
        }
        out.push_back(std::move(s));
    }
    return out;
}

PlantedRule PlantedRule::from_seed(std::uint64_t seed, int genes) {
    Rng rng(mix_seed(seed, 0x706c616e74ULL));  // rule stream independent of tile/bin streams
    PlantedRule rule;
    rule.channel_weight.resize(static_cast<std::size_t>(genes));
    rule.scale.resize(static_cast<std::size_t>(genes));
    for (int g = 0; g < genes; ++g) {
        for (int ch = 0; ch < 3; ++ch) {
            rule.channel_weight[static_cast<std::size_t>(g)][static_cast<std::size_t>(ch)] =
                rng.uniform(0.1, 1.0);
        }
        rule.scale[static_cast<std::size_t>(g)] = rng.uniform(15.0, 60.0);
    }
    return rule;
}

std::int64_t PlantedRule::count_for(const TensorF& bin_patch, int gene) const {
    if (bin_patch.ndim() != 3 || bin_patch.dim(0) != 3) {
        throw std::invalid_argument("planted rule expects a 3xPxP patch");
    }
    const int h = bin_patch.dim(1), w = bin_patch.dim(2);
    const auto& wg = channel_weight[static_cast<std::size_t>(gene)];
    double v = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) acc += static_cast<double>(bin_patch.at(ch, y, x));
        }
        v += wg[static_cast<std::size_t>(ch)] * (acc / (static_cast<double>(h) * w));
    }
    const auto count = std::llround(scale[static_cast<std::size_t>(gene)] * v);
    return count < 0 ? 0 : count;
}

SynthSlide synth_slide(const SynthConfig& config) {
    if (config.regions_x < 0 || config.regions_y < 0) throw std::invalid_argument("negative region count");
    if (config.genes < 1) throw std::invalid_argument("synth needs at least one gene");
    if (config.bins_per_side < 1 || config.region_px % config.bins_per_side != 0) {
        throw std::invalid_argument("region_px must be divisible by bins_per_side");
    }
    if (config.bin_size_um != 8.0 && config.bin_size_um != 16.0) {
        throw std::invalid_argument("bin_size_um must be 8 or 16");
    }
    if (config.bin_dropout < 0.0 || config.bin_dropout >= 1.0) {
        throw std::invalid_argument("bin_dropout must be in [0,1)");
    }

    SynthSlide slide{BinTable{}, ImageSource(config.region_px), config};
    slide.table.bin_size_um = config.bin_size_um;
    for (int g = 0; g < config.genes; ++g) {
        char name[32];
        std::snprintf(name, sizeof(name), "gene_%03d", g);
        slide.table.gene_names.emplace_back(name);
    }

    const int pitch = config.region_px / config.bins_per_side;
    const auto rule = PlantedRule::from_seed(config.seed, config.genes);

    // histology tiles: smooth per-channel blobs on a flat base, quantized to
    // 8-bit before any counts are derived so the rule round-trips through PPM
    for (std::int64_t ry = 0; ry < config.regions_y; ++ry) {
        for (std::int64_t rx = 0; rx < config.regions_x; ++rx) {
            Rng rng(mix_seed(config.seed, 0x74696c65ULL ^ (static_cast<std::uint64_t>(ry) << 20 ^
                                                           static_cast<std::uint64_t>(rx))));
            double base[3];
            for (double& b : base) b = rng.uniform(60.0, 120.0);
            struct Blob {
                int ch;
                double cx, cy, sigma, amp;
            };
            std::vector<Blob> blobs;
            for (int k = 0; k < config.blobs_per_region; ++k) {
                Blob b;
                b.ch = static_cast<int>(rng.uniform_int(0, 2));
                b.cx = rng.uniform(0.0, config.region_px);
                b.cy = rng.uniform(0.0, config.region_px);
                b.sigma = rng.uniform(config.region_px / 16.0, config.region_px / 4.0);
                b.amp = rng.uniform(40.0, 135.0);
                blobs.push_back(b);
            }
            TensorF tile({3, config.region_px, config.region_px});
            for (int y = 0; y < config.region_px; ++y) {
                for (int x = 0; x < config.region_px; ++x) {
                    double v[3] = {base[0], base[1], base[2]};
                    for (const auto& b : blobs) {
                        const double dx = x - b.cx, dy = y - b.cy;
                        v[b.ch] += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
                    }
                    for (int ch = 0; ch < 3; ++ch) {
                        const long q = std::clamp(std::lround(v[ch]), 0L, 255L);
                        tile.at(ch, y, x) = static_cast<float>(q) / 255.0f;
                    }
                }
            }
            slide.image.add_tile(rx * config.region_px, ry * config.region_px, std::move(tile));
        }
    }

    const int ny = config.regions_y * config.bins_per_side;
    const int nx = config.regions_x * config.bins_per_side;
    for (int row = 0; row < ny; ++row) {
        for (int col = 0; col < nx; ++col) {
            Rng rng(mix_seed(config.seed, 0x62696eULL ^ (static_cast<std::uint64_t>(row) << 24 ^
                                                         static_cast<std::uint64_t>(col))));
            if (rng.uniform() < config.bin_dropout) continue;
            BinInfo b;
            char id[48];
            std::snprintf(id, sizeof(id), "bin_%d_%d", row, col);
            b.id = id;
            b.array_row = row;
            b.array_col = col;
            b.pixel_x = (col + 0.5) * pitch;
            b.pixel_y = (row + 0.5) * pitch;
            const int bin_index = static_cast<int>(slide.table.bins.size());
            const TensorF footprint = slide.image.read_patch(static_cast<std::int64_t>(col) * pitch,
                                                             static_cast<std::int64_t>(row) * pitch,
                                                             pitch, pitch);
            for (int g = 0; g < config.genes; ++g) {
                const std::int64_t count = rule.count_for(footprint, g);
                if (count > 0) slide.table.counts.push_back({bin_index, g, count});
            }
            slide.table.bins.push_back(std::move(b));
        }
    }
    validate_bin_table(slide.table);
    return slide;
}

SplitIndices split_train_test(int n_samples, double ratio, std::uint64_t seed) {
    if (n_samples < 2) throw std::invalid_argument("split needs at least 2 samples");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0,1)");
    std::vector<int> idx(static_cast<std::size_t>(n_samples));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(mix_seed(seed, 0x73706c6974ULL));
    rng.shuffle(idx);
    const int n_train = std::clamp(static_cast<int>(std::llround(n_samples * ratio)), 1, n_samples - 1);
    SplitIndices split;
    split.train.assign(idx.begin(), idx.begin() + n_train);
    split.test.assign(idx.begin() + n_train, idx.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

void write_expression_grid(const std::string& path, const ExpressionGrid& grid) {
    if (grid.values.ndim() != 3) throw std::invalid_argument("expression grid values must be CxHxW");
    if (grid.valid.size() != static_cast<std::size_t>(grid.height()) * grid.width()) {
        throw std::invalid_argument("expression grid mask size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write("IST1", 4);
    put_u32_le(out, static_cast<std::uint32_t>(grid.genes()));
    put_u32_le(out, static_cast<std::uint32_t>(grid.height()));
    put_u32_le(out, static_cast<std::uint32_t>(grid.width()));
    for (float v : grid.values.data) put_f32_le(out, v);
    out.write(reinterpret_cast<const char*>(grid.valid.data()),
              static_cast<std::streamsize>(grid.valid.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

ExpressionGrid read_expression_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "IST1", 4) != 0) {
        throw std::runtime_error(path + ": not an IST1 expression grid file");
    }
    const std::uint32_t c = get_u32_le(in, path);
    const std::uint32_t h = get_u32_le(in, path);
    const std::uint32_t w = get_u32_le(in, path);
    if (c == 0 || h == 0 || w == 0 || c > (1u << 20) || h > (1u << 16) || w > (1u << 16)) {
        throw std::runtime_error(path + ": implausible grid dimensions");
    }
    ExpressionGrid grid;
    grid.values = TensorF({static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
    for (float& v : grid.values.data) v = get_f32_le(in, path);
    grid.valid.resize(static_cast<std::size_t>(h) * w);
    in.read(reinterpret_cast<char*>(grid.valid.data()), static_cast<std::streamsize>(grid.valid.size()));
    if (static_cast<std::size_t>(in.gcount()) != grid.valid.size()) {
        throw std::runtime_error(path + ": truncated mask");
    }
    return grid;
}

std::uint64_t dataset_fingerprint(const BinTable& table, const GenePanel& panel) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    fnv_f64(h, table.bin_size_um);
    fnv_i64(h, static_cast<std::int64_t>(table.bins.size()));
    for (const auto& b : table.bins) {
        fnv_str(h, b.id);
        fnv_i64(h, b.array_row);
        fnv_i64(h, b.array_col);
        fnv_f64(h, b.pixel_x);
        fnv_f64(h, b.pixel_y);
    }
    fnv_i64(h, static_cast<std::int64_t>(table.gene_names.size()));
    for (const auto& g : table.gene_names) fnv_str(h, g);
    fnv_i64(h, static_cast<std::int64_t>(table.counts.size()));
    for (const auto& t : table.counts) {
        fnv_i64(h, t.bin);
        fnv_i64(h, t.gene);
        fnv_i64(h, t.count);
    }
    fnv_i64(h, static_cast<std::int64_t>(panel.genes.size()));
    for (std::size_t i = 0; i < panel.genes.size(); ++i) {
        fnv_i64(h, panel.genes[i]);
        fnv_f64(h, panel.means[i]);
    }
    return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

double infer_bin_pitch(const BinTable& table) {
    auto min_gap = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        double best = 0.0;
        for (std::size_t i = 1; i < v.size(); ++i) {
            const double d = v[i] - v[i - 1];
            if (d > 1e-9 && (best == 0.0 || d < best)) best = d;
        }
        return best;
    };
    std::vector<double> xs, ys;
    xs.reserve(table.bins.size());
    ys.reserve(table.bins.size());
    for (const auto& b : table.bins) {
        xs.push_back(b.pixel_x);
        ys.push_back(b.pixel_y);
    }
    const double gx = min_gap(std::move(xs));
    const double gy = min_gap(std::move(ys));
    double pitch = 0.0;
    if (gx > 0.0 && gy > 0.0) {
        pitch = std::min(gx, gy);
    } else {
        pitch = std::max(gx, gy);
    }
    if (pitch <= 0.0) throw std::runtime_error("cannot infer bin pitch: need at least two distinct centers");
    return pitch;
}

}  // namespace img2st
