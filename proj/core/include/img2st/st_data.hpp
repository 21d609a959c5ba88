#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "img2st/tensor.hpp"

namespace img2st {

struct BinInfo {
    std::string id;
    int array_row = 0;
    int array_col = 0;
    double pixel_x = 0.0;
    double pixel_y = 0.0;
};

struct CountTriplet {
    int bin = 0;
    int gene = 0;
    std::int64_t count = 0;
};

// Sparse record of one HD slide: bin coordinates plus (bin, gene, count)
// triplets. Immutable after load/validation.
struct BinTable {
    std::vector<BinInfo> bins;
    std::vector<CountTriplet> counts;
    std::vector<std::string> gene_names;
    double bin_size_um = 8.0;
};

// Invariants: unique (array_row, array_col), triplet indices in range,
// counts >= 0, bin_size_um in {8, 16}.
void validate_bin_table(const BinTable& table);

// The TSV trio does not carry bin_size_um; callers annotate it (CLI:
// --resolution).
BinTable load_bin_table(const std::string& genes_path, const std::string& bins_path,
                        const std::string& matrix_path, double bin_size_um = 8.0);
void save_bin_table(const BinTable& table, const std::string& genes_path,
                    const std::string& bins_path, const std::string& matrix_path);

// Top-k genes by slide-wide mean raw count, ties broken toward the lower
// gene index. `genes` is sorted by descending mean.
struct GenePanel {
    std::vector<int> genes;
    std::vector<double> means;
};

GenePanel select_gene_panel(const BinTable& table, int k);

// Elementwise log(1 + count). Rejects negative entries.
std::vector<double> normalize_counts(const std::vector<double>& raw);

struct ExpressionGrid {
    TensorF values;                   // C x H' x W', log-normalized
    std::vector<std::uint8_t> valid;  // H'*W' row-major bin-present mask

    int genes() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
    bool is_valid(int i, int j) const { return valid[static_cast<std::size_t>(i) * width() + j] != 0; }
    int valid_count() const;
};

struct RegionSample {
    TensorF image;  // 3 x H x W in [0, 1]
    ExpressionGrid expression;
    double origin_x = 0.0;
    double origin_y = 0.0;
};

struct SpotSample {
    TensorF image;                  // 3 x P x P in [0, 1]
    std::vector<float> expression;  // length C, log-normalized
    double center_x = 0.0;
    double center_y = 0.0;
    bool edge_clamped = false;  // patch extended past covered pixels, zero padded
};

// Pre-extracted histology tiles indexed by pixel origin. Tiles are
// square, axis-aligned, and keyed on a tile_px lattice.
class ImageSource {
public:
    explicit ImageSource(int tile_px);

    int tile_px() const { return tile_px_; }
    std::size_t tile_count() const { return tiles_.size(); }

    // rgb is 3 x tile_px x tile_px with values in [0, 1]; origin must lie on
    // the tile lattice.
    void add_tile(std::int64_t x0, std::int64_t y0, TensorF rgb);

    // Reads tiles/tile_<x>_<y>.ppm from dir; tile_px <= 0 infers the size
    // from the first tile.
    static ImageSource load_dir(const std::string& tiles_dir, int tile_px = 0);
    void save_dir(const std::string& tiles_dir) const;

    // Zero-pads pixels outside covered tiles; sets *clipped when that happens.
    TensorF read_patch(std::int64_t x0, std::int64_t y0, int w, int h, bool* clipped = nullptr) const;

    bool covers(double px, double py) const;

private:
    int tile_px_;
    std::map<std::pair<std::int64_t, std::int64_t>, TensorF> tiles_;
};

std::vector<RegionSample> tile_regions(const BinTable& table, const ImageSource& image,
                                       int region_px, int bins_per_side, const GenePanel& panel);

std::vector<SpotSample> tile_spots(const BinTable& table, const ImageSource& image, int patch_px,
                                   const GenePanel& panel);

// Known mapping from image texture to counts: per gene, the count of a bin is
// round(scale_g * dot(w_g, mean RGB over the bin footprint)). Re-evaluable
// from emitted tiles, so synthetic training signal is recoverable.
struct PlantedRule {
    std::vector<std::array<double, 3>> channel_weight;
    std::vector<double> scale;

    static PlantedRule from_seed(std::uint64_t seed, int genes);
    std::int64_t count_for(const TensorF& bin_patch, int gene) const;
};

struct SynthConfig {
    std::uint64_t seed = 0;
    int regions_x = 2;
    int regions_y = 2;
    int genes = 8;
    int region_px = 64;
    int bins_per_side = 4;
    double bin_size_um = 8.0;
    double bin_dropout = 0.1;  // fraction of lattice sites left unmeasured
    int blobs_per_region = 6;
};

struct SynthSlide {
    BinTable table;
    ImageSource image;
    SynthConfig config;
};

SynthSlide synth_slide(const SynthConfig& config);

struct SplitIndices {
    std::vector<int> train;
    std::vector<int> test;
};

// Deterministic shuffled split at sample granularity; both sides non-empty.
SplitIndices split_train_test(int n_samples, double ratio, std::uint64_t seed);

// Little-endian binary grid file: magic "IST1", u32 C, H', W', C*H'*W' f32
// values, H'*W' u8 mask.
void write_expression_grid(const std::string& path, const ExpressionGrid& grid);
ExpressionGrid read_expression_grid(const std::string& path);

// FNV-1a over bins, counts, gene names, and the selected panel; used to
// assert both benchmark settings saw identical data.
std::uint64_t dataset_fingerprint(const BinTable& table, const GenePanel& panel);
std::string fingerprint_hex(std::uint64_t fp);

// Bin lattice pitch in pixels, inferred from adjacent distinct center
// coordinates.
double infer_bin_pitch(const BinTable& table);

}  // namespace img2st
