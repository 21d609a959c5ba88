#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "img2st/model.hpp"
#include "img2st/st_data.hpp"
#include "img2st/training.hpp"

namespace img2st {

// Deepest encoder prefix whose pools keep even extents on a patch_px input.
int spot_trunk_depth(const ModelConfig& config, int patch_px);

// Analytic forward multiply-accumulate counts from layer shapes.
std::int64_t region_forward_macs(const ModelConfig& config);
std::int64_t spot_forward_macs(const ModelConfig& config, int patch_px);

struct FullScaleMacs {
    std::int64_t one_to_one = 0;       // 196 spot passes at 112^2
    std::int64_t image_to_image = 0;   // 1 region pass at 448^2
    double ratio = 0.0;
};

// Full-scale shapes: 448 px region, 14x14 bins, 112 px spot patches,
// 250-gene panel.
FullScaleMacs full_scale_mac_ratio();

struct BenchReport {
    std::string setting;  // "one_to_one" or "image_to_image"
    double wall_seconds_per_epoch = 0.0;
    std::int64_t forward_passes = 0;             // per epoch
    std::int64_t multiply_accumulate_count = 0;  // forward MACs per epoch
    double speedup_vs_one_to_one = 1.0;
    std::string dataset_fingerprint;
};

struct BenchConfig {
    ModelConfig model;   // region model; the spot trunk shares its widths
    TrainConfig train;   // identical optimizer config for both settings
    int epochs = 2;
    int spot_patch_px = 112;
};

// Trains both settings on the identical bin set and panel, timing each
// epoch. Timing excludes tiling and pretraining; losses are computed for
// both settings, MAC counts cover the model forward passes only.
std::pair<BenchReport, BenchReport> run_paradigm_bench(const BinTable& table, const ImageSource& image,
                                                       const GenePanel& panel, int region_px,
                                                       int bins_per_side, const BenchConfig& config);

std::string bench_reports_json(const BenchReport& one_to_one, const BenchReport& image_to_image,
                               const FullScaleMacs& full_scale);

}  // namespace img2st
