#pragma once

#include <string>
#include <vector>

#include "img2st/st_data.hpp"
#include "img2st/tensor.hpp"

namespace img2st {

struct SsimConfig {
    int window = 7;  // uniform (box) window, odd, >= 3
    double k1 = 0.01;
    double k2 = 0.03;
    enum class DynamicRange { per_gene_joint_max, fixed };
    DynamicRange range_mode = DynamicRange::per_gene_joint_max;
    double fixed_range = 1.0;
    double range_floor = 1e-3;

    void validate() const;
};

struct PerGeneAgg {
    std::vector<double> per_gene;
    double aggregate = 0.0;
};

struct PccResult {
    double value = 0.0;
    bool degenerate = false;  // variance below threshold on either side
};

// Per-gene mean over valid cells; masks of pred and truth must match.
PerGeneAgg grid_mse(const ExpressionGrid& pred, const ExpressionGrid& truth);
PerGeneAgg grid_mae(const ExpressionGrid& pred, const ExpressionGrid& truth);

// Pearson correlation with a degeneracy guard: population variance below
// 1e-12 on either vector yields the flag instead of an unstable number.
PccResult pearson(const std::vector<double>& truth, const std::vector<double>& pred);

// Sliding uniform-window SSIM, valid mode, population (1/n) moments.
// C1 = (k1*L)^2, C2 = (k2*L)^2 with L from the config's dynamic-range rule.
TensorD ssim_map(const TensorD& a, const TensorD& b, const SsimConfig& config);

// Per gene: masked cells zeroed in both maps, window auto-shrunk to the
// largest odd value <= min(H', W') when the grid is smaller than the
// configured window, then the mean over all window positions.
PerGeneAgg ssim_st(const ExpressionGrid& pred, const ExpressionGrid& truth, const SsimConfig& config = {});

struct ProfileEntry {
    int gene = 0;
    double truth_mean = 0.0;
    double pred_mean = 0.0;
};

// Per-gene means over all valid cells of all grids, sorted by truth mean
// descending (ties toward the lower gene index).
std::vector<ProfileEntry> mean_expression_profile(const std::vector<const ExpressionGrid*>& truth,
                                                  const std::vector<const ExpressionGrid*>& pred);

struct GeneMetric {
    double mse = 0.0;
    double mae = 0.0;
    double pcc = 0.0;
    bool pcc_degenerate = false;
    double ssim_st = 0.0;
};

struct MetricsReport {
    std::vector<std::string> gene_names;
    std::vector<GeneMetric> genes;
    double mse = 0.0;
    double mae = 0.0;
    double pcc = 0.0;  // mean over non-degenerate genes
    double ssim_st = 0.0;
    int pcc_degenerate_count = 0;
    bool pcc_all_degenerate = false;
};

// Pooled evaluation over paired (pred, truth) grids. MSE/MAE/PCC pool valid
// cells across grids per gene; SSIM-ST averages per-grid window means.
MetricsReport evaluate_grids(const std::vector<const ExpressionGrid*>& pred,
                             const std::vector<const ExpressionGrid*>& truth,
                             const std::vector<std::string>& gene_names,
                             const SsimConfig& config = {});

// CSV: gene,mse,mae,pcc,pcc_degenerate,ssim_st plus a final __aggregate__
// row; a degenerate gene leaves its pcc field empty.
void write_metrics_csv(const std::string& path, const MetricsReport& report);
std::string metrics_csv_string(const MetricsReport& report);

}  // namespace img2st
