#include "img2st/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "img2st/format.hpp"

#include <fstream>

namespace img2st {

namespace {

constexpr double kVarianceEpsilon = 1e-12;

void check_pair(const ExpressionGrid& pred, const ExpressionGrid& truth) {
    if (pred.values.shape != truth.values.shape) {
        throw std::invalid_argument("metric grids differ in shape: " + pred.values.shape_str() +
                                    " vs " + truth.values.shape_str());
    }
    if (pred.valid != truth.valid) {
        throw std::invalid_argument("metric grids differ in valid mask");
    }
}

PerGeneAgg grid_abs_power(const ExpressionGrid& pred, const ExpressionGrid& truth, bool squared) {
    check_pair(pred, truth);
    const int c = pred.genes(), h = pred.height(), w = pred.width();
    const int n_valid = truth.valid_count();
    if (n_valid == 0) throw std::invalid_argument("metric grids have no valid cells");
    PerGeneAgg out;
    out.per_gene.resize(static_cast<std::size_t>(c), 0.0);
    for (int g = 0; g < c; ++g) {
        double acc = 0.0;
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                if (!truth.is_valid(i, j)) continue;
                const double d = static_cast<double>(pred.values.at(g, i, j)) -
                                 static_cast<double>(truth.values.at(g, i, j));
                acc += squared ? d * d : std::fabs(d);
            }
        }
        out.per_gene[static_cast<std::size_t>(g)] = acc / n_valid;
    }
    out.aggregate = std::accumulate(out.per_gene.begin(), out.per_gene.end(), 0.0) / c;
    return out;
}

// masked copy of one gene plane as doubles; invalid cells are zeroed
TensorD gene_plane(const ExpressionGrid& grid, int gene) {
    const int h = grid.height(), w = grid.width();
    TensorD out({h, w});
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            out.at(i, j) = grid.is_valid(i, j) ? static_cast<double>(grid.values.at(gene, i, j)) : 0.0;
        }
    }
    return out;
}

int shrunk_window(int configured, int h, int w) {
    int limit = std::min(h, w);
    if (limit % 2 == 0) --limit;
    return std::min(configured, limit);
}

}  // namespace

void SsimConfig::validate() const {
    if (window < 3 || window % 2 == 0) throw std::invalid_argument("ssim window must be odd and >= 3");
    if (!(k1 > 0.0) || !(k2 > 0.0)) throw std::invalid_argument("ssim k1, k2 must be > 0");
    if (!(range_floor > 0.0)) throw std::invalid_argument("ssim range floor must be > 0");
    if (range_mode == DynamicRange::fixed && !(fixed_range > 0.0)) {
        throw std::invalid_argument("ssim fixed range must be > 0");
    }
}

PerGeneAgg grid_mse(const ExpressionGrid& pred, const ExpressionGrid& truth) {
    return grid_abs_power(pred, truth, true);
}

PerGeneAgg grid_mae(const ExpressionGrid& pred, const ExpressionGrid& truth) {
    return grid_abs_power(pred, truth, false);
}

PccResult pearson(const std::vector<double>& truth, const std::vector<double>& pred) {
    if (truth.size() != pred.size()) {
        throw std::invalid_argument("pearson: vectors differ in length (" + std::to_string(truth.size()) +
                                    " vs " + std::to_string(pred.size()) + ")");
    }
    const std::size_t n = truth.size();
    if (n < 2) throw std::invalid_argument("pearson needs at least 2 samples");
    double mean_t = 0.0, mean_p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_t += truth[i];
        mean_p += pred[i];
    }
    mean_t /= static_cast<double>(n);
    mean_p /= static_cast<double>(n);
    double var_t = 0.0, var_p = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dt = truth[i] - mean_t;
        const double dp = pred[i] - mean_p;
        var_t += dt * dt;
        var_p += dp * dp;
        cov += dt * dp;
    }
    var_t /= static_cast<double>(n);
    var_p /= static_cast<double>(n);
    cov /= static_cast<double>(n);
    PccResult r;
    if (var_t < kVarianceEpsilon || var_p < kVarianceEpsilon) {
        r.degenerate = true;
        return r;
    }
    r.value = cov / (std::sqrt(var_t) * std::sqrt(var_p));
    return r;
}

TensorD ssim_map(const TensorD& a, const TensorD& b, const SsimConfig& config) {
    config.validate();
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape != b.shape) {
        throw std::invalid_argument("ssim_map expects two equal 2-axis maps");
    }
    const int h = a.dim(0), w = a.dim(1);
    const int win = config.window;
    if (h < win || w < win) {
        throw std::invalid_argument("ssim_map: map " + a.shape_str() + " smaller than window " +
                                    std::to_string(win));
    }

    double range = config.fixed_range;
    if (config.range_mode == SsimConfig::DynamicRange::per_gene_joint_max) {
        range = 0.0;
        for (double v : a.data) range = std::max(range, v);
        for (double v : b.data) range = std::max(range, v);
    }
    range = std::max(range, config.range_floor);
    const double c1 = (config.k1 * range) * (config.k1 * range);
    const double c2 = (config.k2 * range) * (config.k2 * range);

    // summed-area tables over a, b, a^2, b^2, ab
    const int sw = w + 1;
    auto sat = [&](auto&& value) {
        std::vector<double> s(static_cast<std::size_t>(h + 1) * sw, 0.0);
        for (int y = 0; y < h; ++y) {
            double row = 0.0;
            for (int x = 0; x < w; ++x) {
                row += value(y, x);
                s[static_cast<std::size_t>(y + 1) * sw + (x + 1)] =
                    s[static_cast<std::size_t>(y) * sw + (x + 1)] + row;
            }
        }
        return s;
    };
    const auto sa = sat([&](int y, int x) { return a.at(y, x); });
    const auto sb = sat([&](int y, int x) { return b.at(y, x); });
    const auto saa = sat([&](int y, int x) { return a.at(y, x) * a.at(y, x); });
    const auto sbb = sat([&](int y, int x) { return b.at(y, x) * b.at(y, x); });
    const auto sab = sat([&](int y, int x) { return a.at(y, x) * b.at(y, x); });
    auto box = [&](const std::vector<double>& s, int y, int x) {
        return s[static_cast<std::size_t>(y + win) * sw + (x + win)] -
               s[static_cast<std::size_t>(y) * sw + (x + win)] -
               s[static_cast<std::size_t>(y + win) * sw + x] + s[static_cast<std::size_t>(y) * sw + x];
    };

    const double n = static_cast<double>(win) * win;
    TensorD out({h - win + 1, w - win + 1});
    for (int y = 0; y + win <= h; ++y) {
        for (int x = 0; x + win <= w; ++x) {
            const double mu_a = box(sa, y, x) / n;
            const double mu_b = box(sb, y, x) / n;
            const double var_a = box(saa, y, x) / n - mu_a * mu_a;
            const double var_b = box(sbb, y, x) / n - mu_b * mu_b;
            const double cov = box(sab, y, x) / n - mu_a * mu_b;
            out.at(y, x) = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                           ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    return out;
}

PerGeneAgg ssim_st(const ExpressionGrid& pred, const ExpressionGrid& truth, const SsimConfig& config) {
    config.validate();
    check_pair(pred, truth);
    const int c = pred.genes(), h = pred.height(), w = pred.width();
    SsimConfig effective = config;
    effective.window = shrunk_window(config.window, h, w);
    if (effective.window < 3) {
        throw std::invalid_argument("ssim_st: grid " + std::to_string(h) + "x" + std::to_string(w) +
                                    " too small for any odd window >= 3");
    }
    PerGeneAgg out;
    out.per_gene.resize(static_cast<std::size_t>(c), 0.0);
    for (int g = 0; g < c; ++g) {
        const TensorD map = ssim_map(gene_plane(pred, g), gene_plane(truth, g), effective);
        out.per_gene[static_cast<std::size_t>(g)] =
            std::accumulate(map.data.begin(), map.data.end(), 0.0) / static_cast<double>(map.numel());
    }
    out.aggregate = std::accumulate(out.per_gene.begin(), out.per_gene.end(), 0.0) / c;
    return out;
}

std::vector<ProfileEntry> mean_expression_profile(const std::vector<const ExpressionGrid*>& truth,
                                                  const std::vector<const ExpressionGrid*>& pred) {
    if (truth.empty() || truth.size() != pred.size()) {
        throw std::invalid_argument("mean_expression_profile needs matched non-empty grid lists");
    }
    const int c = truth[0]->genes();
    std::vector<double> sum_t(static_cast<std::size_t>(c), 0.0), sum_p(static_cast<std::size_t>(c), 0.0);
    std::int64_t n_cells = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        check_pair(*pred[k], *truth[k]);
        if (truth[k]->genes() != c) throw std::invalid_argument("profile grids differ in gene count");
        const int h = truth[k]->height(), w = truth[k]->width();
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                if (!truth[k]->is_valid(i, j)) continue;
                ++n_cells;
                for (int g = 0; g < c; ++g) {
                    sum_t[static_cast<std::size_t>(g)] += truth[k]->values.at(g, i, j);
                    sum_p[static_cast<std::size_t>(g)] += pred[k]->values.at(g, i, j);
                }
            }
        }
    }
    if (n_cells == 0) throw std::invalid_argument("mean_expression_profile: no valid cells in any grid");
    std::vector<ProfileEntry> out(static_cast<std::size_t>(c));
    for (int g = 0; g < c; ++g) {
        out[static_cast<std::size_t>(g)] = {g, sum_t[static_cast<std::size_t>(g)] / n_cells,
                                            sum_p[static_cast<std::size_t>(g)] / n_cells};
    }
    std::sort(out.begin(), out.end(), [](const ProfileEntry& a, const ProfileEntry& b) {
        if (a.truth_mean != b.truth_mean) return a.truth_mean > b.truth_mean;
        return a.gene < b.gene;
    });
    return out;
}

MetricsReport evaluate_grids(const std::vector<const ExpressionGrid*>& pred,
                             const std::vector<const ExpressionGrid*>& truth,
                             const std::vector<std::string>& gene_names, const SsimConfig& config) {
    if (pred.empty() || pred.size() != truth.size()) {
        throw std::invalid_argument("evaluate_grids needs matched non-empty grid lists");
    }
    const int c = truth[0]->genes();
    if (static_cast<int>(gene_names.size()) != c) {
        throw std::invalid_argument("evaluate_grids: gene name count mismatch");
    }

    MetricsReport report;
    report.gene_names = gene_names;
    report.genes.resize(static_cast<std::size_t>(c));

    std::vector<std::vector<double>> pooled_t(static_cast<std::size_t>(c)), pooled_p(static_cast<std::size_t>(c));
    std::vector<double> ssim_sum(static_cast<std::size_t>(c), 0.0);
    for (std::size_t k = 0; k < pred.size(); ++k) {
        check_pair(*pred[k], *truth[k]);
        if (truth[k]->genes() != c) throw std::invalid_argument("evaluate_grids: gene count mismatch");
        const int h = truth[k]->height(), w = truth[k]->width();
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                if (!truth[k]->is_valid(i, j)) continue;
                for (int g = 0; g < c; ++g) {
                    pooled_t[static_cast<std::size_t>(g)].push_back(truth[k]->values.at(g, i, j));
                    pooled_p[static_cast<std::size_t>(g)].push_back(pred[k]->values.at(g, i, j));
                }
            }
        }
        const auto s = ssim_st(*pred[k], *truth[k], config);
        for (int g = 0; g < c; ++g) ssim_sum[static_cast<std::size_t>(g)] += s.per_gene[static_cast<std::size_t>(g)];
    }

    double agg_mse = 0.0, agg_mae = 0.0, agg_ssim = 0.0, agg_pcc = 0.0;
    int n_pcc = 0;
    for (int g = 0; g < c; ++g) {
        auto& gm = report.genes[static_cast<std::size_t>(g)];
        const auto& pt = pooled_t[static_cast<std::size_t>(g)];
        const auto& pp = pooled_p[static_cast<std::size_t>(g)];
        double mse = 0.0, mae = 0.0;
        for (std::size_t i = 0; i < pt.size(); ++i) {
            const double d = pp[i] - pt[i];
            mse += d * d;
            mae += std::fabs(d);
        }
        gm.mse = mse / static_cast<double>(pt.size());
        gm.mae = mae / static_cast<double>(pt.size());
        const auto pr = pearson(pt, pp);
        gm.pcc = pr.value;
        gm.pcc_degenerate = pr.degenerate;
        gm.ssim_st = ssim_sum[static_cast<std::size_t>(g)] / static_cast<double>(pred.size());
        agg_mse += gm.mse;
        agg_mae += gm.mae;
        agg_ssim += gm.ssim_st;
        if (!gm.pcc_degenerate) {
            agg_pcc += gm.pcc;
            ++n_pcc;
        } else {
            ++report.pcc_degenerate_count;
        }
    }
    report.mse = agg_mse / c;
    report.mae = agg_mae / c;
    report.ssim_st = agg_ssim / c;
    report.pcc_all_degenerate = (n_pcc == 0);
    report.pcc = report.pcc_all_degenerate ? 0.0 : agg_pcc / n_pcc;
    return report;
}

std::string metrics_csv_string(const MetricsReport& report) {
    std::ostringstream os;
    os << "gene,mse,mae,pcc,pcc_degenerate,ssim_st\n";
    for (std::size_t g = 0; g < report.genes.size(); ++g) {
        const auto& gm = report.genes[g];
        os << report.gene_names[g] << ',' << fmt_g(gm.mse) << ',' << fmt_g(gm.mae) << ',';
        if (!gm.pcc_degenerate) os << fmt_g(gm.pcc);
        os << ',' << (gm.pcc_degenerate ? 1 : 0) << ',' << fmt_g(gm.ssim_st) << "\n";
    }
    os << "__aggregate__," << fmt_g(report.mse) << ',' << fmt_g(report.mae) << ',';
    if (!report.pcc_all_degenerate) os << fmt_g(report.pcc);
    os << ',' << report.pcc_degenerate_count << ',' << fmt_g(report.ssim_st) << "\n";
    return os.str();
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << metrics_csv_string(report);
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace img2st
