#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "img2st/tensor.hpp"

namespace img2st {

struct LossConfig {
    double lambda = 0.25;
    double tau = 0.07;
    enum class NegativeScope { region, batch };
    NegativeScope negative_scope = NegativeScope::region;

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("loss lambda must be >= 0");
        if (!(tau > 0.0)) throw std::invalid_argument("loss tau must be > 0");
    }
};

struct LossBreakdown {
    double l_reg = 0.0;
    double l_contrast = 0.0;
    double l_total = 0.0;
    int valid_cell_count = 0;
};

using CellMask = std::vector<std::uint8_t>;  // H'*W' row-major

namespace detail {

// accumulator precision: extended-precision tensors keep extended sums so
// gradient-check closures are not floored by double rounding
template <typename S>
struct AccOf {
    using type = double;
};
template <>
struct AccOf<long double> {
    using type = long double;
};

template <typename S>
void check_grid_pair(const Tensor<S>& pred, const Tensor<S>& truth, const CellMask& mask) {
    if (pred.ndim() != 3 || truth.ndim() != 3) {
        throw std::invalid_argument("loss grids must be CxHxW");
    }
    if (pred.shape != truth.shape) {
        throw std::invalid_argument("loss grids differ in shape: " + pred.shape_str() + " vs " +
                                    truth.shape_str());
    }
    if (mask.size() != static_cast<std::size_t>(pred.dim(1)) * pred.dim(2)) {
        throw std::invalid_argument("loss mask size does not match grid");
    }
}

inline int mask_count(const CellMask& mask) {
    int n = 0;
    for (auto v : mask) n += v != 0;
    return n;
}

}  // namespace detail

// Mean squared error over all genes and valid cells:
// (1 / (C * |valid|)) * sum over c and valid (i,j) of (pred - truth)^2.
template <typename S>
typename detail::AccOf<S>::type regression_loss(const Tensor<S>& pred, const Tensor<S>& truth,
                                                const CellMask& mask) {
    using A = typename detail::AccOf<S>::type;
    detail::check_grid_pair(pred, truth, mask);
    const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    const int n_valid = detail::mask_count(mask);
    if (n_valid == 0) throw std::invalid_argument("regression_loss: no valid cells");
    A acc = 0;
    for (int g = 0; g < c; ++g) {
        const S* p = pred.ptr() + static_cast<std::int64_t>(g) * h * w;
        const S* t = truth.ptr() + static_cast<std::int64_t>(g) * h * w;
        for (int i = 0; i < h * w; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            const A d = static_cast<A>(p[i]) - static_cast<A>(t[i]);
            acc += d * d;
        }
    }
    return acc / (static_cast<A>(c) * n_valid);
}

template <typename S>
Tensor<S> regression_loss_backward(const Tensor<S>& pred, const Tensor<S>& truth, const CellMask& mask) {
    detail::check_grid_pair(pred, truth, mask);
    const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    const int n_valid = detail::mask_count(mask);
    if (n_valid == 0) throw std::invalid_argument("regression_loss: no valid cells");
    const double scale = 2.0 / (static_cast<double>(c) * n_valid);
    Tensor<S> grad(pred.shape);
    for (int g = 0; g < c; ++g) {
        const S* p = pred.ptr() + static_cast<std::int64_t>(g) * h * w;
        const S* t = truth.ptr() + static_cast<std::int64_t>(g) * h * w;
        S* gp = grad.ptr() + static_cast<std::int64_t>(g) * h * w;
        for (int i = 0; i < h * w; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            gp[i] = static_cast<S>(scale * (static_cast<double>(p[i]) - static_cast<double>(t[i])));
        }
    }
    return grad;
}

namespace detail {

constexpr double kNormEpsilon = 1e-12;

// Cosine-similarity InfoNCE over matched column pairs. anchors and targets
// are (M, d); pair m is positive, every target is in the denominator.
template <typename S>
struct NceWork {
    using A = typename AccOf<S>::type;
    int m = 0, d = 0;
    std::vector<A> anchor_norm, target_norm;
    std::vector<A> anchor_unit, target_unit;  // M*d, row-major
    std::vector<A> sim;                       // M*M, anchors x targets
};

template <typename S>
NceWork<S> nce_prepare(const Tensor<S>& anchors, const Tensor<S>& targets, double tau) {
    using A = typename AccOf<S>::type;
    if (anchors.ndim() != 2 || targets.ndim() != 2 || anchors.shape != targets.shape) {
        throw std::invalid_argument("info_nce expects matched (M,d) tensors");
    }
    if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be > 0");
    NceWork<S> wk;
    wk.m = anchors.dim(0);
    wk.d = anchors.dim(1);
    if (wk.m < 2) throw std::invalid_argument("info_nce needs at least 2 cells (a positive needs a negative)");
    wk.anchor_norm.resize(static_cast<std::size_t>(wk.m));
    wk.target_norm.resize(static_cast<std::size_t>(wk.m));
    wk.anchor_unit.resize(static_cast<std::size_t>(wk.m) * wk.d);
    wk.target_unit.resize(static_cast<std::size_t>(wk.m) * wk.d);
    auto normalize = [&](const Tensor<S>& src, std::vector<A>& unit, std::vector<A>& norms,
                         const char* what) {
        for (int i = 0; i < wk.m; ++i) {
            A sq = 0;
            for (int k = 0; k < wk.d; ++k) {
                const A v = static_cast<A>(src.at(i, k));
                sq += v * v;
            }
            const A n = std::sqrt(sq);
            if (n < static_cast<A>(kNormEpsilon)) {
                throw std::invalid_argument(std::string("info_nce: ") + what + " embedding " +
                                            std::to_string(i) + " has near-zero norm; cosine undefined");
            }
            norms[static_cast<std::size_t>(i)] = n;
            for (int k = 0; k < wk.d; ++k) {
                unit[static_cast<std::size_t>(i) * wk.d + k] = static_cast<A>(src.at(i, k)) / n;
            }
        }
    };
    normalize(anchors, wk.anchor_unit, wk.anchor_norm, "anchor");
    normalize(targets, wk.target_unit, wk.target_norm, "target");
    wk.sim.resize(static_cast<std::size_t>(wk.m) * wk.m);
    for (int i = 0; i < wk.m; ++i) {
        for (int j = 0; j < wk.m; ++j) {
            A s = 0;
            for (int k = 0; k < wk.d; ++k) {
                s += wk.anchor_unit[static_cast<std::size_t>(i) * wk.d + k] *
                     wk.target_unit[static_cast<std::size_t>(j) * wk.d + k];
            }
            wk.sim[static_cast<std::size_t>(i) * wk.m + j] = s;
        }
    }
    return wk;
}

}  // namespace detail

template <typename S>
typename detail::AccOf<S>::type info_nce(const Tensor<S>& anchors, const Tensor<S>& targets, double tau) {
    using A = typename detail::AccOf<S>::type;
    const auto wk = detail::nce_prepare(anchors, targets, tau);
    const A tau_a = static_cast<A>(tau);
    A loss = 0;
    for (int i = 0; i < wk.m; ++i) {
        const A* row = wk.sim.data() + static_cast<std::size_t>(i) * wk.m;
        A mx = row[0];
        for (int j = 1; j < wk.m; ++j) mx = std::max(mx, row[j]);
        A denom = 0;
        for (int j = 0; j < wk.m; ++j) denom += std::exp((row[j] - mx) / tau_a);
        loss += -((row[i] - mx) / tau_a) + std::log(denom);
    }
    return loss / wk.m;
}

// Gradient w.r.t. anchors only; targets come from the frozen expression
// encoder and receive no gradient.
template <typename S>
Tensor<S> info_nce_backward_anchors(const Tensor<S>& anchors, const Tensor<S>& targets, double tau) {
    using A = typename detail::AccOf<S>::type;
    const auto wk = detail::nce_prepare(anchors, targets, tau);
    Tensor<S> grad(anchors.shape);
    std::vector<A> p(static_cast<std::size_t>(wk.m));
    for (int i = 0; i < wk.m; ++i) {
        const A* row = wk.sim.data() + static_cast<std::size_t>(i) * wk.m;
        A mx = row[0];
        for (int j = 1; j < wk.m; ++j) mx = std::max(mx, row[j]);
        A denom = 0;
        for (int j = 0; j < wk.m; ++j) {
            p[static_cast<std::size_t>(j)] = std::exp((row[j] - mx) / static_cast<A>(tau));
            denom += p[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < wk.m; ++j) p[static_cast<std::size_t>(j)] /= denom;

        // dL/ds_ij = (p_ij - [j==i]) / (tau * M); ds_ij/da_i = (t_j - s_ij a_i) / |a_i|
        const A inv_norm = 1 / wk.anchor_norm[static_cast<std::size_t>(i)];
        for (int j = 0; j < wk.m; ++j) {
            const A coef =
                (p[static_cast<std::size_t>(j)] - (j == i ? 1 : 0)) / (static_cast<A>(tau) * wk.m);
            if (coef == 0) continue;
            const A s_ij = row[j];
            for (int k = 0; k < wk.d; ++k) {
                const A tj = wk.target_unit[static_cast<std::size_t>(j) * wk.d + k];
                const A ai = wk.anchor_unit[static_cast<std::size_t>(i) * wk.d + k];
                grad.at(i, k) += static_cast<S>(coef * (tj - s_ij * ai) * inv_norm);
            }
        }
    }
    return grad;
}

namespace detail {

// Pack the valid cells of a (d, H, W) embedding grid into (M, d) rows.
template <typename S>
Tensor<S> pack_cells(const Tensor<S>& grid, const CellMask& mask, int n_valid) {
    const int d = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    Tensor<S> out({n_valid, d});
    int row = 0;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            if (!mask[static_cast<std::size_t>(i) * w + j]) continue;
            for (int k = 0; k < d; ++k) out.at(row, k) = grid.at(k, i, j);
            ++row;
        }
    }
    return out;
}

template <typename S>
Tensor<S> unpack_cells(const Tensor<S>& rows, const CellMask& mask, int d, int h, int w) {
    Tensor<S> out({d, h, w});
    int row = 0;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            if (!mask[static_cast<std::size_t>(i) * w + j]) continue;
            for (int k = 0; k < d; ++k) out.at(k, i, j) = rows.at(row, k);
            ++row;
        }
    }
    return out;
}

}  // namespace detail

// Per-cell InfoNCE over one region: each valid cell's image embedding is the
// anchor, its expression embedding the positive, and the region's other
// valid cells the negatives. Mean over valid cells.
template <typename S>
typename detail::AccOf<S>::type contrastive_loss(const Tensor<S>& img_embeddings,
                                                 const Tensor<S>& exp_embeddings,
                                                 const CellMask& mask, const LossConfig& config) {
    config.validate();
    detail::check_grid_pair(img_embeddings, exp_embeddings, mask);
    const int n_valid = detail::mask_count(mask);
    if (n_valid < 2) throw std::invalid_argument("contrastive_loss needs at least 2 valid cells");
    const auto anchors = detail::pack_cells(img_embeddings, mask, n_valid);
    const auto targets = detail::pack_cells(exp_embeddings, mask, n_valid);
    return info_nce(anchors, targets, config.tau);
}

template <typename S>
Tensor<S> contrastive_loss_backward(const Tensor<S>& img_embeddings, const Tensor<S>& exp_embeddings,
                                    const CellMask& mask, const LossConfig& config) {
    config.validate();
    detail::check_grid_pair(img_embeddings, exp_embeddings, mask);
    const int n_valid = detail::mask_count(mask);
    if (n_valid < 2) throw std::invalid_argument("contrastive_loss needs at least 2 valid cells");
    const auto anchors = detail::pack_cells(img_embeddings, mask, n_valid);
    const auto targets = detail::pack_cells(exp_embeddings, mask, n_valid);
    const auto grows = info_nce_backward_anchors(anchors, targets, config.tau);
    return detail::unpack_cells(grows, mask, img_embeddings.dim(0), img_embeddings.dim(1),
                                img_embeddings.dim(2));
}

// L_total = L_reg + lambda * L_contrast.
template <typename S>
LossBreakdown total_loss(const Tensor<S>& pred, const Tensor<S>& truth, const Tensor<S>& img_embeddings,
                         const Tensor<S>& exp_embeddings, const CellMask& mask, const LossConfig& config) {
    config.validate();
    LossBreakdown out;
    out.l_reg = static_cast<double>(regression_loss(pred, truth, mask));
    out.l_contrast = static_cast<double>(contrastive_loss(img_embeddings, exp_embeddings, mask, config));
    out.l_total = out.l_reg + config.lambda * out.l_contrast;
    out.valid_cell_count = detail::mask_count(mask);
    if (!std::isfinite(out.l_total)) throw std::runtime_error("total_loss is non-finite");
    return out;
}

template <typename S>
struct TotalLossGrads {
    Tensor<S> prediction;
    Tensor<S> image_embeddings;
};

template <typename S>
TotalLossGrads<S> total_loss_backward(const Tensor<S>& pred, const Tensor<S>& truth,
                                      const Tensor<S>& img_embeddings, const Tensor<S>& exp_embeddings,
                                      const CellMask& mask, const LossConfig& config) {
    config.validate();
    TotalLossGrads<S> g;
    g.prediction = regression_loss_backward(pred, truth, mask);
    g.image_embeddings = contrastive_loss_backward(img_embeddings, exp_embeddings, mask, config);
    scale(g.image_embeddings, static_cast<S>(config.lambda));
    return g;
}

}  // namespace img2st
