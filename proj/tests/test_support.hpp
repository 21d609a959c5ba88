#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "img2st/gradcheck.hpp"
#include "img2st/losses.hpp"
#include "img2st/model.hpp"
#include "img2st/rng.hpp"
#include "img2st/tensor.hpp"

namespace testsupport {

using namespace img2st;

template <typename S>
Tensor<S> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

// Independent naive cross-correlation reference: six nested loops, no
// blocking or hoisting, accumulation in double.
template <typename S>
Tensor<S> conv2d_reference(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                           int stride, int padding) {
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;
    Tensor<S> out({n, co, ho, wo});
    for (int b = 0; b < n; ++b) {
        for (int oc = 0; oc < co; ++oc) {
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    double acc = static_cast<double>(bias.at(oc));
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int fy = 0; fy < kh; ++fy) {
                            for (int fx = 0; fx < kw; ++fx) {
                                const int iy = oh * stride + fy - padding;
                                const int ix = ow * stride + fx - padding;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(input.at(b, ic, iy, ix)) *
                                       static_cast<double>(weight.at(oc, ic, fy, fx));
                            }
                        }
                    }
                    out.at(b, oc, oh, ow) = static_cast<S>(acc);
                }
            }
        }
    }
    return out;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    }
    return m;
}

// ---- full-model gradient check scaffolding ----

struct MicroBatch {
    TensorF image;
    TensorF truth;
    CellMask mask;
};

inline MicroBatch random_micro_batch(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    MicroBatch mb;
    mb.image = rand_tensor<float>({cfg.in_channels, cfg.input_px, cfg.input_px}, rng, 0.0, 1.0);
    const int hp = cfg.bins_per_side();
    mb.truth = rand_tensor<float>({cfg.gene_count, hp, hp}, rng, 0.0, 3.0);
    mb.mask.assign(static_cast<std::size_t>(hp) * hp, 1);
    // a couple of masked cells so the loss masking is inside the check
    if (mb.mask.size() > 4) {
        mb.mask[1] = 0;
        mb.mask[mb.mask.size() - 2] = 0;
    }
    return mb;
}

template <typename S>
std::vector<std::string> trainable_names(const ModelParams<S>& params) {
    std::vector<std::string> names;
    params.for_each_param([&](const std::string& name, const Tensor<S>&) {
        if (!ModelParams<S>::is_frozen_name(name)) names.push_back(name);
    });
    return names;
}

template <typename S>
std::vector<TensorD> trainable_values(const ModelParams<S>& params) {
    std::vector<TensorD> values;
    params.for_each_param([&](const std::string& name, const Tensor<S>& t) {
        if (!ModelParams<S>::is_frozen_name(name)) values.push_back(cast<double>(t));
    });
    return values;
}

template <typename S>
void load_trainable(ModelParams<S>& params, const std::vector<TensorD>& values) {
    std::size_t i = 0;
    params.for_each_param([&](const std::string& name, Tensor<S>& t) {
        if (ModelParams<S>::is_frozen_name(name)) return;
        t = cast<S>(values[i++]);
    });
}

// l_total of one region as a function of the trainable parameters, with the
// frozen-encoder embeddings held fixed. Evaluated in extended precision so
// finite differences can resolve small gradients: the loss value itself is
// recomputed in long double.
template <typename S>
long double model_total_loss_precise(ModelParams<S> params, const std::vector<TensorD>& values,
                                     const MicroBatch& mb, const Tensor<S>& exp_emb,
                                     const LossConfig& loss_cfg) {
    load_trainable(params, values);
    const auto acts = forward(params, cast<S>(mb.image));
    const Tensor<S> truth = cast<S>(mb.truth);
    const long double l_reg =
        static_cast<long double>(regression_loss(acts.prediction, truth, mb.mask));
    const long double l_con = static_cast<long double>(
        contrastive_loss(acts.image_embeddings, exp_emb, mb.mask, loss_cfg));
    return l_reg + static_cast<long double>(loss_cfg.lambda) * l_con;
}

template <typename S>
double model_total_loss(ModelParams<S> params, const std::vector<TensorD>& values,
                        const MicroBatch& mb, const Tensor<S>& exp_emb, const LossConfig& loss_cfg) {
    load_trainable(params, values);
    const auto acts = forward(params, cast<S>(mb.image));
    const auto breakdown = total_loss(acts.prediction, cast<S>(mb.truth), acts.image_embeddings,
                                      exp_emb, mb.mask, loss_cfg);
    return breakdown.l_total;
}

template <typename S>
std::vector<TensorD> model_total_grads(ModelParams<S> params, const std::vector<TensorD>& values,
                                       const MicroBatch& mb, const Tensor<S>& exp_emb,
                                       const LossConfig& loss_cfg) {
    load_trainable(params, values);
    const auto acts = forward(params, cast<S>(mb.image));
    const Tensor<S> truth = cast<S>(mb.truth);
    auto g = total_loss_backward(acts.prediction, truth, acts.image_embeddings, exp_emb, mb.mask,
                                 loss_cfg);
    const auto grads = backward(params, acts, g.prediction, g.image_embeddings);
    std::vector<TensorD> out;
    params.for_each_param([&](const std::string& name, const Tensor<S>&) {
        if (ModelParams<S>::is_frozen_name(name)) return;
        out.push_back(cast<double>(grads.at(name)));
    });
    return out;
}

// Scratch directory under the current working directory (the build tree);
// wiped on construction.
class TempDir {
public:
    explicit TempDir(const std::string& name) : path_("test_tmp/" + name) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const { return path_ + "/" + name; }

private:
    std::string path_;
};

}  // namespace testsupport
