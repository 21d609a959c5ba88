#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "img2st/losses.hpp"
#include "img2st/metrics.hpp"
#include "img2st/model.hpp"
#include "img2st/st_data.hpp"

namespace img2st {

struct TrainConfig {
    double lr0 = 1e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lr_final_fraction = 0.01;
    int batch_size = 8;  // 64 at full scale
    int epochs = 0;
    std::uint64_t seed = 0;
    LossConfig loss;
    int threads = 1;  // >1 parallelizes per-sample gradients; losses stay bit-identical
    double improve_tol = 1e-5;  // relative l_total improvement that resets patience
    int patience = 10;          // epochs of no improvement before early stop

    void validate() const {
        if (!(lr0 > 0.0)) throw std::invalid_argument("train: lr0 must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0,1)");
        if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (!(lr_final_fraction > 0.0) || lr_final_fraction > 1.0) {
            throw std::invalid_argument("train: lr_final_fraction must be in (0,1]");
        }
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
        if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
        loss.validate();
    }
};

// lr(step) = lr_final + (lr0 - lr_final) * (1 + cos(pi * step / total)) / 2,
// with lr_final = lr0 * lr_final_fraction.
inline double cosine_lr(int step, int total_steps, const TrainConfig& config) {
    if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps) {
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0," +
                                    std::to_string(total_steps) + "]");
    }
    const double lr_final = config.lr0 * config.lr_final_fraction;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_final + (config.lr0 - lr_final) * (1.0 + std::cos(3.14159265358979323846 * t)) / 2.0;
}

// v <- momentum * v + (g + wd * p); p <- p - lr * v
template <typename S>
void sgd_update_tensor(Tensor<S>& param, const Tensor<S>& grad, Tensor<S>& velocity, double lr,
                       double momentum, double weight_decay, const std::string& name) {
    if (grad.shape != param.shape) {
        throw std::invalid_argument("sgd: gradient shape mismatch for parameter " + name);
    }
    if (velocity.data.empty()) velocity = Tensor<S>(param.shape);
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        const S g = grad.data[i];
        if (!std::isfinite(static_cast<double>(g))) {
            throw std::runtime_error("sgd: non-finite gradient in parameter " + name);
        }
        const S eff = g + static_cast<S>(weight_decay) * param.data[i];
        velocity.data[i] = static_cast<S>(momentum) * velocity.data[i] + eff;
        param.data[i] -= static_cast<S>(lr) * velocity.data[i];
    }
}

// One optimizer step over every trainable parameter; frozen (expression
// encoder) parameters are untouched.
template <typename S>
void sgd_step(ModelParams<S>& params, const LayerGradients<S>& grads, LayerGradients<S>& velocity,
              double lr, const TrainConfig& config) {
    params.for_each_param([&](const std::string& name, Tensor<S>& p) {
        if (params.expr_frozen && ModelParams<S>::is_frozen_name(name)) return;
        auto it = grads.find(name);
        if (it == grads.end()) {
            throw std::runtime_error("sgd: missing gradient for parameter " + name);
        }
        sgd_update_tensor(p, it->second, velocity[name], lr, config.momentum, config.weight_decay, name);
    });
}

struct EpochStats {
    int epoch = 0;
    double l_reg = 0.0;
    double l_contrast = 0.0;
    double l_total = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    MetricsReport final_test;  // empty gene list when no test set was given
    bool early_stopped = false;
};

template <typename S>
struct TrainResult {
    TrainLog log;
    ModelParams<S> best_params;  // lowest test MSE (final params when no test set)
    double best_test_mse = 0.0;
    int best_epoch = -1;
};

namespace detail {

template <typename S>
struct PreparedSample {
    Tensor<S> image;
    Tensor<S> truth;
    CellMask mask;
    Tensor<S> exp_embeddings;  // precomputed once; the encoder is frozen
    const ExpressionGrid* grid = nullptr;
};

template <typename S>
std::vector<PreparedSample<S>> prepare_samples(const ModelParams<S>& params,
                                               const std::vector<RegionSample>& samples,
                                               bool with_embeddings) {
    std::vector<PreparedSample<S>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        PreparedSample<S> p;
        p.image = cast<S>(s.image);
        p.truth = cast<S>(s.expression.values);
        p.mask = s.expression.valid;
        p.grid = &s.expression;
        if (with_embeddings) p.exp_embeddings = encode_expression_grid(params, s.expression);
        out.push_back(std::move(p));
    }
    return out;
}

// ordered parallel map: fn(i) runs on worker threads, results land in slots
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (int i = t; i < n; i += threads) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

template <typename S>
ExpressionGrid prediction_grid(const Tensor<S>& prediction, const ExpressionGrid& truth) {
    ExpressionGrid g;
    g.values = cast<float>(prediction);
    g.valid = truth.valid;
    return g;
}

template <typename S>
double test_mse(const ModelParams<S>& params, const std::vector<PreparedSample<S>>& test) {
    double acc = 0.0;
    std::int64_t n = 0;
    for (const auto& s : test) {
        const auto acts = forward(params, s.image);
        const int c = s.truth.dim(0), h = s.truth.dim(1), w = s.truth.dim(2);
        for (int i = 0; i < h * w; ++i) {
            if (!s.mask[static_cast<std::size_t>(i)]) continue;
            for (int g = 0; g < c; ++g) {
                const double d = static_cast<double>(acts.prediction.data[static_cast<std::size_t>(g) * h * w + i]) -
                                 static_cast<double>(s.truth.data[static_cast<std::size_t>(g) * h * w + i]);
                acc += d * d;
                ++n;
            }
        }
    }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

}  // namespace detail

// Deterministic shuffled mini-batch SGD. Gradients within a batch may be
// computed in parallel but are reduced in sample order, so logged losses and
// parameter trajectories are bit-identical for any thread count.
template <typename S>
TrainResult<S> train(ModelParams<S>& params, const std::vector<RegionSample>& train_samples,
                     const std::vector<RegionSample>& test_samples,
                     const std::vector<std::string>& gene_names, const TrainConfig& config) {
    config.validate();
    if (train_samples.empty()) throw std::invalid_argument("train: need at least 1 training sample");

    TrainResult<S> result;
    if (config.epochs == 0) {
        result.best_params = params;
        return result;
    }

    const bool use_contrast = config.loss.lambda > 0.0;
    auto prepared = detail::prepare_samples(params, train_samples, use_contrast);
    auto prepared_test = detail::prepare_samples(params, test_samples, false);

    const int n = static_cast<int>(prepared.size());
    const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const int total_steps = config.epochs * steps_per_epoch;

    Rng shuffle_rng(config.seed ^ 0x747261696eULL);
    LayerGradients<S> velocity;
    LayerGradients<S> batch_grads;

    double best_total = std::numeric_limits<double>::infinity();
    int stale_epochs = 0;
    int step = 0;

    struct SampleOut {
        LayerGradients<S> grads;
        double l_reg = 0.0;
        double l_con = 0.0;
    };

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        shuffle_rng.shuffle(order);

        const double epoch_lr = cosine_lr(step, total_steps, config);
        double sum_reg = 0.0, sum_con = 0.0, sum_total = 0.0;
        std::int64_t seen = 0;

        for (int b0 = 0; b0 < n; b0 += config.batch_size) {
            const int bn = std::min(config.batch_size, n - b0);
            std::vector<SampleOut> outs(static_cast<std::size_t>(bn));

            if (!use_contrast || config.loss.negative_scope == LossConfig::NegativeScope::region) {
                detail::parallel_for(bn, config.threads, [&](int k) {
                    const auto& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
                    const auto acts = forward(params, s.image);
                    auto& o = outs[static_cast<std::size_t>(k)];
                    o.l_reg = regression_loss(acts.prediction, s.truth, s.mask);
                    Tensor<S> gp = regression_loss_backward(acts.prediction, s.truth, s.mask);
                    Tensor<S> ge(acts.image_embeddings.shape);
                    if (use_contrast) {
                        o.l_con = contrastive_loss(acts.image_embeddings, s.exp_embeddings, s.mask, config.loss);
                        ge = contrastive_loss_backward(acts.image_embeddings, s.exp_embeddings, s.mask,
                                                       config.loss);
                        scale(ge, static_cast<S>(config.loss.lambda));
                    }
                    o.grads = backward(params, acts, gp, ge);
                });
            } else {
                // batch-wide negatives: pool valid cells of the whole batch
                std::vector<ForwardActivations<S>> acts(static_cast<std::size_t>(bn));
                detail::parallel_for(bn, config.threads, [&](int k) {
                    const auto& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
                    acts[static_cast<std::size_t>(k)] = forward(params, s.image);
                });
                std::vector<int> counts(static_cast<std::size_t>(bn));
                int total_cells = 0;
                for (int k = 0; k < bn; ++k) {
                    const auto& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
                    counts[static_cast<std::size_t>(k)] = detail::mask_count(s.mask);
                    total_cells += counts[static_cast<std::size_t>(k)];
                }
                if (total_cells < 2) throw std::invalid_argument("contrastive_loss needs at least 2 valid cells");
                const int d = params.config.embed_dim;
                Tensor<S> anchors({total_cells, d}), targets({total_cells, d});
                int row = 0;
                for (int k = 0; k < bn; ++k) {
                    const auto& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
                    const auto packed_a =
                        detail::pack_cells(acts[static_cast<std::size_t>(k)].image_embeddings, s.mask,
                                           counts[static_cast<std::size_t>(k)]);
                    const auto packed_t =
                        detail::pack_cells(s.exp_embeddings, s.mask, counts[static_cast<std::size_t>(k)]);
                    std::copy(packed_a.data.begin(), packed_a.data.end(),
                              anchors.data.begin() + static_cast<std::int64_t>(row) * d);
                    std::copy(packed_t.data.begin(), packed_t.data.end(),
                              targets.data.begin() + static_cast<std::int64_t>(row) * d);
                    row += counts[static_cast<std::size_t>(k)];
                }
                const double l_con = info_nce(anchors, targets, config.loss.tau);
                Tensor<S> ga = info_nce_backward_anchors(anchors, targets, config.loss.tau);
                scale(ga, static_cast<S>(config.loss.lambda));
                detail::parallel_for(bn, config.threads, [&](int k) {
                    const auto& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
                    auto& o = outs[static_cast<std::size_t>(k)];
                    int offset = 0;
                    for (int q = 0; q < k; ++q) offset += counts[static_cast<std::size_t>(q)];
                    Tensor<S> rows({counts[static_cast<std::size_t>(k)], d});
                    std::copy(ga.data.begin() + static_cast<std::int64_t>(offset) * d,
                              ga.data.begin() + static_cast<std::int64_t>(offset + counts[static_cast<std::size_t>(k)]) * d,
                              rows.data.begin());
                    Tensor<S> ge = detail::unpack_cells(rows, s.mask, d, s.exp_embeddings.dim(1),
                                                        s.exp_embeddings.dim(2));
                    const auto& a = acts[static_cast<std::size_t>(k)];
                    o.l_reg = regression_loss(a.prediction, s.truth, s.mask);
                    o.l_con = l_con;
                    Tensor<S> gp = regression_loss_backward(a.prediction, s.truth, s.mask);
                    o.grads = backward(params, a, gp, ge);
                });
            }

            // ordered reduction: batch mean of per-sample gradients
            batch_grads.clear();
            double batch_reg = 0.0, batch_con = 0.0;
            for (int k = 0; k < bn; ++k) {
                auto& o = outs[static_cast<std::size_t>(k)];
                batch_reg += o.l_reg;
                batch_con += o.l_con;
                for (auto& [name, g] : o.grads) {
                    auto it = batch_grads.find(name);
                    if (it == batch_grads.end()) {
                        batch_grads.emplace(name, std::move(g));
                    } else {
                        axpy(it->second, S(1), g);
                    }
                }
            }
            const S inv_bn = static_cast<S>(1.0 / bn);
            for (auto& [name, g] : batch_grads) scale(g, inv_bn);
            batch_reg /= bn;
            batch_con /= bn;
            const double batch_total = batch_reg + config.loss.lambda * batch_con;
            if (!std::isfinite(batch_total)) {
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(b0 / config.batch_size + 1));
            }

            const double lr = cosine_lr(step, total_steps, config);
            try {
                sgd_step(params, batch_grads, velocity, lr, config);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(b0 / config.batch_size + 1) + ")");
            }
            ++step;

            sum_reg += batch_reg * bn;
            sum_con += batch_con * bn;
            sum_total += batch_total * bn;
            seen += bn;
        }

        EpochStats st;
        st.epoch = epoch + 1;
        st.l_reg = sum_reg / static_cast<double>(seen);
        st.l_contrast = sum_con / static_cast<double>(seen);
        st.l_total = sum_total / static_cast<double>(seen);
        st.lr = epoch_lr;
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.epochs.push_back(st);

        if (!prepared_test.empty()) {
            const double mse = detail::test_mse(params, prepared_test);
            if (result.best_epoch < 0 || mse < result.best_test_mse) {
                result.best_test_mse = mse;
                result.best_epoch = epoch + 1;
                result.best_params = params;
            }
        }

        if (st.l_total < best_total * (1.0 - config.improve_tol)) {
            best_total = st.l_total;
            stale_epochs = 0;
        } else {
            best_total = std::min(best_total, st.l_total);
            ++stale_epochs;
            if (stale_epochs >= config.patience) {
                result.log.early_stopped = true;
                break;
            }
        }
    }

    if (result.best_epoch < 0) {
        result.best_params = params;
        result.best_test_mse = prepared_test.empty() ? 0.0 : detail::test_mse(params, prepared_test);
    }

    if (!test_samples.empty()) {
        std::vector<ExpressionGrid> preds;
        std::vector<const ExpressionGrid*> pred_ptrs, truth_ptrs;
        preds.reserve(test_samples.size());
        for (const auto& s : prepared_test) {
            const auto acts = forward(params, s.image);
            preds.push_back(detail::prediction_grid(acts.prediction, *s.grid));
        }
        for (std::size_t i = 0; i < preds.size(); ++i) {
            pred_ptrs.push_back(&preds[i]);
            truth_ptrs.push_back(prepared_test[i].grid);
        }
        std::vector<std::string> names = gene_names;
        if (names.empty()) {
            for (int g = 0; g < params.config.gene_count; ++g) names.push_back("g" + std::to_string(g));
        }
        result.log.final_test = evaluate_grids(pred_ptrs, truth_ptrs, names);
    }
    return result;
}

// CSV: epoch,l_reg,l_contrast,l_total,lr,seconds. The seconds column is wall
// clock and not reproducible across runs.
void write_train_log_csv(const std::string& path, const TrainLog& log);

}  // namespace img2st
