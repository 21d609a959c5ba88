#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "img2st/layers.hpp"
#include "img2st/rng.hpp"
#include "img2st/st_data.hpp"
#include "img2st/tensor.hpp"

namespace img2st {

// Asymmetric UNet: enc_depth halvings down to the bottleneck, dec_depth
// doublings back up, so the prediction grid sits at
// input_px / 2^(enc_depth - dec_depth) per side.
struct ModelConfig {
    int in_channels = 3;
    int gene_count = 8;    // C
    int base_width = 8;
    int enc_depth = 5;     // L_e
    int dec_depth = 1;     // L_d
    int embed_dim = 16;    // d
    int expr_hidden = 32;  // hidden width of the expression encoder MLP
    int input_px = 64;
    int kernel_size = 3;

    // channel schedule doubles per level, capped at 8x base width
    int enc_channels(int level) const {
        std::int64_t w = static_cast<std::int64_t>(base_width) << (level - 1);
        return static_cast<int>(std::min<std::int64_t>(w, 8LL * base_width));
    }

    // decoder narrows toward base_width at its last block
    int dec_channels(int level) const {
        std::int64_t w = static_cast<std::int64_t>(base_width) << (dec_depth - level);
        return static_cast<int>(std::min<std::int64_t>(w, 8LL * base_width));
    }

    int skip_channels(int level) const {
        const int src = enc_depth - level;
        return src == 0 ? in_channels : enc_channels(src);
    }

    int bins_per_side() const { return input_px >> (enc_depth - dec_depth); }
    int bottleneck_px() const { return input_px >> enc_depth; }

    void validate() const {
        if (in_channels < 1 || gene_count < 1 || base_width < 1 || embed_dim < 1 || expr_hidden < 1) {
            throw std::invalid_argument("model config: widths must be positive");
        }
        if (enc_depth < 1 || dec_depth < 1 || dec_depth > enc_depth) {
            throw std::invalid_argument("model config: need 1 <= dec_depth <= enc_depth");
        }
        if (kernel_size < 1 || kernel_size % 2 == 0) {
            throw std::invalid_argument("model config: kernel_size must be odd");
        }
        if (input_px < 1 || input_px % (1 << enc_depth) != 0) {
            throw std::invalid_argument("model config: input_px " + std::to_string(input_px) +
                                        " must be divisible by 2^enc_depth");
        }
    }
};

template <typename S>
struct ConvParam {
    Tensor<S> w;  // (O, I, K, K)
    Tensor<S> b;  // (O)
};

template <typename S>
struct EncoderBlock {
    ConvParam<S> conv1, conv2;
};

template <typename S>
struct DecoderBlock {
    ConvParam<S> up;  // 3x3 conv after bilinear upsampling
    ConvParam<S> conv1, conv2;
};

template <typename S>
struct ModelParams {
    ModelConfig config;
    std::vector<EncoderBlock<S>> encoder;
    std::vector<DecoderBlock<S>> decoder;
    ConvParam<S> out_head;  // 1x1, base_width -> C
    ConvParam<S> proj;      // 1x1 per-cell projection, base_width -> d
    Tensor<S> expr_w1, expr_b1;  // C -> hidden
    Tensor<S> expr_w2, expr_b2;  // hidden -> d
    bool expr_frozen = true;

    static bool is_frozen_name(const std::string& name) { return name.rfind("expr.", 0) == 0; }

    // declaration-order visitation; checkpoint layout and the optimizer
    // both rely on this order
    template <typename F>
    void for_each_param(F&& fn) {
        for (std::size_t l = 0; l < encoder.size(); ++l) {
            const std::string p = "enc" + std::to_string(l + 1) + ".";
            fn(p + "conv1.w", encoder[l].conv1.w);
            fn(p + "conv1.b", encoder[l].conv1.b);
            fn(p + "conv2.w", encoder[l].conv2.w);
            fn(p + "conv2.b", encoder[l].conv2.b);
        }
        for (std::size_t l = 0; l < decoder.size(); ++l) {
            const std::string p = "dec" + std::to_string(l + 1) + ".";
            fn(p + "up.w", decoder[l].up.w);
            fn(p + "up.b", decoder[l].up.b);
            fn(p + "conv1.w", decoder[l].conv1.w);
            fn(p + "conv1.b", decoder[l].conv1.b);
            fn(p + "conv2.w", decoder[l].conv2.w);
            fn(p + "conv2.b", decoder[l].conv2.b);
        }
        fn("out.w", out_head.w);
        fn("out.b", out_head.b);
        fn("proj.w", proj.w);
        fn("proj.b", proj.b);
        fn("expr.l1.w", expr_w1);
        fn("expr.l1.b", expr_b1);
        fn("expr.l2.w", expr_w2);
        fn("expr.l2.b", expr_b2);
    }

    template <typename F>
    void for_each_param(F&& fn) const {
        const_cast<ModelParams*>(this)->for_each_param(
            [&](const std::string& name, Tensor<S>& t) { fn(name, static_cast<const Tensor<S>&>(t)); });
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for_each_param([&](const std::string&, const Tensor<S>& t) { n += t.numel(); });
        return n;
    }
};

namespace detail {

template <typename S>
void kaiming_fill(Tensor<S>& w, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (S& v : w.data) v = static_cast<S>(rng.uniform(-bound, bound));
}

template <typename S>
ConvParam<S> make_conv(int out_ch, int in_ch, int k, Rng& rng) {
    ConvParam<S> c;
    c.w = Tensor<S>({out_ch, in_ch, k, k});
    c.b = Tensor<S>({out_ch});
    kaiming_fill(c.w, static_cast<std::int64_t>(in_ch) * k * k, rng);
    return c;
}

}  // namespace detail

// Kaiming-uniform fan-in weights, zero biases; deterministic given seed.
template <typename S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams<S> p;
    p.config = config;
    Rng rng(seed);
    const int k = config.kernel_size;
    int in_ch = config.in_channels;
    for (int l = 1; l <= config.enc_depth; ++l) {
        EncoderBlock<S> blk;
        const int out_ch = config.enc_channels(l);
        blk.conv1 = detail::make_conv<S>(out_ch, in_ch, k, rng);
        blk.conv2 = detail::make_conv<S>(out_ch, out_ch, k, rng);
        p.encoder.push_back(std::move(blk));
        in_ch = out_ch;
    }
    int dec_in = config.enc_channels(config.enc_depth);
    for (int l = 1; l <= config.dec_depth; ++l) {
        DecoderBlock<S> blk;
        const int skip = config.skip_channels(l);
        const int out_ch = config.dec_channels(l);
        blk.up = detail::make_conv<S>(skip, dec_in, k, rng);
        blk.conv1 = detail::make_conv<S>(out_ch, 2 * skip, k, rng);
        blk.conv2 = detail::make_conv<S>(out_ch, out_ch, k, rng);
        p.decoder.push_back(std::move(blk));
        dec_in = out_ch;
    }
    p.out_head = detail::make_conv<S>(config.gene_count, dec_in, 1, rng);
    p.proj = detail::make_conv<S>(config.embed_dim, dec_in, 1, rng);
    // the projection bias starts nonzero: a cell whose features are all dead
    // must still map to a nonzero embedding, since cosine similarity rejects
    // zero norms
    detail::kaiming_fill(p.proj.b, dec_in, rng);
    p.expr_w1 = Tensor<S>({config.expr_hidden, config.gene_count});
    p.expr_b1 = Tensor<S>({config.expr_hidden});
    p.expr_w2 = Tensor<S>({config.embed_dim, config.expr_hidden});
    p.expr_b2 = Tensor<S>({config.embed_dim});
    detail::kaiming_fill(p.expr_w1, config.gene_count, rng);
    detail::kaiming_fill(p.expr_w2, config.expr_hidden, rng);
    return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
    ModelParams<To> dst;
    dst.config = src.config;
    dst.expr_frozen = src.expr_frozen;
    dst.encoder.resize(src.encoder.size());
    dst.decoder.resize(src.decoder.size());
    for (std::size_t i = 0; i < src.encoder.size(); ++i) {
        dst.encoder[i].conv1 = {cast<To>(src.encoder[i].conv1.w), cast<To>(src.encoder[i].conv1.b)};
        dst.encoder[i].conv2 = {cast<To>(src.encoder[i].conv2.w), cast<To>(src.encoder[i].conv2.b)};
    }
    for (std::size_t i = 0; i < src.decoder.size(); ++i) {
        dst.decoder[i].up = {cast<To>(src.decoder[i].up.w), cast<To>(src.decoder[i].up.b)};
        dst.decoder[i].conv1 = {cast<To>(src.decoder[i].conv1.w), cast<To>(src.decoder[i].conv1.b)};
        dst.decoder[i].conv2 = {cast<To>(src.decoder[i].conv2.w), cast<To>(src.decoder[i].conv2.b)};
    }
    dst.out_head = {cast<To>(src.out_head.w), cast<To>(src.out_head.b)};
    dst.proj = {cast<To>(src.proj.w), cast<To>(src.proj.b)};
    dst.expr_w1 = cast<To>(src.expr_w1);
    dst.expr_b1 = cast<To>(src.expr_b1);
    dst.expr_w2 = cast<To>(src.expr_w2);
    dst.expr_b2 = cast<To>(src.expr_b2);
    return dst;
}

template <typename S>
struct EncBlockActs {
    Tensor<S> input;
    Tensor<S> pre1, act1, pre2, act2;
    MaxPool2x2Result<S> pool;  // pool.out is F_l
};

template <typename S>
struct DecBlockActs {
    Tensor<S> upsampled;          // bilinear output (conv input)
    Tensor<S> up_pre, up_act;     // up conv + relu
    Tensor<S> concatenated;       // concat(up_act, skip)
    Tensor<S> pre1, act1, pre2, act2;  // act2 is D_l
};

template <typename S>
struct ForwardActivations {
    std::vector<EncBlockActs<S>> enc;
    std::vector<DecBlockActs<S>> dec;
    Tensor<S> final_feature;     // D_{L_d}, 4-axis (1, base, H', W')
    Tensor<S> prediction;        // (C, H', W')
    Tensor<S> image_embeddings;  // (d, H', W')
};

template <typename S>
ForwardActivations<S> forward(const ModelParams<S>& params, const Tensor<S>& image) {
    const ModelConfig& cfg = params.config;
    if (image.ndim() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.input_px ||
        image.dim(2) != cfg.input_px) {
        throw std::invalid_argument("forward expects a " + std::to_string(cfg.in_channels) + "x" +
                                    std::to_string(cfg.input_px) + "x" + std::to_string(cfg.input_px) +
                                    " image, got " + image.shape_str());
    }
    const int pad = cfg.kernel_size / 2;
    ForwardActivations<S> acts;
    acts.enc.resize(static_cast<std::size_t>(cfg.enc_depth));

    Tensor<S> x = image.reshaped({1, cfg.in_channels, cfg.input_px, cfg.input_px});
    for (int l = 0; l < cfg.enc_depth; ++l) {
        auto& a = acts.enc[static_cast<std::size_t>(l)];
        const auto& blk = params.encoder[static_cast<std::size_t>(l)];
        a.input = std::move(x);
        a.pre1 = conv2d_forward(a.input, blk.conv1.w, blk.conv1.b, 1, pad);
        a.act1 = relu_forward(a.pre1);
        a.pre2 = conv2d_forward(a.act1, blk.conv2.w, blk.conv2.b, 1, pad);
        a.act2 = relu_forward(a.pre2);
        a.pool = maxpool2x2_forward(a.act2);
        x = a.pool.out;
    }

    acts.dec.resize(static_cast<std::size_t>(cfg.dec_depth));
    for (int l = 1; l <= cfg.dec_depth; ++l) {
        auto& a = acts.dec[static_cast<std::size_t>(l - 1)];
        const auto& blk = params.decoder[static_cast<std::size_t>(l - 1)];
        a.upsampled = upsample_bilinear2x_forward(x);
        a.up_pre = conv2d_forward(a.upsampled, blk.up.w, blk.up.b, 1, pad);
        a.up_act = relu_forward(a.up_pre);
        const int src = cfg.enc_depth - l;
        const Tensor<S>& skip = src == 0 ? acts.enc[0].input : acts.enc[static_cast<std::size_t>(src - 1)].pool.out;
        a.concatenated = concat_channels(a.up_act, skip);
        a.pre1 = conv2d_forward(a.concatenated, blk.conv1.w, blk.conv1.b, 1, pad);
        a.act1 = relu_forward(a.pre1);
        a.pre2 = conv2d_forward(a.act1, blk.conv2.w, blk.conv2.b, 1, pad);
        // the final block output stays pre-activation: both heads read it, and
        // per-cell embeddings must not collapse to exact zeros (cosine is
        // undefined there), which ReLU-dead cells would produce
        a.act2 = (l == cfg.dec_depth) ? a.pre2 : relu_forward(a.pre2);
        x = a.act2;
    }

    acts.final_feature = std::move(x);
    const int hp = cfg.bins_per_side();
    Tensor<S> pred4 = conv2d_forward(acts.final_feature, params.out_head.w, params.out_head.b, 1, 0);
    Tensor<S> emb4 = conv2d_forward(acts.final_feature, params.proj.w, params.proj.b, 1, 0);
    acts.prediction = pred4.reshaped({cfg.gene_count, hp, hp});
    acts.image_embeddings = emb4.reshaped({cfg.embed_dim, hp, hp});
    return acts;
}

// Backpropagates loss gradients w.r.t. the prediction grid and the per-cell
// image embeddings into every learnable parameter. The frozen expression
// encoder receives no entries.
template <typename S>
LayerGradients<S> backward(const ModelParams<S>& params, const ForwardActivations<S>& acts,
                           const Tensor<S>& grad_prediction, const Tensor<S>& grad_embeddings) {
    const ModelConfig& cfg = params.config;
    const int hp = cfg.bins_per_side();
    if (grad_prediction.shape != std::vector<int>{cfg.gene_count, hp, hp}) {
        throw std::invalid_argument("grad_prediction shape mismatch: " + grad_prediction.shape_str());
    }
    if (grad_embeddings.shape != std::vector<int>{cfg.embed_dim, hp, hp}) {
        throw std::invalid_argument("grad_embeddings shape mismatch: " + grad_embeddings.shape_str());
    }
    const int pad = cfg.kernel_size / 2;
    LayerGradients<S> grads;

    auto head_g = conv2d_backward(acts.final_feature, params.out_head.w,
                                  grad_prediction.reshaped({1, cfg.gene_count, hp, hp}), 1, 0);
    grads["out.w"] = std::move(head_g.weight);
    grads["out.b"] = std::move(head_g.bias);
    auto proj_g = conv2d_backward(acts.final_feature, params.proj.w,
                                  grad_embeddings.reshaped({1, cfg.embed_dim, hp, hp}), 1, 0);
    grads["proj.w"] = std::move(proj_g.weight);
    grads["proj.b"] = std::move(proj_g.bias);

    Tensor<S> gd = std::move(head_g.input);
    axpy(gd, S(1), proj_g.input);

    // skip gradients per encoder level (index 0 holds the image-level skip)
    std::vector<Tensor<S>> skip_grads(static_cast<std::size_t>(cfg.enc_depth) + 1);
    for (int l = cfg.dec_depth; l >= 1; --l) {
        const auto& a = acts.dec[static_cast<std::size_t>(l - 1)];
        const auto& blk = params.decoder[static_cast<std::size_t>(l - 1)];
        const std::string prefix = "dec" + std::to_string(l) + ".";

        Tensor<S> g = (l == cfg.dec_depth) ? gd : relu_backward(a.pre2, gd);
        auto c2g = conv2d_backward(a.act1, blk.conv2.w, g, 1, pad);
        grads[prefix + "conv2.w"] = std::move(c2g.weight);
        grads[prefix + "conv2.b"] = std::move(c2g.bias);
        g = relu_backward(a.pre1, c2g.input);
        auto c1g = conv2d_backward(a.concatenated, blk.conv1.w, g, 1, pad);
        grads[prefix + "conv1.w"] = std::move(c1g.weight);
        grads[prefix + "conv1.b"] = std::move(c1g.bias);

        const int up_ch = a.up_act.dim(1);
        auto [g_up_act, g_skip] = concat_channels_backward(c1g.input, up_ch);
        const int src = cfg.enc_depth - l;
        auto& slot = skip_grads[static_cast<std::size_t>(src)];
        if (slot.data.empty()) {
            slot = std::move(g_skip);
        } else {
            axpy(slot, S(1), g_skip);
        }

        g = relu_backward(a.up_pre, g_up_act);
        auto upg = conv2d_backward(a.upsampled, blk.up.w, g, 1, pad);
        grads[prefix + "up.w"] = std::move(upg.weight);
        grads[prefix + "up.b"] = std::move(upg.bias);
        gd = upsample_bilinear2x_backward(upg.input, a.upsampled.dim(2) / 2, a.upsampled.dim(3) / 2);
    }

    // decoder input was F_{L_e}
    {
        auto& slot = skip_grads[static_cast<std::size_t>(cfg.enc_depth)];
        if (slot.data.empty()) {
            slot = std::move(gd);
        } else {
            axpy(slot, S(1), gd);
        }
    }

    for (int m = cfg.enc_depth; m >= 1; --m) {
        const auto& a = acts.enc[static_cast<std::size_t>(m - 1)];
        const auto& blk = params.encoder[static_cast<std::size_t>(m - 1)];
        const std::string prefix = "enc" + std::to_string(m) + ".";
        Tensor<S>& gf = skip_grads[static_cast<std::size_t>(m)];
        if (gf.data.empty()) gf = Tensor<S>(a.pool.out.shape);

        Tensor<S> g = maxpool2x2_backward(a.pool, gf);
        g = relu_backward(a.pre2, g);
        auto c2g = conv2d_backward(a.act1, blk.conv2.w, g, 1, pad);
        grads[prefix + "conv2.w"] = std::move(c2g.weight);
        grads[prefix + "conv2.b"] = std::move(c2g.bias);
        g = relu_backward(a.pre1, c2g.input);
        auto c1g = conv2d_backward(a.input, blk.conv1.w, g, 1, pad);
        grads[prefix + "conv1.w"] = std::move(c1g.weight);
        grads[prefix + "conv1.b"] = std::move(c1g.bias);
        if (m > 1) {
            auto& below = skip_grads[static_cast<std::size_t>(m - 1)];
            if (below.data.empty()) {
                below = std::move(c1g.input);
            } else {
                axpy(below, S(1), c1g.input);
            }
        }
    }
    return grads;
}

// Frozen 2-layer MLP g: C -> hidden -> d; gradients never flow into it.
template <typename S>
std::vector<S> encode_expression(const ModelParams<S>& params, const std::vector<S>& y) {
    const ModelConfig& cfg = params.config;
    if (static_cast<int>(y.size()) != cfg.gene_count) {
        throw std::invalid_argument("encode_expression: expected " + std::to_string(cfg.gene_count) +
                                    " values, got " + std::to_string(y.size()));
    }
    for (S v : y) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw std::invalid_argument("encode_expression: non-finite input");
        }
    }
    std::vector<S> hidden(static_cast<std::size_t>(cfg.expr_hidden));
    for (int i = 0; i < cfg.expr_hidden; ++i) {
        S acc = params.expr_b1.at(i);
        const S* w = params.expr_w1.ptr() + static_cast<std::int64_t>(i) * cfg.gene_count;
        for (int j = 0; j < cfg.gene_count; ++j) acc += w[j] * y[static_cast<std::size_t>(j)];
        hidden[static_cast<std::size_t>(i)] = acc > S(0) ? acc : S(0);
    }
    std::vector<S> z(static_cast<std::size_t>(cfg.embed_dim));
    for (int i = 0; i < cfg.embed_dim; ++i) {
        S acc = params.expr_b2.at(i);
        const S* w = params.expr_w2.ptr() + static_cast<std::int64_t>(i) * cfg.expr_hidden;
        for (int j = 0; j < cfg.expr_hidden; ++j) acc += w[j] * hidden[static_cast<std::size_t>(j)];
        z[static_cast<std::size_t>(i)] = acc;
    }
    return z;
}

// Embeds every valid cell of a truth grid; invalid cells stay zero.
template <typename S>
Tensor<S> encode_expression_grid(const ModelParams<S>& params, const ExpressionGrid& grid) {
    const ModelConfig& cfg = params.config;
    if (grid.genes() != cfg.gene_count) {
        throw std::invalid_argument("expression grid gene count mismatch");
    }
    const int h = grid.height(), w = grid.width();
    Tensor<S> out({cfg.embed_dim, h, w});
    std::vector<S> y(static_cast<std::size_t>(cfg.gene_count));
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            if (!grid.is_valid(i, j)) continue;
            for (int c = 0; c < cfg.gene_count; ++c) y[static_cast<std::size_t>(c)] = static_cast<S>(grid.values.at(c, i, j));
            const auto z = encode_expression(params, y);
            for (int c = 0; c < cfg.embed_dim; ++c) out.at(c, i, j) = z[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

struct PretrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool degenerate_inputs = false;  // all vectors identical
};

// Trains g as the encoder half of a symmetric autoencoder on reconstruction
// MSE, then freezes it. Full-batch gradient descent with momentum; the step
// size backs off deterministically whenever the loss fails to improve.
template <typename S>
PretrainReport pretrain_expression_encoder(ModelParams<S>& params,
                                           const std::vector<std::vector<S>>& vectors, int epochs,
                                           std::uint64_t seed) {
    const ModelConfig& cfg = params.config;
    if (vectors.size() < 2) throw std::invalid_argument("pretraining needs at least 2 expression vectors");
    const int m = static_cast<int>(vectors.size());
    Tensor<S> x({m, cfg.gene_count});
    for (int i = 0; i < m; ++i) {
        if (static_cast<int>(vectors[static_cast<std::size_t>(i)].size()) != cfg.gene_count) {
            throw std::invalid_argument("pretraining vector length mismatch");
        }
        for (int j = 0; j < cfg.gene_count; ++j) {
            x.at(i, j) = vectors[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    x.check_finite("pretrain_expression_encoder input");

    PretrainReport report;
    {
        bool all_same = true;
        for (int i = 1; i < m && all_same; ++i) {
            for (int j = 0; j < cfg.gene_count; ++j) {
                if (x.at(i, j) != x.at(0, j)) {
                    all_same = false;
                    break;
                }
            }
        }
        report.degenerate_inputs = all_same;
    }

    Rng rng(seed);
    Tensor<S> w1({cfg.expr_hidden, cfg.gene_count}), b1({cfg.expr_hidden});
    Tensor<S> w2({cfg.embed_dim, cfg.expr_hidden}), b2({cfg.embed_dim});
    Tensor<S> v1({cfg.expr_hidden, cfg.embed_dim}), c1({cfg.expr_hidden});
    Tensor<S> v2({cfg.gene_count, cfg.expr_hidden}), c2({cfg.gene_count});
    detail::kaiming_fill(w1, cfg.gene_count, rng);
    detail::kaiming_fill(w2, cfg.expr_hidden, rng);
    detail::kaiming_fill(v1, cfg.embed_dim, rng);
    detail::kaiming_fill(v2, cfg.expr_hidden, rng);

    std::vector<Tensor<S>*> ps = {&w1, &b1, &w2, &b2, &v1, &c1, &v2, &c2};
    std::vector<Tensor<S>> vel;
    for (auto* p : ps) vel.emplace_back(p->shape);

    const double denom = static_cast<double>(m) * cfg.gene_count;
    auto run = [&](bool want_grads, std::vector<Tensor<S>>& gs) -> double {
        Tensor<S> h1 = linear_forward(x, w1, b1);
        Tensor<S> r1 = relu_forward(h1);
        Tensor<S> z = linear_forward(r1, w2, b2);
        Tensor<S> h2 = linear_forward(z, v1, c1);
        Tensor<S> r2 = relu_forward(h2);
        Tensor<S> y = linear_forward(r2, v2, c2);
        double loss = 0.0;
        Tensor<S> gy(y.shape);
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            const double d = static_cast<double>(y.data[i]) - static_cast<double>(x.data[i]);
            loss += d * d;
            gy.data[i] = static_cast<S>(2.0 * d / denom);
        }
        loss /= denom;
        if (!want_grads) return loss;
        auto g4 = linear_backward(r2, v2, gy);
        Tensor<S> gh2 = relu_backward(h2, g4.input);
        auto g3 = linear_backward(z, v1, gh2);
        auto g2 = linear_backward(r1, w2, g3.input);
        Tensor<S> gh1 = relu_backward(h1, g2.input);
        auto g1 = linear_backward(x, w1, gh1);
        gs.clear();
        gs.push_back(std::move(g1.weight));
        gs.push_back(std::move(g1.bias));
        gs.push_back(std::move(g2.weight));
        gs.push_back(std::move(g2.bias));
        gs.push_back(std::move(g3.weight));
        gs.push_back(std::move(g3.bias));
        gs.push_back(std::move(g4.weight));
        gs.push_back(std::move(g4.bias));
        return loss;
    };

    std::vector<Tensor<S>> gs;
    report.initial_loss = run(false, gs);
    double lr = 0.02;
    double prev = report.initial_loss;
    std::vector<Tensor<S>> backup;
    for (auto* p : ps) backup.push_back(*p);
    for (int e = 0; e < epochs; ++e) {
        const double loss = run(true, gs);
        if (!std::isfinite(loss) || loss > prev * 1.5) {
            // diverged: restore the last good point, halve the step, restart momentum
            for (std::size_t i = 0; i < ps.size(); ++i) {
                *ps[i] = backup[i];
                std::fill(vel[i].data.begin(), vel[i].data.end(), S(0));
            }
            lr *= 0.5;
            if (lr < 1e-8) break;
            continue;
        }
        if (loss > prev) lr *= 0.5;
        prev = loss;
        for (std::size_t i = 0; i < ps.size(); ++i) backup[i] = *ps[i];
        for (std::size_t i = 0; i < ps.size(); ++i) {
            for (std::size_t k = 0; k < ps[i]->data.size(); ++k) {
                vel[i].data[k] = static_cast<S>(0.9) * vel[i].data[k] + gs[i].data[k];
                ps[i]->data[k] -= static_cast<S>(lr) * vel[i].data[k];
            }
        }
    }
    {
        const double final_loss = run(false, gs);
        if (!std::isfinite(final_loss) || final_loss > prev) {
            for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = backup[i];
            report.final_loss = run(false, gs);
        } else {
            report.final_loss = final_loss;
        }
    }

    params.expr_w1 = std::move(w1);
    params.expr_b1 = std::move(b1);
    params.expr_w2 = std::move(w2);
    params.expr_b2 = std::move(b2);
    params.expr_frozen = true;
    return report;
}

// ---- checkpoint (ISTC) ----

namespace detail {

inline std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t take_u32(const std::string& buf, std::size_t& pos) {
    if (pos + 4 > buf.size()) throw std::runtime_error("checkpoint truncated");
    const auto* b = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
    std::string payload;
    const ModelConfig& c = params.config;
    for (int v : {c.in_channels, c.gene_count, c.base_width, c.enc_depth, c.dec_depth, c.embed_dim,
                  c.expr_hidden, c.input_px, c.kernel_size}) {
        detail::put_u32(payload, static_cast<std::uint32_t>(v));
    }
    payload.push_back(params.expr_frozen ? '\1' : '\0');
    params.for_each_param([&](const std::string&, const TensorF& t) {
        for (float v : t.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            detail::put_u32(payload, bits);
        }
    });
    const std::uint32_t crc =
        detail::crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write("ISTC", 4);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    std::string tail;
    detail::put_u32(tail, crc);
    out.write(tail.data(), 4);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ModelParams<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string all = ss.str();
    if (all.size() < 8 || all.compare(0, 4, "ISTC") != 0) {
        throw std::runtime_error(path + ": not an ISTC checkpoint");
    }
    const std::string payload = all.substr(4, all.size() - 8);
    std::size_t crc_pos = all.size() - 4;
    const std::uint32_t stored = static_cast<std::uint8_t>(all[crc_pos]) |
                                 (static_cast<std::uint32_t>(static_cast<std::uint8_t>(all[crc_pos + 1])) << 8) |
                                 (static_cast<std::uint32_t>(static_cast<std::uint8_t>(all[crc_pos + 2])) << 16) |
                                 (static_cast<std::uint32_t>(static_cast<std::uint8_t>(all[crc_pos + 3])) << 24);
    const std::uint32_t actual =
        detail::crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
    if (stored != actual) throw std::runtime_error(path + ": checkpoint CRC mismatch");

    std::size_t pos = 0;
    ModelConfig c;
    c.in_channels = static_cast<int>(detail::take_u32(payload, pos));
    c.gene_count = static_cast<int>(detail::take_u32(payload, pos));
    c.base_width = static_cast<int>(detail::take_u32(payload, pos));
    c.enc_depth = static_cast<int>(detail::take_u32(payload, pos));
    c.dec_depth = static_cast<int>(detail::take_u32(payload, pos));
    c.embed_dim = static_cast<int>(detail::take_u32(payload, pos));
    c.expr_hidden = static_cast<int>(detail::take_u32(payload, pos));
    c.input_px = static_cast<int>(detail::take_u32(payload, pos));
    c.kernel_size = static_cast<int>(detail::take_u32(payload, pos));
    c.validate();
    if (pos >= payload.size()) throw std::runtime_error(path + ": checkpoint truncated");
    const bool frozen = payload[pos++] != '\0';

    ModelParams<float> params = init_params<float>(c, 0);
    params.expr_frozen = frozen;
    params.for_each_param([&](const std::string& name, TensorF& t) {
        for (float& v : t.data) {
            const std::uint32_t bits = detail::take_u32(payload, pos);
            std::memcpy(&v, &bits, sizeof(v));
        }
        (void)name;
    });
    if (pos != payload.size()) throw std::runtime_error(path + ": checkpoint has trailing bytes");
    return params;
}

}  // namespace img2st
