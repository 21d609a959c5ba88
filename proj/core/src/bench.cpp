#include "img2st/bench.hpp"

#include <chrono>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "img2st/format.hpp"
#include "img2st/layers.hpp"
#include "img2st/losses.hpp"
#include "img2st/rng.hpp"

namespace img2st {

namespace {

std::int64_t conv_macs(std::int64_t out_hw, std::int64_t c_out, std::int64_t c_in, std::int64_t k) {
    return out_hw * c_out * c_in * k * k;
}

// One-to-one baseline: the same encoder trunk truncated to the patch size,
// global average pooling, and a linear head to the gene panel.
struct SpotNet {
    ModelConfig config;
    int patch_px = 0;
    int depth = 0;
    std::vector<EncoderBlock<float>> blocks;
    Tensor<float> head_w, head_b;

    template <typename F>
    void for_each_param(F&& fn) {
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "enc" + std::to_string(l + 1) + ".";
            fn(p + "conv1.w", blocks[l].conv1.w);
            fn(p + "conv1.b", blocks[l].conv1.b);
            fn(p + "conv2.w", blocks[l].conv2.w);
            fn(p + "conv2.b", blocks[l].conv2.b);
        }
        fn("head.w", head_w);
        fn("head.b", head_b);
    }
};

SpotNet make_spot_net(const ModelConfig& config, int patch_px, std::uint64_t seed) {
    SpotNet net;
    net.config = config;
    net.patch_px = patch_px;
    net.depth = spot_trunk_depth(config, patch_px);
    Rng rng(seed);
    int in_ch = config.in_channels;
    const int k = config.kernel_size;
    for (int l = 1; l <= net.depth; ++l) {
        EncoderBlock<float> blk;
        const int out_ch = config.enc_channels(l);
        blk.conv1 = detail::make_conv<float>(out_ch, in_ch, k, rng);
        blk.conv2 = detail::make_conv<float>(out_ch, out_ch, k, rng);
        net.blocks.push_back(std::move(blk));
        in_ch = out_ch;
    }
    net.head_w = Tensor<float>({config.gene_count, in_ch});
    net.head_b = Tensor<float>({config.gene_count});
    detail::kaiming_fill(net.head_w, in_ch, rng);
    return net;
}

struct SpotActs {
    std::vector<EncBlockActs<float>> enc;
    Tensor<float> feature;  // pooled (1, ch)
    Tensor<float> pred;     // (1, C)
};

SpotActs spot_forward(const SpotNet& net, const TensorF& image) {
    const int pad = net.config.kernel_size / 2;
    SpotActs acts;
    acts.enc.resize(static_cast<std::size_t>(net.depth));
    Tensor<float> x = image.reshaped({1, 3, net.patch_px, net.patch_px});
    for (int l = 0; l < net.depth; ++l) {
        auto& a = acts.enc[static_cast<std::size_t>(l)];
        const auto& blk = net.blocks[static_cast<std::size_t>(l)];
        a.input = std::move(x);
        a.pre1 = conv2d_forward(a.input, blk.conv1.w, blk.conv1.b, 1, pad);
        a.act1 = relu_forward(a.pre1);
        a.pre2 = conv2d_forward(a.act1, blk.conv2.w, blk.conv2.b, 1, pad);
        a.act2 = relu_forward(a.pre2);
        a.pool = maxpool2x2_forward(a.act2);
        x = a.pool.out;
    }
    acts.feature = global_avg_pool_forward(x);
    acts.pred = linear_forward(acts.feature, net.head_w, net.head_b);
    return acts;
}

LayerGradients<float> spot_backward(const SpotNet& net, const SpotActs& acts,
                                    const Tensor<float>& grad_pred) {
    const int pad = net.config.kernel_size / 2;
    LayerGradients<float> grads;
    auto hg = linear_backward(acts.feature, net.head_w, grad_pred);
    grads["head.w"] = std::move(hg.weight);
    grads["head.b"] = std::move(hg.bias);
    const auto& last = acts.enc.back().pool.out;
    Tensor<float> g = global_avg_pool_backward(hg.input, last.dim(2), last.dim(3));
    for (int l = net.depth; l >= 1; --l) {
        const auto& a = acts.enc[static_cast<std::size_t>(l - 1)];
        const auto& blk = net.blocks[static_cast<std::size_t>(l - 1)];
        const std::string prefix = "enc" + std::to_string(l) + ".";
        g = maxpool2x2_backward(a.pool, g);
        g = relu_backward(a.pre2, g);
        auto c2g = conv2d_backward(a.act1, blk.conv2.w, g, 1, pad);
        grads[prefix + "conv2.w"] = std::move(c2g.weight);
        grads[prefix + "conv2.b"] = std::move(c2g.bias);
        g = relu_backward(a.pre1, c2g.input);
        auto c1g = conv2d_backward(a.input, blk.conv1.w, g, 1, pad);
        grads[prefix + "conv1.w"] = std::move(c1g.weight);
        grads[prefix + "conv1.b"] = std::move(c1g.bias);
        g = std::move(c1g.input);
    }
    return grads;
}

// per-epoch training pass over all spots; returns wall seconds
double spot_epoch(SpotNet& net, const std::vector<SpotSample>& spots, const TrainConfig& config,
                  Rng& shuffle_rng, LayerGradients<float>& velocity, int step, int total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = static_cast<int>(spots.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    const int c = net.config.gene_count;
    LayerGradients<float> batch;
    for (int b0 = 0; b0 < n; b0 += config.batch_size) {
        const int bn = std::min(config.batch_size, n - b0);
        batch.clear();
        for (int k = 0; k < bn; ++k) {
            const auto& s = spots[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)])];
            const auto acts = spot_forward(net, s.image);
            Tensor<float> gp({1, c});
            for (int g = 0; g < c; ++g) {
                gp.at(0, g) = 2.0f * (acts.pred.at(0, g) - s.expression[static_cast<std::size_t>(g)]) /
                              static_cast<float>(c);
            }
            auto grads = spot_backward(net, acts, gp);
            for (auto& [name, g] : grads) {
                auto it = batch.find(name);
                if (it == batch.end()) {
                    batch.emplace(name, std::move(g));
                } else {
                    axpy(it->second, 1.0f, g);
                }
            }
        }
        for (auto& [name, g] : batch) scale(g, 1.0f / static_cast<float>(bn));
        const double lr = cosine_lr(std::min(step, total_steps), total_steps, config);
        net.for_each_param([&](const std::string& name, Tensor<float>& p) {
            auto it = batch.find(name);
            if (it == batch.end()) throw std::runtime_error("spot sgd: missing gradient for " + name);
            sgd_update_tensor(p, it->second, velocity[name], lr, config.momentum, config.weight_decay,
                              name);
        });
        ++step;
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int spot_trunk_depth(const ModelConfig& config, int patch_px) {
    if (patch_px < 2) throw std::invalid_argument("spot patch must be at least 2 px");
    int depth = 0;
    int extent = patch_px;
    while (depth < config.enc_depth && extent % 2 == 0 && extent >= 2) {
        ++depth;
        extent /= 2;
    }
    if (depth == 0) throw std::invalid_argument("spot patch size admits no pooling stage");
    return depth;
}

std::int64_t region_forward_macs(const ModelConfig& config) {
    config.validate();
    const std::int64_t k = config.kernel_size;
    std::int64_t total = 0;
    std::int64_t extent = config.input_px;
    std::int64_t in_ch = config.in_channels;
    for (int l = 1; l <= config.enc_depth; ++l) {
        const std::int64_t out_ch = config.enc_channels(l);
        total += conv_macs(extent * extent, out_ch, in_ch, k);
        total += conv_macs(extent * extent, out_ch, out_ch, k);
        extent /= 2;
        in_ch = out_ch;
    }
    for (int l = 1; l <= config.dec_depth; ++l) {
        extent *= 2;
        const std::int64_t skip = config.skip_channels(l);
        const std::int64_t out_ch = config.dec_channels(l);
        total += conv_macs(extent * extent, skip, in_ch, k);         // up conv
        total += conv_macs(extent * extent, out_ch, 2 * skip, k);    // conv1 after concat
        total += conv_macs(extent * extent, out_ch, out_ch, k);      // conv2
        in_ch = out_ch;
    }
    const std::int64_t hp = config.bins_per_side();
    total += conv_macs(hp * hp, config.gene_count, in_ch, 1);  // output head
    total += conv_macs(hp * hp, config.embed_dim, in_ch, 1);   // projection head
    return total;
}

std::int64_t spot_forward_macs(const ModelConfig& config, int patch_px) {
    const int depth = spot_trunk_depth(config, patch_px);
    const std::int64_t k = config.kernel_size;
    std::int64_t total = 0;
    std::int64_t extent = patch_px;
    std::int64_t in_ch = config.in_channels;
    for (int l = 1; l <= depth; ++l) {
        const std::int64_t out_ch = config.enc_channels(l);
        total += conv_macs(extent * extent, out_ch, in_ch, k);
        total += conv_macs(extent * extent, out_ch, out_ch, k);
        extent /= 2;
        in_ch = out_ch;
    }
    total += in_ch * config.gene_count;  // linear head after global pooling
    return total;
}

FullScaleMacs full_scale_mac_ratio() {
    ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.gene_count = 250;
    cfg.base_width = 32;
    cfg.enc_depth = 6;
    cfg.dec_depth = 1;
    cfg.embed_dim = 128;
    cfg.expr_hidden = 256;
    cfg.input_px = 448;
    FullScaleMacs out;
    out.image_to_image = region_forward_macs(cfg);
    const std::int64_t bins = static_cast<std::int64_t>(cfg.bins_per_side()) * cfg.bins_per_side();
    out.one_to_one = bins * spot_forward_macs(cfg, 112);
    out.ratio = static_cast<double>(out.one_to_one) / static_cast<double>(out.image_to_image);
    return out;
}

std::pair<BenchReport, BenchReport> run_paradigm_bench(const BinTable& table, const ImageSource& image,
                                                       const GenePanel& panel, int region_px,
                                                       int bins_per_side, const BenchConfig& config) {
    config.train.validate();
    if (config.epochs < 1) throw std::invalid_argument("bench needs at least 1 epoch");

    auto regions = tile_regions(table, image, region_px, bins_per_side, panel);
    auto spots = tile_spots(table, image, config.spot_patch_px, panel);

    std::int64_t region_cells = 0;
    for (const auto& r : regions) region_cells += r.expression.valid_count();
    if (region_cells != static_cast<std::int64_t>(spots.size())) {
        throw std::runtime_error("bench settings cover different bin sets: " +
                                 std::to_string(region_cells) + " region cells vs " +
                                 std::to_string(spots.size()) + " spots");
    }

    const std::string fp = fingerprint_hex(dataset_fingerprint(table, panel));

    // image-to-image: the region model under its hybrid loss
    BenchReport img;
    img.setting = "image_to_image";
    img.forward_passes = static_cast<std::int64_t>(regions.size());
    img.multiply_accumulate_count = img.forward_passes * region_forward_macs(config.model);
    img.dataset_fingerprint = fp;
    {
        auto params = init_params<float>(config.model, config.train.seed);
        if (config.train.loss.lambda > 0.0) {
            std::vector<std::vector<float>> vectors;
            for (const auto& r : regions) {
                const auto& g = r.expression;
                for (int i = 0; i < g.height(); ++i) {
                    for (int j = 0; j < g.width(); ++j) {
                        if (!g.is_valid(i, j)) continue;
                        std::vector<float> y(static_cast<std::size_t>(g.genes()));
                        for (int c = 0; c < g.genes(); ++c) y[static_cast<std::size_t>(c)] = g.values.at(c, i, j);
                        vectors.push_back(std::move(y));
                    }
                }
            }
            pretrain_expression_encoder(params, vectors, 100, config.train.seed ^ 0x657870ULL);
        }
        TrainConfig tc = config.train;
        tc.epochs = config.epochs;
        tc.patience = config.epochs + 1;  // no early stop while timing
        auto result = train(params, regions, {}, {}, tc);
        double total = 0.0;
        for (const auto& e : result.log.epochs) total += e.seconds;
        img.wall_seconds_per_epoch = total / static_cast<double>(result.log.epochs.size());
    }

    // one-to-one: per-spot regressor over the identical bins
    BenchReport one;
    one.setting = "one_to_one";
    one.forward_passes = static_cast<std::int64_t>(spots.size());
    one.multiply_accumulate_count =
        one.forward_passes * spot_forward_macs(config.model, config.spot_patch_px);
    one.dataset_fingerprint = fp;
    {
        SpotNet net = make_spot_net(config.model, config.spot_patch_px, config.train.seed);
        Rng shuffle_rng(config.train.seed ^ 0x747261696eULL);
        LayerGradients<float> velocity;
        const int steps_per_epoch =
            (static_cast<int>(spots.size()) + config.train.batch_size - 1) / config.train.batch_size;
        const int total_steps = config.epochs * steps_per_epoch;
        double total = 0.0;
        for (int e = 0; e < config.epochs; ++e) {
            total += spot_epoch(net, spots, config.train, shuffle_rng, velocity, e * steps_per_epoch,
                                total_steps);
        }
        one.wall_seconds_per_epoch = total / config.epochs;
    }

    one.speedup_vs_one_to_one = 1.0;
    img.speedup_vs_one_to_one = one.wall_seconds_per_epoch / img.wall_seconds_per_epoch;
    return {one, img};
}

std::string bench_reports_json(const BenchReport& one_to_one, const BenchReport& image_to_image,
                               const FullScaleMacs& full_scale) {
    nlohmann::ordered_json j;
    auto fill = [](const BenchReport& r) {
        nlohmann::ordered_json o;
        o["setting"] = r.setting;
        o["wall_seconds_per_epoch"] = r.wall_seconds_per_epoch;
        o["forward_passes"] = r.forward_passes;
        o["multiply_accumulate_count"] = r.multiply_accumulate_count;
        o["speedup_vs_one_to_one"] = r.speedup_vs_one_to_one;
        o["dataset_fingerprint"] = r.dataset_fingerprint;
        return o;
    };
    j["reports"] = nlohmann::ordered_json::array({fill(one_to_one), fill(image_to_image)});
    j["mac_ratio"] = static_cast<double>(one_to_one.multiply_accumulate_count) /
                     static_cast<double>(image_to_image.multiply_accumulate_count);
    nlohmann::ordered_json fs;
    fs["one_to_one_macs"] = full_scale.one_to_one;
    fs["image_to_image_macs"] = full_scale.image_to_image;
    fs["ratio"] = full_scale.ratio;
    j["full_scale_analytic"] = fs;
    return j.dump(2) + "\n";
}

}  // namespace img2st
