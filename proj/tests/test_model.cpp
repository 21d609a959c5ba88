#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "img2st/gradcheck.hpp"
#include "img2st/model.hpp"
#include "img2st/training.hpp"
#include "test_support.hpp"

using namespace img2st;
using testsupport::rand_tensor;
using testsupport::TempDir;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.gene_count = 3;
    cfg.base_width = 2;
    cfg.enc_depth = 2;
    cfg.dec_depth = 1;
    cfg.embed_dim = 4;
    cfg.expr_hidden = 5;
    cfg.input_px = 16;
    return cfg;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config();
    cfg.validate();
    cfg.dec_depth = 3;  // deeper than encoder
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.input_px = 18;  // not divisible by 2^enc_depth
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.kernel_size = 4;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("output shape law: prediction extent is input over 2^(enc-dec)") {
    SUBCASE("64 px input with enc 5 / dec 1 gives a 4x4 grid") {
        ModelConfig cfg;
        cfg.gene_count = 2;
        cfg.base_width = 2;
        cfg.enc_depth = 5;
        cfg.dec_depth = 1;
        cfg.embed_dim = 3;
        cfg.input_px = 64;
        const auto params = init_params<float>(cfg, 1);
        Rng rng(2);
        const auto acts = forward(params, rand_tensor<float>({3, 64, 64}, rng, 0.0, 1.0));
        CHECK(acts.prediction.shape == std::vector<int>{2, 4, 4});
        CHECK(acts.image_embeddings.shape == std::vector<int>{3, 4, 4});
    }
    SUBCASE("full-scale 448 px input with enc 6 / dec 1 gives the 14x14 bin grid") {
        ModelConfig cfg;
        cfg.gene_count = 2;
        cfg.base_width = 2;
        cfg.enc_depth = 6;
        cfg.dec_depth = 1;
        cfg.embed_dim = 2;
        cfg.input_px = 448;
        CHECK(cfg.bins_per_side() == 14);
        const auto params = init_params<float>(cfg, 1);
        Rng rng(3);
        const auto acts = forward(params, rand_tensor<float>({3, 448, 448}, rng, 0.0, 1.0));
        CHECK(acts.prediction.shape == std::vector<int>{2, 14, 14});
    }
    SUBCASE("randomized configs obey the law and keep skip extents consistent") {
        Rng rng(17);
        for (int trial = 0; trial < 6; ++trial) {
            ModelConfig cfg;
            cfg.gene_count = static_cast<int>(rng.uniform_int(1, 4));
            cfg.base_width = static_cast<int>(rng.uniform_int(1, 3));
            cfg.enc_depth = static_cast<int>(rng.uniform_int(1, 4));
            cfg.dec_depth = static_cast<int>(rng.uniform_int(1, cfg.enc_depth));
            cfg.embed_dim = static_cast<int>(rng.uniform_int(1, 5));
            cfg.input_px = (1 << cfg.enc_depth) * static_cast<int>(rng.uniform_int(1, 3));
            const auto params = init_params<float>(cfg, trial);
            const auto img = rand_tensor<float>({3, cfg.input_px, cfg.input_px}, rng, 0.0, 1.0);
            const auto acts = forward(params, img);
            const int hp = cfg.input_px >> (cfg.enc_depth - cfg.dec_depth);
            REQUIRE(acts.prediction.shape == std::vector<int>{cfg.gene_count, hp, hp});
            // each decoder block concatenated a skip of exactly its upsampled extent
            for (const auto& d : acts.dec) {
                REQUIRE(d.concatenated.dim(2) == d.up_act.dim(2));
                REQUIRE(d.concatenated.dim(3) == d.up_act.dim(3));
            }
        }
    }
}

TEST_CASE("zero output head weight leaves the bias at every cell") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 5);
    std::fill(params.out_head.w.data.begin(), params.out_head.w.data.end(), 0.0f);
    params.out_head.b = TensorF::from({3}, {1.5f, -2.0f, 0.25f});
    Rng rng(6);
    const auto acts = forward(params, rand_tensor<float>({3, 16, 16}, rng, 0.0, 1.0));
    for (int g = 0; g < 3; ++g) {
        for (int i = 0; i < acts.prediction.dim(1); ++i) {
            for (int j = 0; j < acts.prediction.dim(2); ++j) {
                CHECK(acts.prediction.at(g, i, j) == params.out_head.b.at(g));
            }
        }
    }
}

TEST_CASE("forward rejects wrong image shapes") {
    const auto params = init_params<float>(tiny_config(), 1);
    CHECK_THROWS_AS(forward(params, TensorF({3, 8, 8})), std::invalid_argument);
    CHECK_THROWS_AS(forward(params, TensorF({1, 16, 16})), std::invalid_argument);
}

TEST_CASE("encode_expression") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 9);
    SUBCASE("zero input with zero biases maps to zero for a ReLU MLP") {
        const auto z = encode_expression(params, std::vector<float>(3, 0.0f));
        for (float v : z) CHECK(v == 0.0f);
    }
    SUBCASE("identical inputs give identical embeddings") {
        const std::vector<float> y = {0.3f, 1.2f, 0.1f};
        CHECK(encode_expression(params, y) == encode_expression(params, y));
    }
    SUBCASE("matches an independent scalar-loop oracle") {
        Rng rng(10);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<float> y(3);
            for (auto& v : y) v = static_cast<float>(rng.uniform(0.0, 4.0));
            const auto z = encode_expression(params, y);
            for (int o = 0; o < cfg.embed_dim; ++o) {
                double acc = params.expr_b2.at(o);
                for (int hdim = 0; hdim < cfg.expr_hidden; ++hdim) {
                    double h = params.expr_b1.at(hdim);
                    for (int i = 0; i < cfg.gene_count; ++i) {
                        h += static_cast<double>(params.expr_w1.at(hdim, i)) * y[static_cast<std::size_t>(i)];
                    }
                    if (h < 0.0) h = 0.0;
                    acc += static_cast<double>(params.expr_w2.at(o, hdim)) * h;
                }
                REQUIRE(z[static_cast<std::size_t>(o)] == doctest::Approx(acc).epsilon(1e-6));
            }
        }
    }
    SUBCASE("rejects non-finite input and wrong lengths") {
        CHECK_THROWS_AS(encode_expression(params, std::vector<float>{1.0f, 2.0f}), std::invalid_argument);
        CHECK_THROWS_AS(encode_expression(params, {1.0f, std::nanf(""), 0.0f}), std::invalid_argument);
    }
}

TEST_CASE("encode_expression_grid zeroes invalid cells") {
    ModelConfig cfg = tiny_config();
    const auto params = init_params<float>(cfg, 3);
    ExpressionGrid grid;
    Rng rng(4);
    grid.values = rand_tensor<float>({3, 2, 2}, rng, 0.5, 2.0);
    grid.valid = {1, 0, 1, 1};
    const auto emb = encode_expression_grid(params, grid);
    CHECK(emb.shape == std::vector<int>{4, 2, 2});
    for (int c = 0; c < 4; ++c) CHECK(emb.at(c, 0, 1) == 0.0f);
    bool any_nonzero = false;
    for (int c = 0; c < 4; ++c) any_nonzero = any_nonzero || emb.at(c, 0, 0) != 0.0f;
    CHECK(any_nonzero);
}

TEST_CASE("init_params determinism and Kaiming bounds") {
    const ModelConfig cfg = tiny_config();
    const auto a = init_params<float>(cfg, 42);
    const auto b = init_params<float>(cfg, 42);
    bool identical = true;
    a.for_each_param([&](const std::string& name, const TensorF& t) {
        const_cast<ModelParams<float>&>(b).for_each_param([&](const std::string& n2, TensorF& t2) {
            if (n2 == name && t2.data != t.data) identical = false;
        });
    });
    CHECK(identical);

    const auto c = init_params<float>(cfg, 43);
    CHECK(a.encoder[0].conv1.w.data != c.encoder[0].conv1.w.data);

    // biases zero, weights within the Kaiming bound
    for (float v : a.encoder[0].conv1.b.data) CHECK(v == 0.0f);
    const double bound1 = std::sqrt(6.0 / (3.0 * 9.0));
    for (float v : a.encoder[0].conv1.w.data) CHECK(std::fabs(v) <= bound1);
    const double bound_expr = std::sqrt(6.0 / cfg.gene_count);
    for (float v : a.expr_w1.data) CHECK(std::fabs(v) <= bound_expr);
}

TEST_CASE("expression encoder pretraining") {
    ModelConfig cfg = tiny_config();
    Rng rng(123);
    std::vector<std::vector<float>> vectors;
    for (int i = 0; i < 64; ++i) {
        std::vector<float> y(3);
        for (auto& v : y) v = static_cast<float>(rng.uniform(0.0, 4.0));
        vectors.push_back(std::move(y));
    }
    SUBCASE("reconstruction loss decreases and the encoder lands frozen") {
        auto params = init_params<float>(cfg, 7);
        const auto rep = pretrain_expression_encoder(params, vectors, 120, 11);
        CHECK(rep.final_loss < rep.initial_loss);
        CHECK_FALSE(rep.degenerate_inputs);
        CHECK(params.expr_frozen);
    }
    SUBCASE("same seed gives identical weights") {
        auto p1 = init_params<float>(cfg, 7);
        auto p2 = init_params<float>(cfg, 7);
        pretrain_expression_encoder(p1, vectors, 60, 11);
        pretrain_expression_encoder(p2, vectors, 60, 11);
        CHECK(p1.expr_w1.data == p2.expr_w1.data);
        CHECK(p1.expr_w2.data == p2.expr_w2.data);
    }
    SUBCASE("all-identical inputs flag degeneracy but still produce an encoder") {
        auto params = init_params<float>(cfg, 7);
        std::vector<std::vector<float>> same(8, {1.0f, 2.0f, 3.0f});
        const auto rep = pretrain_expression_encoder(params, same, 40, 11);
        CHECK(rep.degenerate_inputs);
        CHECK(params.expr_w1.all_finite());
    }
    SUBCASE("fewer than 2 vectors is an error") {
        auto params = init_params<float>(cfg, 7);
        std::vector<std::vector<float>> one(1, {1.0f, 2.0f, 3.0f});
        CHECK_THROWS_AS(pretrain_expression_encoder(params, one, 10, 1), std::invalid_argument);
    }
}

TEST_CASE("frozen encoder parameters survive optimizer steps bit-exactly") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 21);

    // real pipeline order: pretrain g, freeze, then train the image model
    Rng rng(22);
    SynthConfig scfg;
    scfg.seed = 5;
    scfg.regions_x = 2;
    scfg.regions_y = 2;
    scfg.genes = 3;
    scfg.region_px = 16;
    scfg.bins_per_side = 8;
    const auto slide = synth_slide(scfg);
    const auto panel = select_gene_panel(slide.table, 3);
    const auto samples = tile_regions(slide.table, slide.image, 16, 8, panel);
    std::vector<std::vector<float>> vectors;
    for (int i = 0; i < 32; ++i) {
        std::vector<float> y(3);
        for (auto& v : y) v = static_cast<float>(rng.uniform(0.0, 4.0));
        vectors.push_back(std::move(y));
    }
    pretrain_expression_encoder(params, vectors, 80, 13);
    const auto w1 = params.expr_w1.data;
    const auto b1 = params.expr_b1.data;
    const auto w2 = params.expr_w2.data;
    const auto b2 = params.expr_b2.data;

    TrainConfig tc;
    tc.lr0 = 1e-2;
    tc.epochs = 3;
    tc.batch_size = 2;
    tc.seed = 9;
    train(params, samples, {}, {}, tc);
    CHECK(params.expr_w1.data == w1);
    CHECK(params.expr_b1.data == b1);
    CHECK(params.expr_w2.data == w2);
    CHECK(params.expr_b2.data == b2);
}

TEST_CASE("checkpoint round-trip and corruption detection") {
    TempDir dir("model_ckpt");
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 77);
    params.expr_frozen = true;
    const auto path = dir.file("model.istc");
    save_checkpoint(path, params);
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.config.gene_count == cfg.gene_count);
    CHECK(loaded.config.input_px == cfg.input_px);
    CHECK(loaded.expr_frozen);
    CHECK(loaded.encoder[0].conv1.w.data == params.encoder[0].conv1.w.data);
    CHECK(loaded.proj.w.data == params.proj.w.data);
    CHECK(loaded.expr_w2.data == params.expr_w2.data);

    // flip one payload byte: the CRC must catch it
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        char c;
        f.seekg(64);
        f.read(&c, 1);
        c = static_cast<char>(c ^ 0x5a);
        f.seekp(64);
        f.write(&c, 1);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("CRC"), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.istc")), std::runtime_error);
}

TEST_CASE("full-model gradient check on a tiny config (f32 and f64)") {
    ModelConfig cfg = tiny_config();
    LossConfig loss_cfg;  // lambda 0.25, tau 0.07

    auto master = init_params<double>(cfg, 2027);
    {
        Rng vr(2028);
        std::vector<std::vector<double>> vectors;
        for (int i = 0; i < 24; ++i) {
            std::vector<double> y(3);
            for (auto& v : y) v = vr.uniform(0.0, 4.0);
            vectors.push_back(std::move(y));
        }
        pretrain_expression_encoder(master, vectors, 60, 2029);
    }
    const auto mb = testsupport::random_micro_batch(cfg, 31);
    ExpressionGrid truth_grid;
    truth_grid.values = mb.truth;
    truth_grid.valid = mb.mask;

    const auto master_ld = cast_params<long double>(master);
    const Tensor<long double> exp_emb_ld = encode_expression_grid(master_ld, truth_grid);
    const TensorD exp_emb_d = cast<double>(exp_emb_ld);
    const Tensor<float> exp_emb_f = cast<float>(exp_emb_ld);

    const auto values = testsupport::trainable_values(master);
    auto closure = [&](const std::vector<TensorD>& vs) {
        return testsupport::model_total_loss_precise<long double>(master_ld, vs, mb, exp_emb_ld,
                                                                  loss_cfg);
    };
    const auto grads_f64 = testsupport::model_total_grads<double>(master, values, mb, exp_emb_d, loss_cfg);

    const auto master_f32 = cast_params<float>(master);
    const auto grads_f32 =
        testsupport::model_total_grads<float>(master_f32, values, mb, exp_emb_f, loss_cfg);

    GradCheckOptions opts;
    opts.threads = 2;
    opts.stencil_order = 4;
    const auto reps = gradcheck_multi(closure, values, {&grads_f64, &grads_f32}, 1e-5, opts);
    CHECK(reps[0].max_rel_error < 1e-6);
    CHECK(reps[1].max_rel_error < 1e-3);
}
