#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "img2st/bench.hpp"
#include "img2st/format.hpp"
#include "img2st/image_io.hpp"
#include "img2st/metrics.hpp"
#include "img2st/model.hpp"
#include "img2st/st_data.hpp"
#include "img2st/training.hpp"

namespace fs = std::filesystem;
using namespace img2st;

namespace {

struct DataOptions {
    std::string data_dir;
    int genes = 8;
    int region_px = 0;  // 0 = tile size
    int resolution = 8;
};

struct Dataset {
    BinTable table;
    ImageSource image{1};
    GenePanel panel;
    std::vector<std::string> panel_names;
    int region_px = 0;
    int bins_per_side = 0;
};

Dataset load_dataset(const DataOptions& opt) {
    Dataset ds;
    ds.table = load_bin_table(opt.data_dir + "/genes.tsv", opt.data_dir + "/bins.tsv",
                              opt.data_dir + "/matrix.tsv", static_cast<double>(opt.resolution));
    ds.image = ImageSource::load_dir(opt.data_dir + "/tiles");
    ds.region_px = opt.region_px > 0 ? opt.region_px : ds.image.tile_px();
    const double pitch = infer_bin_pitch(ds.table);
    const double per_side = ds.region_px / pitch;
    ds.bins_per_side = static_cast<int>(std::llround(per_side));
    if (ds.bins_per_side < 1 || std::fabs(per_side - ds.bins_per_side) > 1e-6) {
        throw std::runtime_error("region size " + std::to_string(ds.region_px) +
                                 " px is not a whole number of bins (pitch " + fmt_g(pitch) + " px)");
    }
    const int k = std::min<int>(opt.genes, static_cast<int>(ds.table.gene_names.size()));
    ds.panel = select_gene_panel(ds.table, k);
    for (int g : ds.panel.genes) ds.panel_names.push_back(ds.table.gene_names[static_cast<std::size_t>(g)]);
    return ds;
}

// encoder/decoder depths for one region size: decoder depth 1, encoder deep
// enough that the output grid lands on bins_per_side
ModelConfig derive_model_config(int region_px, int bins_per_side, int gene_count, int base_width,
                                int embed_dim, int expr_hidden) {
    const int ratio = region_px / bins_per_side;
    if (ratio < 2 || (ratio & (ratio - 1)) != 0 || region_px % bins_per_side != 0) {
        throw std::runtime_error("pixels per bin must be a power of two >= 2, got " +
                                 std::to_string(region_px) + "/" + std::to_string(bins_per_side));
    }
    ModelConfig cfg;
    cfg.gene_count = gene_count;
    cfg.base_width = base_width;
    cfg.embed_dim = embed_dim;
    cfg.expr_hidden = expr_hidden;
    cfg.input_px = region_px;
    cfg.dec_depth = 1;
    cfg.enc_depth = 1;
    while ((1 << (cfg.enc_depth - cfg.dec_depth)) * bins_per_side != region_px) ++cfg.enc_depth;
    cfg.validate();
    return cfg;
}

std::string region_stem(const RegionSample& s, int region_px) {
    const auto rx = static_cast<long long>(std::llround(s.origin_x / region_px));
    const auto ry = static_cast<long long>(std::llround(s.origin_y / region_px));
    return "region_" + std::to_string(rx) + "_" + std::to_string(ry);
}

template <typename S>
ExpressionGrid predict_region(const ModelParams<S>& params, const RegionSample& sample) {
    const auto acts = forward(params, cast<S>(sample.image));
    ExpressionGrid g;
    g.values = cast<float>(acts.prediction);
    g.valid = sample.expression.valid;
    return g;
}

struct TrainOptions {
    DataOptions data;
    std::string out_dir;
    int epochs = 30;
    int batch = 8;
    std::uint64_t seed = 0;
    double lambda = 0.25;
    double tau = 0.07;
    double lr = 1e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double split = 0.8;
    int base_width = 8;
    int embed_dim = 16;
    int expr_hidden = 32;
    int threads = 1;
    int pretrain_epochs = 150;
    std::string precision = "f32";
    std::string neg_scope = "region";
};

TrainConfig make_train_config(const TrainOptions& opt) {
    TrainConfig cfg;
    cfg.lr0 = opt.lr;
    cfg.momentum = opt.momentum;
    cfg.weight_decay = opt.weight_decay;
    cfg.batch_size = opt.batch;
    cfg.epochs = opt.epochs;
    cfg.seed = opt.seed;
    cfg.threads = opt.threads;
    cfg.loss.lambda = opt.lambda;
    cfg.loss.tau = opt.tau;
    cfg.loss.negative_scope = opt.neg_scope == "batch" ? LossConfig::NegativeScope::batch
                                                       : LossConfig::NegativeScope::region;
    return cfg;
}

std::vector<std::vector<float>> valid_cell_vectors(const std::vector<RegionSample>& samples) {
    std::vector<std::vector<float>> out;
    for (const auto& s : samples) {
        const auto& g = s.expression;
        for (int i = 0; i < g.height(); ++i) {
            for (int j = 0; j < g.width(); ++j) {
                if (!g.is_valid(i, j)) continue;
                std::vector<float> y(static_cast<std::size_t>(g.genes()));
                for (int c = 0; c < g.genes(); ++c) y[static_cast<std::size_t>(c)] = g.values.at(c, i, j);
                out.push_back(std::move(y));
            }
        }
    }
    return out;
}

template <typename S>
int run_train(const TrainOptions& opt) {
    Dataset ds = load_dataset(opt.data);
    auto samples = tile_regions(ds.table, ds.image, ds.region_px, ds.bins_per_side, ds.panel);
    if (samples.size() < 2) throw std::runtime_error("need at least 2 regions to split train/test");
    const auto split = split_train_test(static_cast<int>(samples.size()), opt.split, opt.seed);
    std::vector<RegionSample> train_set, test_set;
    for (int i : split.train) train_set.push_back(samples[static_cast<std::size_t>(i)]);
    for (int i : split.test) test_set.push_back(samples[static_cast<std::size_t>(i)]);

    const ModelConfig cfg =
        derive_model_config(ds.region_px, ds.bins_per_side, static_cast<int>(ds.panel.genes.size()),
                            opt.base_width, opt.embed_dim, opt.expr_hidden);
    auto params = init_params<S>(cfg, opt.seed);
    if (opt.lambda > 0.0) {
        std::vector<std::vector<S>> vectors;
        for (auto& v : valid_cell_vectors(train_set)) {
            vectors.emplace_back(v.begin(), v.end());
        }
        const auto rep = pretrain_expression_encoder(params, vectors, opt.pretrain_epochs,
                                                     opt.seed ^ 0x657870ULL);
        if (rep.degenerate_inputs) {
            std::cerr << "warning: expression vectors are all identical; frozen encoder is degenerate\n";
        }
        std::printf("expression encoder pretrained: recon loss %.6g -> %.6g\n", rep.initial_loss,
                    rep.final_loss);
    }

    auto result = train(params, train_set, test_set, ds.panel_names, make_train_config(opt));

    fs::create_directories(opt.out_dir);
    write_train_log_csv(opt.out_dir + "/train_log.csv", result.log);
    save_checkpoint(opt.out_dir + "/checkpoint.istc", cast_params<float>(params));
    save_checkpoint(opt.out_dir + "/best.istc", cast_params<float>(result.best_params));
    if (!result.log.final_test.genes.empty()) {
        write_metrics_csv(opt.out_dir + "/metrics.csv", result.log.final_test);
    }
    const auto& log = result.log.epochs;
    if (!log.empty()) {
        std::printf("trained %zu epochs: l_total %.6g -> %.6g%s\n", log.size(), log.front().l_total,
                    log.back().l_total, result.log.early_stopped ? " (early stop)" : "");
    }
    if (!result.log.final_test.genes.empty()) {
        std::printf("test: mse %.6g mae %.6g ssim_st %.6g\n", result.log.final_test.mse,
                    result.log.final_test.mae, result.log.final_test.ssim_st);
    }
    return 0;
}

std::vector<fs::path> sorted_files(const std::string& dir, const std::string& ext) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"super-pixel expression grids: image-to-image expression prediction toolkit"};
    app.require_subcommand(1);
    int rc = 0;

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "emit a synthetic slide with a planted image-to-expression rule");
    struct {
        std::string out;
        std::uint64_t seed = 0;
        int regions = 2;
        int genes = 8;
        int region_px = 64;
        int bins_per_side = 4;
        int resolution = 8;
        double dropout = 0.1;
    } so;
    synth->add_option("--out", so.out, "output directory")->required();
    synth->add_option("--seed", so.seed, "rng seed");
    synth->add_option("--regions", so.regions, "regions per side (square slide)");
    synth->add_option("--genes", so.genes, "gene count");
    synth->add_option("--region-px", so.region_px, "region size in px");
    synth->add_option("--bins-per-side", so.bins_per_side, "bins per region side");
    synth->add_option("--resolution", so.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    synth->add_option("--dropout", so.dropout, "fraction of lattice bins left unmeasured");
    synth->callback([&]() {
        SynthConfig cfg;
        cfg.seed = so.seed;
        cfg.regions_x = so.regions;
        cfg.regions_y = so.regions;
        cfg.genes = so.genes;
        cfg.region_px = so.region_px;
        cfg.bins_per_side = so.bins_per_side;
        cfg.bin_size_um = so.resolution;
        cfg.bin_dropout = so.dropout;
        const auto slide = synth_slide(cfg);
        fs::create_directories(so.out);
        save_bin_table(slide.table, so.out + "/genes.tsv", so.out + "/bins.tsv", so.out + "/matrix.tsv");
        slide.image.save_dir(so.out + "/tiles");
        std::printf("synth: %zu bins, %zu triplets, %zu tiles -> %s\n", slide.table.bins.size(),
                    slide.table.counts.size(), slide.image.tile_count(), so.out.c_str());
    });

    // ---- prepare ----
    auto* prepare = app.add_subcommand("prepare", "select panel, tile regions, export expression grids");
    struct {
        DataOptions data;
        std::string out;
    } po;
    prepare->add_option("--data", po.data.data_dir, "slide directory (genes/bins/matrix.tsv + tiles/)")->required();
    prepare->add_option("--out", po.out, "output directory")->required();
    prepare->add_option("--genes", po.data.genes, "panel size");
    prepare->add_option("--region-px", po.data.region_px, "region size in px (default: tile size)");
    prepare->add_option("--resolution", po.data.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    prepare->callback([&]() {
        Dataset ds = load_dataset(po.data);
        const auto samples = tile_regions(ds.table, ds.image, ds.region_px, ds.bins_per_side, ds.panel);
        fs::create_directories(po.out + "/grids");
        {
            std::ofstream panel(po.out + "/panel.tsv");
            panel << "gene_index\tgene_name\tmean_count\n";
            for (std::size_t i = 0; i < ds.panel.genes.size(); ++i) {
                panel << ds.panel.genes[i] << '\t' << ds.panel_names[i] << '\t' << fmt_g(ds.panel.means[i])
                      << "\n";
            }
        }
        for (const auto& s : samples) {
            write_expression_grid(po.out + "/grids/" + region_stem(s, ds.region_px) + ".ist1", s.expression);
        }
        nlohmann::ordered_json meta;
        meta["region_px"] = ds.region_px;
        meta["bins_per_side"] = ds.bins_per_side;
        meta["panel_genes"] = ds.panel.genes.size();
        meta["regions"] = samples.size();
        meta["bins"] = ds.table.bins.size();
        meta["dataset_fingerprint"] = fingerprint_hex(dataset_fingerprint(ds.table, ds.panel));
        std::ofstream(po.out + "/meta.json") << meta.dump(2) << "\n";
        std::printf("prepare: %zu regions (%dx%d bins each) -> %s\n", samples.size(), ds.bins_per_side,
                    ds.bins_per_side, po.out.c_str());
    });

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train the region model on a slide");
    TrainOptions to;
    train_cmd->add_option("--data", to.data.data_dir, "slide directory")->required();
    train_cmd->add_option("--out", to.out_dir, "run output directory")->required();
    train_cmd->add_option("--genes", to.data.genes, "panel size");
    train_cmd->add_option("--region-px", to.data.region_px, "region size in px (default: tile size)");
    train_cmd->add_option("--resolution", to.data.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    train_cmd->add_option("--epochs", to.epochs, "epoch budget");
    train_cmd->add_option("--batch", to.batch, "batch size");
    train_cmd->add_option("--seed", to.seed, "rng seed");
    train_cmd->add_option("--lambda", to.lambda, "contrastive loss weight");
    train_cmd->add_option("--tau", to.tau, "InfoNCE temperature");
    train_cmd->add_option("--lr", to.lr, "initial learning rate");
    train_cmd->add_option("--momentum", to.momentum, "SGD momentum");
    train_cmd->add_option("--weight-decay", to.weight_decay, "weight decay");
    train_cmd->add_option("--split", to.split, "train fraction of the region split");
    train_cmd->add_option("--base-width", to.base_width, "channels at encoder level 1");
    train_cmd->add_option("--embed-dim", to.embed_dim, "contrastive embedding width");
    train_cmd->add_option("--expr-hidden", to.expr_hidden, "expression encoder hidden width");
    train_cmd->add_option("--threads", to.threads, "parallel gradient workers");
    train_cmd->add_option("--pretrain-epochs", to.pretrain_epochs, "expression encoder pretraining epochs");
    train_cmd->add_option("--precision", to.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    train_cmd->add_option("--neg-scope", to.neg_scope, "contrastive negatives: region or batch")
        ->check(CLI::IsMember({"region", "batch"}));
    train_cmd->callback([&]() {
        rc = to.precision == "f64" ? run_train<double>(to) : run_train<float>(to);
    });

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split, or compare grid files");
    struct {
        DataOptions data;
        std::string model, out;
        std::string pred_dir, truth_dir;
        double split = 0.8;
        std::uint64_t seed = 0;
    } eo;
    eval_cmd->add_option("--model", eo.model, "ISTC checkpoint");
    eval_cmd->add_option("--data", eo.data.data_dir, "slide directory");
    eval_cmd->add_option("--genes", eo.data.genes, "panel size");
    eval_cmd->add_option("--region-px", eo.data.region_px, "region size in px (default: tile size)");
    eval_cmd->add_option("--resolution", eo.data.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    eval_cmd->add_option("--split", eo.split, "train fraction used for the split");
    eval_cmd->add_option("--seed", eo.seed, "split seed (must match training)");
    eval_cmd->add_option("--pred", eo.pred_dir, "directory of predicted .ist1 grids");
    eval_cmd->add_option("--truth", eo.truth_dir, "directory of ground-truth .ist1 grids");
    eval_cmd->add_option("--out", eo.out, "metrics CSV path")->required();
    eval_cmd->callback([&]() {
        MetricsReport report;
        if (!eo.pred_dir.empty() || !eo.truth_dir.empty()) {
            if (eo.pred_dir.empty() || eo.truth_dir.empty()) {
                throw std::runtime_error("grid mode needs both --pred and --truth");
            }
            const auto pred_files = sorted_files(eo.pred_dir, ".ist1");
            const auto truth_files = sorted_files(eo.truth_dir, ".ist1");
            if (pred_files.empty() || pred_files.size() != truth_files.size()) {
                throw std::runtime_error("pred/truth grid directories do not pair up");
            }
            std::vector<ExpressionGrid> preds, truths;
            for (std::size_t i = 0; i < pred_files.size(); ++i) {
                if (pred_files[i].filename() != truth_files[i].filename()) {
                    throw std::runtime_error("grid filenames differ: " + pred_files[i].filename().string() +
                                             " vs " + truth_files[i].filename().string());
                }
                preds.push_back(read_expression_grid(pred_files[i].string()));
                truths.push_back(read_expression_grid(truth_files[i].string()));
            }
            std::vector<const ExpressionGrid*> pp, tp;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                pp.push_back(&preds[i]);
                tp.push_back(&truths[i]);
            }
            std::vector<std::string> names;
            for (int g = 0; g < preds[0].genes(); ++g) names.push_back("g" + std::to_string(g));
            report = evaluate_grids(pp, tp, names);
        } else {
            if (eo.model.empty() || eo.data.data_dir.empty()) {
                throw std::runtime_error("eval needs --model and --data (or --pred/--truth)");
            }
            const auto params = load_checkpoint(eo.model);
            eo.data.region_px = params.config.input_px;
            eo.data.genes = params.config.gene_count;
            Dataset ds = load_dataset(eo.data);
            if (ds.bins_per_side != params.config.bins_per_side()) {
                throw std::runtime_error("checkpoint bins per side " +
                                         std::to_string(params.config.bins_per_side()) +
                                         " does not match data lattice " + std::to_string(ds.bins_per_side));
            }
            auto samples = tile_regions(ds.table, ds.image, ds.region_px, ds.bins_per_side, ds.panel);
            const auto split = split_train_test(static_cast<int>(samples.size()), eo.split, eo.seed);
            std::vector<ExpressionGrid> preds;
            std::vector<const ExpressionGrid*> pp, tp;
            preds.reserve(split.test.size());
            for (int i : split.test) {
                preds.push_back(predict_region(params, samples[static_cast<std::size_t>(i)]));
            }
            for (std::size_t k = 0; k < split.test.size(); ++k) {
                pp.push_back(&preds[k]);
                tp.push_back(&samples[static_cast<std::size_t>(split.test[k])].expression);
            }
            report = evaluate_grids(pp, tp, ds.panel_names);
        }
        write_metrics_csv(eo.out, report);
        std::printf("eval: mse %.6g mae %.6g ssim_st %.6g (pcc degenerate on %d genes) -> %s\n",
                    report.mse, report.mae, report.ssim_st, report.pcc_degenerate_count, eo.out.c_str());
    });

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "time one-to-one vs image-to-image training on identical bins");
    struct {
        DataOptions data;
        std::string out;
        int epochs = 2;
        int batch = 8;
        std::uint64_t seed = 0;
        double lambda = 0.25;
        double tau = 0.07;
        double lr = 1e-4;
        int base_width = 8;
        int embed_dim = 16;
        int spot_patch = 112;
        int threads = 1;
    } bo;
    bench_cmd->add_option("--data", bo.data.data_dir, "slide directory")->required();
    bench_cmd->add_option("--out", bo.out, "BenchReport JSON path");
    bench_cmd->add_option("--genes", bo.data.genes, "panel size");
    bench_cmd->add_option("--region-px", bo.data.region_px, "region size in px (default: tile size)");
    bench_cmd->add_option("--resolution", bo.data.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    bench_cmd->add_option("--epochs", bo.epochs, "timed epochs per setting");
    bench_cmd->add_option("--batch", bo.batch, "batch size");
    bench_cmd->add_option("--seed", bo.seed, "rng seed");
    bench_cmd->add_option("--lambda", bo.lambda, "contrastive weight (image-to-image setting)");
    bench_cmd->add_option("--tau", bo.tau, "InfoNCE temperature");
    bench_cmd->add_option("--lr", bo.lr, "initial learning rate");
    bench_cmd->add_option("--base-width", bo.base_width, "channels at encoder level 1");
    bench_cmd->add_option("--embed-dim", bo.embed_dim, "contrastive embedding width");
    bench_cmd->add_option("--spot-patch", bo.spot_patch, "one-to-one patch size in px");
    bench_cmd->add_option("--threads", bo.threads, "parallel gradient workers");
    bench_cmd->callback([&]() {
        Dataset ds = load_dataset(bo.data);
        BenchConfig cfg;
        cfg.model = derive_model_config(ds.region_px, ds.bins_per_side,
                                        static_cast<int>(ds.panel.genes.size()), bo.base_width,
                                        bo.embed_dim, 32);
        cfg.train.lr0 = bo.lr;
        cfg.train.batch_size = bo.batch;
        cfg.train.seed = bo.seed;
        cfg.train.epochs = bo.epochs;
        cfg.train.threads = bo.threads;
        cfg.train.loss.lambda = bo.lambda;
        cfg.train.loss.tau = bo.tau;
        cfg.epochs = bo.epochs;
        cfg.spot_patch_px = bo.spot_patch;
        const auto [one, img] = run_paradigm_bench(ds.table, ds.image, ds.panel, ds.region_px,
                                                   ds.bins_per_side, cfg);
        const auto full = full_scale_mac_ratio();
        std::printf("setting          sec/epoch   fwd passes   MACs/epoch      speedup\n");
        for (const auto* r : {&one, &img}) {
            std::printf("%-16s %9.3f   %10lld   %12lld   %8.2fx\n", r->setting.c_str(),
                        r->wall_seconds_per_epoch, static_cast<long long>(r->forward_passes),
                        static_cast<long long>(r->multiply_accumulate_count), r->speedup_vs_one_to_one);
        }
        std::printf("analytic MAC ratio (this dataset): %.2f\n",
                    static_cast<double>(one.multiply_accumulate_count) /
                        static_cast<double>(img.multiply_accumulate_count));
        std::printf("analytic MAC ratio (full scale 448px/196 bins vs 112px spots): %.2f\n", full.ratio);
        if (!bo.out.empty()) {
            std::ofstream(bo.out) << bench_reports_json(one, img, full);
            std::printf("wrote %s\n", bo.out.c_str());
        }
    });

    // ---- export-maps ----
    auto* export_cmd = app.add_subcommand("export-maps", "export per-gene predicted/truth grids and the sorted mean-expression profile");
    struct {
        DataOptions data;
        std::string model, out;
        double split = 0.8;
        std::uint64_t seed = 0;
    } xo;
    export_cmd->add_option("--model", xo.model, "ISTC checkpoint")->required();
    export_cmd->add_option("--data", xo.data.data_dir, "slide directory")->required();
    export_cmd->add_option("--out", xo.out, "output directory")->required();
    export_cmd->add_option("--resolution", xo.data.resolution, "bin size in um")->check(CLI::IsMember({8, 16}));
    export_cmd->add_option("--split", xo.split, "train fraction used for the split");
    export_cmd->add_option("--seed", xo.seed, "split seed (must match training)");
    export_cmd->callback([&]() {
        const auto params = load_checkpoint(xo.model);
        xo.data.region_px = params.config.input_px;
        xo.data.genes = params.config.gene_count;
        Dataset ds = load_dataset(xo.data);
        auto samples = tile_regions(ds.table, ds.image, ds.region_px, ds.bins_per_side, ds.panel);
        const auto split = split_train_test(static_cast<int>(samples.size()), xo.split, xo.seed);
        fs::create_directories(xo.out);
        std::ofstream minmax(xo.out + "/minmax.csv");
        minmax << "region,gene,map,min,max\n";
        std::vector<ExpressionGrid> preds;
        std::vector<const ExpressionGrid*> pp, tp;
        for (int i : split.test) {
            const auto& s = samples[static_cast<std::size_t>(i)];
            preds.push_back(predict_region(params, s));
            const auto& pred = preds.back();
            const std::string stem = region_stem(s, ds.region_px);
            fs::create_directories(xo.out + "/" + stem);
            for (int g = 0; g < pred.genes(); ++g) {
                auto plane = [&](const ExpressionGrid& grid) {
                    TensorF m({grid.height(), grid.width()});
                    for (int y = 0; y < grid.height(); ++y) {
                        for (int x = 0; x < grid.width(); ++x) m.at(y, x) = grid.values.at(g, y, x);
                    }
                    return m;
                };
                for (const auto& [tag, grid] : {std::pair<const char*, const ExpressionGrid&>{"pred", pred},
                                                {"truth", s.expression}}) {
                    const TensorF m = plane(grid);
                    float lo = m.data[0], hi = m.data[0];
                    for (float v : m.data) {
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
                    write_pgm16(xo.out + "/" + stem + "/gene_" + std::to_string(g) + "_" + tag + ".pgm",
                                m, lo, hi);
                    minmax << stem << ',' << ds.panel_names[static_cast<std::size_t>(g)] << ',' << tag
                           << ',' << fmt_g(lo) << ',' << fmt_g(hi) << "\n";
                }
            }
        }
        for (std::size_t k = 0; k < split.test.size(); ++k) {
            pp.push_back(&preds[k]);
            tp.push_back(&samples[static_cast<std::size_t>(split.test[k])].expression);
        }
        const auto profile = mean_expression_profile(tp, pp);
        std::ofstream prof(xo.out + "/profile.csv");
        prof << "gene,truth_mean,pred_mean\n";
        for (const auto& e : profile) {
            prof << ds.panel_names[static_cast<std::size_t>(e.gene)] << ',' << fmt_g(e.truth_mean) << ','
                 << fmt_g(e.pred_mean) << "\n";
        }
        std::printf("export-maps: %zu test regions, %d genes -> %s\n", split.test.size(),
                    params.config.gene_count, xo.out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
