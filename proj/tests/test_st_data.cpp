#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "img2st/image_io.hpp"
#include "img2st/st_data.hpp"
#include "test_support.hpp"

using namespace img2st;
using testsupport::TempDir;

namespace {

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

// one full-lattice region at a given pitch, image all mid-gray
struct LatticeFixture {
    BinTable table;
    ImageSource image{1};
};

LatticeFixture full_lattice(int region_px, int pitch, int genes) {
    LatticeFixture fx{BinTable{}, ImageSource(region_px)};
    const int per_side = region_px / pitch;
    for (int g = 0; g < genes; ++g) fx.table.gene_names.push_back("g" + std::to_string(g));
    for (int r = 0; r < per_side; ++r) {
        for (int c = 0; c < per_side; ++c) {
            BinInfo b;
            b.id = "b" + std::to_string(r) + "_" + std::to_string(c);
            b.array_row = r;
            b.array_col = c;
            b.pixel_x = (c + 0.5) * pitch;
            b.pixel_y = (r + 0.5) * pitch;
            const int idx = static_cast<int>(fx.table.bins.size());
            fx.table.counts.push_back({idx, 0, r + c});
            fx.table.bins.push_back(b);
        }
    }
    fx.image.add_tile(0, 0, TensorF({3, region_px, region_px}, 0.5f));
    return fx;
}

}  // namespace

TEST_CASE("load_bin_table: empty matrix with valid headers") {
    TempDir dir("stdata_empty");
    write_file(dir.file("genes.tsv"), "gene_name\nACTB\nGAPDH\n");
    write_file(dir.file("bins.tsv"),
               "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\nb0\t0\t0\t16\t16\n");
    write_file(dir.file("matrix.tsv"), "bin_index\tgene_index\tcount\n");
    const auto t = load_bin_table(dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv"));
    CHECK(t.gene_names.size() == 2);
    CHECK(t.bins.size() == 1);
    CHECK(t.counts.empty());
}

TEST_CASE("load_bin_table: 3 bins x 2 genes fixture round-trips counts exactly") {
    TempDir dir("stdata_roundtrip");
    BinTable t;
    t.gene_names = {"ACTB", "GAPDH"};
    t.bins = {{"b0", 0, 0, 16.0, 16.0}, {"b1", 0, 1, 48.0, 16.0}, {"b2", 1, 0, 16.0, 48.0}};
    t.counts = {{0, 0, 5}, {0, 1, 2}, {1, 0, 7}, {2, 1, 11}};
    t.bin_size_um = 16.0;
    save_bin_table(t, dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv"));
    const auto r = load_bin_table(dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv"), 16.0);
    CHECK(r.gene_names == t.gene_names);
    REQUIRE(r.bins.size() == t.bins.size());
    for (std::size_t i = 0; i < t.bins.size(); ++i) {
        CHECK(r.bins[i].id == t.bins[i].id);
        CHECK(r.bins[i].array_row == t.bins[i].array_row);
        CHECK(r.bins[i].array_col == t.bins[i].array_col);
        CHECK(r.bins[i].pixel_x == t.bins[i].pixel_x);
        CHECK(r.bins[i].pixel_y == t.bins[i].pixel_y);
    }
    REQUIRE(r.counts.size() == t.counts.size());
    for (std::size_t i = 0; i < t.counts.size(); ++i) {
        CHECK(r.counts[i].bin == t.counts[i].bin);
        CHECK(r.counts[i].gene == t.counts[i].gene);
        CHECK(r.counts[i].count == t.counts[i].count);
    }
    CHECK(r.bin_size_um == 16.0);
}

TEST_CASE("load_bin_table: duplicated grid coordinate names the duplicate") {
    TempDir dir("stdata_dup");
    write_file(dir.file("genes.tsv"), "gene_name\nACTB\n");
    write_file(dir.file("bins.tsv"),
               "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n"
               "b7\t3\t4\t16\t16\n"
               "b2\t3\t4\t48\t16\n");
    write_file(dir.file("matrix.tsv"), "bin_index\tgene_index\tcount\n");
    CHECK_THROWS_WITH_AS(
        load_bin_table(dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv")),
        doctest::Contains("(3,4)"), std::runtime_error);
}

TEST_CASE("load_bin_table: malformed rows carry line numbers") {
    TempDir dir("stdata_malformed");
    write_file(dir.file("genes.tsv"), "gene_name\nACTB\n");
    write_file(dir.file("bins.tsv"),
               "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n"
               "b0\t0\t0\t16\t16\n"
               "b1\t0\tnotanumber\t48\t16\n");
    write_file(dir.file("matrix.tsv"), "bin_index\tgene_index\tcount\n");
    CHECK_THROWS_WITH_AS(
        load_bin_table(dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv")),
        doctest::Contains("line 3"), std::runtime_error);
}

TEST_CASE("load_bin_table: out-of-range triplet index is a validation error") {
    TempDir dir("stdata_oob");
    write_file(dir.file("genes.tsv"), "gene_name\nACTB\n");
    write_file(dir.file("bins.tsv"), "bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\nb0\t0\t0\t16\t16\n");
    write_file(dir.file("matrix.tsv"), "bin_index\tgene_index\tcount\n0\t5\t3\n");
    CHECK_THROWS_WITH_AS(
        load_bin_table(dir.file("genes.tsv"), dir.file("bins.tsv"), dir.file("matrix.tsv")),
        doctest::Contains("out of range"), std::runtime_error);
}

TEST_CASE("validate_bin_table rejects 2um resolution and negative counts") {
    BinTable t;
    t.gene_names = {"A"};
    t.bins = {{"b0", 0, 0, 1.0, 1.0}};
    t.bin_size_um = 2.0;
    CHECK_THROWS_WITH_AS(validate_bin_table(t), doctest::Contains("8 or 16"), std::runtime_error);
    t.bin_size_um = 8.0;
    t.counts = {{0, 0, -1}};
    CHECK_THROWS_WITH_AS(validate_bin_table(t), doctest::Contains("negative count"), std::runtime_error);
}

TEST_CASE("select_gene_panel basics") {
    BinTable t;
    t.gene_names = {"A", "B"};
    t.bins = {{"b0", 0, 0, 1, 1}, {"b1", 0, 1, 3, 1}};
    t.counts = {{0, 0, 6}, {1, 0, 4}, {0, 1, 2}};  // means: A=5, B=1
    const auto p1 = select_gene_panel(t, 1);
    CHECK(p1.genes == std::vector<int>{0});
    CHECK(p1.means[0] == doctest::Approx(5.0));
    const auto p2 = select_gene_panel(t, 2);
    CHECK(p2.genes == std::vector<int>{0, 1});
    CHECK(p2.means[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(select_gene_panel(t, 0), std::invalid_argument);
    CHECK_THROWS_AS(select_gene_panel(t, 3), std::invalid_argument);
}

TEST_CASE("select_gene_panel matches an exhaustive sort oracle on a random 50-gene fixture") {
    Rng rng(2024);
    BinTable t;
    const int genes = 50, bins = 20;
    for (int g = 0; g < genes; ++g) t.gene_names.push_back("g" + std::to_string(g));
    for (int b = 0; b < bins; ++b) {
        t.bins.push_back({"b" + std::to_string(b), b, 0, 1.0 + b, 1.0});
        for (int g = 0; g < genes; ++g) {
            const int c = static_cast<int>(rng.uniform_int(0, 30));
            if (c > 0) t.counts.push_back({b, g, c});
        }
    }
    // oracle: dense means, full stable sort
    std::vector<double> mean(genes, 0.0);
    for (const auto& tr : t.counts) mean[static_cast<std::size_t>(tr.gene)] += static_cast<double>(tr.count);
    for (auto& m : mean) m /= bins;
    std::vector<int> order(genes);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (mean[static_cast<std::size_t>(a)] != mean[static_cast<std::size_t>(b)]) {
            return mean[static_cast<std::size_t>(a)] > mean[static_cast<std::size_t>(b)];
        }
        return a < b;
    });
    const auto panel = select_gene_panel(t, 10);
    for (int i = 0; i < 10; ++i) {
        CHECK(panel.genes[static_cast<std::size_t>(i)] == order[static_cast<std::size_t>(i)]);
        CHECK(panel.means[static_cast<std::size_t>(i)] ==
              doctest::Approx(mean[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]));
    }
    // non-increasing means
    for (std::size_t i = 1; i < panel.means.size(); ++i) CHECK(panel.means[i - 1] >= panel.means[i]);
}

TEST_CASE("panel selection is invariant under gene permutation up to the tie-break") {
    Rng rng(7);
    BinTable t;
    const int genes = 12;
    for (int g = 0; g < genes; ++g) t.gene_names.push_back("g" + std::to_string(g));
    t.bins = {{"b0", 0, 0, 1, 1}};
    std::vector<int> counts(genes);
    for (auto& c : counts) c = static_cast<int>(rng.uniform_int(1, 100));
    for (int g = 0; g < genes; ++g) t.counts.push_back({0, g, counts[static_cast<std::size_t>(g)]});

    std::vector<int> perm(genes);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    BinTable t2 = t;
    for (int g = 0; g < genes; ++g) {
        t2.gene_names[static_cast<std::size_t>(perm[static_cast<std::size_t>(g)])] =
            t.gene_names[static_cast<std::size_t>(g)];
    }
    t2.counts.clear();
    for (int g = 0; g < genes; ++g) {
        t2.counts.push_back({0, perm[static_cast<std::size_t>(g)], counts[static_cast<std::size_t>(g)]});
    }
    const auto p1 = select_gene_panel(t, 5);
    const auto p2 = select_gene_panel(t2, 5);
    for (int i = 0; i < 5; ++i) {
        // same genes by NAME (indices moved with the permutation)
        CHECK(t.gene_names[static_cast<std::size_t>(p1.genes[static_cast<std::size_t>(i)])] ==
              t2.gene_names[static_cast<std::size_t>(p2.genes[static_cast<std::size_t>(i)])]);
        CHECK(p1.means[static_cast<std::size_t>(i)] == doctest::Approx(p2.means[static_cast<std::size_t>(i)]));
    }
}

TEST_CASE("normalize_counts") {
    CHECK(normalize_counts({0.0})[0] == 0.0);
    CHECK(normalize_counts({std::exp(1.0) - 1.0})[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_WITH_AS(normalize_counts({3.0, -1.0}), doctest::Contains("negative"),
                         std::invalid_argument);
    Rng rng(3);
    std::vector<double> raw(100);
    for (auto& v : raw) v = rng.uniform(0.0, 500.0);
    const auto out = normalize_counts(raw);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        CHECK(out[i] == doctest::Approx(std::log(1.0 + raw[i])).epsilon(1e-7));
    }
    // monotone
    std::vector<double> sorted_raw = raw;
    std::sort(sorted_raw.begin(), sorted_raw.end());
    const auto mono = normalize_counts(sorted_raw);
    CHECK(std::is_sorted(mono.begin(), mono.end()));
}

TEST_CASE("tile_regions: full-scale bin budgets per region") {
    SUBCASE("8um resolution on a 448 px region covers 196 bins") {
        auto fx = full_lattice(448, 32, 1);
        const auto panel = select_gene_panel(fx.table, 1);
        const auto regions = tile_regions(fx.table, fx.image, 448, 14, panel);
        REQUIRE(regions.size() == 1);
        CHECK(regions[0].expression.valid_count() == 196);
        CHECK(regions[0].expression.height() == 14);
    }
    SUBCASE("16um resolution on a 448 px region covers 49 bins") {
        auto fx = full_lattice(448, 64, 1);
        const auto panel = select_gene_panel(fx.table, 1);
        const auto regions = tile_regions(fx.table, fx.image, 448, 7, panel);
        REQUIRE(regions.size() == 1);
        CHECK(regions[0].expression.valid_count() == 49);
    }
}

TEST_CASE("tile_regions: partition property on randomized synthetic slides") {
    for (const std::uint64_t seed : {11ull, 22ull, 33ull}) {
        SynthConfig cfg;
        cfg.seed = seed;
        cfg.regions_x = 3;
        cfg.regions_y = 2;
        cfg.genes = 4;
        cfg.region_px = 64;
        cfg.bins_per_side = 4;
        cfg.bin_dropout = 0.2;
        const auto slide = synth_slide(cfg);
        const auto panel = select_gene_panel(slide.table, 4);
        const auto regions = tile_regions(slide.table, slide.image, 64, 4, panel);
        std::int64_t valid_cells = 0;
        for (const auto& r : regions) valid_cells += r.expression.valid_count();
        CHECK(valid_cells == static_cast<std::int64_t>(slide.table.bins.size()));

        // every bin lands in exactly one region cell
        std::set<std::pair<std::int64_t, std::int64_t>> seen;
        for (const auto& r : regions) {
            const auto& g = r.expression;
            for (int i = 0; i < g.height(); ++i) {
                for (int j = 0; j < g.width(); ++j) {
                    if (!g.is_valid(i, j)) continue;
                    const auto key = std::make_pair(
                        static_cast<std::int64_t>(r.origin_y) + i, static_cast<std::int64_t>(r.origin_x) + j);
                    CHECK(seen.insert(key).second);
                }
            }
        }
    }
}

TEST_CASE("tile_regions: grid values are the log-normalized panel counts") {
    auto fx = full_lattice(64, 16, 2);
    const auto panel = select_gene_panel(fx.table, 2);
    const auto regions = tile_regions(fx.table, fx.image, 64, 4, panel);
    REQUIRE(regions.size() == 1);
    const auto& g = regions[0].expression;
    // fixture: count of gene0 at (r,c) is r+c; panel slot of gene0 is 0
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            CHECK(g.values.at(0, r, c) == doctest::Approx(std::log1p(static_cast<double>(r + c))));
        }
    }
}

TEST_CASE("tile_regions errors") {
    auto fx = full_lattice(64, 16, 1);
    const auto panel = select_gene_panel(fx.table, 1);
    CHECK_THROWS_WITH_AS(tile_regions(fx.table, fx.image, 64, 5, panel), doctest::Contains("divisible"),
                         std::invalid_argument);
    // bin center outside image coverage
    BinTable bad = fx.table;
    bad.bins.push_back({"outside", 9, 9, 1000.0, 1000.0});
    CHECK_THROWS_WITH_AS(tile_regions(bad, fx.image, 64, 4, panel), doctest::Contains("outside image"),
                         std::runtime_error);
}

TEST_CASE("tile_spots: one bin at the slide center gets a centered patch") {
    LatticeFixture fx{BinTable{}, ImageSource(112)};
    fx.table.gene_names = {"A"};
    fx.table.bins = {{"b0", 0, 0, 56.0, 56.0}};
    fx.table.counts = {{0, 0, 3}};
    TensorF tile({3, 112, 112});
    for (int y = 0; y < 112; ++y) {
        for (int x = 0; x < 112; ++x) {
            tile.at(0, y, x) = static_cast<float>(x) / 112.0f;
        }
    }
    fx.image.add_tile(0, 0, tile);
    const auto panel = select_gene_panel(fx.table, 1);
    const auto spots = tile_spots(fx.table, fx.image, 112, panel);
    REQUIRE(spots.size() == 1);
    CHECK_FALSE(spots[0].edge_clamped);
    CHECK(spots[0].image.at(0, 0, 0) == tile.at(0, 0, 0));
    CHECK(spots[0].image.at(0, 111, 111) == tile.at(0, 111, 111));
    CHECK(spots[0].expression[0] == doctest::Approx(std::log1p(3.0)));
}

TEST_CASE("tile_spots: N bins give exactly N samples; edge patches are zero-padded and flagged") {
    auto fx = full_lattice(64, 16, 1);
    const auto panel = select_gene_panel(fx.table, 1);
    const auto spots = tile_spots(fx.table, fx.image, 48, panel);
    CHECK(spots.size() == fx.table.bins.size());
    // corner bin at (8,8): a 48 px patch spans [-16, 32) and is clipped
    const auto& corner = spots[0];
    CHECK(corner.edge_clamped);
    CHECK(corner.image.at(0, 0, 0) == 0.0f);   // padded area
    CHECK(corner.image.at(0, 47, 47) == 0.5f);  // covered area
    // interior bin fully covered
    bool found_interior = false;
    for (const auto& s : spots) {
        if (!s.edge_clamped) found_interior = true;
    }
    CHECK(found_interior);
}

TEST_CASE("synth_slide: determinism, planted rule, empty slide") {
    SynthConfig cfg;
    cfg.seed = 99;
    cfg.regions_x = 2;
    cfg.regions_y = 2;
    cfg.genes = 5;
    cfg.region_px = 64;
    cfg.bins_per_side = 4;

    SUBCASE("same seed twice is bit-identical") {
        const auto a = synth_slide(cfg);
        const auto b = synth_slide(cfg);
        CHECK(a.table.bins.size() == b.table.bins.size());
        CHECK(a.table.counts.size() == b.table.counts.size());
        for (std::size_t i = 0; i < a.table.counts.size(); ++i) {
            CHECK(a.table.counts[i].count == b.table.counts[i].count);
        }
        bool clipped = false;
        const auto pa = a.image.read_patch(0, 0, 128, 128, &clipped);
        const auto pb = b.image.read_patch(0, 0, 128, 128, &clipped);
        CHECK(pa.data == pb.data);
    }
    SUBCASE("planted rule recomputed from emitted tiles matches emitted counts") {
        const auto slide = synth_slide(cfg);
        const auto rule = PlantedRule::from_seed(cfg.seed, cfg.genes);
        const int pitch = cfg.region_px / cfg.bins_per_side;
        std::vector<std::vector<std::int64_t>> dense(slide.table.bins.size(),
                                                     std::vector<std::int64_t>(cfg.genes, 0));
        for (const auto& t : slide.table.counts) {
            dense[static_cast<std::size_t>(t.bin)][static_cast<std::size_t>(t.gene)] = t.count;
        }
        for (std::size_t bi = 0; bi < slide.table.bins.size(); ++bi) {
            const auto& b = slide.table.bins[bi];
            const auto patch = slide.image.read_patch(
                static_cast<std::int64_t>(b.pixel_x - pitch / 2.0),
                static_cast<std::int64_t>(b.pixel_y - pitch / 2.0), pitch, pitch);
            for (int g = 0; g < cfg.genes; ++g) {
                REQUIRE(rule.count_for(patch, g) == dense[bi][static_cast<std::size_t>(g)]);
            }
        }
    }
    SUBCASE("zero regions make an empty but valid table") {
        SynthConfig empty = cfg;
        empty.regions_x = 0;
        empty.regions_y = 0;
        const auto slide = synth_slide(empty);
        CHECK(slide.table.bins.empty());
        CHECK(slide.table.counts.empty());
        CHECK(slide.table.gene_names.size() == 5);
    }
    SUBCASE("different seeds differ") {
        auto other = cfg;
        other.seed = 100;
        const auto a = synth_slide(cfg);
        const auto b = synth_slide(other);
        bool clipped = false;
        CHECK(a.image.read_patch(0, 0, 64, 64, &clipped).data !=
              b.image.read_patch(0, 0, 64, 64, &clipped).data);
    }
}

TEST_CASE("split_train_test") {
    const auto s = split_train_test(10, 0.8, 5);
    CHECK(s.train.size() == 8);
    CHECK(s.test.size() == 2);
    const auto s2 = split_train_test(10, 0.8, 5);
    CHECK(s.train == s2.train);
    CHECK(s.test == s2.test);
    std::set<int> all(s.train.begin(), s.train.end());
    for (int i : s.test) CHECK(all.insert(i).second);
    CHECK(all.size() == 10);
    CHECK_THROWS_AS(split_train_test(1, 0.8, 0), std::invalid_argument);
    CHECK_THROWS_AS(split_train_test(10, 0.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(split_train_test(10, 1.0, 0), std::invalid_argument);
    // both sides stay non-empty even for extreme ratios
    const auto tiny = split_train_test(3, 0.99, 1);
    CHECK(tiny.train.size() == 2);
    CHECK(tiny.test.size() == 1);
}

TEST_CASE("expression grid file round-trips and rejects bad magic") {
    TempDir dir("stdata_grid");
    ExpressionGrid g;
    Rng rng(8);
    g.values = testsupport::rand_tensor<float>({3, 4, 5}, rng, 0.0, 4.0);
    g.valid.assign(20, 1);
    g.valid[3] = 0;
    const auto path = dir.file("grid.ist1");
    write_expression_grid(path, g);
    const auto r = read_expression_grid(path);
    CHECK(r.values.shape == g.values.shape);
    CHECK(r.values.data == g.values.data);
    CHECK(r.valid == g.valid);

    write_file(dir.file("bad.ist1"), "NOPE....");
    CHECK_THROWS_WITH_AS(read_expression_grid(dir.file("bad.ist1")), doctest::Contains("IST1"),
                         std::runtime_error);
}

TEST_CASE("image source stitches patches across tiles") {
    ImageSource src(4);
    TensorF t00({3, 4, 4}, 0.25f), t10({3, 4, 4}, 0.5f), t01({3, 4, 4}, 0.75f), t11({3, 4, 4}, 1.0f);
    src.add_tile(0, 0, t00);
    src.add_tile(4, 0, t10);
    src.add_tile(0, 4, t01);
    src.add_tile(4, 4, t11);
    bool clipped = true;
    const auto p = src.read_patch(2, 2, 4, 4, &clipped);
    CHECK_FALSE(clipped);
    CHECK(p.at(0, 0, 0) == 0.25f);
    CHECK(p.at(0, 0, 3) == 0.5f);
    CHECK(p.at(0, 3, 0) == 0.75f);
    CHECK(p.at(0, 3, 3) == 1.0f);
    const auto q = src.read_patch(-2, -2, 4, 4, &clipped);
    CHECK(clipped);
    CHECK(q.at(0, 0, 0) == 0.0f);
    CHECK(q.at(0, 3, 3) == 0.25f);
    CHECK(src.covers(1.0, 1.0));
    CHECK_FALSE(src.covers(9.0, 1.0));
    CHECK_THROWS_AS(src.add_tile(0, 0, t00), std::invalid_argument);  // duplicate tile
    CHECK_THROWS_AS(src.add_tile(2, 0, t00), std::invalid_argument);  // off-lattice origin
}

TEST_CASE("tiles directory round-trip is byte-stable") {
    TempDir dir("stdata_tiles");
    SynthConfig cfg;
    cfg.seed = 4;
    cfg.regions_x = 2;
    cfg.regions_y = 1;
    cfg.genes = 2;
    cfg.region_px = 32;
    cfg.bins_per_side = 4;
    const auto slide = synth_slide(cfg);
    slide.image.save_dir(dir.file("tiles"));
    const auto loaded = ImageSource::load_dir(dir.file("tiles"));
    CHECK(loaded.tile_px() == 32);
    CHECK(loaded.tile_count() == 2);
    bool clipped = false;
    const auto a = slide.image.read_patch(0, 0, 64, 32, &clipped);
    const auto b = loaded.read_patch(0, 0, 64, 32, &clipped);
    CHECK(a.data == b.data);
}

TEST_CASE("dataset fingerprint is stable and sensitive") {
    auto fx = full_lattice(64, 16, 2);
    const auto panel = select_gene_panel(fx.table, 2);
    const auto f1 = dataset_fingerprint(fx.table, panel);
    const auto f2 = dataset_fingerprint(fx.table, panel);
    CHECK(f1 == f2);
    auto other = fx.table;
    other.counts[0].count += 1;
    CHECK(dataset_fingerprint(other, panel) != f1);
    CHECK(fingerprint_hex(f1).size() == 16);
}

TEST_CASE("infer_bin_pitch finds the lattice spacing despite dropout") {
    SynthConfig cfg;
    cfg.seed = 12;
    cfg.regions_x = 2;
    cfg.regions_y = 2;
    cfg.genes = 2;
    cfg.region_px = 64;
    cfg.bins_per_side = 4;
    cfg.bin_dropout = 0.3;
    const auto slide = synth_slide(cfg);
    CHECK(infer_bin_pitch(slide.table) == doctest::Approx(16.0));
    BinTable lonely;
    lonely.bins = {{"b", 0, 0, 5.0, 5.0}};
    CHECK_THROWS_AS(infer_bin_pitch(lonely), std::runtime_error);
}
