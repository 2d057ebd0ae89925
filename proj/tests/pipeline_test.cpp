#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rotaprune/pipeline.hpp"
#include "test_util.hpp"

using namespace rotaprune;
using rotaprune::testing::slurp;
using rotaprune::testing::temp_path;
namespace fs = std::filesystem;

namespace {

// A small model so whole runs take well under a second.
PipelineConfig small_config(const fs::path& dir, std::uint64_t seed = 0) {
    PipelineConfig c = parse_config(R"(
model.hidden_dim = 16
model.n_layers = 2
model.n_heads = 2
model.ffn_dim = 24
calib.samples = 4
calib.seq_len = 16
rotator.steps = 20
eval.bytes = 128
eval.seq_len = 16
)");
    c.model_seed = seed;
    c.output_dir = dir;
    return c;
}

std::string config_text(const PipelineConfig& c) {
    std::string out;
    const nlohmann::json j = c.to_json();
    for (const auto& [k, v] : j.items()) out += k + " = " + (v.is_string() ? v.get<std::string>() : v.dump()) + "\n";
    return out;
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
    const PipelineConfig c = parse_config("# only comments\n\n");
    EXPECT_EQ(c.model.hidden_dim, 64u);
    EXPECT_EQ(c.model.head_dim, 16u);
    EXPECT_EQ(c.prune_pattern.to_string(), "2:4");
    EXPECT_EQ(c.rotation_metric(), Metric::SparseGpt);
    const PipelineConfig back = parse_config(config_text(c));
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(c.to_json().size(), config_keys().size());
}

TEST(Config, ParsesValues) {
    const PipelineConfig c = parse_config(
        "model.hidden_dim = 32  # trailing comment\n"
        "model.n_heads=8\n"
        "prune.method = wanda\n"
        "prune.pattern = unstructured:0.3\n"
        "prune.group = per-layer\n"
        "rotator.metric = obd\n"
        "eval.metrics = deviation\n"
        "calib.source = text-file\n"
        "calib.file = data.txt\n",
        "/base");
    EXPECT_EQ(c.model.head_dim, 4u);
    EXPECT_EQ(c.prune_pattern.ratio, 0.3);
    EXPECT_EQ(c.prune_group, CompareGroup::PerLayer);
    EXPECT_EQ(c.rotation_metric(), Metric::Obd);
    EXPECT_FALSE(c.wants_metric("perplexity"));
    EXPECT_EQ(c.calib_file, fs::path("/base/data.txt"));
}

TEST(Config, RejectsBadInput) {
    for (const char* text : {
             "modle.seed = 1\n",              // unknown key
             "model.seed = 1\nmodel.seed = 2\n",  // repeated
             "model.seed\n",                  // no '='
             "model.seed = -1\n",
             "calib.samples = 0\n",
             "rotator.lr = 0\n",
             "rotator.enabled = yes\n",
             "prune.method = random\n",
             "prune.pattern = 4:8\n",  // 172 columns do not split into groups of 8
             "prune.pattern = 3:3\n",
             "prune.damp = -0.1\n",
             "model.hidden_dim = 60\n",  // head dim 15 is odd, rope needs it even
             "rotator.block_count = 3\n",
             "calib.source = text-file\n",
             "eval.metrics = perplexity,perplexity\n",
             "eval.seq_len = 1\n",
         }) {
        EXPECT_THROW(parse_config(text), ConfigError) << text;
    }
    try {
        parse_config("\n\nbogus = 1\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    EXPECT_THROW(load_config(temp_path("no_such.cfg")), ConfigError);
}

TEST(Calibrate, FirstLayerInputMatchesIndependentHook) {
    const PipelineConfig c = small_config(temp_path("unused"));
    const Model fused = fuse_model(random_model(c.model, 3));
    const auto inputs = calibration_inputs(fused, c);
    const auto stats = calibrate(fused, c);
    // Fused norms carry no weight: the Q input is the plain RMS-normalized stream.
    Matrix h(16, 16);
    for (const Matrix& x : inputs) {
        const Matrix n = rms_norm(x, {}, c.model.norm_eps);
        for (std::size_t t = 0; t < n.rows(); ++t)
            for (std::size_t i = 0; i < 16; ++i)
                for (std::size_t j = 0; j < 16; ++j) h(i, j) += n(t, i) * n(t, j);
    }
    EXPECT_LE(max_abs_diff(stats[0].for_linear(Linear::Q)->h, h), 1e-12 * max_abs(h));
    EXPECT_EQ(stats[0].for_linear(Linear::Q), stats[0].for_linear(Linear::V));
    EXPECT_EQ(stats[0].attn_in->samples, 4u * 16u);
    EXPECT_THROW(accumulate_hessian_rows(*stats[1].ffn_mid, Matrix(1, 24)), StateError);
    EXPECT_THROW(collect_stats(fused, {}), InvalidArgument);
}

TEST(Calibrate, SplitBatchesMatchConcatenation) {
    const PipelineConfig c = small_config(temp_path("unused"));
    const Model fused = fuse_model(random_model(c.model, 4));
    std::mt19937_64 rng(5);
    const Matrix a = Matrix::gaussian(5, 16, rng), b = Matrix::gaussian(7, 16, rng);
    Matrix both(12, 16);
    for (std::size_t t = 0; t < 12; ++t)
        for (std::size_t j = 0; j < 16; ++j) both(t, j) = t < 5 ? a(t, j) : b(t - 5, j);
    // Layer 0's attention input is row-local, so stacking sequences cannot change it.
    EXPECT_EQ(collect_stats(fused, {a, b})[0].attn_in->h, collect_stats(fused, {both})[0].attn_in->h);
}

TEST(Evaluate, UniformLogitsGiveVocabPerplexity) {
    PipelineConfig c = small_config(temp_path("unused"));
    Model m = fuse_model(random_model(c.model, 6));
    m.lm_head = Matrix(m.lm_head.rows(), m.lm_head.cols());
    const auto windows = eval_windows(c);
    EXPECT_NEAR(perplexity(m, windows), 256.0, 256.0 * 1e-12);
    const Model dense = fuse_model(random_model(c.model, 6));
    EXPECT_EQ(perplexity(dense, windows), perplexity(dense, windows));
    EXPECT_THROW(perplexity(dense, {}), InvalidArgument);
}

TEST(Stages, HessiansAreReusedByIdentity) {
    const PipelineConfig c = small_config(temp_path("unused"));
    const Model fused = fuse_stage(c);
    const auto stats = calibrate(fused, c);
    const auto den = denoise(fused, stats, c);
    const auto merged = merge_stage(fused, den.r1, den.r2, c);
    const auto pr = prune_stage(fused, merged, stats, c);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        for (std::size_t k = 0; k < kAllLinears.size(); ++k) {
            const CalibStats* expect = stats[i].for_linear(kAllLinears[k]).get();
            EXPECT_EQ(den.stats_used[i][k], expect);
            EXPECT_EQ(pr.layers[i].stats_used[k], expect);
        }
        for (const PruneMask& m : pr.layers[i].masks) EXPECT_NO_THROW(validate_mask(m));
    }
}

TEST(Stages, MergedPruningMatchesExplicitPath) {
    const PipelineConfig c = small_config(temp_path("unused"));
    const Model fused = fuse_stage(c);
    const auto stats = calibrate(fused, c);
    const auto den = denoise(fused, stats, c);
    const auto pr = prune_stage(fused, merge_stage(fused, den.r1, den.r2, c), stats, c);
    RotatedModel explicit_model = apply_rotations(fused, den.r1, den.r2);
    for (std::size_t i = 0; i < fused.layers.size(); ++i)
        for (Linear k : kAllLinears) explicit_model.model.layers[i].weight(k) = pr.pruned.model.layers[i].weight(k);
    for (const auto& w : eval_windows(c))
        EXPECT_LE(max_abs_diff(logits(explicit_model.model, w), logits(pr.pruned.model, w)), 1e-9);
}

TEST(Stages, ErrorsNameStageAndLayer) {
    PipelineConfig c = small_config(temp_path("unused"));
    c.prune_damp = 0.0;
    c.calib_samples = 1;
    c.calib_seq_len = 1;  // rank-one Hessians cannot be inverted without dampening
    const Model fused = fuse_stage(c);
    const auto stats = calibrate(fused, c);
    try {
        denoise(fused, stats, c);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("stage denoise, layer 0: ", 0), 0u) << e.what();
    }
}

TEST(Report, JsonRoundTripAndFiles) {
    RunReport r;
    r.config = {{"a", 1}};
    r.layers = {{0, 3.5, 2.25, 1, 0.5, 0.1, 0.05, 0.2, 0.1}, {1, 3.0, 2.0, 1.0 / 3.0, 0.1, 0, 0, 0, 0}};
    r.trajectory = {6.5, 4.25};
    r.metrics = {{"perplexity_dense", 12.0625}, {"tiny", 1e-300}};
    EXPECT_EQ(report_from_json(nlohmann::json::parse(report_to_json(r).dump())), r);

    const fs::path dir = temp_path("report");
    report_emit(r, dir);
    std::ifstream j(dir / "report.json");
    EXPECT_EQ(report_from_json(nlohmann::json::parse(j)), r);
    const std::string table = slurp(dir / "layer_table.csv");
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);

    RunReport bad = r;
    bad.metrics["x"] = std::nan("");
    EXPECT_THROW(report_emit(bad, dir), NumericalError);
    nlohmann::json old = report_to_json(r);
    old["schema_version"] = 0;
    EXPECT_THROW(report_from_json(old), IoError);
    fs::remove_all(dir);
}

TEST(Pipeline, ZeroStepsWritesOneTrajectoryLine) {
    PipelineConfig c = small_config(temp_path("zero_steps"));
    c.rotator_steps = 0;
    const RunReport r = run_pipeline(c);
    EXPECT_EQ(slurp(c.output_dir / "entropy_trajectory.csv"),
              "step,loss,wall_ms\n0," + [&] {
                  char buf[64];
                  std::snprintf(buf, sizeof buf, "%.17g", r.trajectory[0]);
                  return std::string(buf);
              }() + ",0.000\n");
    for (const LayerRow& l : r.layers) EXPECT_EQ(l.entropy_before, l.entropy_after);
    fs::remove_all(c.output_dir);
}

TEST(Pipeline, NoOpReproducesDenseModel) {
    PipelineConfig c = small_config(temp_path("noop"));
    c.rotator_enabled = false;
    c.prune_method = "magnitude";
    c.prune_pattern = SparsityPattern::unstructured(0.0);
    const RunReport r = run_pipeline(c);
    EXPECT_EQ(slurp(c.output_dir / kPrunedFile), slurp(c.output_dir / kFusedFile));
    EXPECT_EQ(r.metrics.at("perplexity_delta"), 0.0);
    EXPECT_EQ(r.metrics.at("mean_output_deviation"), 0.0);
    fs::remove_all(c.output_dir);
}

TEST(Pipeline, DeterministicAndStagewiseAgree) {
    const PipelineConfig a = small_config(temp_path("det_a")), b = small_config(temp_path("det_b"));
    const RunReport ra = run_pipeline(a), rb = run_pipeline(b);
    EXPECT_EQ(ra, rb);
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(a.output_dir)) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), a.output_dir);
        EXPECT_EQ(slurp(e.path()), slurp(b.output_dir / rel)) << rel;
        ++compared;
    }
    EXPECT_GT(compared, 20u);

    const PipelineConfig s = small_config(temp_path("det_stages"));
    for (std::string_view stage : kStageNames) run_stage(stage, s);
    EXPECT_EQ(run_report(s), ra);
    EXPECT_EQ(slurp(s.output_dir / kPrunedFile), slurp(a.output_dir / kPrunedFile));
    EXPECT_LE(ra.metrics.at("merge_max_abs_diff"), 1e-9);
    for (const auto* c : {&a, &b, &s}) fs::remove_all(c->output_dir);
}

TEST(Pipeline, StageNeedsEarlierOutputs) {
    const PipelineConfig c = small_config(temp_path("missing"));
    fs::remove_all(c.output_dir);
    EXPECT_THROW(run_stage("prune", c), IoError);
    EXPECT_THROW(run_stage("shuffle", c), InvalidArgument);
    fs::remove_all(c.output_dir);
}

TEST(Pipeline, RotationHelpsOnPairedSeeds) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        PipelineConfig on = small_config(temp_path("paired_on"), seed);
        on.rotator_steps = 100;
        PipelineConfig off = on;
        off.output_dir = temp_path("paired_off");
        off.rotator_enabled = false;
        const double dev_on = run_pipeline(on).metrics.at("mean_output_deviation");
        const double dev_off = run_pipeline(off).metrics.at("mean_output_deviation");
        wins += dev_on <= dev_off;
        fs::remove_all(on.output_dir);
        fs::remove_all(off.output_dir);
    }
    EXPECT_GE(wins, 8);
}

TEST(Pipeline, ToyConfigLowersEntropyInEveryLayer) {
    PipelineConfig c = load_config(fs::path(ROTAPRUNE_SOURCE_DIR) / "configs" / "toy.cfg");
    c.output_dir = temp_path("toy");
    const RunReport r = run_pipeline(c);
    ASSERT_EQ(r.layers.size(), 4u);
    for (const LayerRow& l : r.layers) EXPECT_LT(l.entropy_after, l.entropy_before) << "layer " << l.layer;
    fs::remove_all(c.output_dir);
}
