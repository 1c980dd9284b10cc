#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "recem/checkpoint.hpp"
#include "recem/experiments.hpp"

using namespace recem;
namespace fs = std::filesystem;

namespace {

RunConfig small_run_config() {
    RunConfig cfg;
    cfg.data.n_concepts = 8;
    cfg.data.n_classes = 4;
    cfg.data.n_in = 24;
    cfg.data.dim_r = 12;
    cfg.data.dim_z = 8;
    cfg.data.n_train = 256;
    cfg.data.n_val = 64;
    cfg.data.n_test = 96;
    cfg.data.seed = 3;
    cfg.model.embed_dim = 4;
    cfg.model.n_hidden = 16;
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.lr = 0.05;
    cfg.seeds = {1};
    cfg.resolve();
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config file parsing", "[harness]") {
    std::string text =
        "# comment line\n"
        "variant = RECEM\n"
        "K = 8\n"
        "M = 4\n"
        "n_in = 24   # inline comment\n"
        "dim_r = 12\n"
        "dim_z = 8\n"
        "lr = 0.1\n"
        "seeds = 3,5,9\n"
        "\n"
        "epochs = 7\n";
    RunConfig cfg = RunConfig::from_kv(parse_kv_text(text));
    CHECK(cfg.model.variant == Variant::Recem);
    CHECK(cfg.data.n_concepts == 8);
    CHECK(cfg.lr == 0.1);
    CHECK(cfg.epochs == 7);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 5, 9});
    CHECK(cfg.model.n_concepts == 8);  // mirrored from data
    CHECK(cfg.model.n_in == 24);

    CHECK_THROWS_AS(RunConfig::from_kv(parse_kv_text("no_such_key = 3\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_kv(parse_kv_text("lr = banana\n")), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("this line has no equals\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_kv(parse_kv_text("M = 6\n")), ConfigError);  // power-of-two rule

    // to_kv round-trips through apply
    RunConfig again = RunConfig::from_kv(cfg.to_kv());
    CHECK(again.to_text() == cfg.to_text());
}

TEST_CASE("checkpoint round trip is byte-exact", "[harness]") {
    RunConfig cfg = small_run_config();
    ConceptModel model(cfg.model, 42);
    TempDir dir("recem_ckpt_test");
    std::string p1 = (dir.path / "a.ckpt").string();
    std::string p2 = (dir.path / "b.ckpt").string();
    save_checkpoint(model, cfg, p1);

    LoadedCheckpoint loaded = load_checkpoint(p1);
    CHECK(loaded.config.model.variant == cfg.model.variant);
    for (std::size_t i = 0; i < model.named_params().size(); ++i) {
        CHECK(loaded.model.named_params()[i].first == model.named_params()[i].first);
        CHECK(loaded.model.named_params()[i].second.values() == model.named_params()[i].second.values());  // bitwise
    }
    save_checkpoint(loaded.model, loaded.config, p2);
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint corruption and variant mismatch", "[harness]") {
    RunConfig cfg = small_run_config();
    TempDir dir("recem_ckpt_corrupt");
    std::string path = (dir.path / "m.ckpt").string();

    SECTION("corrupt base64 names the parameter") {
        ConceptModel model(cfg.model, 1);
        save_checkpoint(model, cfg, path);
        std::string text = slurp(path);
        auto pos = text.find("psi.l1.weight;");
        REQUIRE(pos != std::string::npos);
        pos = text.find(';', pos + 14);
        text[pos + 3] = '~';  // invalid base64 character
        std::ofstream(path, std::ios::binary) << text;
        CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("psi.l1.weight"));
    }
    SECTION("CEM checkpoint under a RECEM config reports the missing parameter") {
        RunConfig cem_cfg = cfg;
        cem_cfg.model.variant = Variant::Cem;
        cem_cfg.resolve();
        ConceptModel cem(cem_cfg.model, 1);
        save_checkpoint(cem, cem_cfg, path);
        // swap the stored variant to RECEM without adding its parameters
        std::string text = slurp(path);
        auto pos = text.find("variant = CEM");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 13, "variant = RECEM");
        std::ofstream(path, std::ios::binary) << text;
        CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("missing parameter"));
    }
    SECTION("version header enforced") {
        std::ofstream(path) << "RECEMCKPT v2\n\n";
        CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("header"));
    }
}

TEST_CASE("train: zero epochs returns the initialized model and empty log", "[harness]") {
    RunConfig cfg = small_run_config();
    cfg.epochs = 0;
    SynSplits splits = generate(cfg.data);
    TrainResult r = train_model(cfg, 7, splits);
    CHECK(r.log.epochs.empty());
    ConceptModel fresh(cfg.model, 7);
    CHECK(r.model.named_params()[0].second.values() == fresh.named_params()[0].second.values());
}

TEST_CASE("train: deterministic replay produces identical checkpoints", "[harness]") {
    RunConfig cfg = small_run_config();
    SynSplits splits = generate(cfg.data);
    TempDir dir("recem_det");
    auto run_once = [&](const std::string& name) {
        TrainResult r = train_model(cfg, 11, splits);
        std::string p = (dir.path / name).string();
        save_checkpoint(r.model, cfg, p);
        return slurp(p);
    };
    CHECK(run_once("x.ckpt") == run_once("y.ckpt"));
}

TEST_CASE("train: epochs are contiguous and log is populated", "[harness]") {
    RunConfig cfg = small_run_config();
    SynSplits splits = generate(cfg.data);
    TrainResult r = train_model(cfg, 5, splits);
    REQUIRE(r.log.epochs.size() == cfg.epochs);
    for (std::size_t e = 0; e < r.log.epochs.size(); ++e) {
        CHECK(r.log.epochs[e].epoch == e);
        CHECK(r.log.epochs[e].total > 0.0);
    }
    CHECK(r.best_val_task >= 0.0);
    CHECK(r.best_epoch < cfg.epochs);
}

TEST_CASE("train: divergence raises with a diagnostic", "[harness]") {
    RunConfig cfg = small_run_config();
    cfg.lr = 1e18;  // guaranteed blow-up
    cfg.epochs = 30;
    SynSplits splits = generate(cfg.data);
    CHECK_THROWS_AS(train_model(cfg, 3, splits), DivergenceError);
}

TEST_CASE("evaluate: in-distribution replay matches the best validation metric", "[harness]") {
    RunConfig cfg = small_run_config();
    cfg.epochs = 6;
    SynSplits splits = generate(cfg.data);
    TrainResult r = train_model(cfg, 13, splits);
    auto [val_task, val_concept] = accuracy_on(r.model, splits.val);
    CHECK(val_task == Catch::Approx(r.best_val_task).margin(1e-9));

    MetricsReport rep = evaluate_model(r.model, splits.test, {ShiftKind::RandomShift, ShiftKind::ZeroShift}, 99, false);
    CHECK(rep.shifts.size() == 2);  // one row per requested kind
    CHECK(rep.shifts[0].kind == ShiftKind::RandomShift);
    CHECK(rep.intervention.ratios.size() == 5);
}

TEST_CASE("variant reduction: zero-weight RECEM tracks CEM epoch by epoch", "[harness]") {
    RunConfig cem = small_run_config();
    cem.model.variant = Variant::Cem;
    cem.epochs = 5;
    cem.resolve();
    RunConfig zeroed = small_run_config();
    zeroed.model.variant = Variant::Recem;
    zeroed.model.lambda_m = 0.0;
    zeroed.model.lambda_cvd = 0.0;
    zeroed.model.lambda_rec = 0.0;
    zeroed.model.beta_max = 0.0;
    zeroed.epochs = 5;
    zeroed.resolve();

    SynSplits splits = generate(cem.data);
    TrainResult a = train_model(cem, 21, splits);
    TrainResult b = train_model(zeroed, 21, splits);
    REQUIRE(a.log.epochs.size() == b.log.epochs.size());
    for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
        CHECK(std::fabs(a.log.epochs[e].task - b.log.epochs[e].task) <= 1e-9);
        CHECK(std::fabs(a.log.epochs[e].concept_loss - b.log.epochs[e].concept_loss) <= 1e-9);
    }
    // unused submodules keep their init values (zero gradients throughout)
    ConceptModel fresh(zeroed.model, 21);
    for (std::size_t i = 0; i < b.model.named_params().size(); ++i) {
        const auto& [name, tensor] = b.model.named_params()[i];
        if (name.rfind("dis_encoder", 0) == 0 || name.rfind("adversary", 0) == 0 || name.rfind("decoder", 0) == 0)
            CHECK(tensor.values() == fresh.named_params()[i].second.values());
    }
}

TEST_CASE("csv and svg outputs are deterministic", "[harness]") {
    TempDir dir("recem_report");
    auto p = [&](const std::string& n) { return (dir.path / n).string(); };

    write_csv(p("a.csv"), {"x", "y"}, {{"1", "2"}, {"3", "4"}});
    write_csv(p("b.csv"), {"x", "y"}, {{"1", "2"}, {"3", "4"}});
    CHECK(slurp(p("a.csv")) == slurp(p("b.csv")));
    CHECK(slurp(p("a.csv")).substr(0, 4) == "x,y\n");

    std::vector<ChartSeries> series{{"one", {{0, 1}, {1, 3}, {2, 2}}}, {"two", {{0, 2}, {1, 1}, {2, 4}}}};
    write_line_chart_svg(p("c1.svg"), "t", "x", "y", series);
    write_line_chart_svg(p("c2.svg"), "t", "x", "y", series);
    CHECK(slurp(p("c1.svg")) == slurp(p("c2.svg")));
    CHECK(slurp(p("c1.svg")).find("<svg") == 0);

    DistributionSummary s = summarize_cosines({0.1, 0.2, 0.9, -0.5}, 1);
    write_histogram_svg(p("h1.svg"), "h", {{"m", s}});
    write_histogram_svg(p("h2.svg"), "h", {{"m", s}});
    CHECK(slurp(p("h1.svg")) == slurp(p("h2.svg")));
    write_histogram_csv(p("h.csv"), s);
    std::string hist = slurp(p("h.csv"));
    CHECK(hist.substr(0, 22) == "bin_low,bin_high,count");
}

TEST_CASE("emit_metrics_report shapes", "[harness]") {
    TempDir dir("recem_emit");
    MetricsReport rep;
    rep.label = "CEM";
    rep.concept_acc = 90;
    rep.task_acc = 80;
    rep.cas_score = 70;
    rep.intervention = {};  // empty curve
    emit_metrics_report(rep, dir.str());
    CHECK(fs::exists(dir.path / "task_accuracy.csv"));
    // empty curve: header-only CSV, no chart
    CHECK(slurp((dir.path / "intervention_curve.csv").string()) == "ratio,task_accuracy\n");
    CHECK_FALSE(fs::exists(dir.path / "intervention_curve.svg"));
}

TEST_CASE("aggregate CI behavior", "[harness]") {
    Aggregate two = aggregate({10.0, 12.0});
    Aggregate five = aggregate({10.0, 12.0, 10.0, 12.0, 11.0});
    CHECK(two.ci_half >= 0.0);
    CHECK(five.ci_half >= 0.0);
    CHECK(five.ci_half < two.ci_half);  // shrinks with more seeds on similar spread
    CHECK(aggregate({3.0}).ci_half == 0.0);
    CHECK(two.mean == Catch::Approx(11.0));
}

TEST_CASE("experiment grid definitions", "[harness]") {
    RunConfig cfg = small_run_config();
    std::vector<GridRow> grid = ablation_grid(cfg);
    REQUIRE(grid.size() == 7);  // full + 6 removals
    CHECK(grid[0].label == "RECEM");
    CHECK(grid[1].config.model.lambda_m == 0.0);
    CHECK(grid[1].config.model.lambda_cvd == cfg.model.lambda_cvd);
    CHECK(grid[4].config.model.lambda_cvd == 0.0);
    CHECK(grid[4].config.model.lambda_rec == 0.0);
    CHECK_THROWS_AS(run_experiment([&] {
                        RunConfig c = cfg;
                        c.experiment = "nonsense";
                        return c;
                    }()),
                    ConfigError);
}

TEST_CASE("small end-to-end experiment writes stable artifacts", "[harness]") {
    TempDir dir("recem_exp");
    RunConfig cfg = small_run_config();
    cfg.epochs = 2;
    cfg.seeds = {1, 2};
    cfg.out_dir = dir.str();
    cfg.experiment = "leakage";
    auto outcomes = run_experiment(cfg);
    CHECK(outcomes.size() == 4);  // 2 variants x 2 seeds
    CHECK(fs::exists(dir.path / "leakage.csv"));
    CHECK(fs::exists(dir.path / "config.txt"));
    CHECK(fs::exists(dir.path / "runs" / "CEM_s1" / "checkpoint.ckpt"));
    CHECK(fs::exists(dir.path / "runs" / "RECEM_s2" / "runlog.csv"));
    std::string csv = slurp((dir.path / "leakage.csv").string());
    CHECK(csv.find("method,ois,ois_ci,cas,cas_ci") == 0);
    CHECK(csv.find("CEM") != std::string::npos);
    CHECK(csv.find("RECEM") != std::string::npos);

    // a second identical run reproduces the CSV byte for byte
    TempDir dir2("recem_exp2");
    RunConfig cfg2 = cfg;
    cfg2.out_dir = dir2.str();
    run_experiment(cfg2);
    CHECK(slurp((dir2.path / "leakage.csv").string()) == csv);
}

TEST_CASE("RECEM_THREADS caps the pool", "[harness]") {
    setenv("RECEM_THREADS", "1", 1);
    CHECK(max_threads(8) == 1);
    setenv("RECEM_THREADS", "bogus", 1);
    CHECK_THROWS_AS(max_threads(8), ConfigError);
    unsetenv("RECEM_THREADS");
    CHECK(max_threads(0) == 1);
}
