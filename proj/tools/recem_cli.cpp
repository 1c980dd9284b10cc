// Command-line front end: data generation, training, evaluation, and the
// paper-style experiment suites. Exit codes: 0 ok, 2 config error, 3
// numeric divergence.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <memory>

#include "recem/checkpoint.hpp"
#include "recem/experiments.hpp"

namespace fs = std::filesystem;
using namespace recem;

namespace {

const char* kConfigKeys[] = {
    "variant", "mechanisms", "embedding_dim", "n_hidden", "grl_lambda", "randint_prob", "alpha", "lambda_m", "lambda_cvd", "lambda_rec",
    "beta_max", "beta_warmup_frac", "beta_max_hsic", "beta_max_align", "mixup_ema", "mixup_ema_decay",
    "K", "M", "n_in", "dim_r", "dim_z", "rho", "concept_corr", "noise_sigma", "n_train", "n_val", "n_test", "data_seed", "incomplete",
    "lr", "momentum", "epochs", "batch_size", "seeds", "out_dir", "experiment",
};

struct ConfigCapture {
    std::string config_path;
    KeyValues overrides;
};

void add_config_options(CLI::App* cmd, std::shared_ptr<ConfigCapture> cap) {
    cmd->add_option("--config", cap->config_path, "config file of key = value lines");
    for (const char* key : kConfigKeys) {
        std::string name = std::string("--") + key;
        cmd->add_option_function<std::string>(name, [cap, key](const std::string& v) { cap->overrides.emplace_back(key, v); },
                                              std::string("override config key ") + key);
    }
}

RunConfig build_config(const ConfigCapture& cap) {
    RunConfig cfg;
    if (!cap.config_path.empty()) {
        std::ifstream f(cap.config_path);
        if (!f) throw ConfigError("cannot open config file '" + cap.config_path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        cfg = RunConfig();
        for (const auto& [k, v] : parse_kv_text(ss.str())) cfg.apply(k, v);
    }
    for (const auto& [k, v] : cap.overrides) cfg.apply(k, v);
    cfg.resolve();
    return cfg;
}

std::vector<ShiftKind> parse_shift_list(const std::string& s) {
    std::vector<ShiftKind> kinds;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) kinds.push_back(parse_shift(tok));
    }
    return kinds;
}

int cmd_gen_data(const RunConfig& cfg) {
    SynSplits splits = generate(cfg.data);
    fs::create_directories(cfg.out_dir);
    save_dataset(splits.train, (fs::path(cfg.out_dir) / "train.bin").string());
    save_dataset(splits.val, (fs::path(cfg.out_dir) / "val.bin").string());
    save_dataset(splits.test, (fs::path(cfg.out_dir) / "test.bin").string());
    std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size() << " samples to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    SynSplits splits = generate(cfg.data);
    fs::create_directories(fs::path(cfg.out_dir) / "runs");
    std::string label = variant_name(cfg.model.variant) + (cfg.model.mechanisms ? "+mech" : "");
    for (std::uint64_t seed : cfg.seeds) {
        TrainResult result = train_model(cfg, seed, splits);
        fs::path run_dir = fs::path(cfg.out_dir) / "runs" / (label + "_s" + std::to_string(seed));
        fs::create_directories(run_dir);
        RunConfig ckpt_cfg = cfg;
        ckpt_cfg.seeds = {seed};
        save_checkpoint(result.model, ckpt_cfg, (run_dir / "checkpoint.ckpt").string());
        write_runlog_csv(result.log, (run_dir / "runlog.csv").string());
        write_timing_log(result.log, (run_dir / "timing.log").string());
        std::cout << label << " seed " << seed << ": best val task acc " << fmt_metric(result.best_val_task) << "% (epoch " << result.best_epoch
                  << ") -> " << (run_dir / "checkpoint.ckpt").string() << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& shifts, bool no_ois, const std::string& out_dir) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    SynDataset test = data_path.empty() ? generate(loaded.config.data).test : load_dataset(data_path);
    MetricsReport rep = evaluate_model(loaded.model, test, parse_shift_list(shifts), 1234, !no_ois);
    std::string dir = out_dir.empty() ? loaded.config.out_dir : out_dir;
    emit_metrics_report(rep, dir);
    std::cout << rep.label << ": concept " << fmt_metric(rep.concept_acc) << "%, task " << fmt_metric(rep.task_acc) << "%, cas "
              << fmt_metric(rep.cas_score) << " -> " << dir << "\n";
    return 0;
}

int cmd_intervene(const std::string& ckpt_path, const std::string& ratios_csv, const std::string& seeds_csv, const std::string& out_dir) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    SynDataset test = generate(loaded.config.data).test;
    std::vector<double> ratios;
    {
        std::istringstream ss(ratios_csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) ratios.push_back(std::stod(tok));
    }
    std::vector<std::uint64_t> seeds;
    {
        std::istringstream ss(seeds_csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) seeds.push_back(std::stoull(tok));
    }
    InterventionCurve curve = intervention_curve(loaded.model, test, ratios, seeds);
    std::string dir = out_dir.empty() ? loaded.config.out_dir : out_dir;
    fs::create_directories(dir);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < curve.ratios.size(); ++i) rows.push_back({fmt_metric(curve.ratios[i]), fmt_metric(curve.mean_accuracy[i])});
    write_csv((fs::path(dir) / "intervention_curve.csv").string(), {"ratio", "task_accuracy"}, rows);
    if (!curve.ratios.empty()) {
        ChartSeries s{variant_name(loaded.config.model.variant), {}};
        for (std::size_t i = 0; i < curve.ratios.size(); ++i) s.points.emplace_back(curve.ratios[i], curve.mean_accuracy[i]);
        write_line_chart_svg((fs::path(dir) / "intervention_curve.svg").string(), "Task accuracy under intervention", "intervention ratio",
                             "task accuracy (%)", {s});
    }
    for (std::size_t i = 0; i < curve.ratios.size(); ++i)
        std::cout << "ratio " << fmt_metric(curve.ratios[i]) << ": " << fmt_metric(curve.mean_accuracy[i]) << "%\n";
    return 0;
}

int run_named_experiment(RunConfig cfg, const std::string& name) {
    cfg.experiment = name;
    run_experiment(cfg);
    std::cout << "experiment '" << name << "' complete -> " << cfg.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Concept-embedding reliability lab: synthetic CBM/CEM/RECEM training, interventions, shift robustness, and leakage diagnostics"};
    app.require_subcommand(1);

    auto gen_cap = std::make_shared<ConfigCapture>();
    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset splits");
    add_config_options(gen, gen_cap);

    auto train_cap = std::make_shared<ConfigCapture>();
    CLI::App* train_cmd = app.add_subcommand("train", "train the configured variant for every seed");
    add_config_options(train_cmd, train_cap);

    auto eval_cap = std::make_shared<ConfigCapture>();
    std::string eval_ckpt, eval_data, eval_shifts = "RandomShift,FixedShift,ZeroShift", eval_out;
    bool eval_no_ois = false;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (all metrics, per shift kind)");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "path to a RECEMCKPT v1 file")->required();
    eval_cmd->add_option("--data", eval_data, "optional RECEMDATA v1 test file (default: regenerate from the checkpoint config)");
    eval_cmd->add_option("--shifts", eval_shifts, "comma list of shift kinds");
    eval_cmd->add_flag("--no-ois", eval_no_ois, "skip the OIS probes");
    eval_cmd->add_option("--out_dir", eval_out, "output directory (default: checkpoint config out_dir)");

    std::string iv_ckpt, iv_ratios = "0,0.25,0.5,0.75,1", iv_seeds = "1,2,3", iv_out;
    CLI::App* iv_cmd = app.add_subcommand("intervene", "intervention curve for a checkpoint");
    iv_cmd->add_option("--checkpoint", iv_ckpt, "path to a RECEMCKPT v1 file")->required();
    iv_cmd->add_option("--ratios", iv_ratios, "comma list of intervention ratios");
    iv_cmd->add_option("--intervention-seeds", iv_seeds, "comma list of selection seeds");
    iv_cmd->add_option("--out_dir", iv_out, "output directory (default: checkpoint config out_dir)");

    struct ExpCmd {
        const char* sub;
        const char* experiment;
        std::shared_ptr<ConfigCapture> cap;
    };
    std::vector<ExpCmd> experiments{
        {"shift-eval", "shift", std::make_shared<ConfigCapture>()},   {"ablate", "ablation", std::make_shared<ConfigCapture>()},
        {"sweep-beta", "beta_sweep", std::make_shared<ConfigCapture>()}, {"sweep-weights", "weight_sweep", std::make_shared<ConfigCapture>()},
        {"leakage", "leakage", std::make_shared<ConfigCapture>()},    {"consistency", "consistency", std::make_shared<ConfigCapture>()},
    };
    const char* descriptions[] = {
        "train the variants and tabulate accuracy under background shifts",
        "run the 7-row loss-ablation grid",
        "sweep the annealing coefficient",
        "one-factor-at-a-time loss-weight sensitivity",
        "OIS/CAS leakage comparison on independent concepts",
        "embedding-consistency diagnostics (shift and cross-sample cosines)",
    };
    for (std::size_t i = 0; i < experiments.size(); ++i) add_config_options(app.add_subcommand(experiments[i].sub, descriptions[i]), experiments[i].cap);

    auto report_cap = std::make_shared<ConfigCapture>();
    CLI::App* report_cmd = app.add_subcommand("report", "run the experiment named by the config's 'experiment' key (default baselines)");
    add_config_options(report_cmd, report_cap);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(build_config(*gen_cap));
        if (train_cmd->parsed()) return cmd_train(build_config(*train_cap));
        if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_shifts, eval_no_ois, eval_out);
        if (iv_cmd->parsed()) return cmd_intervene(iv_ckpt, iv_ratios, iv_seeds, iv_out);
        for (const ExpCmd& e : experiments)
            if (app.get_subcommand(e.sub)->parsed()) return run_named_experiment(build_config(*e.cap), e.experiment);
        if (report_cmd->parsed()) {
            RunConfig cfg = build_config(*report_cap);
            return run_named_experiment(cfg, cfg.experiment);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
