#pragma once

#include <atomic>
#include <optional>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <thread>

#include "recem/checkpoint.hpp"
#include "recem/report.hpp"
#include "recem/train.hpp"

namespace recem {

inline std::size_t max_threads(std::size_t n_tasks) {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("RECEM_THREADS")) {
        try {
            std::size_t cap = std::stoul(env);
            if (cap >= 1) hw = std::min(hw, cap);
        } catch (...) {
            throw ConfigError("RECEM_THREADS: bad value");
        }
    }
    return std::min(hw, std::max<std::size_t>(1, n_tasks));
}

inline void write_runlog_csv(const RunLog& log, const std::string& path) {
    // wall time goes to timing.log instead so the CSV is reproducible
    std::vector<std::vector<std::string>> rows;
    for (const EpochLog& e : log.epochs)
        rows.push_back({std::to_string(e.epoch), fmt_metric(e.task), fmt_metric(e.concept_loss), fmt_metric(e.mixup), fmt_metric(e.cvd),
                        fmt_metric(e.rec), fmt_metric(e.total), fmt_metric(e.val_task_acc), fmt_metric(e.val_concept_acc),
                        fmt_metric(e.beta_align), fmt_metric(e.beta_hsic)});
    write_csv(path, {"epoch", "task", "concept", "mixup", "cvd", "rec", "total", "val_task_acc", "val_concept_acc", "beta_align", "beta_hsic"}, rows);
}

inline void write_timing_log(const RunLog& log, const std::string& path) {
    std::ofstream f(path);
    for (const EpochLog& e : log.epochs) f << "epoch " << e.epoch << ": " << fmt_metric(e.wall_ms) << " ms\n";
}

/// Per-metric CSV emission for a single evaluation.
inline void emit_metrics_report(const MetricsReport& rep, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto at = [&](const std::string& name) { return (fs::path(dir) / name).string(); };

    write_csv(at("concept_accuracy.csv"), {"label", "concept_accuracy"}, {{rep.label, fmt_metric(rep.concept_acc)}});
    write_csv(at("task_accuracy.csv"), {"label", "task_accuracy"}, {{rep.label, fmt_metric(rep.task_acc)}});
    write_csv(at("cas.csv"), {"label", "cas"}, {{rep.label, fmt_metric(rep.cas_score)}});
    if (!rep.ois_rep.impurity.empty())
        write_csv(at("ois.csv"), {"label", "ois", "excluded_concepts"}, {{rep.label, fmt_metric(rep.ois_rep.value), std::to_string(rep.ois_rep.excluded.size())}});

    {
        std::vector<std::vector<std::string>> rows;
        for (std::size_t k = 0; k < rep.intra_variance.size(); ++k) rows.push_back({std::to_string(k), fmt_metric(rep.intra_variance[k])});
        write_csv(at("intra_concept_variance.csv"), {"concept", "variance"}, rows);
    }
    if (!rep.shifts.empty()) {
        std::vector<std::vector<std::string>> rows;
        for (const auto& s : rep.shifts) {
            rows.push_back({shift_name(s.kind), fmt_metric(s.task_acc), fmt_metric(s.concept_acc), fmt_metric(s.cosine.mean), fmt_metric(s.cosine.stddev)});
            write_histogram_csv(at("shift_cosine_hist_" + shift_name(s.kind) + ".csv"), s.cosine);
        }
        write_csv(at("shift_accuracy.csv"), {"shift", "task_accuracy", "concept_accuracy", "cosine_mean", "cosine_std"}, rows);
        std::vector<std::pair<std::string, DistributionSummary>> dists;
        for (const auto& s : rep.shifts) dists.emplace_back(shift_name(s.kind), s.cosine);
        write_histogram_svg(at("shift_cosine.svg"), rep.label + " embedding similarity under shift", dists);
    }
    if (!rep.consistency.empty()) {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::pair<std::string, DistributionSummary>> dists;
        for (const auto& [k, s] : rep.consistency) {
            rows.push_back({std::to_string(k), fmt_metric(s.mean), fmt_metric(s.stddev), std::to_string(s.count)});
            write_histogram_csv(at("consistency_hist_k" + std::to_string(k) + ".csv"), s);
            dists.emplace_back("concept " + std::to_string(k), s);
        }
        write_csv(at("consistency_summary.csv"), {"concept", "cosine_mean", "cosine_std", "pairs"}, rows);
        write_histogram_svg(at("consistency.svg"), rep.label + " same-concept similarity across samples", dists);
    }
    {
        std::vector<std::vector<std::string>> rows;
        for (std::size_t i = 0; i < rep.intervention.ratios.size(); ++i)
            rows.push_back({fmt_metric(rep.intervention.ratios[i]), fmt_metric(rep.intervention.mean_accuracy[i])});
        write_csv(at("intervention_curve.csv"), {"ratio", "task_accuracy"}, rows);
        if (!rep.intervention.ratios.empty()) {
            ChartSeries s{rep.label, {}};
            for (std::size_t i = 0; i < rep.intervention.ratios.size(); ++i) s.points.emplace_back(rep.intervention.ratios[i], rep.intervention.mean_accuracy[i]);
            write_line_chart_svg(at("intervention_curve.svg"), "Task accuracy under intervention", "intervention ratio", "task accuracy (%)", {s});
        }
    }
}

// ---- grid runner ------------------------------------------------------

struct GridRow {
    std::string label;
    RunConfig config;  // resolved
};

struct RunOutcome {
    std::string label;
    std::uint64_t seed = 0;
    TrainResult trained;
    MetricsReport metrics;
};

/// Train+evaluate each (row, seed) pair, seed-parallel up to RECEM_THREADS.
/// Datasets are generated once per distinct data spec, before the pool
/// starts, so outputs do not depend on the thread count.
inline std::vector<RunOutcome> run_grid(const std::vector<GridRow>& grid, const std::vector<std::uint64_t>& seeds,
                                        const std::string& out_dir, const std::vector<ShiftKind>& kinds, bool with_ois) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "runs");

    std::map<std::string, SynSplits> data_cache;
    for (const GridRow& row : grid) {
        RunConfig probe = row.config;
        probe.out_dir = "";
        probe.experiment = "";
        probe.seeds = {};
        std::string key;  // data fields only
        for (const auto& [k, v] : probe.to_kv())
            if (k == "K" || k == "M" || k == "n_in" || k == "dim_r" || k == "dim_z" || k == "rho" || k == "concept_corr" || k == "noise_sigma" ||
                k == "n_train" || k == "n_val" || k == "n_test" || k == "data_seed" || k == "incomplete")
                key += k + "=" + v + ";";
        if (!data_cache.count(key)) data_cache.emplace(key, generate(row.config.data));
    }
    auto data_for = [&](const RunConfig& cfg) -> const SynSplits& {
        RunConfig probe = cfg;
        std::string key;
        for (const auto& [k, v] : probe.to_kv())
            if (k == "K" || k == "M" || k == "n_in" || k == "dim_r" || k == "dim_z" || k == "rho" || k == "concept_corr" || k == "noise_sigma" ||
                k == "n_train" || k == "n_val" || k == "n_test" || k == "data_seed" || k == "incomplete")
                key += k + "=" + v + ";";
        return data_cache.at(key);
    };

    struct Task {
        std::size_t grid_index;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (std::size_t g = 0; g < grid.size(); ++g)
        for (std::uint64_t s : seeds) tasks.push_back({g, s});

    std::vector<std::optional<RunOutcome>> outcomes(tasks.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;

    auto worker = [&] {
        for (;;) {
            std::size_t t = next.fetch_add(1);
            if (t >= tasks.size()) return;
            try {
                const GridRow& row = grid[tasks[t].grid_index];
                std::uint64_t seed = tasks[t].seed;
                const SynSplits& splits = data_for(row.config);
                TrainResult trained = train_model(row.config, seed, splits);
                MetricsReport metrics = evaluate_model(trained.model, splits.test, kinds, 1234, with_ois);
                metrics.label = row.label;

                fs::path run_dir = fs::path(out_dir) / "runs" / (row.label + "_s" + std::to_string(seed));
                fs::create_directories(run_dir);
                RunConfig ckpt_cfg = row.config;
                ckpt_cfg.seeds = {seed};
                save_checkpoint(trained.model, ckpt_cfg, (run_dir / "checkpoint.ckpt").string());
                write_runlog_csv(trained.log, (run_dir / "runlog.csv").string());
                write_timing_log(trained.log, (run_dir / "timing.log").string());

                outcomes[t] = RunOutcome{row.label, seed, std::move(trained), std::move(metrics)};
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::size_t n_threads = max_threads(tasks.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    std::vector<RunOutcome> results;
    results.reserve(outcomes.size());
    for (auto& o : outcomes) results.push_back(std::move(*o));
    return results;
}

// ---- aggregation helpers ------------------------------------------------

inline std::vector<const RunOutcome*> outcomes_for(const std::vector<RunOutcome>& all, const std::string& label) {
    std::vector<const RunOutcome*> out;
    for (const RunOutcome& o : all)
        if (o.label == label) out.push_back(&o);
    return out;
}

inline Aggregate agg_of(const std::vector<const RunOutcome*>& runs, const std::function<double(const RunOutcome&)>& pick) {
    std::vector<double> xs;
    for (const RunOutcome* o : runs) xs.push_back(pick(*o));
    return aggregate(xs);
}

inline double shift_acc_of(const RunOutcome& o, ShiftKind kind) {
    for (const auto& row : o.metrics.shifts)
        if (row.kind == kind) return row.task_acc;
    throw std::logic_error("shift row missing");
}

inline double mean_shift_acc(const RunOutcome& o) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& row : o.metrics.shifts) {
        if (row.kind == ShiftKind::InDistribution) continue;
        acc += row.task_acc;
        ++n;
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

// ---- experiments ------------------------------------------------------

namespace detail {
inline const std::vector<ShiftKind> kAllShifts{ShiftKind::RandomShift, ShiftKind::FixedShift, ShiftKind::ZeroShift};

inline RunConfig variant_config(const RunConfig& base, Variant v, bool mechanisms) {
    RunConfig cfg = base;
    cfg.model.variant = v;
    cfg.model.mechanisms = mechanisms;
    cfg.resolve();
    return cfg;
}

inline void write_config_record(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(std::filesystem::path(out_dir) / "config.txt");
    f << cfg.to_text();
}
}  // namespace detail

inline std::vector<RunOutcome> experiment_baselines(const RunConfig& cfg) {
    std::vector<GridRow> grid{
        {"BoolCBM", detail::variant_config(cfg, Variant::BoolCbm, false)},
        {"FuzzyCBM", detail::variant_config(cfg, Variant::FuzzyCbm, false)},
        {"CEM", detail::variant_config(cfg, Variant::Cem, false)},
        {"RECEM", detail::variant_config(cfg, Variant::Recem, false)},
        {"BoolCBM+mech", detail::variant_config(cfg, Variant::BoolCbm, true)},
        {"FuzzyCBM+mech", detail::variant_config(cfg, Variant::FuzzyCbm, true)},
    };
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, detail::kAllShifts, /*with_ois=*/false);

    std::vector<std::vector<std::string>> acc_rows, cas_rows;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        Aggregate c = agg_of(runs, [](const RunOutcome& o) { return o.metrics.concept_acc; });
        Aggregate t = agg_of(runs, [](const RunOutcome& o) { return o.metrics.task_acc; });
        Aggregate s = agg_of(runs, [](const RunOutcome& o) { return o.metrics.cas_score; });
        acc_rows.push_back({row.label, fmt_metric(c.mean), fmt_metric(c.ci_half), fmt_metric(t.mean), fmt_metric(t.ci_half)});
        cas_rows.push_back({row.label, fmt_metric(s.mean), fmt_metric(s.ci_half)});
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "baselines_accuracy.csv", {"method", "concept_acc", "concept_ci", "task_acc", "task_ci"}, acc_rows);
    write_csv(std::filesystem::path(cfg.out_dir) / "baselines_cas.csv", {"method", "cas", "cas_ci"}, cas_rows);
    return outcomes;
}

/// The 7-row grid: full RECEM plus single and pairwise loss removals.
inline std::vector<GridRow> ablation_grid(const RunConfig& cfg) {
    auto mod = [&](const char* label, double lm, double lcvd, double lrec) {
        RunConfig c = detail::variant_config(cfg, Variant::Recem, false);
        c.model.lambda_m = lm < 0 ? cfg.model.lambda_m : lm;
        c.model.lambda_cvd = lcvd < 0 ? cfg.model.lambda_cvd : lcvd;
        c.model.lambda_rec = lrec < 0 ? cfg.model.lambda_rec : lrec;
        c.resolve();
        return GridRow{label, c};
    };
    return {
        mod("RECEM", -1, -1, -1),
        mod("wo_m", 0, -1, -1),
        mod("wo_rec", -1, -1, 0),
        mod("wo_cvd", -1, 0, -1),
        mod("wo_cvd_rec", -1, 0, 0),
        mod("wo_cvd_m", 0, 0, -1),
        mod("wo_rec_m", 0, -1, 0),
    };
}

inline std::vector<RunOutcome> experiment_ablation(const RunConfig& cfg) {
    std::vector<GridRow> grid = ablation_grid(cfg);
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, detail::kAllShifts, false);

    std::vector<std::vector<std::string>> rows;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        Aggregate c = agg_of(runs, [](const RunOutcome& o) { return o.metrics.concept_acc; });
        Aggregate t = agg_of(runs, [](const RunOutcome& o) { return o.metrics.task_acc; });
        Aggregate sh = agg_of(runs, [](const RunOutcome& o) { return mean_shift_acc(o); });
        Aggregate rnd = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::RandomShift); });
        Aggregate fix = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::FixedShift); });
        Aggregate zero = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::ZeroShift); });
        rows.push_back({row.label, fmt_metric(c.mean), fmt_metric(c.ci_half), fmt_metric(t.mean), fmt_metric(t.ci_half),
                        fmt_metric(sh.mean), fmt_metric(sh.ci_half), fmt_metric(rnd.mean), fmt_metric(fix.mean), fmt_metric(zero.mean)});
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "ablation.csv",
              {"configuration", "concept_acc", "concept_ci", "task_acc", "task_ci", "shifted_task_acc", "shifted_task_ci", "random_shift", "fixed_shift", "zero_shift"},
              rows);
    return outcomes;
}

inline std::vector<RunOutcome> experiment_beta_sweep(const RunConfig& cfg) {
    std::vector<double> betas{0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
    std::vector<GridRow> grid;
    for (double b : betas) {
        RunConfig c = detail::variant_config(cfg, Variant::Recem, false);
        c.model.beta_max = b;
        grid.push_back({"beta_" + fmt_metric(b), c});
    }
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, {}, false);

    std::vector<std::vector<std::string>> rows;
    ChartSeries series{"RECEM", {}};
    for (std::size_t i = 0; i < grid.size(); ++i) {
        auto runs = outcomes_for(outcomes, grid[i].label);
        Aggregate t = agg_of(runs, [](const RunOutcome& o) { return o.metrics.task_acc; });
        Aggregate c = agg_of(runs, [](const RunOutcome& o) { return o.metrics.concept_acc; });
        rows.push_back({fmt_metric(betas[i]), fmt_metric(t.mean), fmt_metric(t.ci_half), fmt_metric(c.mean), fmt_metric(c.ci_half)});
        series.points.emplace_back(betas[i], t.mean);
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "beta_sweep.csv", {"beta_max", "task_acc", "task_ci", "concept_acc", "concept_ci"}, rows);
    write_line_chart_svg((std::filesystem::path(cfg.out_dir) / "beta_sweep.svg").string(), "Annealing coefficient sweep", "beta_max", "task accuracy (%)", {series});
    return outcomes;
}

inline std::vector<RunOutcome> experiment_weight_sweep(const RunConfig& cfg) {
    struct SweepPoint {
        const char* param;
        double value;
    };
    std::vector<SweepPoint> points;
    for (double v : {0.01, 0.1, 0.5, 1.0}) points.push_back({"lambda_m", v});
    for (double v : {0.01, 0.05, 0.1, 0.5}) points.push_back({"lambda_cvd", v});
    for (double v : {0.1, 0.5, 1.0, 5.0}) points.push_back({"lambda_rec", v});

    std::vector<GridRow> grid;
    for (const SweepPoint& p : points) {
        RunConfig c = detail::variant_config(cfg, Variant::Recem, false);
        if (std::string(p.param) == "lambda_m") c.model.lambda_m = p.value;
        if (std::string(p.param) == "lambda_cvd") c.model.lambda_cvd = p.value;
        if (std::string(p.param) == "lambda_rec") c.model.lambda_rec = p.value;
        grid.push_back({std::string(p.param) + "_" + fmt_metric(p.value), c});
    }
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, {}, false);

    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        auto runs = outcomes_for(outcomes, grid[i].label);
        Aggregate c = agg_of(runs, [](const RunOutcome& o) { return o.metrics.concept_acc; });
        Aggregate t = agg_of(runs, [](const RunOutcome& o) { return o.metrics.task_acc; });
        rows.push_back({points[i].param, fmt_metric(points[i].value), fmt_metric(c.mean), fmt_metric(c.ci_half), fmt_metric(t.mean), fmt_metric(t.ci_half)});
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "weight_sweep.csv", {"hyperparameter", "value", "concept_acc", "concept_ci", "task_acc", "task_ci"}, rows);
    return outcomes;
}

inline std::vector<RunOutcome> experiment_intervention(const RunConfig& cfg) {
    std::vector<GridRow> grid{
        {"BoolCBM", detail::variant_config(cfg, Variant::BoolCbm, false)},
        {"FuzzyCBM", detail::variant_config(cfg, Variant::FuzzyCbm, false)},
        {"CEM", detail::variant_config(cfg, Variant::Cem, false)},
        {"RECEM", detail::variant_config(cfg, Variant::Recem, false)},
    };
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, {}, false);

    std::vector<std::vector<std::string>> rows;
    std::vector<ChartSeries> series;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        ChartSeries s{row.label, {}};
        const auto& ratios = runs.front()->metrics.intervention.ratios;
        for (std::size_t i = 0; i < ratios.size(); ++i) {
            Aggregate a = agg_of(runs, [i](const RunOutcome& o) { return o.metrics.intervention.mean_accuracy[i]; });
            rows.push_back({row.label, fmt_metric(ratios[i]), fmt_metric(a.mean), fmt_metric(a.ci_half)});
            s.points.emplace_back(ratios[i], a.mean);
        }
        series.push_back(std::move(s));
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "intervention.csv", {"method", "ratio", "task_acc", "task_ci"}, rows);
    write_line_chart_svg((std::filesystem::path(cfg.out_dir) / "intervention.svg").string(), "Task accuracy under intervention", "intervention ratio",
                         "task accuracy (%)", series);
    return outcomes;
}

inline std::vector<RunOutcome> experiment_shift(const RunConfig& cfg) {
    std::vector<GridRow> grid{
        {"BoolCBM", detail::variant_config(cfg, Variant::BoolCbm, false)},
        {"FuzzyCBM", detail::variant_config(cfg, Variant::FuzzyCbm, false)},
        {"CEM", detail::variant_config(cfg, Variant::Cem, false)},
        {"RECEM", detail::variant_config(cfg, Variant::Recem, false)},
    };
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, detail::kAllShifts, false);

    std::vector<std::vector<std::string>> rows;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        Aggregate id = agg_of(runs, [](const RunOutcome& o) { return o.metrics.task_acc; });
        Aggregate rnd = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::RandomShift); });
        Aggregate fix = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::FixedShift); });
        Aggregate zero = agg_of(runs, [](const RunOutcome& o) { return shift_acc_of(o, ShiftKind::ZeroShift); });
        rows.push_back({row.label, fmt_metric(id.mean), fmt_metric(id.ci_half), fmt_metric(rnd.mean), fmt_metric(rnd.ci_half),
                        fmt_metric(fix.mean), fmt_metric(fix.ci_half), fmt_metric(zero.mean), fmt_metric(zero.ci_half)});
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "shift_accuracy.csv",
              {"method", "in_distribution", "in_distribution_ci", "random_shift", "random_shift_ci", "fixed_shift", "fixed_shift_ci", "zero_shift", "zero_shift_ci"},
              rows);
    return outcomes;
}

inline std::vector<RunOutcome> experiment_leakage(const RunConfig& cfg) {
    RunConfig indep = cfg;
    indep.data.concept_corr = 0.0;  // independent concepts per the leakage protocol
    indep.resolve();
    std::vector<GridRow> grid{
        {"CEM", detail::variant_config(indep, Variant::Cem, false)},
        {"RECEM", detail::variant_config(indep, Variant::Recem, false)},
    };
    detail::write_config_record(indep, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, {}, /*with_ois=*/true);

    std::vector<std::vector<std::string>> rows;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        Aggregate o_agg = agg_of(runs, [](const RunOutcome& o) { return o.metrics.ois_rep.value; });
        Aggregate c_agg = agg_of(runs, [](const RunOutcome& o) { return o.metrics.cas_score; });
        rows.push_back({row.label, fmt_metric(o_agg.mean), fmt_metric(o_agg.ci_half), fmt_metric(c_agg.mean), fmt_metric(c_agg.ci_half)});
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "leakage.csv", {"method", "ois", "ois_ci", "cas", "cas_ci"}, rows);
    return outcomes;
}

inline std::vector<RunOutcome> experiment_consistency(const RunConfig& cfg) {
    std::vector<GridRow> grid{
        {"CEM", detail::variant_config(cfg, Variant::Cem, false)},
        {"RECEM", detail::variant_config(cfg, Variant::Recem, false)},
    };
    detail::write_config_record(cfg, cfg.out_dir);
    auto outcomes = run_grid(grid, cfg.seeds, cfg.out_dir, {ShiftKind::RandomShift}, false);

    std::vector<std::vector<std::string>> rows;
    std::vector<std::pair<std::string, DistributionSummary>> shift_dists, cons_dists;
    for (const GridRow& row : grid) {
        auto runs = outcomes_for(outcomes, row.label);
        Aggregate shift_cos = agg_of(runs, [](const RunOutcome& o) { return o.metrics.shifts.front().cosine.mean; });
        Aggregate cons_cos = agg_of(runs, [](const RunOutcome& o) {
            double acc = 0.0;
            for (const auto& [k, s] : o.metrics.consistency) acc += s.mean;
            return o.metrics.consistency.empty() ? 0.0 : acc / static_cast<double>(o.metrics.consistency.size());
        });
        rows.push_back({row.label, fmt_metric(shift_cos.mean), fmt_metric(shift_cos.ci_half), fmt_metric(cons_cos.mean), fmt_metric(cons_cos.ci_half)});

        const RunOutcome* first = runs.front();
        shift_dists.emplace_back(row.label, first->metrics.shifts.front().cosine);
        emit_metrics_report(first->metrics, (std::filesystem::path(cfg.out_dir) / ("detail_" + row.label)).string());
        if (!first->metrics.consistency.empty()) cons_dists.emplace_back(row.label, first->metrics.consistency.front().second);
    }
    write_csv(std::filesystem::path(cfg.out_dir) / "consistency.csv",
              {"method", "shift_cosine_mean", "shift_cosine_ci", "concept_cosine_mean", "concept_cosine_ci"}, rows);
    write_histogram_svg((std::filesystem::path(cfg.out_dir) / "shift_similarity.svg").string(), "Before/after-shift embedding similarity", shift_dists);
    if (!cons_dists.empty())
        write_histogram_svg((std::filesystem::path(cfg.out_dir) / "concept_consistency.svg").string(), "Same-concept similarity across samples", cons_dists);
    return outcomes;
}

inline std::vector<RunOutcome> run_experiment(const RunConfig& cfg) {
    const std::string& name = cfg.experiment;
    if (name == "baselines") return experiment_baselines(cfg);
    if (name == "ablation") return experiment_ablation(cfg);
    if (name == "beta_sweep") return experiment_beta_sweep(cfg);
    if (name == "weight_sweep") return experiment_weight_sweep(cfg);
    if (name == "intervention") return experiment_intervention(cfg);
    if (name == "shift") return experiment_shift(cfg);
    if (name == "leakage") return experiment_leakage(cfg);
    if (name == "consistency") return experiment_consistency(cfg);
    throw ConfigError("unknown experiment '" + name + "' (expected baselines|ablation|beta_sweep|weight_sweep|intervention|shift|leakage|consistency)");
}

}  // namespace recem
