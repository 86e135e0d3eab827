// tecde: simulate | train | eval | sweep | config

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "tecde/errors.hpp"
#include "tecde/experiment.hpp"
#include "tecde/log.hpp"

namespace fs = std::filesystem;
using namespace tecde;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string seed, gamma, kappa, scale;
    std::string out_dir;
    bool mu_zero = false;
};

void add_common(CLI::App* cmd, Common& c, bool lists) {
    cmd->add_option("--config", c.config, "key = value config file");
    cmd->add_option("--set", c.sets, "override one key, e.g. --set train.lr=0.01");
    const char* suffix = lists ? " (comma list)" : "";
    cmd->add_option("--seed", c.seed, std::string("seed for simulation, training and eval") + suffix);
    cmd->add_option("--gamma", c.gamma, std::string("gamma_c = gamma_r") + suffix);
    cmd->add_option("--kappa", c.kappa, std::string("constant observation kappa") + suffix);
    cmd->add_option("--scale", c.scale, "multiplier on split sizes");
    cmd->add_option("--out-dir", c.out_dir, "root for run directories (default $TECDE_OUT_DIR or ./runs)");
}

exp::ExperimentConfig build_config(const Common& c, bool sweep) {
    exp::ExperimentConfig cfg = c.config.empty() ? exp::ExperimentConfig{} : exp::load_config(c.config);
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ArgumentError("--set expects key=value, got '" + s + "'");
        exp::set_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!c.scale.empty()) exp::set_value(cfg, "sim.scale", c.scale);
    if (c.mu_zero) exp::set_value(cfg, "train.mu_schedule", "zero");
    if (sweep) {
        if (!c.gamma.empty()) exp::set_value(cfg, "sweep.gammas", c.gamma);
        if (!c.kappa.empty()) exp::set_value(cfg, "sweep.kappas", c.kappa);
        if (!c.seed.empty()) exp::set_value(cfg, "sweep.seeds", c.seed);
        return cfg;
    }
    if (!c.gamma.empty()) exp::set_value(cfg, "sim.gamma", c.gamma);
    if (!c.kappa.empty()) {
        exp::set_value(cfg, "sim.kappa_policy", "constant");
        exp::set_value(cfg, "sim.kappa", c.kappa);
    }
    if (!c.seed.empty()) {
        exp::ExperimentConfig tmp;
        exp::set_value(tmp, "sim.seed", c.seed);
        cfg.set_seed(tmp.sim.seed);
    }
    cfg.validate();
    return cfg;
}

fs::path out_root(const Common& c) {
    if (!c.out_dir.empty()) return c.out_dir;
    if (const char* env = std::getenv("TECDE_OUT_DIR"); env && *env) return env;
    return "runs";
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const exp::ExperimentConfig& cfg) {
    std::ofstream out(dir / "manifest.txt", std::ios::binary);
    if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
    out << "# command " << command << '\n' << exp::manifest_text(cfg);
}

data::Dataset load_split(const fs::path& data_dir, const char* split) {
    const fs::path p = data_dir / (std::string(split) + ".jsonl");
    if (!fs::exists(p)) throw IoError("dataset file '" + p.string() + "' not found");
    return data::read_dataset(p);
}

int cmd_simulate(const Common& c) {
    const auto cfg = build_config(c, false);
    const fs::path dir = exp::make_run_dir(out_root(c), cfg.sim.seed);
    write_manifest(dir, "simulate", cfg);
    const auto s = exp::simulate_splits(cfg);
    data::write_dataset(dir / "train.jsonl", s.train);
    data::write_dataset(dir / "val.jsonl", s.val);
    data::write_dataset(dir / "test.jsonl", s.test);
    const std::vector<exp::SplitSummary> sums{exp::summarize(s.train), exp::summarize(s.val),
                                              exp::summarize(s.test)};
    exp::write_summary_json(dir / "summary.json", sums);
    for (const auto& x : sums)
        fmt::print("{:<5} patients {:>5}  treatment frequency {:.4f} (chemo {:.4f}, radio {:.4f})  "
                   "mean observations {:.2f}\n",
                   x.split, x.patients, x.treatment_rate, x.chemo_rate, x.radio_rate,
                   x.mean_observations);
    fmt::print("{}\n", dir.string());
    return 0;
}

void check_compatible(const data::Dataset& a, const data::Dataset& b) {
    const auto& x = a.header;
    const auto& y = b.header;
    if (x.schema != y.schema || x.channels != y.channels || x.norm != y.norm ||
        x.horizon != y.horizon || x.cf_horizons != y.cf_horizons)
        throw ArgumentError("datasets '" + x.split + "' and '" + y.split + "' do not match");
}

int cmd_train(const Common& c, const std::string& data_dir) {
    const auto cfg = build_config(c, false);
    const auto train_set = load_split(data_dir, "train");
    const auto val_set = load_split(data_dir, "val");
    check_compatible(train_set, val_set);
    if (static_cast<int>(train_set.header.channels.size()) != cfg.model.encoder_channels)
        throw ArgumentError("dataset channels do not match the model input size");
    const fs::path dir = exp::make_run_dir(out_root(c), cfg.train.seed);
    write_manifest(dir, "train --data " + data_dir, cfg);
    const auto res = exp::train_model(cfg, train_set, val_set, [](const train::EpochStats& s,
                                                                 const model::TecdeParams&) {
        log::info("phase {} epoch {} mu {:.3f} train_ly {:.4g} train_la {:.4f} val_ly {:.4g}",
                  s.phase, s.epoch, s.mu, s.train_ly, s.train_la, s.val_ly);
    });
    exp::write_checkpoint_file(dir / "checkpoint.txt", res.params);
    exp::write_history_csv(dir / "history.csv", res.report);
    fmt::print("best validation: encoder {:.6g} decoder {:.6g}\n", res.report.best_encoder_val,
               res.report.best_decoder_val);
    fmt::print("{}\n", dir.string());
    return 0;
}

int cmd_eval(const Common& c, const std::string& data_dir, const std::string& dataset,
             const std::string& checkpoint, bool oracle) {
    const auto cfg = build_config(c, false);
    if (data_dir.empty() == dataset.empty())
        throw ArgumentError("eval needs exactly one of --data or --dataset");
    if (oracle == !checkpoint.empty())
        throw ArgumentError("eval needs exactly one of --checkpoint or --oracle");
    const data::Dataset test = dataset.empty() ? load_split(data_dir, "test")
                                               : data::read_dataset(dataset);
    std::optional<model::TecdeParams> params;
    if (!oracle) {
        params = exp::read_checkpoint_file(checkpoint);
        if (static_cast<int>(test.header.channels.size()) != params->config.encoder_channels)
            throw ArgumentError("checkpoint and dataset have different channel counts");
    }
    const fs::path dir = exp::make_run_dir(out_root(c), cfg.eval.seed);
    write_manifest(dir, oracle ? "eval --oracle" : "eval --checkpoint " + checkpoint, cfg);
    eval::EvalReport report;
    if (oracle) {
        report = exp::evaluate(cfg, eval::OraclePredictor{}, test, cfg.scaled(cfg.n_train));
    } else {
        const eval::ModelPredictor predictor(*params);
        report = exp::evaluate(cfg, predictor, test, cfg.scaled(cfg.n_train), &*params);
    }
    eval::write_report(dir / "report.json", dir / "report.csv", report);
    for (const auto& h : report.horizons)
        fmt::print("n={} rmse {:.4f}% (factual {:.4f}%)\n", h.n, h.rmse, h.rmse_factual);
    for (const auto& s : report.selection)
        fmt::print("selection n={} accuracy {:.4f}\n", s.n, s.accuracy);
    if (report.has_uncertainty) fmt::print("AUSE {:.6g}\n", report.uncertainty.ause);
    fmt::print("{}\n", dir.string());
    return 0;
}

int cmd_sweep(const Common& c, int workers) {
    const auto cfg = build_config(c, true);
    const std::uint64_t tag = cfg.sweep.seeds.empty() ? 0 : cfg.sweep.seeds.front();
    const fs::path dir = exp::make_run_dir(out_root(c), tag);
    const auto res = exp::run_sweep(cfg, dir, workers);
    int failed = 0;
    for (const auto& cell : res.cells) {
        if (!cell.ok) {
            ++failed;
            fmt::print("{} FAILED: {}\n", exp::cell_name(cell.config), cell.error);
            continue;
        }
        fmt::print("{} rmse n{} {:.4f}%\n", exp::cell_name(cell.config), cell.report.horizons.front().n,
                   cell.report.horizons.front().rmse);
    }
    fmt::print("trend spearman {:.3f} monotone {}\n", res.trend_spearman, res.monotone_trend);
    fmt::print("{}\n", dir.string());
    if (failed == 0) return 0;
    for (const auto& cell : res.cells)
        if (cell.exit_code == 2) return 2;
    return 1;
}

int cmd_config(const Common& c) {
    const auto cfg = build_config(c, false);
    const auto text = exp::to_text(cfg);
    std::size_t pos = 0;
    for (const auto& k : exp::config_keys()) {
        const auto end = text.find('\n', pos);
        fmt::print("# {}\n{}\n", k.help, text.substr(pos, end - pos));
        pos = end + 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Treatment-effect CDE toolkit"};
    app.set_version_flag("--version", std::string(exp::kVersion));
    app.require_subcommand(1);

    Common common;
    std::string data_dir, dataset, checkpoint;
    bool oracle = false;
    int workers = 1;

    auto* sim_cmd = app.add_subcommand("simulate", "simulate train/val/test datasets");
    add_common(sim_cmd, common, false);

    auto* train_cmd = app.add_subcommand("train", "train on a simulated data directory");
    add_common(train_cmd, common, false);
    train_cmd->add_option("--data", data_dir, "directory with train.jsonl and val.jsonl")->required();
    train_cmd->add_flag("--mu-zero", common.mu_zero, "disable the adversarial term (mu = 0)");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval_cmd, common, false);
    eval_cmd->add_option("--data", data_dir, "directory with test.jsonl");
    eval_cmd->add_option("--dataset", dataset, "dataset file to evaluate");
    eval_cmd->add_option("--checkpoint", checkpoint, "trained model checkpoint");
    eval_cmd->add_flag("--oracle", oracle, "score the ground-truth counterfactuals");

    auto* sweep_cmd = app.add_subcommand("sweep", "simulate, train and evaluate a gamma x kappa x seed grid");
    add_common(sweep_cmd, common, true);
    sweep_cmd->add_option("--workers", workers, "cells run in parallel")->check(CLI::PositiveNumber);
    sweep_cmd->add_flag("--mu-zero", common.mu_zero, "disable the adversarial term (mu = 0)");

    auto* config_cmd = app.add_subcommand("config", "print the effective configuration with key help");
    add_common(config_cmd, common, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    const auto start = std::chrono::steady_clock::now();
    struct Elapsed {
        std::chrono::steady_clock::time_point t0;
        ~Elapsed() {
            log::info("elapsed {:.1f}s",
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    } elapsed{start};
    try {
        if (*sim_cmd) return cmd_simulate(common);
        if (*train_cmd) return cmd_train(common, data_dir);
        if (*eval_cmd) return cmd_eval(common, data_dir, dataset, checkpoint, oracle);
        if (*sweep_cmd) return cmd_sweep(common, workers);
        if (*config_cmd) return cmd_config(common);
    } catch (const NumericError& e) {
        fmt::print(stderr, "numeric error: {}\n", e.what());
        return 2;
    } catch (const StateError& e) {
        fmt::print(stderr, "internal error: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 1;
}
