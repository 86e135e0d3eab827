#include "tecde/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/core.h>
#include <json.hpp>

#include "tecde/errors.hpp"
#include "tecde/log.hpp"
#include "tecde/rng.hpp"

namespace tecde::exp {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kModelInitStream = 0x6d6f64656cULL;
constexpr std::uint64_t kMcStream = 0x6d63ULL;

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view what) {
    throw ArgumentError(fmt::format("{}: invalid value '{}' ({})", key, value, what));
}

double parse_double(std::string_view key, std::string_view v) {
    v = trim(v);
    double x = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x))
        bad_value(key, v, "expected a number");
    return x;
}

long long parse_int(std::string_view key, std::string_view v) {
    v = trim(v);
    long long x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected an integer");
    return x;
}

int parse_i32(std::string_view key, std::string_view v) {
    const long long x = parse_int(key, v);
    if (x < INT32_MIN || x > INT32_MAX) bad_value(key, v, "out of range");
    return static_cast<int>(x);
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    v = trim(v);
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size())
        bad_value(key, v, "expected a non-negative integer");
    return x;
}

bool parse_bool(std::string_view key, std::string_view v) {
    v = trim(v);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "expected true or false");
}

template <typename F>
auto parse_list(std::string_view key, std::string_view v, F item) {
    std::vector<decltype(item(key, v))> out;
    v = trim(v);
    if (v.empty()) bad_value(key, v, "empty list");
    while (true) {
        const auto comma = v.find(',');
        out.push_back(item(key, v.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        v.remove_prefix(comma + 1);
    }
    return out;
}

std::string fmt_num(double x) { return data::format_double(x); }
std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <typename T>
std::string fmt_list(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>) out += fmt_num(xs[i]);
        else out += std::to_string(xs[i]);
    }
    return out;
}

std::string_view mu_name(train::MuMode m) {
    switch (m) {
        case train::MuMode::scheduled: return "scheduled";
        case train::MuMode::zero: return "zero";
        case train::MuMode::constant: return "constant";
    }
    return "scheduled";
}

struct Field {
    KeyDoc doc;
    std::function<void(ExperimentConfig&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    static const std::vector<Field> f = {
        {{"sim.gamma_c", "chemotherapy confounding strength (default 10)"},
         [](C& c, std::string_view v) { c.sim.gamma_c = parse_double("sim.gamma_c", v); },
         [](const C& c) { return fmt_num(c.sim.gamma_c); }},
        {{"sim.gamma_r", "radiotherapy confounding strength (default 10)"},
         [](C& c, std::string_view v) { c.sim.gamma_r = parse_double("sim.gamma_r", v); },
         [](const C& c) { return fmt_num(c.sim.gamma_r); }},
        {{"sim.kappa_policy", "constant | treatment (kappa by treatment status; default constant)"},
         [](C& c, std::string_view v) {
             v = trim(v);
             if (v == "constant") c.sim.hawkes.policy = sim::KappaPolicy::constant;
             else if (v == "treatment") c.sim.hawkes.policy = sim::KappaPolicy::treatment_conditioned;
             else bad_value("sim.kappa_policy", v, "expected constant or treatment");
         },
         [](const C& c) {
             return std::string(c.sim.hawkes.policy == sim::KappaPolicy::constant ? "constant"
                                                                                  : "treatment");
         }},
        {{"sim.kappa", "observation intensity multiplier under the constant policy (default 10)"},
         [](C& c, std::string_view v) { c.sim.hawkes.kappa = parse_double("sim.kappa", v); },
         [](const C& c) { return fmt_num(c.sim.hawkes.kappa); }},
        {{"sim.kappa_treated", "kappa on treated days under the treatment policy (default 10)"},
         [](C& c, std::string_view v) {
             c.sim.hawkes.kappa_treated = parse_double("sim.kappa_treated", v);
         },
         [](const C& c) { return fmt_num(c.sim.hawkes.kappa_treated); }},
        {{"sim.kappa_untreated", "kappa on untreated days under the treatment policy (default 1)"},
         [](C& c, std::string_view v) {
             c.sim.hawkes.kappa_untreated = parse_double("sim.kappa_untreated", v);
         },
         [](const C& c) { return fmt_num(c.sim.hawkes.kappa_untreated); }},
        {{"sim.self_excitation", "Hawkes self-excitation on observation times (default true)"},
         [](C& c, std::string_view v) {
             c.sim.hawkes.self_excitation = parse_bool("sim.self_excitation", v);
         },
         [](const C& c) { return fmt_bool(c.sim.hawkes.self_excitation); }},
        {{"sim.horizon", "simulated days per patient (default 60)"},
         [](C& c, std::string_view v) { c.sim.horizon = parse_i32("sim.horizon", v); },
         [](const C& c) { return std::to_string(c.sim.horizon); }},
        {{"sim.delta", "simulator step in days; only 1 is supported (default 1)"},
         [](C&, std::string_view v) {
             if (parse_double("sim.delta", v) != 1.0) bad_value("sim.delta", v, "only 1 is supported");
         },
         [](const C&) { return std::string("1"); }},
        {{"sim.n_train", "training patients before scaling (default 500)"},
         [](C& c, std::string_view v) { c.n_train = parse_i32("sim.n_train", v); },
         [](const C& c) { return std::to_string(c.n_train); }},
        {{"sim.n_val", "validation patients before scaling (default 100)"},
         [](C& c, std::string_view v) { c.n_val = parse_i32("sim.n_val", v); },
         [](const C& c) { return std::to_string(c.n_val); }},
        {{"sim.n_test", "test patients before scaling (default 500)"},
         [](C& c, std::string_view v) { c.n_test = parse_i32("sim.n_test", v); },
         [](const C& c) { return std::to_string(c.n_test); }},
        {{"sim.scale", "multiplier on all split sizes (default 1)"},
         [](C& c, std::string_view v) { c.scale = parse_double("sim.scale", v); },
         [](const C& c) { return fmt_num(c.scale); }},
        {{"sim.count_scale", "divisor of the counting channels (default 100)"},
         [](C& c, std::string_view v) { c.sim.count_scale = parse_double("sim.count_scale", v); },
         [](const C& c) { return fmt_num(c.sim.count_scale); }},
        {{"sim.seed", "simulation seed (default 1)"},
         [](C& c, std::string_view v) { c.sim.seed = parse_u64("sim.seed", v); },
         [](const C& c) { return std::to_string(c.sim.seed); }},
        {{"model.latent_dim", "latent state size (default 8)"},
         [](C& c, std::string_view v) { c.model.latent_dim = parse_i32("model.latent_dim", v); },
         [](const C& c) { return std::to_string(c.model.latent_dim); }},
        {{"model.hidden_width", "hidden units of every network (default 32)"},
         [](C& c, std::string_view v) { c.model.hidden_width = parse_i32("model.hidden_width", v); },
         [](const C& c) { return std::to_string(c.model.hidden_width); }},
        {{"model.max_step", "largest RK4 step in normalized time (default 0.5)"},
         [](C& c, std::string_view v) { c.model.max_step = parse_double("model.max_step", v); },
         [](const C& c) { return fmt_num(c.model.max_step); }},
        {{"model.linear_ablation", "linear vector fields and maps (default false)"},
         [](C& c, std::string_view v) {
             c.model.linear_ablation = parse_bool("model.linear_ablation", v);
         },
         [](const C& c) { return fmt_bool(c.model.linear_ablation); }},
        {{"model.decoder_time_channel", "time as a decoder control channel (default true)"},
         [](C& c, std::string_view v) {
             c.model.decoder_time_channel = parse_bool("model.decoder_time_channel", v);
         },
         [](const C& c) { return fmt_bool(c.model.decoder_time_channel); }},
        {{"train.epochs", "encoder phase epochs (default 100)"},
         [](C& c, std::string_view v) { c.train.epochs = parse_i32("train.epochs", v); },
         [](const C& c) { return std::to_string(c.train.epochs); }},
        {{"train.decoder_epochs", "decoder phase epochs (default 100)"},
         [](C& c, std::string_view v) {
             c.train.decoder_epochs = parse_i32("train.decoder_epochs", v);
         },
         [](const C& c) { return std::to_string(c.train.decoder_epochs); }},
        {{"train.batch", "mini-batch size (default 32)"},
         [](C& c, std::string_view v) { c.train.batch_size = parse_i32("train.batch", v); },
         [](const C& c) { return std::to_string(c.train.batch_size); }},
        {{"train.lr", "encoder phase learning rate (default 0.05)"},
         [](C& c, std::string_view v) { c.train.lr = parse_double("train.lr", v); },
         [](const C& c) { return fmt_num(c.train.lr); }},
        {{"train.decoder_lr", "decoder phase learning rate (default 0.2)"},
         [](C& c, std::string_view v) { c.train.decoder_lr = parse_double("train.decoder_lr", v); },
         [](const C& c) { return fmt_num(c.train.decoder_lr); }},
        {{"train.mu_schedule", "scheduled | zero | constant (default scheduled)"},
         [](C& c, std::string_view v) {
             v = trim(v);
             if (v == "scheduled") c.train.mu_mode = train::MuMode::scheduled;
             else if (v == "zero") c.train.mu_mode = train::MuMode::zero;
             else if (v == "constant") c.train.mu_mode = train::MuMode::constant;
             else bad_value("train.mu_schedule", v, "expected scheduled, zero or constant");
         },
         [](const C& c) { return std::string(mu_name(c.train.mu_mode)); }},
        {{"train.mu_constant", "mu under the constant schedule (default 1)"},
         [](C& c, std::string_view v) { c.train.mu_constant = parse_double("train.mu_constant", v); },
         [](const C& c) { return fmt_num(c.train.mu_constant); }},
        {{"train.patience", "early-stopping patience in epochs (default 5)"},
         [](C& c, std::string_view v) { c.train.patience = parse_i32("train.patience", v); },
         [](const C& c) { return std::to_string(c.train.patience); }},
        {{"train.dropout", "dropout rate on hidden layers (default 0)"},
         [](C& c, std::string_view v) { c.model.dropout = parse_double("train.dropout", v); },
         [](const C& c) { return fmt_num(c.model.dropout); }},
        {{"train.decoder_horizon", "successors supervised per decoder window (default 5)"},
         [](C& c, std::string_view v) {
             c.train.decoder_horizon = parse_i32("train.decoder_horizon", v);
         },
         [](const C& c) { return std::to_string(c.train.decoder_horizon); }},
        {{"train.seed", "initialization and shuffling seed (default 1)"},
         [](C& c, std::string_view v) { c.train.seed = parse_u64("train.seed", v); },
         [](const C& c) { return std::to_string(c.train.seed); }},
        {{"eval.horizons", "forecast horizons n, subset of 1,3,4,5 (default 1,3,5)"},
         [](C& c, std::string_view v) { c.eval.horizons = parse_list("eval.horizons", v, parse_i32); },
         [](const C& c) { return fmt_list(c.eval.horizons); }},
        {{"eval.selection_horizon", "horizon for treatment selection, 0 to skip (default 5)"},
         [](C& c, std::string_view v) {
             c.eval.selection_horizon = parse_i32("eval.selection_horizon", v);
         },
         [](const C& c) { return std::to_string(c.eval.selection_horizon); }},
        {{"eval.uncertainty", "MC-dropout sparsification (needs train.dropout > 0; default false)"},
         [](C& c, std::string_view v) { c.eval.uncertainty = parse_bool("eval.uncertainty", v); },
         [](const C& c) { return fmt_bool(c.eval.uncertainty); }},
        {{"eval.n_dropout", "MC-dropout forward passes (default 50)"},
         [](C& c, std::string_view v) { c.eval.dropout_passes = parse_i32("eval.n_dropout", v); },
         [](const C& c) { return std::to_string(c.eval.dropout_passes); }},
        {{"eval.exclusion_steps", "exclusion grid intervals (default 100)"},
         [](C& c, std::string_view v) {
             c.eval.exclusion_steps = parse_i32("eval.exclusion_steps", v);
         },
         [](const C& c) { return std::to_string(c.eval.exclusion_steps); }},
        {{"eval.exclusion_max", "largest excluded fraction (default 0.99)"},
         [](C& c, std::string_view v) { c.eval.exclusion_max = parse_double("eval.exclusion_max", v); },
         [](const C& c) { return fmt_num(c.eval.exclusion_max); }},
        {{"eval.seed", "MC-dropout mask seed (default 1)"},
         [](C& c, std::string_view v) { c.eval.seed = parse_u64("eval.seed", v); },
         [](const C& c) { return std::to_string(c.eval.seed); }},
        {{"sweep.gammas", "gamma values of the sweep grid (default 2,10)"},
         [](C& c, std::string_view v) { c.sweep.gammas = parse_list("sweep.gammas", v, parse_double); },
         [](const C& c) { return fmt_list(c.sweep.gammas); }},
        {{"sweep.kappas", "kappa values of the sweep grid (default 10)"},
         [](C& c, std::string_view v) { c.sweep.kappas = parse_list("sweep.kappas", v, parse_double); },
         [](const C& c) { return fmt_list(c.sweep.kappas); }},
        {{"sweep.seeds", "seeds of the sweep grid (default 1)"},
         [](C& c, std::string_view v) { c.sweep.seeds = parse_list("sweep.seeds", v, parse_u64); },
         [](const C& c) { return fmt_list(c.sweep.seeds); }},
    };
    return f;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    sim.gamma_c = sim.gamma_r = 10.0;
    sim.hawkes.kappa = 10.0;
    model.hidden_width = 32;
    model.decoder_time_channel = true;
    train.lr = 0.05;
    train.decoder_lr = 0.2;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return to_text(a) == to_text(b);
}

int ExperimentConfig::scaled(int count) const {
    return std::max(1, static_cast<int>(std::lround(count * scale)));
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
    sim.seed = seed;
    train.seed = seed;
    eval.seed = seed;
}

void ExperimentConfig::validate() const {
    if (!(sim.gamma_c >= 0.0) || !(sim.gamma_r >= 0.0))
        throw ArgumentError("sim.gamma_c/gamma_r: must be >= 0");
    sim.hawkes.validate();
    if (sim.horizon < 6) throw ArgumentError("sim.horizon: must be >= 6");
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw ArgumentError("sim.n_train/n_val/n_test: must be >= 1");
    if (!(scale > 0.0)) throw ArgumentError("sim.scale: must be > 0");
    if (!(sim.count_scale > 0.0)) throw ArgumentError("sim.count_scale: must be > 0");
    model.validate();
    train.validate();
    for (int n : eval.horizons)
        if (std::find(sim.cf_horizons.begin(), sim.cf_horizons.end(), n) == sim.cf_horizons.end())
            throw ArgumentError(fmt::format("eval.horizons: {} has no counterfactual labels", n));
    if (eval.selection_horizon != 0 &&
        std::find(sim.cf_horizons.begin(), sim.cf_horizons.end(), eval.selection_horizon) ==
            sim.cf_horizons.end())
        throw ArgumentError("eval.selection_horizon: must be 0 or one of 1,3,4,5");
    if (eval.dropout_passes < 2) throw ArgumentError("eval.n_dropout: must be >= 2");
    if (eval.exclusion_steps < 1) throw ArgumentError("eval.exclusion_steps: must be >= 1");
    if (!(eval.exclusion_max > 0.0 && eval.exclusion_max < 1.0))
        throw ArgumentError("eval.exclusion_max: must be in (0, 1)");
    if (eval.uncertainty && !(model.dropout > 0.0))
        throw ArgumentError("eval.uncertainty: requires train.dropout > 0");
}

const std::vector<KeyDoc>& config_keys() {
    static const std::vector<KeyDoc> keys = [] {
        std::vector<KeyDoc> k;
        for (const auto& f : fields()) k.push_back(f.doc);
        return k;
    }();
    return keys;
}

void set_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    key = trim(key);
    if (key == "sim.gamma") {
        cfg.sim.gamma_c = cfg.sim.gamma_r = parse_double(key, value);
        return;
    }
    for (const auto& f : fields())
        if (f.doc.key == key) {
            f.set(cfg, value);
            return;
        }
    throw ArgumentError(fmt::format("unknown config key '{}'", key));
}

void parse_config(std::istream& in, ExperimentConfig& cfg, std::string_view source) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view s = line;
        if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        try {
            if (eq == std::string_view::npos)
                throw ArgumentError(fmt::format("expected key = value, got '{}'", s));
            set_value(cfg, s.substr(0, eq), s.substr(eq + 1));
        } catch (const ArgumentError& e) {
            throw ArgumentError(fmt::format("{}:{}: {}", source, lineno, e.what()));
        }
    }
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    ExperimentConfig cfg;
    parse_config(in, cfg, path.string());
    return cfg;
}

std::string to_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.doc.key, f.get(cfg));
    return out;
}

std::string manifest_text(const ExperimentConfig& cfg) {
    std::string out = fmt::format("# tecde {}\n", kVersion);
    out += fmt::format("# splits train={} val={} test={}\n", cfg.scaled(cfg.n_train),
                       cfg.scaled(cfg.n_val), cfg.scaled(cfg.n_test));
    out += fmt::format("# model_init_seed = {}\n",
                       substream_seed(cfg.train.seed, kModelInitStream));
    return out + to_text(cfg);
}

Splits simulate_splits(const ExperimentConfig& cfg) {
    cfg.validate();
    Splits s;
    s.train = data::simulate_split(cfg.sim, "train", 0, cfg.scaled(cfg.n_train));
    s.val = data::simulate_split(cfg.sim, "val", 1, cfg.scaled(cfg.n_val));
    s.test = data::simulate_split(cfg.sim, "test", 2, cfg.scaled(cfg.n_test));
    return s;
}

model::TecdeParams initial_params(const ExperimentConfig& cfg) {
    Rng rng(substream_seed(cfg.train.seed, kModelInitStream));
    return model::init_params(cfg.model, rng);
}

train::TrainResult train_model(const ExperimentConfig& cfg, const data::Dataset& train_set,
                               const data::Dataset& val_set, const train::EpochCallback& on_epoch) {
    cfg.validate();
    return train::train(initial_params(cfg), train_set, val_set, cfg.train, on_epoch);
}

std::string kappa_label(const sim::HawkesConfig& h) {
    if (h.policy == sim::KappaPolicy::constant) return fmt_num(h.kappa);
    return fmt::format("{}/{}", fmt_num(h.kappa_treated), fmt_num(h.kappa_untreated));
}

eval::EvalReport evaluate(const ExperimentConfig& cfg, const eval::Predictor& predictor,
                          const data::Dataset& test, int train_patients,
                          const model::TecdeParams* params) {
    eval::EvalReport r;
    r.setting.gamma = test.header.gamma_c;
    r.setting.kappa = kappa_label(test.header.hawkes);
    r.setting.seed = test.header.seed;
    r.setting.train_patients = train_patients;
    r.setting.test_patients = static_cast<int>(test.records.size());
    for (int n : cfg.eval.horizons) r.horizons.push_back(eval::horizon_eval(predictor, test, n));
    if (cfg.eval.selection_horizon > 0)
        r.selection.push_back(eval::treatment_selection(predictor, test, cfg.eval.selection_horizon));

    if (cfg.eval.uncertainty && params && params->config.dropout > 0.0) {
        std::vector<double> u, err;
        for (std::size_t i = 0; i < test.records.size(); ++i) {
            const auto& rec = test.records[i];
            if (eval::branch_points(rec, 1).empty()) continue;
            eval::McOptions opt;
            opt.passes = cfg.eval.dropout_passes;
            opt.n = 1;
            opt.seed = substream_seed(cfg.eval.seed, kMcStream, i);
            const auto s = eval::mc_dropout_predict(*params, rec, test.header.norm, opt);
            u.push_back(s.uncertainty);
            err.push_back(s.error);
        }
        if (u.size() >= 2) {
            const auto grid =
                eval::default_exclusion_grid(cfg.eval.exclusion_steps, cfg.eval.exclusion_max);
            r.has_uncertainty = true;
            r.uncertainty = eval::sparsification(u, err, grid);
            r.uncertainty_spearman =
                eval::spearman(r.uncertainty.fractions, r.uncertainty.model_curve);
        }
    }
    return r;
}

void write_history_csv(const fs::path& path, const train::LossReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "phase,epoch,mu,train_ly,train_la,train_objective,val_ly,val_la,improved\n";
    for (const auto& s : report.history)
        out << fmt::format("{},{},{},{},{},{},{},{},{}\n", s.phase, s.epoch,
                           data::format_double(s.mu), data::format_double(s.train_ly),
                           data::format_double(s.train_la), data::format_double(s.train_objective),
                           data::format_double(s.val_ly), data::format_double(s.val_la),
                           s.improved ? 1 : 0);
}

void write_checkpoint_file(const fs::path& path, const model::TecdeParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    model::write_checkpoint(out, params);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

model::TecdeParams read_checkpoint_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    return model::read_checkpoint(in);
}

SplitSummary summarize(const data::Dataset& ds) {
    SplitSummary s;
    s.split = ds.header.split;
    s.patients = static_cast<int>(ds.records.size());
    long days = 0, treated = 0, chemo = 0, radio = 0, obs = 0;
    for (const auto& r : ds.records) {
        for (const auto& a : r.dense.a) {
            ++days;
            chemo += a.chemo;
            radio += a.radio;
            treated += (a.chemo || a.radio) ? 1 : 0;
        }
        obs += static_cast<long>(r.obs.size());
    }
    if (days > 0) {
        s.treatment_rate = static_cast<double>(treated) / days;
        s.chemo_rate = static_cast<double>(chemo) / days;
        s.radio_rate = static_cast<double>(radio) / days;
    }
    if (s.patients > 0) s.mean_observations = static_cast<double>(obs) / s.patients;
    return s;
}

void write_summary_json(const fs::path& path, const std::vector<SplitSummary>& summaries) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& s : summaries)
        j.push_back({{"split", s.split},
                     {"patients", s.patients},
                     {"treatment_rate", s.treatment_rate},
                     {"chemo_rate", s.chemo_rate},
                     {"radio_rate", s.radio_rate},
                     {"mean_observations", s.mean_observations}});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << '\n';
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
}

}  // namespace

CellResult run_cell(const ExperimentConfig& cfg, const std::optional<fs::path>& dir) {
    CellResult res;
    res.config = cfg;
    try {
        cfg.validate();
        if (dir) {
            fs::create_directories(*dir / "data");
            write_text(*dir / "manifest.txt", manifest_text(cfg));
        }
        const Splits s = simulate_splits(cfg);
        if (dir) {
            data::write_dataset(*dir / "data" / "train.jsonl", s.train);
            data::write_dataset(*dir / "data" / "val.jsonl", s.val);
            data::write_dataset(*dir / "data" / "test.jsonl", s.test);
            write_summary_json(*dir / "data" / "summary.json",
                               {summarize(s.train), summarize(s.val), summarize(s.test)});
        }
        const auto trained = train_model(cfg, s.train, s.val);
        if (dir) {
            write_checkpoint_file(*dir / "checkpoint.txt", trained.params);
            write_history_csv(*dir / "history.csv", trained.report);
        }
        const eval::ModelPredictor predictor(trained.params);
        res.report = evaluate(cfg, predictor, s.test, static_cast<int>(s.train.records.size()),
                              &trained.params);
        if (dir) eval::write_report(*dir / "report.json", *dir / "report.csv", res.report);
        res.ok = true;
    } catch (const NumericError& e) {
        res.error = e.what();
        res.exit_code = 2;
    } catch (const StateError& e) {
        res.error = e.what();
        res.exit_code = 2;
    } catch (const std::exception& e) {
        res.error = e.what();
        res.exit_code = 1;
    }
    if (!res.ok && dir) {
        std::error_code ec;
        fs::create_directories(*dir, ec);
        std::ofstream(*dir / "FAILED") << res.error << '\n';
    }
    return res;
}

std::vector<ExperimentConfig> sweep_cells(const ExperimentConfig& cfg) {
    std::vector<ExperimentConfig> cells;
    for (double g : cfg.sweep.gammas)
        for (double k : cfg.sweep.kappas)
            for (std::uint64_t seed : cfg.sweep.seeds) {
                ExperimentConfig c = cfg;
                c.sim.gamma_c = c.sim.gamma_r = g;
                c.sim.hawkes.policy = sim::KappaPolicy::constant;
                c.sim.hawkes.kappa = k;
                c.set_seed(seed);
                c.sweep.gammas = {g};
                c.sweep.kappas = {k};
                c.sweep.seeds = {seed};
                cells.push_back(std::move(c));
            }
    return cells;
}

std::string cell_name(const ExperimentConfig& cell) {
    return fmt::format("g{}_k{}_s{}", fmt_num(cell.sim.gamma_c), kappa_label(cell.sim.hawkes),
                       cell.sim.seed);
}

void compute_trend(SweepResult& result) {
    // Mean first-horizon RMSE per gamma, in increasing gamma order.
    std::map<double, std::pair<double, int>> by_gamma;
    for (const auto& c : result.cells) {
        if (!c.ok || c.report.horizons.empty()) continue;
        auto& [sum, count] = by_gamma[c.config.sim.gamma_c];
        sum += c.report.horizons.front().rmse;
        ++count;
    }
    result.trend_spearman = 0.0;
    result.monotone_trend = false;
    if (by_gamma.size() < 2) return;
    std::vector<double> g, m;
    for (const auto& [gamma, acc] : by_gamma) {
        g.push_back(gamma);
        m.push_back(acc.first / acc.second);
    }
    result.trend_spearman = eval::spearman(g, m);
    result.monotone_trend = std::is_sorted(m.begin(), m.end());
}

SweepResult run_sweep(const ExperimentConfig& cfg, const fs::path& dir, int workers) {
    const auto cells = sweep_cells(cfg);
    if (cells.empty()) throw ArgumentError("sweep grid is empty");
    if (workers < 1) throw ArgumentError("--workers: must be >= 1");
    fs::create_directories(dir);
    write_text(dir / "manifest.txt", manifest_text(cfg));

    SweepResult result;
    result.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            log::info("cell {} start", cell_name(cells[i]));
            result.cells[i] = run_cell(cells[i], dir / "cells" / cell_name(cells[i]));
            if (result.cells[i].ok) log::info("cell {} done", cell_name(cells[i]));
            else log::error("cell {} failed: {}", cell_name(cells[i]), result.cells[i].error);
        }
    };
    const int n = std::min<int>(workers, static_cast<int>(cells.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    compute_trend(result);

    write_sweep_csv(dir / "sweep.csv", result);
    nlohmann::ordered_json j;
    j["cells"] = result.cells.size();
    j["failed"] = std::count_if(result.cells.begin(), result.cells.end(),
                                [](const CellResult& c) { return !c.ok; });
    j["trend_spearman"] = result.trend_spearman;
    j["monotone_trend"] = result.monotone_trend;
    std::ofstream(dir / "sweep.json", std::ios::binary) << j.dump(2) << '\n';
    return result;
}

void write_sweep_csv(const fs::path& path, const SweepResult& result) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    std::vector<int> horizons;
    for (const auto& c : result.cells)
        if (c.ok) {
            for (const auto& h : c.report.horizons) horizons.push_back(h.n);
            break;
        }
    out << "gamma,kappa,seed,status";
    for (int n : horizons) out << ",rmse_n" << n << "_pct";
    out << ",selection_accuracy,ause,error\n";
    for (const auto& c : result.cells) {
        out << fmt::format("{},{},{},{}", fmt_num(c.config.sim.gamma_c),
                           kappa_label(c.config.sim.hawkes), c.config.sim.seed,
                           c.ok ? "ok" : "failed");
        for (std::size_t i = 0; i < horizons.size(); ++i) {
            out << ',';
            if (c.ok && i < c.report.horizons.size())
                out << data::format_double(c.report.horizons[i].rmse);
        }
        out << ',';
        if (c.ok && !c.report.selection.empty())
            out << data::format_double(c.report.selection.front().accuracy);
        out << ',';
        if (c.ok && c.report.has_uncertainty) out << data::format_double(c.report.uncertainty.ause);
        std::string err = c.error;
        std::replace(err.begin(), err.end(), '"', '\'');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out << ",\"" << err << "\"\n";
    }
}

fs::path make_run_dir(const fs::path& root, std::uint64_t seed) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    const std::string base = fmt::format("{}-s{}", stamp, seed);
    fs::path dir = root / base;
    for (int i = 1; fs::exists(dir); ++i) dir = root / fmt::format("{}-{}", base, i);
    fs::create_directories(dir);
    return dir;
}

}  // namespace tecde::exp
