#include "tecde/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tecde/errors.hpp"

namespace tecde::data {

namespace {

constexpr std::array<std::string_view, kNumPlans> kPlanNames{"none", "chemo", "radio", "both"};

class JsonLine {
public:
    JsonLine& key(std::string_view k) {
        comma();
        out_ += '"';
        out_ += k;
        out_ += "\":";
        fresh_ = true;
        return *this;
    }
    JsonLine& num(double x) {
        comma();
        out_ += format_double(x);
        return *this;
    }
    JsonLine& integer(long long x) {
        comma();
        out_ += std::to_string(x);
        return *this;
    }
    JsonLine& str(std::string_view s) {
        comma();
        out_ += '"';
        for (char ch : s) {
            if (ch == '"' || ch == '\\') out_ += '\\';
            out_ += ch;
        }
        out_ += '"';
        return *this;
    }
    JsonLine& boolean(bool b) {
        comma();
        out_ += b ? "true" : "false";
        return *this;
    }
    JsonLine& open(char bracket) {
        comma();
        out_ += bracket;
        fresh_ = true;
        return *this;
    }
    JsonLine& close(char bracket) {
        out_ += bracket;
        fresh_ = false;
        return *this;
    }
    template <typename Range>
    JsonLine& nums(const Range& xs) {
        open('[');
        for (double x : xs) num(x);
        return close(']');
    }
    template <typename Range>
    JsonLine& ints(const Range& xs) {
        open('[');
        for (auto x : xs) integer(x);
        return close(']');
    }
    std::string take() { return std::move(out_); }

private:
    void comma() {
        if (!fresh_) out_ += ',';
        fresh_ = false;
    }
    std::string out_;
    bool fresh_ = true;
};

std::string header_line(const DatasetHeader& h) {
    JsonLine j;
    j.open('{');
    j.key("schema").str(h.schema);
    j.key("split").str(h.split);
    j.key("gamma").open('{').key("chemo").num(h.gamma_c).key("radio").num(h.gamma_r).close('}');
    if (h.hawkes.policy == sim::KappaPolicy::constant) {
        j.key("kappa").num(h.hawkes.kappa);
    } else {
        j.key("kappa")
            .open('{')
            .key("treated")
            .num(h.hawkes.kappa_treated)
            .key("untreated")
            .num(h.hawkes.kappa_untreated)
            .close('}');
    }
    j.key("self_excitation").boolean(h.hawkes.self_excitation);
    j.key("horizon").integer(h.horizon);
    j.key("delta").num(h.delta);
    j.key("seed").integer(static_cast<long long>(h.seed));
    j.key("v_max").num(h.v_max);
    j.key("counts").open('{').key("patients").integer(h.patients).close('}');
    j.key("norm")
        .open('{')
        .key("volume")
        .num(h.norm.volume_scale)
        .key("time")
        .num(h.norm.time_scale)
        .key("count")
        .num(h.norm.count_scale)
        .close('}');
    j.key("channels").open('[');
    for (const auto& c : h.channels) j.str(c);
    j.close(']');
    j.key("cf_horizons").ints(h.cf_horizons);
    j.close('}');
    return j.take();
}

std::string record_line(const PatientRecord& r) {
    JsonLine j;
    j.open('{');
    j.key("id").integer(r.id);
    j.key("group").integer(r.group);
    j.key("obs").open('[');
    for (const auto& o : r.obs.records) {
        j.open('{');
        j.key("t").num(o.t);
        j.key("x").nums(o.x);
        j.key("a").ints(o.a);
        j.key("y").num(o.y);
        j.key("c").ints(o.c);
        j.close('}');
    }
    j.close(']');
    j.key("dense").open('{');
    j.key("v").nums(r.dense.v);
    j.key("a").open('[');
    for (const auto& a : r.dense.a) j.open('[').integer(a.chemo).integer(a.radio).close(']');
    j.close(']');
    j.key("stage").ints(r.dense.stage);
    j.close('}');
    j.key("cf_labels").open('{');
    for (const auto& [k, v] : r.cf_labels) j.key(k).nums(v);
    j.close('}');
    j.close('}');
    return j.take();
}

using nlohmann::json;

DatasetHeader parse_header(const json& j) {
    DatasetHeader h;
    h.schema = j.at("schema").get<std::string>();
    if (h.schema != kSchema) {
        throw IoError("unsupported schema '" + h.schema + "', expected '" + std::string(kSchema) +
                      "'");
    }
    h.split = j.at("split").get<std::string>();
    h.gamma_c = j.at("gamma").at("chemo").get<double>();
    h.gamma_r = j.at("gamma").at("radio").get<double>();
    const auto& kappa = j.at("kappa");
    if (kappa.is_number()) {
        h.hawkes.policy = sim::KappaPolicy::constant;
        h.hawkes.kappa = kappa.get<double>();
    } else {
        h.hawkes.policy = sim::KappaPolicy::treatment_conditioned;
        h.hawkes.kappa_treated = kappa.at("treated").get<double>();
        h.hawkes.kappa_untreated = kappa.at("untreated").get<double>();
    }
    h.hawkes.self_excitation = j.at("self_excitation").get<bool>();
    h.horizon = j.at("horizon").get<int>();
    h.delta = j.at("delta").get<double>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.v_max = j.at("v_max").get<double>();
    h.patients = j.at("counts").at("patients").get<int>();
    h.norm.volume_scale = j.at("norm").at("volume").get<double>();
    h.norm.time_scale = j.at("norm").at("time").get<double>();
    h.norm.count_scale = j.at("norm").at("count").get<double>();
    h.channels = j.at("channels").get<std::vector<std::string>>();
    if (h.channels != encoder_channel_names()) throw IoError("channel layout mismatch");
    h.cf_horizons = j.at("cf_horizons").get<std::vector<int>>();
    return h;
}

PatientRecord parse_record(const json& j) {
    PatientRecord r;
    r.id = j.at("id").get<int>();
    r.group = j.at("group").get<int>();
    r.obs.patient_id = r.id;
    for (const auto& o : j.at("obs")) {
        sim::ObservationRecord rec;
        rec.t = o.at("t").get<double>();
        const auto x = o.at("x").get<std::vector<double>>();
        const auto a = o.at("a").get<std::vector<int>>();
        const auto c = o.at("c").get<std::vector<int>>();
        if (x.size() != rec.x.size() || a.size() != rec.a.size() || c.size() != rec.c.size()) {
            throw IoError("observation field has wrong length");
        }
        std::copy(x.begin(), x.end(), rec.x.begin());
        std::copy(a.begin(), a.end(), rec.a.begin());
        std::copy(c.begin(), c.end(), rec.c.begin());
        rec.y = o.at("y").get<double>();
        r.obs.records.push_back(rec);
    }
    const auto& d = j.at("dense");
    r.dense.v = d.at("v").get<std::vector<double>>();
    for (const auto& a : d.at("a")) {
        if (a.size() != 2) throw IoError("dense treatment must be a pair");
        r.dense.a.push_back({a[0].get<int>(), a[1].get<int>()});
    }
    r.dense.stage = d.at("stage").get<std::vector<int>>();
    if (r.dense.a.size() != r.dense.v.size() || r.dense.stage.size() != r.dense.v.size()) {
        throw IoError("dense series lengths differ");
    }
    for (const auto& [k, v] : j.at("cf_labels").items()) {
        r.cf_labels[k] = v.get<std::vector<double>>();
    }
    return r;
}

}  // namespace

std::string format_double(double x) {
    if (!std::isfinite(x)) throw IoError("cannot serialize non-finite value");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<std::string> encoder_channel_names() {
    std::vector<std::string> names{"volume", "stage", "group1", "group2", "group3",
                                   "a_chemo", "a_radio", "outcome"};
    for (int i = 0; i < sim::kCountChannels; ++i) names.push_back("count" + std::to_string(i));
    names.push_back("time");
    return names;
}

Channel channel_from_name(std::string_view name) {
    if (name == "volume") return Channel::volume;
    if (name == "stage") return Channel::stage;
    if (name == "group" || name == "group1" || name == "group2" || name == "group3") {
        return Channel::group;
    }
    if (name == "a_chemo" || name == "a_radio" || name == "treatment") return Channel::treatment;
    if (name == "outcome") return Channel::outcome;
    if (name == "time") return Channel::time;
    if (name.starts_with("count")) return Channel::count;
    throw ArgumentError("unknown channel '" + std::string(name) + "'");
}

double Normalizer::scale(Channel ch) const {
    switch (ch) {
        case Channel::volume:
        case Channel::outcome:
            return volume_scale;
        case Channel::time:
            return time_scale;
        case Channel::count:
            return count_scale;
        case Channel::stage:
        case Channel::group:
        case Channel::treatment:
            return 1.0;
    }
    throw ArgumentError("unknown channel");
}

ControlPath::ControlPath(std::vector<double> times, std::vector<double> values, int channels,
                         Interpolation kind)
    : times_(std::move(times)), values_(std::move(values)), channels_(channels), kind_(kind) {
    if (times_.empty()) throw ArgumentError("ControlPath: no knots");
    if (channels_ <= 0 || values_.size() != times_.size() * static_cast<std::size_t>(channels_)) {
        throw ArgumentError("ControlPath: value array does not match knots x channels");
    }
    if (kind_ != Interpolation::linear) {
        throw ArgumentError("ControlPath: only linear interpolation is implemented");
    }
    for (std::size_t i = 1; i < times_.size(); ++i) {
        if (!(times_[i] > times_[i - 1])) {
            throw ArgumentError("ControlPath: knot times must be strictly increasing");
        }
    }
}

std::span<const double> ControlPath::knot(std::size_t i) const {
    return {values_.data() + i * channels_, static_cast<std::size_t>(channels_)};
}

std::size_t ControlPath::segment_of(double t) const {
    if (times_.size() < 2) return 0;
    const auto it = std::upper_bound(times_.begin(), times_.end(), t);
    std::size_t seg = it == times_.begin() ? 0 : static_cast<std::size_t>(it - times_.begin()) - 1;
    return std::min(seg, times_.size() - 2);
}

std::vector<double> ControlPath::evaluate(double t) const {
    if (t < t_first() || t > t_last()) throw ArgumentError("ControlPath: time outside domain");
    if (times_.size() == 1) return {values_.begin(), values_.end()};
    const std::size_t s = segment_of(t);
    if (t == times_[s]) return {knot(s).begin(), knot(s).end()};
    if (t == times_[s + 1]) return {knot(s + 1).begin(), knot(s + 1).end()};
    const double w = (t - times_[s]) / (times_[s + 1] - times_[s]);
    const auto a = knot(s);
    const auto b = knot(s + 1);
    std::vector<double> out(channels_);
    for (int c = 0; c < channels_; ++c) out[c] = a[c] + w * (b[c] - a[c]);
    return out;
}

std::vector<double> ControlPath::segment_slope(std::size_t i) const {
    std::vector<double> out(channels_, 0.0);
    if (times_.size() < 2) return out;
    const auto a = knot(i);
    const auto b = knot(i + 1);
    const double dt = times_[i + 1] - times_[i];
    for (int c = 0; c < channels_; ++c) out[c] = (b[c] - a[c]) / dt;
    return out;
}

std::vector<double> ControlPath::derivative(double t) const {
    if (t < t_first() || t > t_last()) throw ArgumentError("ControlPath: time outside domain");
    return segment_slope(segment_of(t));
}

ControlPath ControlPath::prefix(std::size_t k) const {
    if (k == 0 || k > times_.size()) throw ArgumentError("ControlPath::prefix: bad knot count");
    return ControlPath({times_.begin(), times_.begin() + k},
                       {values_.begin(), values_.begin() + k * channels_}, channels_, kind_);
}

ControlPath build_control_path(const sim::ObservationSeries& obs, const Normalizer& norm) {
    if (obs.records.empty()) throw ArgumentError("build_control_path: empty observation series");
    std::vector<double> times;
    std::vector<double> values;
    times.reserve(obs.size());
    values.reserve(obs.size() * kEncoderChannels);
    for (const auto& r : obs.records) {
        times.push_back(norm.normalize(r.t, Channel::time));
        values.push_back(norm.normalize(r.x[0], Channel::volume));
        values.push_back(norm.normalize(r.x[1], Channel::stage));
        for (int g = 0; g < 3; ++g) values.push_back(r.x[2 + g]);
        values.push_back(r.a[0]);
        values.push_back(r.a[1]);
        values.push_back(norm.normalize(r.y, Channel::outcome));
        for (const int c : r.c) values.push_back(norm.normalize(c, Channel::count));
        values.push_back(norm.normalize(r.t, Channel::time));
    }
    return ControlPath(std::move(times), std::move(values), kEncoderChannels);
}

sim::TreatmentPair DenseSummary::treatment_on(int day) const {
    if (day < 0) return {};
    return a[static_cast<std::size_t>(std::min(day, horizon()))];
}

bool DenseSummary::any_treatment() const {
    return std::any_of(a.begin(), a.end(),
                       [](const sim::TreatmentPair& p) { return p.chemo != 0 || p.radio != 0; });
}

std::string_view plan_name(int plan) {
    if (plan < 0 || plan >= kNumPlans) throw ArgumentError("plan index out of range");
    return kPlanNames[static_cast<std::size_t>(plan)];
}

sim::TreatmentPair plan_treatment(int plan) {
    if (plan < 0 || plan >= kNumPlans) throw ArgumentError("plan index out of range");
    return {plan & 1, (plan >> 1) & 1};
}

std::string cf_label_key(int horizon_n, int plan) {
    return "n" + std::to_string(horizon_n) + "/" + std::string(plan_name(plan));
}

ControlPath build_plan_path(double t_from, double t_to,
                            const std::function<sim::TreatmentPair(int)>& treatment_on_day,
                            const Normalizer& norm, bool time_channel) {
    if (t_to < t_from) throw ArgumentError("build_plan_path: end before start");
    const int channels = time_channel ? 3 : 2;
    // Value of the dose-aligned treatment path at time s.
    auto value_at = [&](double s, std::vector<double>& out) {
        const double day = std::floor(s);
        const double w = s - day;
        const auto prev = treatment_on_day(static_cast<int>(day) - 1);
        const auto cur = treatment_on_day(static_cast<int>(day));
        out.push_back(prev.chemo + w * (cur.chemo - prev.chemo));
        out.push_back(prev.radio + w * (cur.radio - prev.radio));
        if (time_channel) out.push_back(norm.normalize(s, Channel::time));
    };
    std::vector<double> days{t_from};
    for (double d = std::floor(t_from) + 1.0; d < t_to; d += 1.0) days.push_back(d);
    if (t_to > t_from) days.push_back(t_to);

    std::vector<double> times;
    std::vector<double> values;
    for (const double d : days) {
        times.push_back(norm.normalize(d, Channel::time));
        value_at(d, values);
    }
    return ControlPath(std::move(times), std::move(values), channels);
}

ControlPath build_branch_plan_path(const DenseSummary& dense, double t_branch, double t_to,
                                   int plan, const Normalizer& norm, bool time_channel) {
    const int first_plan_day = static_cast<int>(std::floor(t_branch)) + 1;
    const auto a = plan_treatment(plan);
    return build_plan_path(
        t_branch, t_to,
        [&](int day) { return day >= first_plan_day ? a : dense.treatment_on(day); }, norm,
        time_channel);
}

ControlPath build_factual_plan_path(const DenseSummary& dense, double t_from, double t_to,
                                    const Normalizer& norm, bool time_channel) {
    return build_plan_path(
        t_from, t_to, [&](int day) { return dense.treatment_on(day); }, norm, time_channel);
}

std::map<std::string, std::vector<double>> counterfactual_labels(
    const sim::DenseTrajectory& traj, const sim::ObservationSeries& obs,
    std::span<const int> horizons) {
    std::map<std::string, std::vector<double>> labels;
    const auto m = static_cast<int>(obs.size());
    const int horizon = traj.horizon();
    for (const int n : horizons) {
        for (int plan = 0; plan < kNumPlans; ++plan) {
            auto& out = labels[cf_label_key(n, plan)];
            for (int k = 0; k + n < m; ++k) {
                const double t_k = obs.records[k].t;
                const double t_target = obs.records[k + n].t;
                const int branch = static_cast<int>(std::floor(t_k)) + 1;
                if (t_target <= branch || branch > horizon) {
                    out.push_back(traj.volume_at(t_target));
                    continue;
                }
                const int end = std::min(horizon, static_cast<int>(std::ceil(t_target)));
                const auto cf = sim::simulate_counterfactual(
                    traj, branch, sim::TreatmentPlan::sustained(branch, end, plan_treatment(plan)));
                out.push_back(cf.volume_at(t_target));
            }
        }
    }
    return labels;
}

PatientRecord make_record(const sim::DenseTrajectory& traj, const sim::ObservationSeries& obs,
                          std::span<const int> horizons) {
    PatientRecord r;
    r.id = obs.patient_id;
    r.group = traj.params.group;
    r.obs = obs;
    for (const auto& s : traj.grid) {
        r.dense.v.push_back(s.v);
        r.dense.a.push_back({s.a_chemo, s.a_radio});
    }
    r.dense.stage = traj.stages;
    r.cf_labels = counterfactual_labels(traj, obs, horizons);
    return r;
}

Dataset simulate_split(const SimConfig& cfg, std::string_view split, int split_index, int count) {
    if (count < 0) throw ArgumentError("simulate_split: negative patient count");
    cfg.hawkes.validate();
    Dataset ds;
    auto& h = ds.header;
    h.split = std::string(split);
    h.gamma_c = cfg.gamma_c;
    h.gamma_r = cfg.gamma_r;
    h.hawkes = cfg.hawkes;
    h.horizon = cfg.horizon;
    h.seed = cfg.seed;
    h.patients = count;
    h.norm.time_scale = cfg.horizon;
    h.norm.count_scale = cfg.count_scale;
    h.cf_horizons = cfg.cf_horizons;
    ds.records.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto stream = static_cast<std::uint64_t>(split_index) * 1000003ULL + i;
        Rng patient_rng(substream_seed(cfg.seed, stream, 0));
        Rng obs_rng(substream_seed(cfg.seed, stream, 1));
        const auto params = sim::sample_patient(patient_rng);
        const auto traj =
            sim::simulate_factual(params, cfg.gamma_c, cfg.gamma_r, cfg.horizon, patient_rng);
        const auto obs = sim::sample_observations(traj, cfg.hawkes, obs_rng, i);
        ds.records.push_back(make_record(traj, obs, cfg.cf_horizons));
    }
    return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    auto header = dataset.header;
    header.patients = static_cast<int>(dataset.records.size());
    out << header_line(header) << '\n';
    for (const auto& r : dataset.records) out << record_line(r) << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    Dataset ds;
    std::string line;
    int lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            if (!have_header) {
                ds.header = parse_header(j);
                have_header = true;
            } else {
                ds.records.push_back(parse_record(j));
            }
        } catch (const std::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!have_header) throw IoError(path.string() + ": missing header line");
    if (static_cast<int>(ds.records.size()) != ds.header.patients) {
        throw IoError(path.string() + ": header declares " + std::to_string(ds.header.patients) +
                      " patients, found " + std::to_string(ds.records.size()));
    }
    return ds;
}

}  // namespace tecde::data
