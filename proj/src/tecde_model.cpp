#include "tecde/tecde_model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "tecde/errors.hpp"

namespace tecde::model {

namespace {

constexpr double kTimeTol = 1e-12;

void check_finite(const Tape& tape, Var z, double t, const char* where) {
    for (const double v : tape.value(z)) {
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << where << ": non-finite latent at t=" << t;
            throw NumericError(msg.str());
        }
    }
}

int step_count(double span, double max_step) {
    return std::max(1, static_cast<int>(std::ceil(span / max_step - 1e-9)));
}

// Integrates along `path` from `from` to `to` (either direction), recording
// the latent at each report time.
Var integrate(Tape& tape, const nd::Mlp& field, const nd::DropoutMask* mask, Var z,
              const data::ControlPath& path, double from, double to,
              std::span<const double> report, double max_step, LatentPath& out,
              const char* where) {
    const bool forward = to >= from;
    const double lo = std::min(from, to);
    const double hi = std::max(from, to);
    std::vector<double> cuts{from, to};
    for (const double k : path.times()) {
        if (k > lo && k < hi) cuts.push_back(k);
    }
    for (const double r : report) cuts.push_back(r);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end(),
                           [](double a, double b) { return std::abs(a - b) <= kTimeTol; }),
               cuts.end());
    if (!forward) std::reverse(cuts.begin(), cuts.end());

    std::size_t next_report = 0;
    auto emit = [&](double t) {
        while (next_report < report.size() && std::abs(report[next_report] - t) <= kTimeTol) {
            out.times.push_back(report[next_report]);
            out.vars.push_back(z);
            out.z.push_back(tape.value(z));
            ++next_report;
        }
    };
    emit(cuts.front());
    out.segment_bounds.push_back(cuts.front());
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double a = cuts[i];
        const double b = cuts[i + 1];
        const double left = std::min(a, b);
        if (path.knots() > 1) {
            const auto slope = path.segment_slope(path.segment_of(left));
            const int n = step_count(std::abs(b - a), max_step);
            const double h = (b - a) / n;
            z = rk4_piece(tape, field, mask, z, slope, h, n);
            for (int s = 0; s < n; ++s) out.steps.push_back({a + s * h, s + 1 == n ? b : a + (s + 1) * h});
            check_finite(tape, z, b, where);
        }
        out.segment_bounds.push_back(b);
        emit(b);
    }
    if (next_report != report.size()) {
        throw ArgumentError(std::string(where) + ": report times must be ordered and inside [" +
                            std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return z;
}

nd::Mlp make_field(const ModelConfig& cfg, int channels, Rng& rng) {
    const int l = cfg.latent_dim;
    if (cfg.linear_ablation) return nd::make_mlp({l, l * channels}, nd::Activation::identity, 0.0, rng);
    return nd::make_mlp({l, cfg.hidden_width, l * channels}, nd::Activation::tanh, cfg.dropout, rng);
}

}  // namespace

void ModelConfig::validate() const {
    if (latent_dim <= 0) throw ArgumentError("model.latent_dim must be positive");
    if (hidden_width <= 0) throw ArgumentError("model.hidden_width must be positive");
    if (!(max_step > 0.0)) throw ArgumentError("model.max_step must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ArgumentError("model.dropout must be in [0, 1)");
    if (encoder_channels <= 0) throw ArgumentError("model.encoder_channels must be positive");
}

const std::vector<std::string>& TecdeParams::network_names() {
    static const std::vector<std::string> names{"initial_map",  "encoder_field",
                                                "decoder_field", "outcome_head",
                                                "decoder_outcome_head", "treatment_head"};
    return names;
}

std::vector<nd::Mlp*> TecdeParams::networks() {
    return {&initial_map, &encoder_field, &decoder_field, &outcome_head, &decoder_outcome_head,
            &treatment_head};
}

std::vector<const nd::Mlp*> TecdeParams::networks() const {
    return {&initial_map, &encoder_field, &decoder_field, &outcome_head, &decoder_outcome_head,
            &treatment_head};
}

std::vector<nd::Param*> TecdeParams::params() {
    std::vector<nd::Param*> out;
    for (auto* net : networks()) {
        for (auto* p : net->params()) out.push_back(p);
    }
    return out;
}

bool TecdeParams::finite() const {
    const auto nets = networks();
    return std::all_of(nets.begin(), nets.end(), [](const nd::Mlp* n) { return n->finite(); });
}

TecdeParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    TecdeParams p;
    p.config = cfg;
    const int l = cfg.latent_dim;
    const int h = cfg.hidden_width;
    p.initial_map = nd::make_mlp({cfg.encoder_channels, h, l}, nd::Activation::identity,
                                 cfg.dropout, rng);
    p.encoder_field = make_field(cfg, cfg.encoder_channels, rng);
    p.decoder_field = make_field(cfg, cfg.decoder_channels(), rng);
    p.outcome_head = nd::make_mlp({l, h, 1}, nd::Activation::identity, cfg.dropout, rng);
    p.decoder_outcome_head = p.outcome_head;
    p.treatment_head =
        nd::make_mlp({l, h, kTreatmentClasses}, nd::Activation::softmax, cfg.dropout, rng);
    return p;
}

Masks sample_masks(const TecdeParams& params, Rng& rng) {
    Masks m;
    m.initial = nd::sample_mask(params.initial_map, rng);
    m.encoder = nd::sample_mask(params.encoder_field, rng);
    m.decoder = nd::sample_mask(params.decoder_field, rng);
    m.outcome = nd::sample_mask(params.outcome_head, rng);
    m.decoder_outcome = nd::sample_mask(params.decoder_outcome_head, rng);
    m.treatment = nd::sample_mask(params.treatment_head, rng);
    return m;
}

Var rk4_piece(Tape& tape, const nd::Mlp& field, const nd::DropoutMask* mask, Var z,
              std::span<const double> slope, double h, int steps) {
    const int l = static_cast<int>(tape.value(z).size());
    if (static_cast<std::size_t>(field.out_dim()) != static_cast<std::size_t>(l) * slope.size()) {
        throw ArgumentError("rk4_piece: field output does not match latent x channels");
    }
    auto rhs = [&](Var y) { return tape.matvec_const(nd::mlp_forward(tape, field, y, mask), slope, l); };
    for (int s = 0; s < steps; ++s) {
        const Var k1 = rhs(z);
        const Var y2 = tape.lincomb(std::vector<Var>{z, k1}, std::vector<double>{1.0, h / 2});
        const Var k2 = rhs(y2);
        const Var y3 = tape.lincomb(std::vector<Var>{z, k2}, std::vector<double>{1.0, h / 2});
        const Var k3 = rhs(y3);
        const Var y4 = tape.lincomb(std::vector<Var>{z, k3}, std::vector<double>{1.0, h});
        const Var k4 = rhs(y4);
        z = tape.lincomb(std::vector<Var>{z, k1, k2, k3, k4},
                         std::vector<double>{1.0, h / 6, h / 3, h / 3, h / 6});
    }
    return z;
}

LatentPath encode(Tape& tape, const TecdeParams& params, const data::ControlPath& path, double t0,
                  double t, const Masks* masks) {
    if (path.channels() != params.config.encoder_channels) {
        throw ArgumentError("encode: control path has " + std::to_string(path.channels()) +
                            " channels, model expects " +
                            std::to_string(params.config.encoder_channels));
    }
    if (t0 < path.t_first() || t > path.t_last() || t < t0) {
        throw ArgumentError("encode: [t0, t] outside the control path domain");
    }
    LatentPath out;
    out.source = LatentPath::Source::encoder;
    const auto first = path.evaluate(t0);
    const Var x0 = tape.input(first);
    Var z = nd::mlp_forward(tape, params.initial_map, x0, masks ? &masks->initial : nullptr);
    check_finite(tape, z, t0, "encode");
    std::vector<double> report{t0};
    for (const double k : path.times()) {
        if (k > t0 + kTimeTol && k < t - kTimeTol) report.push_back(k);
    }
    if (t > t0 + kTimeTol) report.push_back(t);
    integrate(tape, params.encoder_field, masks ? &masks->encoder : nullptr, z, path, t0, t, report,
              params.config.max_step, out, "encode");
    return out;
}

LatentPath encode(const TecdeParams& params, const data::ControlPath& path, double t0, double t,
                  const Masks* masks) {
    Tape tape(false);
    return encode(tape, params, path, t0, t, masks);
}

LatentPath encode(const TecdeParams& params, const data::ControlPath& path, const Masks* masks) {
    return encode(params, path, path.t_first(), path.t_last(), masks);
}

LatentPath decode(Tape& tape, const TecdeParams& params, Var z, const data::ControlPath& plan,
                  std::span<const double> query_times, const Masks* masks) {
    if (plan.channels() != params.config.decoder_channels()) {
        throw ArgumentError("decode: plan path has " + std::to_string(plan.channels()) +
                            " channels, model expects " +
                            std::to_string(params.config.decoder_channels()));
    }
    for (std::size_t i = 0; i < query_times.size(); ++i) {
        if (query_times[i] < plan.t_first() - kTimeTol) {
            throw ArgumentError("decode: query time before the branch time");
        }
        if (query_times[i] > plan.t_last() + kTimeTol) {
            throw ArgumentError("decode: query time beyond the plan");
        }
        if (i > 0 && query_times[i] < query_times[i - 1]) {
            throw ArgumentError("decode: query times must be nondecreasing");
        }
    }
    LatentPath out;
    out.source = LatentPath::Source::decoder;
    const double end = query_times.empty() ? plan.t_first() : query_times.back();
    integrate(tape, params.decoder_field, masks ? &masks->decoder : nullptr, z, plan, plan.t_first(),
              end, query_times, params.config.max_step, out, "decode");
    return out;
}

LatentPath decode(const TecdeParams& params, std::span<const double> z,
                  const data::ControlPath& plan, std::span<const double> query_times,
                  const Masks* masks) {
    Tape tape(false);
    const Var zv = tape.input({z.begin(), z.end()});
    return decode(tape, params, zv, plan, query_times, masks);
}

std::vector<double> invert_decode(const TecdeParams& params, std::span<const double> z_end,
                                  const data::ControlPath& plan, const Masks* masks) {
    if (plan.channels() != params.config.decoder_channels()) {
        throw ArgumentError("invert_decode: plan channel mismatch");
    }
    Tape tape(false);
    LatentPath out;
    out.source = LatentPath::Source::inverse;
    const Var z = tape.input({z_end.begin(), z_end.end()});
    const Var z0 = integrate(tape, params.decoder_field, masks ? &masks->decoder : nullptr, z, plan,
                             plan.t_last(), plan.t_first(), {}, params.config.max_step, out,
                             "invert_decode");
    return tape.value(z0);
}

Var predict_outcome(Tape& tape, const TecdeParams& params, Var z, const Masks* masks) {
    return nd::mlp_forward(tape, params.outcome_head, z, masks ? &masks->outcome : nullptr);
}

Var predict_decoder_outcome(Tape& tape, const TecdeParams& params, Var z, const Masks* masks) {
    return nd::mlp_forward(tape, params.decoder_outcome_head, z,
                           masks ? &masks->decoder_outcome : nullptr);
}

Var predict_treatment(Tape& tape, const TecdeParams& params, Var z, const Masks* masks) {
    return nd::mlp_forward(tape, params.treatment_head, z, masks ? &masks->treatment : nullptr);
}

double predict_outcome(const TecdeParams& params, std::span<const double> z) {
    Tape tape(false);
    return tape.scalar(predict_outcome(tape, params, tape.input({z.begin(), z.end()})));
}

double predict_decoder_outcome(const TecdeParams& params, std::span<const double> z) {
    Tape tape(false);
    return tape.scalar(predict_decoder_outcome(tape, params, tape.input({z.begin(), z.end()})));
}

std::vector<double> predict_treatment(const TecdeParams& params, std::span<const double> z) {
    Tape tape(false);
    return tape.value(predict_treatment(tape, params, tape.input({z.begin(), z.end()})));
}

void write_checkpoint(std::ostream& out, const TecdeParams& params) {
    const auto& c = params.config;
    out << "config latent_dim " << c.latent_dim << " hidden_width " << c.hidden_width
        << " max_step " << data::format_double(c.max_step) << " decoder_time_channel "
        << (c.decoder_time_channel ? 1 : 0) << " linear_ablation " << (c.linear_ablation ? 1 : 0)
        << " dropout " << data::format_double(c.dropout) << " encoder_channels "
        << c.encoder_channels << '\n';
    std::vector<nd::NamedNet> nets;
    const auto& names = TecdeParams::network_names();
    const auto ptrs = params.networks();
    for (std::size_t i = 0; i < ptrs.size(); ++i) nets.push_back({names[i], ptrs[i]});
    nd::write_networks(out, nets);
}

TecdeParams read_checkpoint(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw IoError("checkpoint: empty file");
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "config") throw IoError("checkpoint line 1: expected model config");
    TecdeParams p;
    auto& c = p.config;
    std::string key;
    while (ls >> key) {
        std::string value;
        if (!(ls >> value)) throw IoError("checkpoint line 1: missing value for '" + key + "'");
        if (key == "latent_dim") c.latent_dim = std::stoi(value);
        else if (key == "hidden_width") c.hidden_width = std::stoi(value);
        else if (key == "max_step") c.max_step = std::stod(value);
        else if (key == "decoder_time_channel") c.decoder_time_channel = value == "1";
        else if (key == "linear_ablation") c.linear_ablation = value == "1";
        else if (key == "dropout") c.dropout = std::stod(value);
        else if (key == "encoder_channels") c.encoder_channels = std::stoi(value);
        else throw IoError("checkpoint line 1: unknown key '" + key + "'");
    }
    c.validate();
    auto nets = nd::read_networks(in, TecdeParams::network_names());
    const auto ptrs = p.networks();
    for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = std::move(nets[i]);
    return p;
}

}  // namespace tecde::model
