#pragma once

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfm/ctmc.hpp"
#include "dfm/errors.hpp"
#include "dfm/extension.hpp"
#include "dfm/harness.hpp"
#include "dfm/mixture.hpp"
#include "dfm/model.hpp"
#include "dfm/states.hpp"
#include "dfm/trainer.hpp"

namespace dfm::io {

using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "dfm-transformer-v1";
inline constexpr const char* kParameterOrder =
    "E_pos (d0 x L); then per block: per head W_K (s x d0), W_Q (s x d0), W_V (s x d0), W_O (d0 x s); "
    "W_1 (r x d0), b_1 (r), W_2 (d0 x r), b_2 (d0). Matrices column-major.";

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline json to_json(const State& s) { return s.tokens; }
inline State state_from_json(const json& j) { return State{j.get<std::vector<int>>()}; }

inline json to_json(const StateSpace& s) { return {{"M", s.vocab()}, {"d", s.length()}}; }
inline StateSpace space_from_json(const json& j) { return StateSpace(j.at("M").get<int>(), j.at("d").get<int>()); }

inline json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline Vector vector_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Row-major nested arrays.
inline json to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_json(Vector(m.row(r).transpose())));
    return rows;
}
inline Matrix matrix_from_json(const json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != cols) throw DomainError("ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

/// A distribution is either a dense array over the codec order, "uniform", or
/// {"support": [{"state": [...], "p": w}, ...]} / {"point": [...]}.
inline Vector distribution_from_json(const StateSpace& space, const json& j) {
    const auto n = static_cast<Eigen::Index>(space.size());
    if (j.is_string()) {
        if (j.get<std::string>() != "uniform") throw DomainError("unknown distribution '" + j.get<std::string>() + "'");
        return Vector::Constant(n, 1.0 / static_cast<double>(n));
    }
    if (j.is_array()) {
        Vector v = vector_from_json(j);
        if (v.size() != n) throw DomainError("dense distribution has the wrong length");
        return v;
    }
    Vector v = Vector::Zero(n);
    if (j.contains("point")) {
        v(static_cast<Eigen::Index>(index_of(space, state_from_json(j.at("point"))))) = 1.0;
        return v;
    }
    for (const auto& e : j.at("support"))
        v(static_cast<Eigen::Index>(index_of(space, state_from_json(e.at("state"))))) += e.at("p").get<double>();
    return v;
}

inline json to_json(const TimeClip& c) { return {{"t0", c.t0}, {"T", c.T}}; }
inline TimeClip clip_from_json(const json& j) { return TimeClip(j.value("t0", 0.05), j.value("T", 0.95)); }

inline json to_json(const MixturePathSpec& s) {
    return {{"space", to_json(s.space)},
            {"schedule", to_string(s.schedule.kind())},
            {"p0", to_json(s.p0)},
            {"p1", to_json(s.p1)},
            {"clip", to_json(s.clip)}};
}

inline MixturePathSpec spec_from_json(const json& j) {
    const StateSpace space = space_from_json(j.at("space"));
    return MixturePathSpec(space, KappaSchedule(schedule_from_string(j.value("schedule", std::string("linear")))),
                           distribution_from_json(space, j.at("p0")), distribution_from_json(space, j.at("p1")),
                           j.contains("clip") ? clip_from_json(j.at("clip")) : TimeClip{});
}

// ---------------------------------------------------------------------------
// Model and training configuration
// ---------------------------------------------------------------------------

inline json to_json(const ModelConfig& c) {
    return {{"d0", c.d0}, {"L", c.L}, {"heads", c.heads}, {"s", c.s}, {"r", c.r}, {"n_blocks", c.n_blocks}};
}
inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.d0 = j.value("d0", c.d0);
    c.L = j.value("L", c.L);
    c.heads = j.value("heads", c.heads);
    c.s = j.value("s", c.s);
    c.r = j.value("r", c.r);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    return c;
}

inline json to_json(const TrainConfig& c) {
    return {{"n_samples", c.n_samples},
            {"mc_draws", c.mc_draws},
            {"time_points", c.time_points},
            {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"lr_final_fraction", c.lr_final_fraction},
            {"clip", to_json(c.clip)}};
}
inline TrainConfig train_config_from_json(const json& j, const TimeClip& clip) {
    TrainConfig c;
    c.n_samples = j.value("n_samples", c.n_samples);
    c.mc_draws = j.value("mc_draws", c.mc_draws);
    c.time_points = j.value("time_points", c.time_points);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        c.adam.lr = a.value("lr", c.adam.lr);
        c.adam.beta1 = a.value("beta1", c.adam.beta1);
        c.adam.beta2 = a.value("beta2", c.adam.beta2);
        c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.lr_final_fraction = j.value("lr_final_fraction", c.lr_final_fraction);
    c.clip = clip;
    c.validate();
    return c;
}

inline ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig c;
    c.kind = experiment_from_string(j.value("kind", std::string("bound-check")));
    const auto& sj = j.at("spec");
    c.space = space_from_json(sj.at("space"));
    c.schedule = schedule_from_string(sj.value("schedule", std::string("linear")));
    c.p0 = distribution_from_json(c.space, sj.at("p0"));
    c.p1 = distribution_from_json(c.space, sj.at("p1"));
    c.clip = sj.contains("clip") ? clip_from_json(sj.at("clip")) : TimeClip{};
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    c.train = train_config_from_json(j.value("train", json::object()), c.clip);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.out_dir = j.value("out_dir", c.out_dir);
    c.estimator = estimator_from_string(j.value("estimator", to_string(c.estimator)));
    c.perturbation = j.value("perturbation", c.perturbation);
    c.ode_steps = j.value("ode_steps", c.ode_steps);
    c.risk_grid = j.value("risk_grid", c.risk_grid);
    c.mc_paths = j.value("mc_paths", c.mc_paths);
    c.euler_h = j.value("euler_h", c.euler_h);
    if (j.contains("n_grid")) c.n_grid = j.at("n_grid").get<std::vector<std::size_t>>();
    c.sweep_steps = j.value("sweep_steps", c.sweep_steps);
    c.extension_times = j.value("extension_times", c.extension_times);
    c.extension_pairs = j.value("extension_pairs", c.extension_pairs);
    c.n_paths = j.value("n_paths", c.n_paths);
    c.n_trajectories = j.value("n_trajectories", c.n_trajectories);
    c.validate();
    return c;
}

inline json to_json(const ExperimentConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"spec", to_json(c.spec())},
            {"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"seeds", c.seeds},
            {"out_dir", c.out_dir},
            {"estimator", to_string(c.estimator)},
            {"perturbation", c.perturbation},
            {"ode_steps", c.ode_steps},
            {"risk_grid", c.risk_grid},
            {"mc_paths", c.mc_paths},
            {"euler_h", c.euler_h},
            {"n_grid", c.n_grid},
            {"sweep_steps", c.sweep_steps},
            {"extension_times", c.extension_times},
            {"extension_pairs", c.extension_pairs},
            {"n_paths", c.n_paths},
            {"n_trajectories", c.n_trajectories}};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline json checkpoint(const TransformerModel& m) {
    const auto p = m.parameters();
    return {{"format", kCheckpointFormat},
            {"config", to_json(m.config())},
            {"space", to_json(m.space())},
            {"coordinate", m.coordinate()},
            {"parameter_order", kParameterOrder},
            {"parameters", std::vector<double>(p.begin(), p.end())}};
}

inline TransformerModel model_from_checkpoint(const json& j) {
    if (j.value("format", std::string()) != kCheckpointFormat) throw DomainError("not a transformer checkpoint");
    TransformerModel m(model_config_from_json(j.at("config")), space_from_json(j.at("space")),
                       j.at("coordinate").get<int>());
    const auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != m.parameter_count())
        throw DomainError("checkpoint has " + std::to_string(params.size()) + " parameters, layout needs " +
                          std::to_string(m.parameter_count()));
    std::copy(params.begin(), params.end(), m.parameters().begin());
    return m;
}

// ---------------------------------------------------------------------------
// Extension tables: {"space": {...}, "times": [...], "table": [{"state": [...], "values": [[u at t_0], ...]}]}
// ---------------------------------------------------------------------------

inline ExtensionField extension_from_json(const json& j) {
    const StateSpace space = space_from_json(j.at("space"));
    const auto times = j.at("times").get<std::vector<double>>();
    const auto& table = j.at("table");
    if (table.size() != space.size()) throw DomainError("extension table must list every state exactly once");
    std::vector<Matrix> values(times.size());
    std::vector<bool> seen(space.size(), false);
    for (const auto& e : table) {
        const StateIndex s = index_of(space, state_from_json(e.at("state")));
        if (seen[s]) throw DomainError("extension table lists a state twice");
        seen[s] = true;
        const auto& per_t = e.at("values");
        if (per_t.size() != times.size()) throw DomainError("extension table entry has the wrong number of times");
        for (std::size_t k = 0; k < times.size(); ++k) {
            const Vector v = vector_from_json(per_t.at(k));
            if (values[k].size() == 0) values[k] = Matrix::Zero(v.size(), static_cast<Eigen::Index>(space.size()));
            if (v.size() != values[k].rows()) throw DomainError("extension table values have inconsistent length");
            values[k].col(static_cast<Eigen::Index>(s)) = v;
        }
    }
    return ExtensionField(space, times, std::move(values));
}

inline json to_json(const ExtensionField& f) {
    json table = json::array();
    for (StateIndex s = 0; s < f.space().size(); ++s) {
        json per_t = json::array();
        for (const auto& v : f.values()) per_t.push_back(to_json(Vector(v.col(static_cast<Eigen::Index>(s)))));
        table.push_back({{"state", to_json(state_of(f.space(), s))}, {"values", per_t}});
    }
    return {{"space", to_json(f.space())}, {"times", f.times()}, {"table", table}};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json to_json(const RiskReport& r) {
    return {{"coordinate", r.coordinate},
            {"risk", r.risk},
            {"grid", r.grid},
            {"m_u_estimate", r.m_u_estimate},
            {"m_u_true", r.m_u_true}};
}

inline json to_json(const NormReport& n) {
    return {{"C_KQ", n.c_kq},     {"C_KQ_2inf", n.c_kq_2inf}, {"C_OV", n.c_ov},
            {"C_OV_2inf", n.c_ov_2inf}, {"C_F", n.c_f},   {"C_F_2inf", n.c_f_2inf},
            {"C_E", n.c_e},       {"B_X", n.b_x},             {"B_X_observed", n.b_x_observed},
            {"L_T_bound", n.l_t_bound}};
}

inline json to_json(const BoundForms& b) {
    return {{"factorized", b.factorized}, {"general", b.general}, {"ratio", b.ratio}};
}

inline json to_json(const BoundReport& r) {
    return {{"estimator", r.estimator},
            {"seed", r.seed},
            {"risks", r.risks},
            {"tv_exact", r.tv_exact},
            {"tv_mc", r.tv_mc},
            {"gap_integral", r.gap_integral},
            {"tolerance", kBoundTolerance},
            {"slack", r.slack},
            {"m_u_estimate", r.m_u_estimate},
            {"m_u_true", r.m_u_true},
            {"m_u", r.m_u},
            {"coefficient_sup", r.coefficient_sup},
            {"rhs_forms", to_json(r.forms)},
            {"stochastic_ok", r.stochastic_ok},
            {"simplex_ok", r.simplex_ok},
            {"bound_ok", r.bound_ok},
            {"pass", r.pass},
            {"failures", r.failures}};
}

inline json to_json(const RateSweepReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"n", row.n},
                        {"risks", row.risks},
                        {"tvs", row.tvs},
                        {"median_risk", row.median_risk},
                        {"median_tv", row.median_tv}});
    return {{"rows", rows}, {"slope", r.slope}, {"monotone", r.monotone}, {"pass", r.pass}};
}

inline json to_json(const ExtensionLipschitzReport& r) {
    return {{"empirical", r.empirical}, {"bound", r.bound},         {"L_u", r.l_u},
            {"M_u", r.m_u},             {"table_L_u", r.table_l_u}, {"table_M_u", r.table_m_u},
            {"n_pairs", r.n_pairs},     {"pass", r.pass}};
}

inline json to_json(const ExtensionCheckReport& r) {
    return {{"lipschitz", to_json(r.lipschitz)},
            {"interpolation_points", r.interpolation_points},
            {"interpolation_mismatches", r.interpolation_mismatches},
            {"pass", r.pass}};
}

inline json to_json(const SimulationReport& r) {
    return {{"empirical", to_json(r.empirical)}, {"exact", to_json(r.exact)}, {"tv", r.tv},
            {"rates_ok", r.rates_ok},           {"simplex_ok", r.simplex_ok}, {"pass", r.pass}};
}

inline json to_json(const EpochLog& e) { return {{"epoch", e.epoch}, {"loss", e.loss}, {"wallclock", e.wallclock}}; }

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return json::parse(in);
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

inline void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline void write_json_lines(const std::string& path, const std::vector<json>& lines) {
    std::ostringstream os;
    for (const auto& l : lines) os << l.dump() << '\n';
    write_text(path, os.str());
}

/// Minimal CSV writer: header plus rows, numbers printed with 17 significant digits.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    template <class... Ts>
    void row(const Ts&... cells) {
        std::ostringstream os;
        os << std::setprecision(17);
        bool first = true;
        ((os << (first ? "" : ",") << cells, first = false), ...);
        rows_.push_back(os.str());
    }

    std::string str() const {
        std::ostringstream os;
        for (std::size_t k = 0; k < header_.size(); ++k) os << (k ? "," : "") << header_[k];
        os << '\n';
        for (const auto& r : rows_) os << r << '\n';
        return os.str();
    }

    void write(const std::string& path) const { write_text(path, str()); }

private:
    std::vector<std::string> header_;
    std::vector<std::string> rows_;
};

inline std::string state_label(const State& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "-" : "") + std::to_string(s[i]);
    return out;
}

} // namespace dfm::io
