#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dfm/ctmc.hpp"
#include "dfm/errors.hpp"
#include "dfm/extension.hpp"
#include "dfm/mixture.hpp"
#include "dfm/model.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"
#include "dfm/trainer.hpp"

namespace dfm {

enum class ExperimentKind { bound_check, rate_sweep, extension_check, simulate };
enum class EstimatorKind { oracle, perturbed, trained };

inline std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::bound_check: return "bound-check";
        case ExperimentKind::rate_sweep: return "rate-sweep";
        case ExperimentKind::extension_check: return "extension-check";
        case ExperimentKind::simulate: return "simulate";
    }
    return "?";
}

inline ExperimentKind experiment_from_string(const std::string& s) {
    if (s == "bound-check") return ExperimentKind::bound_check;
    if (s == "rate-sweep") return ExperimentKind::rate_sweep;
    if (s == "extension-check") return ExperimentKind::extension_check;
    if (s == "simulate") return ExperimentKind::simulate;
    throw DomainError("unknown experiment kind '" + s + "'");
}

inline std::string to_string(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::oracle: return "oracle";
        case EstimatorKind::perturbed: return "perturbed";
        case EstimatorKind::trained: return "trained";
    }
    return "?";
}

inline EstimatorKind estimator_from_string(const std::string& s) {
    if (s == "oracle") return EstimatorKind::oracle;
    if (s == "perturbed") return EstimatorKind::perturbed;
    if (s == "trained") return EstimatorKind::trained;
    throw DomainError("unknown estimator '" + s + "'");
}

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::bound_check;
    StateSpace space{2, 1};
    ScheduleKind schedule = ScheduleKind::linear;
    Vector p0;
    Vector p1;
    TimeClip clip;
    ModelConfig model;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0};
    std::string out_dir = "out";

    // bound-check
    EstimatorKind estimator = EstimatorKind::trained;
    double perturbation = 0.2;
    int ode_steps = 400;
    int risk_grid = 100;
    std::size_t mc_paths = 4000;
    double euler_h = 0.005;

    // rate-sweep
    std::vector<std::size_t> n_grid{4, 16, 64, 256};
    // When nonzero, every sample size trains for this many optimizer steps (epochs rescaled).
    std::size_t sweep_steps = 0;

    // extension-check
    int extension_times = 20;
    std::size_t extension_pairs = 10000;

    // simulate
    std::size_t n_paths = 2000;
    std::size_t n_trajectories = 10;

    MixturePathSpec spec() const { return MixturePathSpec(space, KappaSchedule(schedule), p0, p1, clip); }

    void validate() const {
        (void)spec();
        train.validate();
        if (seeds.empty()) throw DomainError("experiment needs at least one seed");
        if (ode_steps < 1 || risk_grid < 1) throw DomainError("ode_steps and risk_grid must be >= 1");
        if (!(euler_h > 0.0) || mc_paths < 1 || n_paths < 1) throw DomainError("invalid sampling settings");
        if (n_grid.empty()) throw DomainError("n_grid must be nonempty");
        for (std::size_t k = 1; k < n_grid.size(); ++k)
            if (n_grid[k] <= n_grid[k - 1]) throw DomainError("n_grid must be increasing");
        if (extension_times < 2 || extension_pairs < 1) throw DomainError("invalid extension-check settings");
    }
};

/// One velocity estimator per coordinate.
using Estimator = std::vector<CoordinateEstimator>;

inline Estimator oracle_estimator(const MixturePathSpec& spec) {
    Estimator est;
    for (int i = 0; i < spec.space.length(); ++i) {
        auto u = marginal_velocity_provider(spec);
        est.push_back([u, i](const State& x, double t) { return u(x, t, i); });
    }
    return est;
}

/// The oracle with `delta` moved from staying put to the next token on coordinate 0.
/// Column sums stay zero, so the perturbed generator is already valid for delta >= 0.
inline Estimator perturbed_estimator(const MixturePathSpec& spec, double delta) {
    Estimator est = oracle_estimator(spec);
    const int M = spec.space.vocab();
    est[0] = [base = est[0], delta, M](const State& x, double t) {
        Vector v = base(x, t);
        v(x[0] % M) += delta;
        v(x[0] - 1) -= delta;
        return v;
    };
    return est;
}

inline Estimator model_estimator(const std::vector<TransformerModel>& models) {
    Estimator est;
    for (const auto& m : models) est.push_back([&m](const State& x, double t) { return m.forward(x, t); });
    return est;
}

/// Estimated generator on [t0, T]: estimator outputs tabulated per coordinate, projected onto
/// the rates conditions, then assembled.
inline RatesField estimated_rates_field(const StateSpace& space, const Estimator& est, const TimeClip& clip) {
    check_enumerable(space);
    if (est.size() != static_cast<std::size_t>(space.length()))
        throw DomainError("estimator needs one provider per coordinate");
    auto states = std::make_shared<std::vector<State>>(all_states(space));
    return factorized_field(
        [space, est, states](double t) {
            FactorizedRates f(space);
            for (std::size_t i = 0; i < est.size(); ++i)
                for (std::size_t x = 0; x < states->size(); ++x)
                    f.per_coordinate[i].col(static_cast<Eigen::Index>(x)) = est[i]((*states)[x], t);
            return project_factorized(std::move(f));
        },
        clip.t0, clip.T);
}

struct BoundForms {
    double factorized = 0.0;  // sqrt(M) exp(M_u) sum_i sqrt(R^i)
    double general = 0.0;     // exp(M_u) M^{d/2} sqrt(sum_i R^i)
    double ratio = 0.0;       // general / factorized, NaN when both vanish
};

inline BoundForms compare_bound_forms(const std::vector<double>& risks, int M, int d, double M_u) {
    double sum_sqrt = 0.0;
    double sum = 0.0;
    for (double r : risks) {
        if (!std::isfinite(r) || r < 0.0) throw DomainError("risks must be finite and >= 0");
        sum_sqrt += std::sqrt(r);
        sum += r;
    }
    BoundForms b;
    b.factorized = std::sqrt(static_cast<double>(M)) * std::exp(M_u) * sum_sqrt;
    b.general = std::exp(M_u) * std::pow(static_cast<double>(M), 0.5 * d) * std::sqrt(sum);
    b.ratio = b.factorized > 0.0 ? b.general / b.factorized : std::nan("");
    return b;
}

struct BoundReport {
    std::string estimator;
    std::uint64_t seed = 0;
    std::vector<double> risks;
    double tv_exact = 0.0;
    double tv_mc = 0.0;
    double gap_integral = 0.0;  // ½ ∫ ||(U_est - U) p_s||_1 ds
    double slack = 0.0;         // gap_integral + tolerance - tv_exact
    double m_u_estimate = 0.0;
    double m_u_true = 0.0;
    double m_u = 0.0;
    double coefficient_sup = 0.0;
    BoundForms forms;
    bool stochastic_ok = false;
    bool simplex_ok = false;
    bool bound_ok = false;
    bool pass = false;
    std::vector<std::string> failures;
};

inline constexpr double kBoundTolerance = 1e-5;

/// Samples, model seeds and training seeds for one experiment seed.
inline std::vector<State> draw_samples(const MixturePathSpec& spec, std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed * 1000003ULL + 17);
    std::vector<State> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) out.push_back(state_of(spec.space, sample_categorical(spec.p1, rng)));
    return out;
}

inline std::vector<TrainResult> train_coordinate_models(const MixturePathSpec& spec, std::span<const State> samples,
                                                        const ModelConfig& mc, TrainConfig tc, std::uint64_t seed) {
    std::vector<TrainResult> out;
    for (int i = 0; i < spec.space.length(); ++i) {
        Rng init = make_rng(seed + 7919ULL * static_cast<std::uint64_t>(i));
        auto model = TransformerModel::random(mc, spec.space, i, init);
        tc.seed = seed + 104729ULL * static_cast<std::uint64_t>(i);
        out.push_back(train(std::move(model), spec, samples, tc));
    }
    return out;
}

/// The full pipeline for a given estimator: exact risks, projected estimated rates, both
/// Kolmogorov solves from p_{t0} on [t0, T], exact and Monte Carlo TV at T, and the
/// constant-explicit bound TV <= ½ ∫ ||(U_est - U) p_s||_1 ds.
inline BoundReport evaluate_bound(const ExperimentConfig& cfg, const MixturePathSpec& spec, const Estimator& est,
                                  const std::string& label, std::uint64_t seed) {
    BoundReport rep;
    rep.estimator = label;
    rep.seed = seed;
    const auto n = static_cast<Eigen::Index>(spec.space.size());
    for (int i = 0; i < spec.space.length(); ++i) {
        const RiskReport r = risk_exact(est[static_cast<std::size_t>(i)], spec, i, cfg.risk_grid);
        rep.risks.push_back(r.risk);
        rep.m_u_estimate = std::max(rep.m_u_estimate, r.m_u_estimate);
        rep.m_u_true = std::max(rep.m_u_true, r.m_u_true);
    }
    rep.m_u = std::max(rep.m_u_estimate, rep.m_u_true);
    rep.coefficient_sup = coefficient_sup(spec.schedule, spec.clip);
    rep.forms = compare_bound_forms(rep.risks, spec.space.vocab(), spec.space.length(), rep.m_u);

    const RatesField truth = marginal_rates_field(spec);
    const RatesField estimate = estimated_rates_field(spec.space, est, spec.clip);
    const Vector p_start = marginal_path(spec, spec.clip.t0);
    const double t0 = spec.clip.t0;
    const double T = spec.clip.T;

    rep.stochastic_ok = true;
    for (const RatesField* f : {&truth, &estimate}) {
        try {
            (void)evolution_operators_to_end(*f, n, t0, T, cfg.ode_steps, kTolOperator);
        } catch (const NumericalError& e) {
            rep.stochastic_ok = false;
            rep.failures.push_back(std::string("evolution operator: ") + e.what());
        }
    }
    std::optional<Trajectory> p_true, p_est;
    try {
        p_true = solve_kolmogorov(truth, p_start, t0, T, cfg.ode_steps);
        p_est = solve_kolmogorov(estimate, p_start, t0, T, cfg.ode_steps);
        rep.simplex_ok = true;
    } catch (const NumericalError& e) {
        rep.failures.push_back(std::string("kolmogorov solve: ") + e.what());
    }
    if (p_true && p_est) {
        rep.tv_exact = tv_distance(p_true->back(), p_est->back());
        rep.gap_integral = generator_gap_integral(truth, estimate, *p_true);
        rep.slack = rep.gap_integral + kBoundTolerance - rep.tv_exact;
        rep.bound_ok = rep.slack >= 0.0;
        if (!rep.bound_ok) rep.failures.push_back("TV exceeds the generator-gap integral");
        const Vector mc = euler_marginal(estimate, p_start, cfg.euler_h, cfg.mc_paths, seed, t0, T);
        rep.tv_mc = tv_distance(p_true->back(), mc);
    }
    rep.pass = rep.stochastic_ok && rep.simplex_ok && rep.bound_ok;
    return rep;
}

struct BoundCheckResult {
    BoundReport report;
    std::vector<TrainResult> training;  // empty unless the estimator is trained
};

inline BoundCheckResult run_bound_check(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const MixturePathSpec spec = cfg.spec();
    check_enumerable(spec.space);
    BoundCheckResult res;
    switch (cfg.estimator) {
        case EstimatorKind::oracle:
            res.report = evaluate_bound(cfg, spec, oracle_estimator(spec), "oracle", seed);
            break;
        case EstimatorKind::perturbed:
            res.report = evaluate_bound(cfg, spec, perturbed_estimator(spec, cfg.perturbation), "perturbed", seed);
            break;
        case EstimatorKind::trained: {
            const auto samples = draw_samples(spec, cfg.train.n_samples, seed);
            res.training = train_coordinate_models(spec, samples, cfg.model, cfg.train, seed);
            std::vector<TransformerModel> models;
            for (const auto& t : res.training) models.push_back(t.model);
            res.report = evaluate_bound(cfg, spec, model_estimator(models), "trained", seed);
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Sample-size sweep
// ---------------------------------------------------------------------------

inline double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Least-squares slope of y against x.
inline double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw DomainError("slope needs at least two paired points");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
    }
    return sxy / sxx;
}

struct SweepRow {
    std::size_t n = 0;
    std::vector<double> risks;  // total risk per seed, against the population target
    std::vector<double> tvs;
    double median_risk = 0.0;
    double median_tv = 0.0;
};

struct RateSweepReport {
    std::vector<SweepRow> rows;
    double slope = 0.0;  // of log median risk against log n
    bool monotone = false;
    bool pass = false;
};

inline RateSweepReport run_rate_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& n_grid) {
    cfg.validate();
    for (std::size_t k = 1; k < n_grid.size(); ++k)
        if (n_grid[k] <= n_grid[k - 1]) throw DomainError("n_grid must be increasing");
    const MixturePathSpec truth = cfg.spec();
    check_enumerable(truth.space);
    const RatesField true_field = marginal_rates_field(truth);
    const Vector p_start = marginal_path(truth, truth.clip.t0);
    const Vector p_end = solve_kolmogorov(true_field, p_start, truth.clip.t0, truth.clip.T, cfg.ode_steps).back();
    RateSweepReport rep;
    for (std::size_t n : n_grid) {
        SweepRow row;
        row.n = n;
        for (std::uint64_t seed : cfg.seeds) {
            const auto samples = draw_samples(truth, n, seed);
            const auto emp = MixturePathSpec::empirical(truth.space, truth.schedule, truth.p0, samples, truth.clip);
            TrainConfig tc = cfg.train;
            tc.n_samples = n;
            if (cfg.sweep_steps > 0) {
                const std::size_t per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
                tc.epochs = static_cast<int>((cfg.sweep_steps + per_epoch - 1) / per_epoch);
            }
            const auto trained = train_coordinate_models(emp, samples, cfg.model, tc, seed);
            std::vector<TransformerModel> models;
            for (const auto& t : trained) models.push_back(t.model);
            const Estimator est = model_estimator(models);
            double total = 0.0;
            for (int i = 0; i < truth.space.length(); ++i)
                total += risk_exact(est[static_cast<std::size_t>(i)], truth, i, cfg.risk_grid).risk;
            row.risks.push_back(total);
            const RatesField field = estimated_rates_field(truth.space, est, truth.clip);
            const Vector q = solve_kolmogorov(field, p_start, truth.clip.t0, truth.clip.T, cfg.ode_steps).back();
            row.tvs.push_back(tv_distance(p_end, q));
        }
        row.median_risk = median(row.risks);
        row.median_tv = median(row.tvs);
        rep.rows.push_back(std::move(row));
    }
    std::vector<double> lx, ly;
    rep.monotone = true;
    for (std::size_t k = 0; k < rep.rows.size(); ++k) {
        lx.push_back(std::log(static_cast<double>(rep.rows[k].n)));
        ly.push_back(std::log(std::max(rep.rows[k].median_risk, 1e-300)));
        if (k > 0 && rep.rows[k].median_risk > rep.rows[k - 1].median_risk) rep.monotone = false;
    }
    rep.slope = rep.rows.size() >= 2 ? least_squares_slope(lx, ly) : 0.0;
    rep.pass = rep.monotone && rep.slope < 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Extension check
// ---------------------------------------------------------------------------

struct ExtensionCheckReport {
    ExtensionLipschitzReport lipschitz;
    std::size_t interpolation_points = 0;
    std::size_t interpolation_mismatches = 0;
    bool pass = false;
};

/// Table of the stacked marginal velocity (all coordinates, d * M entries) on `times`
/// grid points over the clip, its extension, an exact-interpolation sweep and the Lipschitz check.
inline ExtensionField marginal_extension(const MixturePathSpec& spec, int times) {
    std::vector<double> grid;
    for (int k = 0; k < times; ++k)
        grid.push_back(k + 1 == times ? spec.clip.T : spec.clip.t0 + spec.clip.length() * k / (times - 1));
    const int d = spec.space.length();
    const int M = spec.space.vocab();
    auto u = marginal_velocity_provider(spec);
    return ExtensionField::from_function(spec.space, grid, [&](const State& x, double t) {
        Vector v(d * M);
        for (int i = 0; i < d; ++i) v.segment(i * M, M) = u(x, t, i);
        return v;
    });
}

inline ExtensionCheckReport run_extension_check(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const MixturePathSpec spec = cfg.spec();
    const ExtensionField field = marginal_extension(spec, cfg.extension_times);
    ExtensionCheckReport rep;
    const auto states = all_states(spec.space);
    for (double t : field.times()) {
        for (std::size_t s = 0; s < states.size(); ++s) {
            ++rep.interpolation_points;
            const Vector got = field(embed(states[s]), t);
            const Vector want = field.values()[static_cast<std::size_t>(
                std::find(field.times().begin(), field.times().end(), t) - field.times().begin())]
                                    .col(static_cast<Eigen::Index>(s));
            if (!(got.array() == want.array()).all()) ++rep.interpolation_mismatches;
        }
    }
    const TableBounds b = table_bounds(field);
    Rng rng = make_rng(seed);
    rep.lipschitz = extension_lipschitz_check(field, b.l_u, b.m_u, cfg.extension_pairs, rng);
    rep.pass = rep.lipschitz.pass && rep.interpolation_mismatches == 0;
    return rep;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct SimulationReport {
    std::vector<std::vector<State>> trajectories;  // the first few paths, one state per Euler step
    std::vector<double> step_times;
    Vector empirical;
    Vector exact;
    double tv = 0.0;
    bool rates_ok = false;
    bool simplex_ok = false;
    bool pass = false;
};

/// Factorized Euler sampling of the exact marginal velocity from X_{t0} ~ p_{t0} to T,
/// compared with the Kolmogorov solution of the same generator.
inline SimulationReport run_simulate(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const MixturePathSpec spec = cfg.spec();
    check_enumerable(spec.space);
    SimulationReport rep;
    const double t0 = spec.clip.t0;
    const double T = spec.clip.T;
    const RatesField field = marginal_rates_field(spec);
    rep.rates_ok = true;
    for (int k = 0; k <= 10; ++k) {
        if (!validate_rates(field(t0 + (T - t0) * k / 10.0)).pass) rep.rates_ok = false;
    }
    const Vector p_start = marginal_path(spec, t0);
    try {
        rep.exact = solve_kolmogorov(field, p_start, t0, T, cfg.ode_steps).back();
        rep.simplex_ok = true;
    } catch (const NumericalError&) {
        rep.exact = Vector::Zero(p_start.size());
    }
    const auto velocity = marginal_velocity_provider(spec);
    rep.empirical = euler_marginal_factorized(velocity, spec.space, p_start, cfg.euler_h, t0, T, cfg.n_paths, seed);
    rep.tv = tv_distance(rep.empirical, rep.exact);
    const int steps = euler_step_count(cfg.euler_h, t0, T);
    const double dt = (T - t0) / steps;
    for (int k = 0; k <= steps; ++k) rep.step_times.push_back(t0 + k * dt);
    for (std::size_t j = 0; j < std::min(cfg.n_trajectories, cfg.n_paths); ++j) {
        Rng rng = make_rng(seed + j);
        State x = state_of(spec.space, sample_categorical(p_start, rng));
        std::vector<State> path{x};
        for (int k = 0; k < steps; ++k) {
            x = euler_factorized_step(velocity, x, t0 + k * dt, dt, rng);
            path.push_back(x);
        }
        rep.trajectories.push_back(std::move(path));
    }
    rep.pass = rep.rates_ok && rep.simplex_ok;
    return rep;
}

} // namespace dfm
