#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfm/ctmc.hpp"
#include "dfm/errors.hpp"
#include "dfm/mixture.hpp"
#include "dfm/model.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t n_samples = 64;  // training-set size drawn from p1 by the harness
    int mc_draws = 8;            // X_0 draws per sample
    int time_points = 4;         // (t, X_t) draws per X_0 draw
    AdamConfig adam;
    int epochs = 200;
    std::size_t batch_size = 16; // samples per optimizer step
    std::uint64_t seed = 0;
    double lr_final_fraction = 1.0;  // learning rate decays linearly to this fraction of adam.lr
    TimeClip clip;

    void validate() const {
        if (n_samples < 1 || mc_draws < 1 || time_points < 1 || epochs < 0 || batch_size < 1)
            throw DomainError("training counts must be positive");
        if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw DomainError("learning rate must be finite and >= 0");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
            throw DomainError("Adam betas must lie in [0, 1)");
        if (!(adam.eps > 0.0)) throw DomainError("Adam epsilon must be > 0");
        if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0))
            throw DomainError("lr_final_fraction must lie in [0, 1]");
        if (!(clip.t0 > 0.0 && clip.t0 < clip.T && clip.T < 1.0)) throw DomainError("invalid time clip");
    }
};

/// Regression pairs for one pass of the CDFM loss: for every sample x_j, `mc_draws` draws of
/// X_0 ~ p0, each with `time_points` draws t ~ U[t0, T] and X_t ~ p_{t|X_0, x_j}. The target is
/// the conditional velocity of coordinate i0.
inline std::vector<Example> draw_examples(const MixturePathSpec& spec, std::span<const State> samples, int i0,
                                          const TrainConfig& cfg, Rng& rng) {
    const auto ii = static_cast<std::size_t>(i0);
    std::vector<Example> out;
    out.reserve(samples.size() * static_cast<std::size_t>(cfg.mc_draws * cfg.time_points));
    for (const State& x1 : samples) {
        for (int a = 0; a < cfg.mc_draws; ++a) {
            const State x0 = state_of(spec.space, sample_categorical(spec.p0, rng));
            for (int b = 0; b < cfg.time_points; ++b) {
                const double t = uniform(rng, cfg.clip.t0, cfg.clip.T);
                State xt = sample_conditional_state(spec, t, x0, x1, rng);
                const double c = spec.schedule.coefficient(t);
                Vector target = Vector::Zero(spec.space.vocab());
                target(x1[ii] - 1) += c;
                target(xt[ii] - 1) -= c;
                out.push_back({std::move(xt), t, std::move(target)});
            }
        }
    }
    return out;
}

/// Monte Carlo estimate of the clipped CDFM loss for coordinate model.coordinate():
/// (T - t0) times the mean squared error over freshly drawn examples.
inline double cdfm_loss_mc(const TransformerModel& model, const MixturePathSpec& spec, std::span<const State> samples,
                           const TrainConfig& cfg, Rng& rng) {
    if (samples.empty()) throw DomainError("cdfm_loss_mc needs at least one sample");
    cfg.validate();
    const auto ex = draw_examples(spec, samples, model.coordinate(), cfg, rng);
    return cfg.clip.length() * model.loss(ex);
}

class Adam {
public:
    Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad, double lr_scale = 1.0) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grad[k];
            v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
            params[k] -= lr_scale * cfg_.lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.eps);
        }
    }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    std::uint64_t t_ = 0;
};

struct EpochLog {
    int epoch;
    double loss;
    double wallclock;  // seconds since training started
};

struct TrainResult {
    TransformerModel model;
    std::vector<double> loss_curve;  // per-epoch mean minibatch loss
    std::vector<EpochLog> log;
};

/// Adam on minibatches of the CDFM loss. Sample order is reshuffled and examples are
/// redrawn every epoch; everything is driven by one generator seeded with cfg.seed.
inline TrainResult train(TransformerModel model, const MixturePathSpec& spec, std::span<const State> samples,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (samples.empty()) throw DomainError("train needs at least one sample");
    for (const auto& x : samples) check_state(spec.space, x);
    Rng rng = make_rng(cfg.seed);
    Adam opt(model.parameter_count(), cfg.adam);
    TransformerModel grad = model.zeros_like();
    std::vector<std::size_t> order(samples.size());
    std::vector<State> batch;
    const auto start = std::chrono::steady_clock::now();
    TrainResult res{model, {}, {}};
    const std::size_t per_epoch = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = static_cast<double>(per_epoch) * cfg.epochs;
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);
        double acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            batch.clear();
            for (std::size_t k = lo; k < hi; ++k) batch.push_back(samples[order[k]]);
            const auto ex = draw_examples(spec, batch, res.model.coordinate(), cfg, rng);
            std::fill(grad.parameters().begin(), grad.parameters().end(), 0.0);
            double loss;
            try {
                loss = cfg.clip.length() * res.model.backward(ex, grad);
            } catch (const NumericalError& e) {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(loss)) {
                std::ostringstream os;
                os << "non-finite training loss at epoch " << epoch << ", batch starting at " << lo
                   << " (last epoch loss " << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back()) << ")";
                throw NumericalError(os.str());
            }
            for (double& g : grad.parameters()) g *= cfg.clip.length();
            const double progress = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
            opt.step(res.model.parameters(), grad.parameters(), 1.0 - (1.0 - cfg.lr_final_fraction) * progress);
            ++step;
            acc += loss * static_cast<double>(hi - lo);
            seen += hi - lo;
        }
        const double mean = acc / static_cast<double>(seen);
        res.loss_curve.push_back(mean);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.log.push_back({epoch, mean, wall});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Exact risk
// ---------------------------------------------------------------------------

/// Estimator of one coordinate's velocity: (x, t) -> length-M vector.
using CoordinateEstimator = std::function<Vector(const State&, double)>;

struct RiskReport {
    int coordinate = 0;
    double risk = 0.0;
    int grid = 0;
    double m_u_estimate = 0.0;  // max |u_hat| entry over weighted states and grid times
    double m_u_true = 0.0;
};

/// ∫_{t0}^{T} Σ_x p_t(x) ||u^{i0}_t(., x) - u_hat(x, t)||^2 dt by trapezoid on grid + 1 points.
/// States with p_t(x) = 0 are skipped, so the estimator is never queried there.
inline RiskReport risk_exact(const CoordinateEstimator& est, const MixturePathSpec& spec, int i0, int grid) {
    check_enumerable(spec.space);
    detail::check_coordinate(spec.space, i0);
    if (grid < 1) throw DomainError("risk quadrature needs grid >= 1");
    const auto states = all_states(spec.space);
    RiskReport rep;
    rep.coordinate = i0;
    rep.grid = grid;
    const double t0 = spec.clip.t0;
    const double len = spec.clip.length();
    double acc = 0.0;
    for (int k = 0; k <= grid; ++k) {
        const double t = k == grid ? spec.clip.T : t0 + len * k / grid;
        const Vector p = marginal_path(spec, t);
        const FactorizedRates truth = marginal_velocity_table(spec, t);
        const Matrix& u = truth.per_coordinate[static_cast<std::size_t>(i0)];
        double val = 0.0;
        for (std::size_t x = 0; x < states.size(); ++x) {
            const auto xi = static_cast<Eigen::Index>(x);
            if (!(p(xi) > 0.0)) continue;
            const Vector uh = est(states[x], t);
            val += p(xi) * (u.col(xi) - uh).squaredNorm();
            rep.m_u_estimate = std::max(rep.m_u_estimate, uh.cwiseAbs().maxCoeff());
            rep.m_u_true = std::max(rep.m_u_true, u.col(xi).cwiseAbs().maxCoeff());
        }
        acc += (k == 0 || k == grid ? 0.5 : 1.0) * val;
    }
    rep.risk = acc * len / grid;
    return rep;
}

inline RiskReport risk_exact(const TransformerModel& model, const MixturePathSpec& spec, int i0, int grid) {
    if (model.coordinate() != i0)
        throw DomainError("model estimates coordinate " + std::to_string(model.coordinate()) + ", not " +
                          std::to_string(i0));
    return risk_exact([&model](const State& x, double t) { return model.forward(x, t); }, spec, i0, grid);
}

} // namespace dfm
