#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfm/errors.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm {

inline constexpr double kTolRates = 1e-9;
inline constexpr double kTolSimplex = 1e-8;
inline constexpr double kTolOperator = 1e-6;

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Outcome of checking the rates conditions on a dense generator.
/// Entry (y, x) of a generator is the rate from source x to target y.
struct RatesReport {
    bool pass = true;
    double min_off_diagonal = 0.0;  // most negative off-diagonal entry (0 if none negative)
    Eigen::Index worst_target = -1;
    Eigen::Index worst_source = -1;
    double max_column_sum = 0.0;    // largest |sum_y U(y, x)|
    Eigen::Index worst_column = -1;

    std::string describe() const {
        std::ostringstream os;
        os << (pass ? "pass" : "fail") << ": min off-diagonal " << min_off_diagonal;
        if (worst_target >= 0) os << " at (" << worst_target << ", " << worst_source << ")";
        os << ", max |column sum| " << max_column_sum;
        if (worst_column >= 0) os << " at column " << worst_column;
        return os.str();
    }
};

inline RatesReport validate_rates(const Matrix& rates, double tol = kTolRates) {
    if (rates.rows() != rates.cols())
        throw DomainError("rates matrix must be square, got " + std::to_string(rates.rows()) + "x" +
                          std::to_string(rates.cols()));
    RatesReport rep;
    for (Eigen::Index x = 0; x < rates.cols(); ++x) {
        double sum = 0.0;
        for (Eigen::Index y = 0; y < rates.rows(); ++y) {
            const double v = rates(y, x);
            sum += v;
            if (y != x && v < rep.min_off_diagonal) {
                rep.min_off_diagonal = v;
                rep.worst_target = y;
                rep.worst_source = x;
            }
        }
        if (std::abs(sum) > rep.max_column_sum) {
            rep.max_column_sum = std::abs(sum);
            rep.worst_column = x;
        }
    }
    rep.pass = rep.min_off_diagonal >= -tol && rep.max_column_sum <= tol;
    return rep;
}

inline RatesReport validate_rates(const StateSpace& space, const Matrix& rates, double tol = kTolRates) {
    const auto n = static_cast<Eigen::Index>(space.size());
    if (rates.rows() != n || rates.cols() != n)
        throw DomainError("rates matrix shape does not match state space of size " + std::to_string(n));
    return validate_rates(rates, tol);
}

/// Floor off-diagonal entries at zero and reset the diagonal to minus the
/// column's off-diagonal mass. The result always satisfies the rates conditions.
inline Matrix project_rates(const Matrix& rates) {
    Matrix out = rates.cwiseMax(0.0);
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
        out(x, x) = 0.0;
        out(x, x) = -out.col(x).sum();
    }
    return out;
}

/// Per-coordinate rates u^i(., x). `per_coordinate[i]` is M x |S|; column x
/// holds the length-M vector for source state x.
struct FactorizedRates {
    StateSpace space;
    std::vector<Matrix> per_coordinate;

    explicit FactorizedRates(const StateSpace& s)
        : space(s), per_coordinate(static_cast<std::size_t>(s.length()),
                                   Matrix::Zero(s.vocab(), static_cast<Eigen::Index>(s.size()))) {}
};

inline RatesReport validate_factorized(const FactorizedRates& f, double tol = kTolRates) {
    RatesReport rep;
    const auto& space = f.space;
    if (f.per_coordinate.size() != static_cast<std::size_t>(space.length()))
        throw DomainError("factorized rates need one table per coordinate");
    for (std::size_t i = 0; i < f.per_coordinate.size(); ++i) {
        const Matrix& u = f.per_coordinate[i];
        if (u.rows() != space.vocab() || u.cols() != static_cast<Eigen::Index>(space.size()))
            throw DomainError("factorized table " + std::to_string(i) + " has wrong shape");
        for (Eigen::Index x = 0; x < u.cols(); ++x) {
            const int tok = state_of(space, static_cast<StateIndex>(x))[i];
            for (Eigen::Index y = 0; y < u.rows(); ++y) {
                if (y != tok - 1 && u(y, x) < rep.min_off_diagonal) {
                    rep.min_off_diagonal = u(y, x);
                    rep.worst_target = y;
                    rep.worst_source = x;
                }
            }
            const double s = std::abs(u.col(x).sum());
            if (s > rep.max_column_sum) {
                rep.max_column_sum = s;
                rep.worst_column = x;
            }
        }
    }
    rep.pass = rep.min_off_diagonal >= -tol && rep.max_column_sum <= tol;
    return rep;
}

/// Per-coordinate analogue of project_rates: off-token entries floored at 0,
/// the entry at the current token set so each vector sums to zero.
inline FactorizedRates project_factorized(FactorizedRates f) {
    for (std::size_t i = 0; i < f.per_coordinate.size(); ++i) {
        Matrix& u = f.per_coordinate[i];
        for (Eigen::Index x = 0; x < u.cols(); ++x) {
            const int tok = state_of(f.space, static_cast<StateIndex>(x))[i];
            u.col(x) = u.col(x).cwiseMax(0.0);
            u(tok - 1, x) = 0.0;
            u(tok - 1, x) = -u.col(x).sum();
        }
    }
    return f;
}

/// U(y, x) = sum_i delta(y^{-i}, x^{-i}) u^i(y^i, x).
/// States differing from x in two or more coordinates get rate zero.
inline Matrix assemble_factorized(const FactorizedRates& f) {
    const auto& space = f.space;
    const auto n = static_cast<Eigen::Index>(space.size());
    const int m = space.vocab();
    const int d = space.length();
    Matrix rates = Matrix::Zero(n, n);
    // Stride of coordinate i in the mixed-radix codec (coordinate 0 most significant).
    std::vector<StateIndex> stride(static_cast<std::size_t>(d));
    StateIndex acc = 1;
    for (int i = d - 1; i >= 0; --i) {
        stride[static_cast<std::size_t>(i)] = acc;
        acc *= static_cast<StateIndex>(m);
    }
    for (Eigen::Index x = 0; x < n; ++x) {
        const State xs = state_of(space, static_cast<StateIndex>(x));
        for (int i = 0; i < d; ++i) {
            const auto ii = static_cast<std::size_t>(i);
            const Matrix& u = f.per_coordinate[ii];
            const auto base = static_cast<StateIndex>(x) - static_cast<StateIndex>(xs[ii] - 1) * stride[ii];
            for (int tok = 1; tok <= m; ++tok) {
                const auto y = static_cast<Eigen::Index>(base + static_cast<StateIndex>(tok - 1) * stride[ii]);
                rates(y, x) += u(tok - 1, x);
            }
        }
    }
    return rates;
}

// ---------------------------------------------------------------------------
// Time-dependent fields
// ---------------------------------------------------------------------------

/// t -> dense generator, with a declared bound on |u_t(y, x)| and validity interval.
struct RatesField {
    std::function<Matrix(double)> at;
    double t_begin = 0.0;
    double t_end = 1.0;
    double bound = std::numeric_limits<double>::infinity();

    Matrix operator()(double t) const { return at(t); }
};

inline RatesField constant_field(Matrix rates) {
    const double b = rates.cwiseAbs().maxCoeff();
    return RatesField{[r = std::move(rates)](double) { return r; }, 0.0, std::numeric_limits<double>::infinity(), b};
}

inline RatesField factorized_field(std::function<FactorizedRates(double)> f, double t_begin = 0.0,
                                   double t_end = 1.0) {
    return RatesField{[f = std::move(f)](double t) { return assemble_factorized(f(t)); }, t_begin, t_end};
}

/// Wraps a possibly invalid field (raw model output) so every query is projected.
inline RatesField projected(RatesField field) {
    auto inner = field.at;
    field.at = [inner = std::move(inner)](double t) { return project_rates(inner(t)); };
    return field;
}

// ---------------------------------------------------------------------------
// Probability vectors
// ---------------------------------------------------------------------------

struct SimplexReport {
    bool pass = true;
    double min_entry = 0.0;
    double mass_error = 0.0;
};

inline SimplexReport check_simplex(const Vector& p, double tol = kTolSimplex) {
    SimplexReport r;
    r.min_entry = p.size() ? p.minCoeff() : 0.0;
    r.mass_error = std::abs(p.sum() - 1.0);
    r.pass = r.min_entry >= -tol && r.mass_error <= tol;
    return r;
}

inline void require_simplex(const Vector& p, const std::string& what, double tol = kTolSimplex) {
    const auto r = check_simplex(p, tol);
    if (!r.pass) {
        std::ostringstream os;
        os << what << " is not a probability vector (min entry " << r.min_entry << ", mass error " << r.mass_error
           << ")";
        throw DomainError(os.str());
    }
}

inline Vector point_mass(std::size_t n, StateIndex at) {
    Vector p = Vector::Zero(static_cast<Eigen::Index>(n));
    p(static_cast<Eigen::Index>(at)) = 1.0;
    return p;
}

inline double tv_distance(const Vector& p, const Vector& q) {
    if (p.size() != q.size())
        throw DomainError("tv_distance: length mismatch " + std::to_string(p.size()) + " vs " +
                          std::to_string(q.size()));
    return 0.5 * (p - q).cwiseAbs().sum();
}

// ---------------------------------------------------------------------------
// Kolmogorov forward solves (fixed-step classical RK4)
// ---------------------------------------------------------------------------

struct Trajectory {
    std::vector<double> times;
    std::vector<Vector> probs;

    const Vector& back() const { return probs.back(); }
};

namespace detail {

inline void check_interval(const RatesField& field, double t0, double t1, int steps, bool allow_equal) {
    if (steps < 1) throw DomainError("integration needs steps >= 1");
    if (allow_equal ? t1 < t0 : !(t0 < t1)) throw DomainError("integration interval is empty or reversed");
    if (t0 < field.t_begin - 1e-12 || t1 > field.t_end + 1e-12)
        throw DomainError("integration interval leaves the field's validity interval");
}

inline double grid_time(double t0, double t1, int steps, int k) {
    return k == steps ? t1 : t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(steps);
}

// One RK4 step of y' = U(t) y given the generator at the step's start, midpoint and end.
template <class Y>
Y rk4_linear(const Matrix& u_a, const Matrix& u_mid, const Matrix& u_b, const Y& y, double h) {
    const Y k1 = u_a * y;
    const Y k2 = u_mid * (y + 0.5 * h * k1);
    const Y k3 = u_mid * (y + 0.5 * h * k2);
    const Y k4 = u_b * (y + h * k3);
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline void check_column_stochastic(const Matrix& op, int step, double tol) {
    const double min_entry = op.minCoeff();
    const double col_err = (op.colwise().sum().array() - 1.0).abs().maxCoeff();
    if (min_entry < -tol || col_err > tol) {
        std::ostringstream os;
        os << "evolution operator lost column-stochasticity at step " << step << " (min entry " << min_entry
           << ", column-sum error " << col_err << ")";
        throw NumericalError(os.str());
    }
}

} // namespace detail

/// Integrates dp/dt = U_t p on [t0, t1] with `steps` RK4 steps and returns p at every grid time.
inline Trajectory solve_kolmogorov(const RatesField& field, const Vector& p0, double t0, double t1, int steps,
                                   double tol = kTolSimplex) {
    detail::check_interval(field, t0, t1, steps, false);
    require_simplex(p0, "initial distribution", tol);
    Trajectory traj;
    traj.times.reserve(static_cast<std::size_t>(steps) + 1);
    traj.probs.reserve(static_cast<std::size_t>(steps) + 1);
    traj.times.push_back(t0);
    traj.probs.push_back(p0);
    const double h = (t1 - t0) / steps;
    Matrix u_a = field(t0);
    Vector p = p0;
    for (int k = 0; k < steps; ++k) {
        const double ta = detail::grid_time(t0, t1, steps, k);
        const double tb = detail::grid_time(t0, t1, steps, k + 1);
        const Matrix u_mid = field(ta + 0.5 * h);
        Matrix u_b = field(tb);
        p = detail::rk4_linear(u_a, u_mid, u_b, p, h);
        const auto rep = check_simplex(p, tol);
        if (!rep.pass || !p.allFinite()) {
            std::ostringstream os;
            os << "Kolmogorov solve left the simplex at step " << (k + 1) << " (t = " << tb << ", min entry "
               << rep.min_entry << ", mass error " << rep.mass_error << ")";
            throw NumericalError(os.str());
        }
        traj.times.push_back(tb);
        traj.probs.push_back(p);
        u_a = std::move(u_b);
    }
    return traj;
}

/// Evolution operator P_{s,t}: RK4 on dP/dt = U_t P with P_{s,s} = I.
inline Matrix evolution_operator(const RatesField& field, Eigen::Index n, double s, double t, int steps,
                                 double tol = kTolOperator) {
    // A zero-length interval is the identity, whatever the step count.
    detail::check_interval(field, s, t, t == s ? std::max(steps, 1) : steps, true);
    Matrix op = Matrix::Identity(n, n);
    if (t == s) return op;
    const double h = (t - s) / steps;
    Matrix u_a = field(s);
    for (int k = 0; k < steps; ++k) {
        const double ta = detail::grid_time(s, t, steps, k);
        const double tb = detail::grid_time(s, t, steps, k + 1);
        const Matrix u_mid = field(ta + 0.5 * h);
        Matrix u_b = field(tb);
        op = detail::rk4_linear(u_a, u_mid, u_b, op, h);
        detail::check_column_stochastic(op, k + 1, tol);
        u_a = std::move(u_b);
    }
    return op;
}

/// All operators P_{s_k, t1} for the grid s_k = t0 + k (t1 - t0) / steps, k = 0..steps.
/// Built backwards from single-step RK4 propagators, so P_{s_k, t1} is the same
/// product of step maps that evolution_operator(field, n, s_k, t1, steps - k) forms.
inline std::vector<Matrix> evolution_operators_to_end(const RatesField& field, Eigen::Index n, double t0, double t1,
                                                      int steps, double tol = kTolOperator) {
    detail::check_interval(field, t0, t1, steps, false);
    const double h = (t1 - t0) / steps;
    std::vector<Matrix> ops(static_cast<std::size_t>(steps) + 1);
    ops.back() = Matrix::Identity(n, n);
    const Matrix eye = Matrix::Identity(n, n);
    Matrix u_b = field(t1);
    for (int k = steps - 1; k >= 0; --k) {
        const double ta = detail::grid_time(t0, t1, steps, k);
        const Matrix u_mid = field(ta + 0.5 * h);
        Matrix u_a = field(ta);
        const Matrix step = detail::rk4_linear(u_a, u_mid, u_b, eye, h);
        ops[static_cast<std::size_t>(k)] = ops[static_cast<std::size_t>(k) + 1] * step;
        detail::check_column_stochastic(ops[static_cast<std::size_t>(k)], k, tol);
        u_b = std::move(u_a);
    }
    return ops;
}

/// ½ ∫ ||(U_est(s) - U_true(s)) p_s||_1 ds by trapezoid on the grid of `true_path`.
/// This is the constant-explicit upper bound on TV(p_t, p_{t,est}) for a valid estimated field.
inline double generator_gap_integral(const RatesField& true_field, const RatesField& est_field,
                                     const Trajectory& true_path) {
    double acc = 0.0;
    double prev = 0.0;
    for (std::size_t k = 0; k < true_path.times.size(); ++k) {
        const double t = true_path.times[k];
        const double val = ((est_field(t) - true_field(t)) * true_path.probs[k]).cwiseAbs().sum();
        if (k > 0) acc += 0.5 * (t - true_path.times[k - 1]) * (val + prev);
        prev = val;
    }
    return 0.5 * acc;
}

/// || (p_{t,est} - p_t) - ∫ P_{s,t,est} (U_est(s) - U_true(s)) p_s ds ||_1 with the integral taken by
/// trapezoid on the RK4 grid. Zero up to quadrature error when the variation-of-constants identity holds.
inline double voc_residual(const RatesField& true_field, const RatesField& est_field, const Vector& p0, double t0,
                           double t1, int steps) {
    const Trajectory truth = solve_kolmogorov(true_field, p0, t0, t1, steps);
    const Trajectory est = solve_kolmogorov(est_field, p0, t0, t1, steps);
    const auto ops = evolution_operators_to_end(est_field, p0.size(), t0, t1, steps);
    Vector integral = Vector::Zero(p0.size());
    Vector prev;
    for (std::size_t k = 0; k < truth.times.size(); ++k) {
        const double s = truth.times[k];
        Vector val = ops[k] * ((est_field(s) - true_field(s)) * truth.probs[k]);
        if (k > 0) integral += 0.5 * (s - truth.times[k - 1]) * (val + prev);
        prev = std::move(val);
    }
    return ((est.back() - truth.back()) - integral).cwiseAbs().sum();
}

inline double voc_residual(const RatesField& true_field, const RatesField& est_field, const Vector& p0, double t,
                           int steps) {
    return voc_residual(true_field, est_field, p0, 0.0, t, steps);
}

// ---------------------------------------------------------------------------
// Euler sampling
// ---------------------------------------------------------------------------

/// Clamp a one-step transition vector delta + h u to the simplex: negative
/// masses go to zero, the rest is renormalized; an all-zero vector stays put.
inline Vector clamp_transition(Vector probs, Eigen::Index stay) {
    probs = probs.cwiseMax(0.0);
    const double total = probs.sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
        probs.setZero();
        probs(stay) = 1.0;
        return probs;
    }
    return probs / total;
}

/// Inverse-CDF draw from a (normalized) probability vector in codec order.
template <class Derived>
Eigen::Index sample_categorical(const Eigen::MatrixBase<Derived>& probs, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    Eigen::Index last_positive = 0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        if (probs(k) > 0.0) last_positive = k;
        acc += probs(k);
        if (u < acc) return k;
    }
    return last_positive;
}

/// Column-stochastic Euler kernel I + hU after clamping.
inline Matrix euler_kernel(const Matrix& rates, double h) {
    Matrix kernel(rates.rows(), rates.cols());
    for (Eigen::Index x = 0; x < rates.cols(); ++x) {
        Vector col = h * rates.col(x);
        col(x) += 1.0;
        kernel.col(x) = clamp_transition(std::move(col), x);
    }
    return kernel;
}

inline int euler_step_count(double h, double t0, double t1) {
    if (!(h > 0.0) || h > 1.0) throw DomainError("Euler step must satisfy 0 < h <= 1");
    if (!(t1 > t0)) throw DomainError("Euler interval is empty");
    return std::max(1, static_cast<int>(std::lround((t1 - t0) / h)));
}

/// One sampled trajectory (state indices at each Euler grid time, starting with the draw from p0).
inline std::vector<StateIndex> euler_sample(const RatesField& field, const Vector& p0, double h, Rng& rng,
                                            double t0 = 0.0, double t1 = 1.0) {
    require_simplex(p0, "initial distribution");
    const int steps = euler_step_count(h, t0, t1);
    const double dt = (t1 - t0) / steps;
    std::vector<StateIndex> path;
    path.reserve(static_cast<std::size_t>(steps) + 1);
    auto x = sample_categorical(p0, rng);
    path.push_back(static_cast<StateIndex>(x));
    for (int k = 0; k < steps; ++k) {
        const Matrix rates = field(t0 + k * dt);
        Vector col = dt * rates.col(x);
        col(x) += 1.0;
        x = sample_categorical(clamp_transition(std::move(col), x), rng);
        path.push_back(static_cast<StateIndex>(x));
    }
    return path;
}

/// Empirical distribution at t1 of `n_paths` Euler trajectories. Path j uses its own
/// generator seeded with base_seed + j, so the result does not depend on evaluation order.
inline Vector euler_marginal(const RatesField& field, const Vector& p0, double h, std::size_t n_paths,
                             std::uint64_t base_seed, double t0 = 0.0, double t1 = 1.0) {
    require_simplex(p0, "initial distribution");
    const int steps = euler_step_count(h, t0, t1);
    const double dt = (t1 - t0) / steps;
    std::vector<Matrix> kernels;
    kernels.reserve(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) kernels.push_back(euler_kernel(field(t0 + k * dt), dt));
    Vector counts = Vector::Zero(p0.size());
    for (std::size_t j = 0; j < n_paths; ++j) {
        Rng rng = make_rng(base_seed + j);
        auto x = sample_categorical(p0, rng);
        for (const Matrix& kern : kernels) x = sample_categorical(kern.col(x), rng);
        counts(x) += 1.0;
    }
    return counts / static_cast<double>(n_paths);
}

/// Per-coordinate velocity provider: (x, t, coordinate) -> length-M vector u^i_t(., x).
using CoordinateVelocity = std::function<Vector(const State&, double, int)>;

/// One factorized Euler step: every coordinate moves independently from the same pre-step state.
inline State euler_factorized_step(const CoordinateVelocity& velocity, const State& x, double t, double h, Rng& rng) {
    State next = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Vector probs = h * velocity(x, t, static_cast<int>(i));
        probs(x[i] - 1) += 1.0;
        next[i] = static_cast<int>(sample_categorical(clamp_transition(std::move(probs), x[i] - 1), rng)) + 1;
    }
    return next;
}

inline State euler_sample_factorized(const CoordinateVelocity& velocity, const State& x0, double h, double t0,
                                     double t1, Rng& rng) {
    const int steps = euler_step_count(h, t0, t1);
    const double dt = (t1 - t0) / steps;
    State x = x0;
    for (int k = 0; k < steps; ++k) x = euler_factorized_step(velocity, x, t0 + k * dt, dt, rng);
    return x;
}

/// Empirical distribution of factorized Euler samples started from p0. The
/// velocity is tabulated on the lattice once per step, then paths (seed
/// base_seed + j) are advanced through the table.
inline Vector euler_marginal_factorized(const CoordinateVelocity& velocity, const StateSpace& space, const Vector& p0,
                                        double h, double t0, double t1, std::size_t n_paths,
                                        std::uint64_t base_seed) {
    check_enumerable(space);
    require_simplex(p0, "initial distribution");
    const int steps = euler_step_count(h, t0, t1);
    const double dt = (t1 - t0) / steps;
    const auto states = all_states(space);
    const int d = space.length();
    // kernels[k][i] is M x |S|: column x is the clamped transition vector of coordinate i.
    std::vector<std::vector<Matrix>> kernels(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        auto& step = kernels[static_cast<std::size_t>(k)];
        step.assign(static_cast<std::size_t>(d), Matrix(space.vocab(), static_cast<Eigen::Index>(states.size())));
        const double t = t0 + k * dt;
        for (std::size_t x = 0; x < states.size(); ++x) {
            for (int i = 0; i < d; ++i) {
                Vector probs = dt * velocity(states[x], t, i);
                const int tok = states[x][static_cast<std::size_t>(i)];
                probs(tok - 1) += 1.0;
                step[static_cast<std::size_t>(i)].col(static_cast<Eigen::Index>(x)) =
                    clamp_transition(std::move(probs), tok - 1);
            }
        }
    }
    Vector counts = Vector::Zero(static_cast<Eigen::Index>(space.size()));
    for (std::size_t j = 0; j < n_paths; ++j) {
        Rng rng = make_rng(base_seed + j);
        State x = states[static_cast<std::size_t>(sample_categorical(p0, rng))];
        for (const auto& step : kernels) {
            const auto xi = static_cast<Eigen::Index>(index_of(space, x));
            State next = x;
            for (int i = 0; i < d; ++i)
                next[static_cast<std::size_t>(i)] =
                    static_cast<int>(sample_categorical(step[static_cast<std::size_t>(i)].col(xi), rng)) + 1;
            x = std::move(next);
        }
        counts(static_cast<Eigen::Index>(index_of(space, x))) += 1.0;
    }
    return counts / static_cast<double>(n_paths);
}

} // namespace dfm
