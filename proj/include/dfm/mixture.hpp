#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dfm/ctmc.hpp"
#include "dfm/errors.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm {

enum class ScheduleKind { linear, smoothstep };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "quadratic-smooth"; }

inline ScheduleKind schedule_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "quadratic-smooth" || s == "smoothstep") return ScheduleKind::smoothstep;
    throw DomainError("unknown schedule '" + s + "'");
}

struct KappaValue {
    double kappa;
    double kappa_dot;
    double coefficient;  // kappa_dot / (1 - kappa)
};

/// Scheduler kappa_t with kappa(0) = 0, kappa(1) = 1 and kappa' > 0 on (0, 1).
/// linear: kappa = t. quadratic-smooth: kappa = t^2 (3 - 2t).
class KappaSchedule {
public:
    explicit KappaSchedule(ScheduleKind kind = ScheduleKind::linear) : kind_(kind) {}

    ScheduleKind kind() const { return kind_; }

    double kappa(double t) const {
        check_time(t);
        return kind_ == ScheduleKind::linear ? t : t * t * (3.0 - 2.0 * t);
    }

    double kappa_dot(double t) const {
        check_time(t);
        return kind_ == ScheduleKind::linear ? 1.0 : 6.0 * t * (1.0 - t);
    }

    /// kappa_dot / (1 - kappa), simplified per schedule so it stays accurate near t = 1.
    double coefficient(double t) const {
        check_time(t);
        if (t >= 1.0) throw SingularityError("kappa_dot / (1 - kappa) is singular at t = 1; clip the time interval");
        if (kind_ == ScheduleKind::linear) return 1.0 / (1.0 - t);
        return 6.0 * t / ((1.0 - t) * (1.0 + 2.0 * t));
    }

    KappaValue eval(double t) const { return {kappa(t), kappa_dot(t), coefficient(t)}; }

    friend bool operator==(const KappaSchedule&, const KappaSchedule&) = default;

private:
    static void check_time(double t) {
        if (!(t >= 0.0 && t <= 1.0)) throw DomainError("schedule time must lie in [0, 1], got " + std::to_string(t));
    }

    ScheduleKind kind_;
};

inline KappaValue kappa_eval(const KappaSchedule& sched, double t) { return sched.eval(t); }

/// Training and evaluation interval [t0, T] inside (0, 1).
struct TimeClip {
    double t0 = 0.05;
    double T = 0.95;

    TimeClip() = default;
    TimeClip(double lo, double hi) : t0(lo), T(hi) {
        if (!(0.0 < lo && lo < hi && hi < 1.0))
            throw DomainError("time clip needs 0 < t0 < T < 1, got [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
    }

    bool contains(double t) const { return t >= t0 && t <= T; }
    double length() const { return T - t0; }

    friend bool operator==(const TimeClip&, const TimeClip&) = default;
};

enum class ClipMode { lenient, strict };

/// Source/target pair, schedule and clip defining a factorized mixture path.
/// In empirical mode `samples` holds the training multiset and `p1` is its empirical measure.
struct MixturePathSpec {
    StateSpace space;
    KappaSchedule schedule;
    Vector p0;
    Vector p1;
    TimeClip clip;
    std::optional<std::vector<State>> samples;

    MixturePathSpec(StateSpace s, KappaSchedule sched, Vector source, Vector target, TimeClip c = {})
        : space(s), schedule(sched), p0(std::move(source)), p1(std::move(target)), clip(c) {
        validate();
    }

    static MixturePathSpec empirical(StateSpace s, KappaSchedule sched, Vector source, std::vector<State> data,
                                     TimeClip c = {}) {
        if (data.empty()) throw DomainError("empirical target needs at least one sample");
        Vector target = Vector::Zero(static_cast<Eigen::Index>(s.size()));
        for (const auto& x : data) target(static_cast<Eigen::Index>(index_of(s, x))) += 1.0;
        target /= static_cast<double>(data.size());
        MixturePathSpec spec(s, sched, std::move(source), std::move(target), c);
        spec.samples = std::move(data);
        return spec;
    }

    void validate() const {
        const auto n = static_cast<Eigen::Index>(space.size());
        if (p0.size() != n || p1.size() != n) throw DomainError("endpoint distributions do not match state space");
        require_simplex(p0, "source distribution p0");
        require_simplex(p1, "target distribution p1");
    }
};

namespace detail {

inline std::vector<StateIndex> support(const Vector& p) {
    std::vector<StateIndex> out;
    for (Eigen::Index k = 0; k < p.size(); ++k)
        if (p(k) > 0.0) out.push_back(static_cast<StateIndex>(k));
    return out;
}

inline void check_coordinate(const StateSpace& space, int i) {
    if (i < 0 || i >= space.length())
        throw DomainError("coordinate " + std::to_string(i) + " outside [0, " + std::to_string(space.length()) + ")");
}

} // namespace detail

/// p^i_{t|0,1}(. | x0, x1) = kappa_t onehot(x1^i) + (1 - kappa_t) onehot(x0^i).
inline Vector conditional_coordinate_prob(const MixturePathSpec& spec, double t, const State& x0, const State& x1,
                                          int i) {
    detail::check_coordinate(spec.space, i);
    const double k = spec.schedule.kappa(t);
    const auto ii = static_cast<std::size_t>(i);
    Vector p = Vector::Zero(spec.space.vocab());
    p(x1[ii] - 1) += k;
    p(x0[ii] - 1) += 1.0 - k;
    return p;
}

inline State sample_conditional_state(const MixturePathSpec& spec, double t, const State& x0, const State& x1,
                                      Rng& rng) {
    const double k = spec.schedule.kappa(t);
    State x = x0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        // Draw unconditionally so the stream position does not depend on the endpoints.
        const double u = uniform01(rng);
        x[i] = u < k ? x1[i] : x0[i];
    }
    return x;
}

/// c_t (onehot(x1^i) - onehot(x^i)).
inline Vector conditional_velocity(const MixturePathSpec& spec, double t, const State& x, const State& x1, int i,
                                   ClipMode mode = ClipMode::lenient) {
    detail::check_coordinate(spec.space, i);
    if (mode == ClipMode::strict && !spec.clip.contains(t))
        throw ClipError("t = " + std::to_string(t) + " outside the clip [" + std::to_string(spec.clip.t0) + ", " +
                        std::to_string(spec.clip.T) + "]");
    const double c = spec.schedule.coefficient(t);
    const auto ii = static_cast<std::size_t>(i);
    Vector u = Vector::Zero(spec.space.vocab());
    u(x1[ii] - 1) += c;
    u(x[ii] - 1) -= c;
    return u;
}

/// Exact marginal p_t by direct expansion over all endpoint pairs and all states.
inline Vector marginal_path(const MixturePathSpec& spec, double t) {
    check_enumerable(spec.space);
    const double k = spec.schedule.kappa(t);
    const auto states = all_states(spec.space);
    const auto s0 = detail::support(spec.p0);
    const auto s1 = detail::support(spec.p1);
    Vector p = Vector::Zero(static_cast<Eigen::Index>(states.size()));
    for (StateIndex a : s0) {
        const State& x0 = states[a];
        for (StateIndex b : s1) {
            const State& x1 = states[b];
            const double w = spec.p0(static_cast<Eigen::Index>(a)) * spec.p1(static_cast<Eigen::Index>(b));
            for (std::size_t x = 0; x < states.size(); ++x) {
                double prod = w;
                for (std::size_t i = 0; i < x1.size() && prod != 0.0; ++i) {
                    const int tok = states[x][i];
                    prod *= k * (tok == x1[i]) + (1.0 - k) * (tok == x0[i]);
                }
                p(static_cast<Eigen::Index>(x)) += prod;
            }
        }
    }
    return p;
}

namespace detail {

// Visit every state reachable under the conditional path of (x0, x1): each coordinate
// takes x0^j or x1^j. `visit(x_index, weight, x1)` receives prod_j p^j(x^j | x0, x1).
template <class Visit>
void for_each_conditional_state(const StateSpace& space, const State& x0, const State& x1, double k, Visit&& visit) {
    const int d = space.length();
    std::vector<int> free;
    for (int j = 0; j < d; ++j)
        if (x0[static_cast<std::size_t>(j)] != x1[static_cast<std::size_t>(j)]) free.push_back(j);
    const auto m = static_cast<StateIndex>(space.vocab());
    const std::size_t combos = std::size_t{1} << free.size();
    State x = x0;
    for (std::size_t mask = 0; mask < combos; ++mask) {
        double w = 1.0;
        for (std::size_t b = 0; b < free.size(); ++b) {
            const auto j = static_cast<std::size_t>(free[b]);
            const bool take_target = (mask >> b) & 1U;
            x[j] = take_target ? x1[j] : x0[j];
            w *= take_target ? k : 1.0 - k;
        }
        if (w == 0.0) continue;
        StateIndex idx = 0;
        for (int tok : x.tokens) idx = idx * m + static_cast<StateIndex>(tok - 1);
        visit(idx, w);
    }
}

} // namespace detail

/// Exact marginal velocity for coordinate i at state x:
/// u^i_t(y, x) = c_t (P[X_1^i = y | X_t = x] - delta(y, x^i)).
inline Vector marginal_velocity(const MixturePathSpec& spec, double t, const State& x, int i) {
    detail::check_coordinate(spec.space, i);
    check_state(spec.space, x);
    const double k = spec.schedule.kappa(t);
    const double c = spec.schedule.coefficient(t);
    const auto s0 = detail::support(spec.p0);
    const auto s1 = detail::support(spec.p1);
    const auto ii = static_cast<std::size_t>(i);
    Vector num = Vector::Zero(spec.space.vocab());
    double total = 0.0;
    for (StateIndex a : s0) {
        const State x0 = state_of(spec.space, a);
        for (StateIndex b : s1) {
            const State x1 = state_of(spec.space, b);
            double w = spec.p0(static_cast<Eigen::Index>(a)) * spec.p1(static_cast<Eigen::Index>(b));
            for (std::size_t j = 0; j < x.size() && w != 0.0; ++j)
                w *= k * (x[j] == x1[j]) + (1.0 - k) * (x[j] == x0[j]);
            total += w;
            num(x1[ii] - 1) += w;
        }
    }
    if (!(total > 0.0))
        throw UndefinedPosteriorError("p_t(x) = 0 at t = " + std::to_string(t) + "; posterior undefined");
    Vector u = num / total;
    u(x[ii] - 1) -= 1.0;
    return c * u;
}

/// Marginal velocities for every state and coordinate at time t in one pass.
/// Columns of states with p_t(x) = 0 are left at zero; they carry no mass.
inline FactorizedRates marginal_velocity_table(const MixturePathSpec& spec, double t) {
    check_enumerable(spec.space);
    const double k = spec.schedule.kappa(t);
    const double c = spec.schedule.coefficient(t);
    const auto n = static_cast<Eigen::Index>(spec.space.size());
    const int d = spec.space.length();
    FactorizedRates table(spec.space);
    Vector total = Vector::Zero(n);
    for (StateIndex a : detail::support(spec.p0)) {
        const State x0 = state_of(spec.space, a);
        for (StateIndex b : detail::support(spec.p1)) {
            const State x1 = state_of(spec.space, b);
            const double w = spec.p0(static_cast<Eigen::Index>(a)) * spec.p1(static_cast<Eigen::Index>(b));
            detail::for_each_conditional_state(spec.space, x0, x1, k, [&](StateIndex idx, double cw) {
                const auto col = static_cast<Eigen::Index>(idx);
                total(col) += w * cw;
                for (int i = 0; i < d; ++i)
                    table.per_coordinate[static_cast<std::size_t>(i)](x1[static_cast<std::size_t>(i)] - 1, col) +=
                        w * cw;
            });
        }
    }
    for (Eigen::Index x = 0; x < n; ++x) {
        if (!(total(x) > 0.0)) continue;
        const State xs = state_of(spec.space, static_cast<StateIndex>(x));
        for (int i = 0; i < d; ++i) {
            auto col = table.per_coordinate[static_cast<std::size_t>(i)].col(x);
            col /= total(x);
            col(xs[static_cast<std::size_t>(i)] - 1) -= 1.0;
            col *= c;
        }
    }
    return table;
}

/// The exact marginal generator t -> U_t, valid on the clip.
inline RatesField marginal_rates_field(const MixturePathSpec& spec) {
    RatesField f = factorized_field([spec](double t) { return marginal_velocity_table(spec, t); }, spec.clip.t0,
                                    spec.clip.T);
    // |u| <= c_t on the clip; c_t is nondecreasing for both shipped schedules.
    f.bound = spec.schedule.coefficient(spec.clip.T);
    return f;
}

/// Exact marginal velocity as a per-coordinate provider (zero where p_t(x) = 0).
inline CoordinateVelocity marginal_velocity_provider(const MixturePathSpec& spec) {
    return [spec](const State& x, double t, int i) -> Vector {
        try {
            return marginal_velocity(spec, t, x, i);
        } catch (const UndefinedPosteriorError&) {
            return Vector::Zero(spec.space.vocab());
        }
    };
}

/// sup of c_t over the clip, sampled on a uniform grid.
inline double coefficient_sup(const KappaSchedule& sched, const TimeClip& clip, int grid = 1000) {
    double best = 0.0;
    for (int k = 0; k <= grid; ++k)
        best = std::max(best, sched.coefficient(clip.t0 + clip.length() * k / grid));
    return best;
}

} // namespace dfm
