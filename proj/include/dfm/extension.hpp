#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dfm/errors.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm {

/// eta(x) = e exp(-1 / (1 - x)) on [0, 1), 0 on [1, inf). Derivatives follow
/// d^n eta / dx^n = e p_n(z) exp(z), z = 1 / (x - 1), with p_0 = 1 and
/// p_n(z) = -z^2 (p_{n-1}(z) + p'_{n-1}(z)).
class BumpFunction {
public:
    static constexpr int kMaxOrder = 8;

    BumpFunction() {
        polys_.push_back({1.0});
        for (int n = 1; n <= kMaxOrder; ++n) {
            const auto& prev = polys_.back();
            std::vector<double> next(prev.size() + 2, 0.0);
            for (std::size_t k = 0; k < prev.size(); ++k) {
                next[k + 2] -= prev[k];
                if (k > 0) next[k + 1] -= static_cast<double>(k) * prev[k];
            }
            polys_.push_back(std::move(next));
        }
    }

    /// Coefficients of p_n in increasing degree.
    const std::vector<double>& polynomial(int n) const {
        check_order(n);
        return polys_[static_cast<std::size_t>(n)];
    }

    double eta(double x) const {
        if (!(x >= 0.0)) throw DomainError("eta needs x >= 0, got " + std::to_string(x));
        if (x >= 1.0) return 0.0;
        // e exp(-1/(1-x)) = exp(-x/(1-x)), exact 1 at x = 0.
        return std::exp(-x / (1.0 - x));
    }

    double derivative(double x, int n) const {
        if (!(x >= 0.0)) throw DomainError("eta derivative needs x >= 0, got " + std::to_string(x));
        check_order(n);
        if (n == 0) return eta(x);
        if (x >= 1.0) return 0.0;
        const double z = 1.0 / (x - 1.0);
        if (z < -700.0) return 0.0;
        const auto& p = polys_[static_cast<std::size_t>(n)];
        double acc = 0.0;
        for (std::size_t k = p.size(); k-- > 0;) acc = acc * z + p[k];
        return acc * std::exp(1.0 + z);
    }

    /// e (2n / e)^{2n}, with the n = 0 case equal to e.
    static double derivative_bound(int n) {
        if (n < 0) throw DomainError("derivative order must be >= 0");
        if (n == 0) return std::numbers::e;
        return std::numbers::e * std::pow(2.0 * n / std::numbers::e, 2.0 * n);
    }

private:
    static void check_order(int n) {
        if (n < 0) throw DomainError("derivative order must be >= 0");
        if (n > kMaxOrder)
            throw CapacityError("derivative order " + std::to_string(n) + " beyond cached limit " +
                                std::to_string(kMaxOrder));
    }

    std::vector<std::vector<double>> polys_;
};

inline const BumpFunction& bump() {
    static const BumpFunction b;
    return b;
}

inline double eta(double x) { return bump().eta(x); }
inline double eta_derivative(double x, int n) { return bump().derivative(x, n); }

/// phi_s(x) = eta(e^2 ||x - embed(s)||^2): 1 at embed(s), supported in the open ball of radius 1/e.
inline double bump_phi(const State& s, const Vector& x) {
    if (x.size() != static_cast<Eigen::Index>(s.size()))
        throw DomainError("bump_phi: point has dimension " + std::to_string(x.size()) + ", expected " +
                          std::to_string(s.size()));
    constexpr double e2 = std::numbers::e * std::numbers::e;
    return eta(e2 * (x - embed(s)).squaredNorm());
}

/// Discrete table u(s, t) on a time grid, linearly interpolated in t, extended to R^d by
/// u~(x, t) = sum_s phi_s(x) u(s, t).
class ExtensionField {
public:
    /// values[k] is (output dim) x |S|; column s holds u(s, times[k]).
    ExtensionField(StateSpace space, std::vector<double> times, std::vector<Matrix> values)
        : space_(space), times_(std::move(times)), values_(std::move(values)) {
        check_enumerable(space_);
        if (times_.empty() || times_.size() != values_.size())
            throw DomainError("extension table needs one value matrix per grid time");
        for (std::size_t k = 1; k < times_.size(); ++k)
            if (!(times_[k] > times_[k - 1])) throw DomainError("extension time grid must be strictly increasing");
        dim_ = values_.front().rows();
        for (const auto& v : values_) {
            if (v.rows() != dim_ || v.cols() != static_cast<Eigen::Index>(space_.size()))
                throw DomainError("extension table has inconsistent shape");
            if (!v.allFinite()) throw DomainError("extension table has non-finite entries");
        }
    }

    static ExtensionField from_function(StateSpace space, std::vector<double> times,
                                        const std::function<Vector(const State&, double)>& u) {
        check_enumerable(space);
        const auto states = all_states(space);
        std::vector<Matrix> values;
        values.reserve(times.size());
        for (double t : times) {
            Matrix m;
            for (std::size_t s = 0; s < states.size(); ++s) {
                const Vector v = u(states[s], t);
                if (s == 0) m.resize(v.size(), static_cast<Eigen::Index>(states.size()));
                m.col(static_cast<Eigen::Index>(s)) = v;
            }
            values.push_back(std::move(m));
        }
        return ExtensionField(space, std::move(times), std::move(values));
    }

    const StateSpace& space() const { return space_; }
    const std::vector<double>& times() const { return times_; }
    const std::vector<Matrix>& values() const { return values_; }
    Eigen::Index output_dim() const { return dim_; }

    /// u(s, t): the table column at a grid time, linear interpolation in between.
    Vector table(StateIndex s, double t) const {
        if (!(t >= times_.front() && t <= times_.back()))
            throw DomainError("time " + std::to_string(t) + " outside the table domain [" +
                              std::to_string(times_.front()) + ", " + std::to_string(times_.back()) + "]");
        const auto col = static_cast<Eigen::Index>(s);
        const auto hi = std::lower_bound(times_.begin(), times_.end(), t);
        const auto k = static_cast<std::size_t>(hi - times_.begin());
        if (*hi == t) return values_[k].col(col);
        const double w = (t - times_[k - 1]) / (times_[k] - times_[k - 1]);
        return (1.0 - w) * values_[k - 1].col(col) + w * values_[k].col(col);
    }

    /// u~(x, t). Bump supports have radius 1/e < 1/2, so only the nearest lattice site can contribute.
    Vector operator()(const Vector& x, double t) const {
        if (x.size() != space_.length())
            throw DomainError("extension point has dimension " + std::to_string(x.size()) + ", expected " +
                              std::to_string(space_.length()));
        State s{std::vector<int>(static_cast<std::size_t>(space_.length()))};
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double r = std::clamp(std::round(x(i)), 1.0, static_cast<double>(space_.vocab()));
            s[static_cast<std::size_t>(i)] = static_cast<int>(r);
        }
        const double phi = bump_phi(s, x);
        if (phi == 0.0) {
            if (!(t >= times_.front() && t <= times_.back())) table(0, t);  // domain check
            return Vector::Zero(dim_);
        }
        return phi * table(index_of(space_, s), t);
    }

private:
    StateSpace space_;
    std::vector<double> times_;
    std::vector<Matrix> values_;
    Eigen::Index dim_ = 0;
};

inline Vector extend(const ExtensionField& field, const Vector& x, double t) { return field(x, t); }

/// Smallest valid (L_u, M_u) for the table: the largest time slope between grid points and
/// the largest l2 norm of a table entry.
struct TableBounds {
    double l_u = 0.0;
    double m_u = 0.0;
};

inline TableBounds table_bounds(const ExtensionField& field) {
    TableBounds b;
    const auto& ts = field.times();
    const auto& vs = field.values();
    for (std::size_t k = 0; k < vs.size(); ++k) {
        b.m_u = std::max(b.m_u, vs[k].colwise().norm().maxCoeff());
        if (k > 0)
            b.l_u = std::max(b.l_u, (vs[k] - vs[k - 1]).colwise().norm().maxCoeff() / (ts[k] - ts[k - 1]));
    }
    return b;
}

struct ExtensionLipschitzReport {
    double empirical = 0.0;  // max observed ratio over the sampled pairs
    double bound = 0.0;      // max{L_u, 4 e sqrt(d) M_u}
    double l_u = 0.0;
    double m_u = 0.0;
    double table_l_u = 0.0;
    double table_m_u = 0.0;
    std::size_t n_pairs = 0;
    bool pass = false;
};

/// Samples pairs (x1, t1), (x2, t2) and compares the largest ratio
/// ||u~(x1, t1) - u~(x2, t2)|| / ||(x1, t1) - (x2, t2)|| with max{L_u, 4 e sqrt(d) M_u}.
/// Pairs mix close perturbations inside one bump, moves between neighbouring bumps and
/// independent points in the lattice bounding box.
inline ExtensionLipschitzReport extension_lipschitz_check(const ExtensionField& field, double L_u, double M_u,
                                                          std::size_t n_pairs, Rng& rng) {
    if (n_pairs < 1) throw DomainError("extension_lipschitz_check needs at least one pair");
    const TableBounds tb = table_bounds(field);
    constexpr double slack = 1e-12;
    if (!(L_u >= tb.l_u * (1.0 - slack)))
        throw InputBoundError("supplied L_u = " + std::to_string(L_u) + " is below the table's time slope " +
                              std::to_string(tb.l_u));
    if (!(M_u >= tb.m_u * (1.0 - slack)))
        throw InputBoundError("supplied M_u = " + std::to_string(M_u) + " is below the table's largest norm " +
                              std::to_string(tb.m_u));
    const StateSpace& space = field.space();
    const int d = space.length();
    const double lo = field.times().front();
    const double hi = field.times().back();
    ExtensionLipschitzReport rep;
    rep.l_u = L_u;
    rep.m_u = M_u;
    rep.table_l_u = tb.l_u;
    rep.table_m_u = tb.m_u;
    rep.n_pairs = n_pairs;
    rep.bound = std::max(L_u, 4.0 * std::numbers::e * std::sqrt(static_cast<double>(d)) * M_u);

    auto direction = [&]() {
        Vector v(d);
        for (int i = 0; i < d; ++i) v(i) = standard_normal(rng);
        return Vector(v / v.norm());
    };
    auto in_bump = [&]() {
        const State s = state_of(space, uniform_index(rng, space.size()));
        const double r = (1.0 / std::numbers::e) * std::pow(uniform01(rng), 1.0 / d);
        return Vector(embed(s) + r * direction());
    };
    auto in_box = [&]() {
        Vector v(d);
        for (int i = 0; i < d; ++i) v(i) = uniform(rng, 0.5, space.vocab() + 0.5);
        return v;
    };
    const double span = hi - lo;
    for (std::size_t k = 0; k < n_pairs; ++k) {
        Vector x1, x2;
        double t1 = uniform(rng, lo, hi);
        double t2 = t1;
        switch (k % 3) {
            case 0: {
                x1 = in_bump();
                x2 = x1 + uniform(rng, 1e-4, 1e-2) * direction();
                if (span > 0.0) t2 = std::clamp(t1 + uniform(rng, -1e-2, 1e-2) * span, lo, hi);
                break;
            }
            case 1: {
                x1 = in_bump();
                x2 = x1 + uniform(rng, 0.2, 1.2) * direction();
                t2 = uniform(rng, lo, hi);
                break;
            }
            default: {
                x1 = in_box();
                x2 = in_box();
                t2 = uniform(rng, lo, hi);
                break;
            }
        }
        const double den = std::sqrt((x1 - x2).squaredNorm() + (t1 - t2) * (t1 - t2));
        if (den == 0.0) continue;
        rep.empirical = std::max(rep.empirical, (field(x1, t1) - field(x2, t2)).norm() / den);
    }
    rep.pass = rep.empirical <= rep.bound;
    return rep;
}

/// e (k1 + 2) (2 k1)^{2 k1} K M^d: the Hoelder-norm constant of the extension. Reported, not certified.
inline double extension_holder_constant(int k1, double K, int M, int d) {
    if (k1 < 0 || M < 1 || d < 1) throw DomainError("invalid Hoelder constant inputs");
    const double base = k1 == 0 ? 1.0 : std::pow(2.0 * k1, 2.0 * k1);
    return std::numbers::e * (k1 + 2) * base * K * std::pow(static_cast<double>(M), d);
}

} // namespace dfm
