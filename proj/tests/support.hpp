#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfm/ctmc.hpp"
#include "dfm/mixture.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm::testkit {

inline State random_state(const StateSpace& space, Rng& rng) {
    return state_of(space, uniform_index(rng, space.size()));
}

/// Random distribution on n points. support == 0 means full support.
inline Vector random_distribution(std::size_t n, Rng& rng, std::size_t support = 0) {
    Vector p = Vector::Zero(static_cast<Eigen::Index>(n));
    if (support == 0 || support >= n) {
        for (Eigen::Index k = 0; k < p.size(); ++k) p(k) = 0.1 + uniform01(rng);
    } else {
        for (std::size_t k = 0; k < support; ++k) p(static_cast<Eigen::Index>(uniform_index(rng, n))) += 0.1 + uniform01(rng);
    }
    return p / p.sum();
}

/// Random valid generator with off-diagonal entries in [0, scale).
inline Matrix random_rates(Eigen::Index n, Rng& rng, double scale = 1.0) {
    Matrix u(n, n);
    for (Eigen::Index x = 0; x < n; ++x) {
        for (Eigen::Index y = 0; y < n; ++y) u(y, x) = y == x ? 0.0 : scale * uniform01(rng);
        u(x, x) = -u.col(x).sum();
    }
    return u;
}

inline Matrix two_state_rates(double a, double b) {
    // a: rate 1 -> 2, b: rate 2 -> 1. Column is the source.
    Matrix u(2, 2);
    u << -a, b, a, -b;
    return u;
}

struct CorpusEntry {
    std::string name;
    MixturePathSpec spec;
};

/// The mixture-path corpus: every (M, d) with M <= 4, d <= 3, |S| <= 64, both schedules,
/// and three endpoint families (point masses, full-support source with sparse target,
/// uniform source with random target).
inline std::vector<CorpusEntry> mixture_corpus() {
    std::vector<CorpusEntry> out;
    Rng rng = make_rng(20240601);
    const std::vector<std::pair<int, int>> shapes{{2, 1}, {3, 1}, {4, 1}, {2, 2}, {3, 2}, {4, 2}, {2, 3}, {3, 3}, {4, 3}};
    for (auto [M, d] : shapes) {
        const StateSpace space(M, d);
        const auto n = space.size();
        for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::smoothstep}) {
            const KappaSchedule sched(kind);
            const std::string tag = "M" + std::to_string(M) + "d" + std::to_string(d) + "-" + to_string(kind);
            out.push_back({tag + "-points",
                           MixturePathSpec(space, sched, point_mass(n, 0), point_mass(n, n - 1))});
            out.push_back({tag + "-dense-sparse",
                           MixturePathSpec(space, sched, random_distribution(n, rng), random_distribution(n, rng, 3))});
            out.push_back({tag + "-uniform-random",
                           MixturePathSpec(space, sched, Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / n),
                                           random_distribution(n, rng, n > 8 ? 5 : 0))});
        }
    }
    return out;
}

/// Dense generator assembled from the per-state marginal_velocity, independent of the table route.
inline RatesField direct_marginal_field(const MixturePathSpec& spec) {
    const auto states = all_states(spec.space);
    return RatesField{[spec, states](double t) {
                          FactorizedRates f(spec.space);
                          const Vector p = marginal_path(spec, t);
                          for (std::size_t x = 0; x < states.size(); ++x) {
                              if (!(p(static_cast<Eigen::Index>(x)) > 0.0)) continue;
                              for (int i = 0; i < spec.space.length(); ++i)
                                  f.per_coordinate[static_cast<std::size_t>(i)].col(static_cast<Eigen::Index>(x)) =
                                      marginal_velocity(spec, t, states[x], i);
                          }
                          return assemble_factorized(f);
                      },
                      spec.clip.t0, spec.clip.T};
}

} // namespace dfm::testkit
