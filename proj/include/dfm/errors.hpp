#pragma once

#include <stdexcept>
#include <string>

namespace dfm {

/// Input outside the mathematical domain of an operation (bad token, bad shape, t < 0, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Enumeration or cache limit exceeded.
struct CapacityError : std::length_error {
    using std::length_error::length_error;
};

/// A numerical invariant broke during integration or evaluation.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// kappa_dot / (1 - kappa) requested at its pole.
struct SingularityError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Time outside the clipped interval while strict clipping is on.
struct ClipError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Posterior over endpoints undefined because p_t(x) == 0.
struct UndefinedPosteriorError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Caller-supplied bound (L_u, M_u) is violated by the data it claims to bound.
struct InputBoundError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

} // namespace dfm
