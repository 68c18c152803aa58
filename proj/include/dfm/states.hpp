#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dfm/errors.hpp"

namespace dfm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

using StateIndex = std::size_t;

inline constexpr std::size_t kDefaultEnumerationCap = 65536;

/// The lattice S = [M]^d.
class StateSpace {
public:
    StateSpace(int vocab, int length) : vocab_(vocab), length_(length) {
        if (vocab < 2) throw DomainError("state space needs M >= 2, got " + std::to_string(vocab));
        if (length < 1) throw DomainError("state space needs d >= 1, got " + std::to_string(length));
        std::size_t n = 1;
        for (int i = 0; i < length; ++i) {
            if (n > std::numeric_limits<std::size_t>::max() / static_cast<std::size_t>(vocab))
                throw CapacityError("M^d overflows the index range");
            n *= static_cast<std::size_t>(vocab);
        }
        size_ = n;
    }

    int vocab() const { return vocab_; }
    int length() const { return length_; }
    std::size_t size() const { return size_; }

    friend bool operator==(const StateSpace&, const StateSpace&) = default;

private:
    int vocab_;
    int length_;
    std::size_t size_;
};

/// A sequence of 1-based tokens.
struct State {
    std::vector<int> tokens;

    std::size_t size() const { return tokens.size(); }
    int operator[](std::size_t i) const { return tokens[i]; }
    int& operator[](std::size_t i) { return tokens[i]; }

    friend bool operator==(const State&, const State&) = default;
};

inline void check_state(const StateSpace& space, const State& s) {
    if (s.size() != static_cast<std::size_t>(space.length()))
        throw DomainError("state has length " + std::to_string(s.size()) + ", expected " +
                          std::to_string(space.length()));
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 1 || s[i] > space.vocab())
            throw DomainError("token " + std::to_string(s[i]) + " at coordinate " + std::to_string(i) +
                              " outside [1, " + std::to_string(space.vocab()) + "]");
    }
}

/// Mixed-radix index with coordinate 0 most significant.
inline StateIndex index_of(const StateSpace& space, const State& s) {
    check_state(space, s);
    StateIndex idx = 0;
    for (int tok : s.tokens) idx = idx * static_cast<StateIndex>(space.vocab()) + static_cast<StateIndex>(tok - 1);
    return idx;
}

inline State state_of(const StateSpace& space, StateIndex idx) {
    if (idx >= space.size())
        throw DomainError("state index " + std::to_string(idx) + " outside [0, " + std::to_string(space.size()) + ")");
    State s{std::vector<int>(static_cast<std::size_t>(space.length()))};
    const auto m = static_cast<StateIndex>(space.vocab());
    for (int i = space.length() - 1; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = static_cast<int>(idx % m) + 1;
        idx /= m;
    }
    return s;
}

inline void check_enumerable(const StateSpace& space, std::size_t cap = kDefaultEnumerationCap) {
    if (space.size() > cap)
        throw CapacityError("state space of size " + std::to_string(space.size()) + " exceeds enumeration cap " +
                            std::to_string(cap));
}

inline std::vector<State> all_states(const StateSpace& space, std::size_t cap = kDefaultEnumerationCap) {
    check_enumerable(space, cap);
    std::vector<State> out;
    out.reserve(space.size());
    for (StateIndex i = 0; i < space.size(); ++i) out.push_back(state_of(space, i));
    return out;
}

/// Integer embedding E: S -> R^d.
inline Vector embed(const State& s) {
    Vector v(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) v(static_cast<Eigen::Index>(i)) = static_cast<double>(s[i]);
    return v;
}

/// One-hot vector of length M for a 1-based token.
inline Vector one_hot(int vocab, int token) {
    Vector v = Vector::Zero(vocab);
    v(token - 1) = 1.0;
    return v;
}

} // namespace dfm
