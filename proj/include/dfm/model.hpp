#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dfm/errors.hpp"
#include "dfm/rng.hpp"
#include "dfm/states.hpp"

namespace dfm {

/// Architecture of the per-coordinate velocity transformer.
///   d0       feature dimension of the internal sequence
///   L        internal sequence length
///   heads    attention heads h
///   s        attention hidden dimension
///   r        feed-forward hidden dimension
///   n_blocks number of (attention, feed-forward) blocks
struct ModelConfig {
    int d0 = 4;
    int L = 4;
    int heads = 1;
    int s = 4;
    int r = 8;
    int n_blocks = 1;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;

/// Offsets of every parameter tensor inside the flat parameter array.
/// Canonical order: E_pos (d0 x L), then per block: for each head W_K, W_Q, W_V (s x d0)
/// and W_O (d0 x s); then W_1 (r x d0), b_1 (r), W_2 (d0 x r), b_2 (d0). Matrices are column-major.
class ParameterLayout {
public:
    struct Head {
        std::size_t key, query, value, out;
    };
    struct Block {
        std::vector<Head> heads;
        std::size_t w1, b1, w2, b2;
    };

    explicit ParameterLayout(const ModelConfig& cfg) {
        std::size_t off = 0;
        auto take = [&off](std::size_t n) {
            const std::size_t at = off;
            off += n;
            return at;
        };
        const auto d0 = static_cast<std::size_t>(cfg.d0);
        const auto L = static_cast<std::size_t>(cfg.L);
        const auto s = static_cast<std::size_t>(cfg.s);
        const auto r = static_cast<std::size_t>(cfg.r);
        pos_ = take(d0 * L);
        blocks_.resize(static_cast<std::size_t>(cfg.n_blocks));
        for (auto& b : blocks_) {
            b.heads.resize(static_cast<std::size_t>(cfg.heads));
            for (auto& h : b.heads) {
                h.key = take(s * d0);
                h.query = take(s * d0);
                h.value = take(s * d0);
                h.out = take(d0 * s);
            }
            b.w1 = take(r * d0);
            b.b1 = take(r);
            b.w2 = take(d0 * r);
            b.b2 = take(d0);
        }
        size_ = off;
    }

    std::size_t size() const { return size_; }
    std::size_t pos() const { return pos_; }
    const Block& block(std::size_t b) const { return blocks_[b]; }

private:
    std::size_t pos_ = 0;
    std::vector<Block> blocks_;
    std::size_t size_ = 0;
};

/// Activations of one block kept for the backward pass.
struct BlockTrace {
    Matrix input;                  // Z entering the block
    std::vector<Matrix> keys;      // W_K Z per head (s x L)
    std::vector<Matrix> queries;   // W_Q Z
    std::vector<Matrix> values;    // W_V Z
    std::vector<Matrix> attention; // column-wise softmax of K^T Q (L x L)
    Matrix after_attention;        // Z + sum_h W_O V S
    Matrix pre_activation;         // W_1 Z1 + b_1 1^T
    Matrix output;
};

struct ForwardTrace {
    Matrix input;  // reshaped, position-encoded network input
    std::vector<BlockTrace> blocks;
    Vector output; // first M entries of the reverse-reshaped network output
};

/// A training example: state, time and the regression target for the coordinate's velocity.
struct Example {
    State x;
    double t;
    Vector target;
};

/// Column-wise softmax with max subtraction.
inline Matrix column_softmax(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        const auto col = a.col(j);
        const Vector e = (col.array() - col.maxCoeff()).exp().matrix();
        out.col(j) = e / e.sum();
    }
    return out;
}

/// Transformer estimator of u^{i0}_t(., x): embed, append t, zero-pad to d0 * L,
/// reshape column-major to d0 x L, add the positional encoding, run the blocks,
/// reverse-reshape and read the first M entries.
class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, StateSpace space, int coordinate)
        : cfg_(cfg), space_(space), coordinate_(coordinate), layout_(cfg), params_(layout_.size(), 0.0) {
        if (cfg.d0 < 1 || cfg.L < 1 || cfg.heads < 1 || cfg.s < 1 || cfg.r < 1 || cfg.n_blocks < 1)
            throw DomainError("model dimensions must all be >= 1");
        const int cells = cfg.d0 * cfg.L;
        if (cells < space.length() + 1)
            throw DomainError("d0 * L = " + std::to_string(cells) + " cannot hold the embedded state and time (" +
                              std::to_string(space.length() + 1) + ")");
        if (cells < space.vocab())
            throw DomainError("d0 * L = " + std::to_string(cells) + " is smaller than the output head M = " +
                              std::to_string(space.vocab()));
        if (coordinate < 0 || coordinate >= space.length()) throw DomainError("model coordinate out of range");
    }

    /// Weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], positional encoding zero.
    static TransformerModel random(ModelConfig cfg, StateSpace space, int coordinate, Rng& rng) {
        TransformerModel m(cfg, space, coordinate);
        auto fill = [&rng](auto&& mat, int fan_in) {
            const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (Eigen::Index k = 0; k < mat.size(); ++k) mat.data()[k] = uniform(rng, -a, a);
        };
        for (int b = 0; b < cfg.n_blocks; ++b) {
            for (int h = 0; h < cfg.heads; ++h) {
                fill(m.key(b, h), cfg.d0);
                fill(m.query(b, h), cfg.d0);
                fill(m.value(b, h), cfg.d0);
                fill(m.out(b, h), cfg.s);
            }
            fill(m.w1(b), cfg.d0);
            fill(m.b1(b), cfg.d0);
            fill(m.w2(b), cfg.r);
            fill(m.b2(b), cfg.r);
        }
        return m;
    }

    /// Same architecture, every parameter zero. Used as a gradient buffer.
    TransformerModel zeros_like() const { return TransformerModel(cfg_, space_, coordinate_); }

    const ModelConfig& config() const { return cfg_; }
    const StateSpace& space() const { return space_; }
    int coordinate() const { return coordinate_; }
    const ParameterLayout& layout() const { return layout_; }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.size(); }

    // Tensor views into the flat parameter array.
    MatrixMap pos_encoding() { return mat(layout_.pos(), cfg_.d0, cfg_.L); }
    ConstMatrixMap pos_encoding() const { return cmat(layout_.pos(), cfg_.d0, cfg_.L); }
    MatrixMap key(int b, int h) { return mat(head(b, h).key, cfg_.s, cfg_.d0); }
    ConstMatrixMap key(int b, int h) const { return cmat(head(b, h).key, cfg_.s, cfg_.d0); }
    MatrixMap query(int b, int h) { return mat(head(b, h).query, cfg_.s, cfg_.d0); }
    ConstMatrixMap query(int b, int h) const { return cmat(head(b, h).query, cfg_.s, cfg_.d0); }
    MatrixMap value(int b, int h) { return mat(head(b, h).value, cfg_.s, cfg_.d0); }
    ConstMatrixMap value(int b, int h) const { return cmat(head(b, h).value, cfg_.s, cfg_.d0); }
    MatrixMap out(int b, int h) { return mat(head(b, h).out, cfg_.d0, cfg_.s); }
    ConstMatrixMap out(int b, int h) const { return cmat(head(b, h).out, cfg_.d0, cfg_.s); }
    MatrixMap w1(int b) { return mat(blk(b).w1, cfg_.r, cfg_.d0); }
    ConstMatrixMap w1(int b) const { return cmat(blk(b).w1, cfg_.r, cfg_.d0); }
    VectorMap b1(int b) { return vec(blk(b).b1, cfg_.r); }
    ConstVectorMap b1(int b) const { return cvec(blk(b).b1, cfg_.r); }
    MatrixMap w2(int b) { return mat(blk(b).w2, cfg_.d0, cfg_.r); }
    ConstMatrixMap w2(int b) const { return cmat(blk(b).w2, cfg_.d0, cfg_.r); }
    VectorMap b2(int b) { return vec(blk(b).b2, cfg_.d0); }
    ConstVectorMap b2(int b) const { return cvec(blk(b).b2, cfg_.d0); }

    /// Network input R(concat(E(x), t)) + E_pos, shape d0 x L.
    Matrix encode(const State& x, double t) const {
        check_state(space_, x);
        if (!(t >= 0.0 && t <= 1.0)) throw DomainError("model time must lie in [0, 1]");
        Matrix z = Matrix::Zero(cfg_.d0, cfg_.L);
        double* cell = z.data();
        for (std::size_t i = 0; i < x.size(); ++i) cell[i] = static_cast<double>(x[i]);
        cell[x.size()] = t;
        return z + pos_encoding();
    }

    /// f_T: the stack of blocks applied to a d0 x L input.
    Matrix network(const Matrix& z) const {
        Matrix cur = z;
        for (int b = 0; b < cfg_.n_blocks; ++b) cur = run_block(b, cur, nullptr);
        return cur;
    }

    ForwardTrace trace(const State& x, double t) const {
        ForwardTrace tr;
        tr.input = encode(x, t);
        tr.blocks.resize(static_cast<std::size_t>(cfg_.n_blocks));
        Matrix cur = tr.input;
        for (int b = 0; b < cfg_.n_blocks; ++b) cur = run_block(b, cur, &tr.blocks[static_cast<std::size_t>(b)]);
        tr.output = head_output(cur);
        return tr;
    }

    /// u^{i0}_theta(., x, t) in R^M.
    Vector forward(const State& x, double t) const { return head_output(network(encode(x, t))); }

    /// Mean over the batch of ||forward(x, t) - target||^2. Its gradient is *added* to `grad`.
    double backward(std::span<const Example> batch, TransformerModel& grad) const {
        if (batch.empty()) throw DomainError("backward needs a nonempty batch");
        if (grad.parameter_count() != parameter_count()) throw DomainError("gradient buffer has the wrong layout");
        const double scale = 1.0 / static_cast<double>(batch.size());
        double loss = 0.0;
        for (const auto& ex : batch) {
            const ForwardTrace tr = trace(ex.x, ex.t);
            const Vector diff = tr.output - ex.target;
            loss += diff.squaredNorm();
            Matrix d_out = Matrix::Zero(cfg_.d0, cfg_.L);
            for (Eigen::Index k = 0; k < diff.size(); ++k) d_out.data()[k] = 2.0 * scale * diff(k);
            backprop(tr, d_out, grad);
        }
        return loss * scale;
    }

    /// Mean squared loss over the batch without gradients.
    double loss(std::span<const Example> batch) const {
        double acc = 0.0;
        for (const auto& ex : batch) acc += (forward(ex.x, ex.t) - ex.target).squaredNorm();
        return acc / static_cast<double>(batch.size());
    }

private:
    const ParameterLayout::Head& head(int b, int h) const {
        return layout_.block(static_cast<std::size_t>(b)).heads[static_cast<std::size_t>(h)];
    }
    const ParameterLayout::Block& blk(int b) const { return layout_.block(static_cast<std::size_t>(b)); }

    MatrixMap mat(std::size_t off, int rows, int cols) { return MatrixMap(params_.data() + off, rows, cols); }
    ConstMatrixMap cmat(std::size_t off, int rows, int cols) const {
        return ConstMatrixMap(params_.data() + off, rows, cols);
    }
    VectorMap vec(std::size_t off, int n) { return VectorMap(params_.data() + off, n); }
    ConstVectorMap cvec(std::size_t off, int n) const { return ConstVectorMap(params_.data() + off, n); }

    Vector head_output(const Matrix& z) const {
        return ConstVectorMap(z.data(), space_.vocab());
    }

    static void check_finite(const Matrix& m, int block, const char* layer) {
        if (!m.allFinite())
            throw NumericalError("non-finite activation in block " + std::to_string(block) + " " + layer);
    }

    Matrix run_block(int b, const Matrix& z, BlockTrace* tr) const {
        Matrix z1 = z;
        if (tr) {
            tr->input = z;
            tr->keys.clear();
            tr->queries.clear();
            tr->values.clear();
            tr->attention.clear();
        }
        for (int h = 0; h < cfg_.heads; ++h) {
            Matrix k = key(b, h) * z;
            Matrix q = query(b, h) * z;
            Matrix v = value(b, h) * z;
            Matrix sm = column_softmax(k.transpose() * q);
            z1.noalias() += out(b, h) * (v * sm);
            if (tr) {
                tr->keys.push_back(std::move(k));
                tr->queries.push_back(std::move(q));
                tr->values.push_back(std::move(v));
                tr->attention.push_back(std::move(sm));
            }
        }
        check_finite(z1, b, "self-attention");
        Matrix pre = w1(b) * z1;
        pre.colwise() += b1(b);
        Matrix z2 = z1 + w2(b) * pre.cwiseMax(0.0);
        z2.colwise() += b2(b);
        check_finite(z2, b, "feed-forward");
        if (tr) {
            tr->after_attention = z1;
            tr->pre_activation = std::move(pre);
            tr->output = z2;
        }
        return z2;
    }

    void backprop(const ForwardTrace& tr, Matrix d_z, TransformerModel& g) const {
        for (int b = cfg_.n_blocks - 1; b >= 0; --b) {
            const BlockTrace& bt = tr.blocks[static_cast<std::size_t>(b)];
            // Feed-forward: Z2 = Z1 + W2 relu(P) + b2 1^T, P = W1 Z1 + b1 1^T.
            const Matrix relu = bt.pre_activation.cwiseMax(0.0);
            g.w2(b).noalias() += d_z * relu.transpose();
            g.b2(b) += d_z.rowwise().sum();
            Matrix d_pre = w2(b).transpose() * d_z;
            d_pre = d_pre.cwiseProduct((bt.pre_activation.array() > 0.0).cast<double>().matrix());
            g.w1(b).noalias() += d_pre * bt.after_attention.transpose();
            g.b1(b) += d_pre.rowwise().sum();
            Matrix d_z1 = d_z + w1(b).transpose() * d_pre;

            // Attention: Z1 = Z + sum_h W_O (V S), S = softmax(K^T Q).
            Matrix d_in = d_z1;
            const Matrix& z = bt.input;
            for (int h = 0; h < cfg_.heads; ++h) {
                const auto hh = static_cast<std::size_t>(h);
                const Matrix& sm = bt.attention[hh];
                const Matrix& v = bt.values[hh];
                const Matrix vs = v * sm;
                g.out(b, h).noalias() += d_z1 * vs.transpose();
                const Matrix d_vs = out(b, h).transpose() * d_z1;
                const Matrix d_v = d_vs * sm.transpose();
                const Matrix d_sm = v.transpose() * d_vs;
                Matrix d_scores(sm.rows(), sm.cols());
                for (Eigen::Index j = 0; j < sm.cols(); ++j) {
                    const double dot = sm.col(j).dot(d_sm.col(j));
                    d_scores.col(j) = sm.col(j).cwiseProduct((d_sm.col(j).array() - dot).matrix());
                }
                const Matrix d_k = bt.queries[hh] * d_scores.transpose();
                const Matrix d_q = bt.keys[hh] * d_scores;
                g.key(b, h).noalias() += d_k * z.transpose();
                g.query(b, h).noalias() += d_q * z.transpose();
                g.value(b, h).noalias() += d_v * z.transpose();
                d_in.noalias() += key(b, h).transpose() * d_k;
                d_in.noalias() += query(b, h).transpose() * d_q;
                d_in.noalias() += value(b, h).transpose() * d_v;
            }
            d_z = std::move(d_in);
        }
        g.pos_encoding() += d_z;
    }

    ModelConfig cfg_;
    StateSpace space_;
    int coordinate_;
    ParameterLayout layout_;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Norm diagnostics
// ---------------------------------------------------------------------------

/// Largest singular value by power iteration on A^T A.
inline double spectral_norm(const Matrix& a, int max_iter = 50, double tol = 1e-10) {
    if (a.size() == 0) return 0.0;
    const Matrix gram = a.transpose() * a;
    Rng rng = make_rng(0x5eedULL);
    Vector v0(a.cols());
    for (Eigen::Index k = 0; k < v0.size(); ++k) v0(k) = 1.0 + uniform01(rng);
    v0.normalize();
    // Power iteration on G^(2^k): each pass squares the (rescaled) Gram power, so a small
    // spectral gap still converges within the iteration budget.
    Matrix power = gram;
    double lambda = v0.dot(gram * v0);
    for (int it = 0; it < max_iter; ++it) {
        Vector w = power * v0;
        const double nw = w.norm();
        if (nw == 0.0) break;
        const Vector v = w / nw;
        const double next = v.dot(gram * v);
        const bool done = std::abs(next - lambda) <= tol * std::max(next, 1e-300);
        lambda = std::max(lambda, next);
        if (done) break;
        power = power * power;
        const double scale = power.cwiseAbs().maxCoeff();
        if (!(scale > 0.0) || !std::isfinite(scale)) break;
        power /= scale;
    }
    return std::sqrt(std::max(lambda, 0.0));
}

/// ||A||_{2,inf}: the largest row l2 norm.
inline double two_inf_norm(const Matrix& a) {
    return a.size() == 0 ? 0.0 : a.rowwise().norm().maxCoeff();
}

struct NormReport {
    double c_kq = 0.0;
    double c_kq_2inf = 0.0;
    double c_ov = 0.0;
    double c_ov_2inf = 0.0;
    double c_f = 0.0;
    double c_f_2inf = 0.0;
    double c_e = 0.0;
    double b_x = 0.0;            // input bound the Lipschitz bound was evaluated at
    double b_x_observed = 0.0;   // largest spectral norm of an encoded lattice input over t in [0, 1]
    double l_t_bound = 1.0;
};

namespace detail {

struct BlockNorms {
    double c_kq = 0.0, c_kq_2inf = 0.0, c_ov = 0.0, c_ov_2inf = 0.0;
    double w1 = 0.0, w2 = 0.0, w1_2inf = 0.0, w2_2inf = 0.0;
    double b1 = 0.0, b2 = 0.0;
};

inline BlockNorms block_norms(const TransformerModel& m, int b, int power_iters) {
    BlockNorms n;
    for (int h = 0; h < m.config().heads; ++h) {
        const Matrix kq = m.key(b, h).transpose() * m.query(b, h);
        const Matrix ov = m.out(b, h) * m.value(b, h);
        n.c_kq = std::max(n.c_kq, spectral_norm(kq, power_iters));
        n.c_kq_2inf = std::max(n.c_kq_2inf, two_inf_norm(kq));
        n.c_ov = std::max(n.c_ov, spectral_norm(ov, power_iters));
        n.c_ov_2inf = std::max(n.c_ov_2inf, two_inf_norm(ov));
    }
    n.w1 = spectral_norm(m.w1(b), power_iters);
    n.w2 = spectral_norm(m.w2(b), power_iters);
    n.w1_2inf = two_inf_norm(m.w1(b));
    n.w2_2inf = two_inf_norm(m.w2(b));
    n.b1 = m.b1(b).norm();
    n.b2 = m.b2(b).norm();
    return n;
}

} // namespace detail

/// Parameter-norm inventory and the closed-form Frobenius Lipschitz bound of the block stack
/// (1 + 2 h B^2 C_OV C_KQ + h L C_OV) (C_F^2 + 1)^2 per block, where B bounds the block input.
/// `input_bound` bounds the Frobenius (hence spectral) norm of the network input. For stacks
/// of more than one block the input bound of each later block is propagated through the
/// previous one, and the per-block factors multiply.
inline NormReport param_norms(const TransformerModel& m, double input_bound, int power_iters = 50) {
    if (!(input_bound > 0.0)) throw DomainError("param_norms needs B_X > 0");
    const auto& cfg = m.config();
    NormReport rep;
    rep.b_x = input_bound;
    rep.c_e = m.pos_encoding().colwise().norm().maxCoeff();  // ||E^T||_{2,inf}
    const double heads = cfg.heads;
    const double len = cfg.L;
    double bound = input_bound;
    double lip = 1.0;
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const auto n = detail::block_norms(m, b, power_iters);
        rep.c_kq = std::max(rep.c_kq, n.c_kq);
        rep.c_kq_2inf = std::max(rep.c_kq_2inf, n.c_kq_2inf);
        rep.c_ov = std::max(rep.c_ov, n.c_ov);
        rep.c_ov_2inf = std::max(rep.c_ov_2inf, n.c_ov_2inf);
        const double c_f = std::max(n.w1, n.w2);
        rep.c_f = std::max(rep.c_f, c_f);
        rep.c_f_2inf = std::max({rep.c_f_2inf, n.w1_2inf, n.w2_2inf});
        lip *= (1.0 + 2.0 * heads * bound * bound * n.c_ov * n.c_kq + heads * len * n.c_ov) *
               (c_f * c_f + 1.0) * (c_f * c_f + 1.0);
        // ||Z S||_F <= sqrt(L) ||Z||_F for column-stochastic S.
        const double after_sa = bound * (1.0 + heads * n.c_ov * std::sqrt(len));
        bound = after_sa + n.w2 * (n.w1 * after_sa + n.b1 * std::sqrt(len)) + n.b2 * std::sqrt(len);
    }
    rep.l_t_bound = lip;
    if (m.space().size() <= kDefaultEnumerationCap) {
        // The encoded input is affine in t, so its norm peaks at t = 0 or t = 1.
        double best = 0.0;
        for (const auto& x : all_states(m.space()))
            for (double t : {0.0, 1.0}) best = std::max(best, spectral_norm(m.encode(x, t), power_iters));
        rep.b_x_observed = best;
    }
    return rep;
}

/// Pairs of d0 x L inputs inside the Frobenius ball of radius `radius`. Half the pairs are
/// independent draws, half are short perturbations of the first point.
inline std::vector<std::pair<Matrix, Matrix>> sample_input_pairs(int d0, int L, std::size_t n_pairs, double radius,
                                                                 Rng& rng) {
    const auto dim = static_cast<Eigen::Index>(d0) * L;
    auto direction = [&]() {
        Matrix m(d0, L);
        for (Eigen::Index k = 0; k < dim; ++k) m.data()[k] = standard_normal(rng);
        return Matrix(m / m.norm());
    };
    auto in_ball = [&]() {
        const double rad = radius * std::pow(uniform01(rng), 1.0 / static_cast<double>(dim));
        return Matrix(rad * direction());
    };
    std::vector<std::pair<Matrix, Matrix>> pairs;
    pairs.reserve(n_pairs);
    for (std::size_t k = 0; k < n_pairs; ++k) {
        Matrix a = in_ball();
        Matrix b;
        if (k % 2 == 0) {
            b = in_ball();
        } else {
            b = a + (1e-3 * radius) * direction();
            const double nb = b.norm();
            if (nb > radius) b *= radius / nb;
        }
        if ((a - b).norm() == 0.0) b = in_ball();
        pairs.emplace_back(std::move(a), std::move(b));
    }
    return pairs;
}

/// max ||f_T(Z1) - f_T(Z2)||_F / ||Z1 - Z2||_F over the given pairs.
inline double empirical_lipschitz(const TransformerModel& m, const std::vector<std::pair<Matrix, Matrix>>& pairs) {
    double best = 0.0;
    for (const auto& [a, b] : pairs) {
        const double den = (a - b).norm();
        if (den == 0.0) continue;
        best = std::max(best, (m.network(a) - m.network(b)).norm() / den);
    }
    return best;
}

inline double empirical_lipschitz(const TransformerModel& m, std::size_t n_pairs, double radius, Rng& rng) {
    if (n_pairs < 1) throw DomainError("empirical_lipschitz needs at least one pair");
    return empirical_lipschitz(m, sample_input_pairs(m.config().d0, m.config().L, n_pairs, radius, rng));
}

} // namespace dfm
