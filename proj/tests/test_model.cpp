#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "dfm/io.hpp"
#include "dfm/model.hpp"
#include "support.hpp"

using namespace dfm;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.d0 = 4;
    c.L = 4;
    c.heads = 1;
    c.s = 4;
    c.r = 8;
    return c;
}

std::vector<Example> random_batch(const StateSpace& sp, std::size_t n, Rng& rng) {
    std::vector<Example> out;
    for (std::size_t k = 0; k < n; ++k) {
        Vector target(sp.vocab());
        for (Eigen::Index j = 0; j < target.size(); ++j) target(j) = standard_normal(rng);
        out.push_back({testkit::random_state(sp, rng), uniform01(rng), target});
    }
    return out;
}

void randomize_positional(TransformerModel& m, Rng& rng, double scale) {
    auto e = m.pos_encoding();
    for (Eigen::Index k = 0; k < e.size(); ++k) e.data()[k] = scale * uniform(rng, -1.0, 1.0);
}

struct GradientCheck {
    double worst = 0.0;
    std::size_t worst_index = 0;
};

GradientCheck finite_difference_check(TransformerModel model, const std::vector<Example>& batch, double eps) {
    TransformerModel grad = model.zeros_like();
    model.backward(batch, grad);
    GradientCheck out;
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double keep = params[k];
        params[k] = keep + eps;
        const double up = model.loss(batch);
        params[k] = keep - eps;
        const double down = model.loss(batch);
        params[k] = keep;
        const double fd = (up - down) / (2.0 * eps);
        const double g = grad.parameters()[k];
        const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6});
        if (rel > out.worst) {
            out.worst = rel;
            out.worst_index = k;
        }
    }
    return out;
}

} // namespace

TEST(Model, RejectsInconsistentShapes) {
    ModelConfig c = tiny();
    c.d0 = 1;
    c.L = 2;
    EXPECT_THROW(TransformerModel(c, StateSpace(2, 2), 0), DomainError);  // d0 L < d + 1
    c.L = 3;
    EXPECT_THROW(TransformerModel(c, StateSpace(4, 2), 0), DomainError);  // d0 L < M
    EXPECT_THROW(TransformerModel(tiny(), StateSpace(2, 2), 2), DomainError);
    c = tiny();
    c.heads = 0;
    EXPECT_THROW(TransformerModel(c, StateSpace(2, 2), 0), DomainError);
}

TEST(Model, ParameterCountMatchesLayout) {
    ModelConfig c = tiny();
    c.heads = 2;
    c.n_blocks = 2;
    const TransformerModel m(c, StateSpace(3, 2), 1);
    const std::size_t per_block = 2 * (3 * 4 * 4 + 4 * 4) + 8 * 4 + 8 + 4 * 8 + 4;
    EXPECT_EQ(m.parameter_count(), 16 + 2 * per_block);
}

TEST(Model, ZeroWeightsGiveResidualIdentity) {
    for (auto [M, d] : std::vector<std::pair<int, int>>{{2, 1}, {3, 2}, {4, 3}}) {
        const StateSpace sp(M, d);
        const TransformerModel m(tiny(), sp, 0);
        for (const auto& x : all_states(sp)) {
            for (double t : {0.0, 0.3, 1.0}) {
                Vector padded = Vector::Zero(16);
                padded.head(d) = embed(x);
                padded(d) = t;
                EXPECT_EQ(m.forward(x, t), padded.head(M));
            }
        }
    }
}

TEST(Model, RejectsBadInputs) {
    const TransformerModel m(tiny(), StateSpace(2, 2), 0);
    EXPECT_THROW(m.forward(State{{1, 3}}, 0.5), DomainError);
    EXPECT_THROW(m.forward(State{{1, 2}}, 1.5), DomainError);
}

TEST(Model, NonFiniteActivationNamesLayer) {
    TransformerModel m(tiny(), StateSpace(2, 2), 0);
    m.w2(0)(0, 0) = std::numeric_limits<double>::infinity();
    m.b1(0).setConstant(1.0);
    try {
        (void)m.forward(State{{1, 2}}, 0.5);
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("feed-forward"), std::string::npos);
    }
}

TEST(Model, AttentionColumnsSumToOne) {
    Rng rng = make_rng(1);
    ModelConfig c = tiny();
    c.heads = 3;
    c.n_blocks = 2;
    const StateSpace sp(3, 2);
    const auto m = TransformerModel::random(c, sp, 0, rng);
    for (const auto& x : all_states(sp)) {
        const auto tr = m.trace(x, 0.7);
        for (const auto& b : tr.blocks)
            for (const auto& s : b.attention) {
                EXPECT_LT((s.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
                EXPECT_GE(s.minCoeff(), 0.0);
            }
    }
}

TEST(Model, SoftmaxColumnsAreIndependent) {
    Matrix a(3, 3);
    a << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    Matrix b = a;
    b.col(2) << -5, 0, 100;
    const Matrix sa = column_softmax(a);
    const Matrix sb = column_softmax(b);
    EXPECT_EQ(sa.col(0), sb.col(0));
    EXPECT_EQ(sa.col(1), sb.col(1));
    EXPECT_TRUE(column_softmax(Matrix::Constant(2, 2, 1000.0)).allFinite());
}

TEST(Model, DuplicatePaddingColumnsGiveEqualAttentionOutputs) {
    // Columns 2 and 3 are pure padding with zero positional encoding, hence identical;
    // swapping them must not change the attention weights of the other queries.
    Rng rng = make_rng(8);
    const StateSpace sp(2, 1);
    const auto m = TransformerModel::random(tiny(), sp, 0, rng);
    const auto tr = m.trace(State{{2}}, 0.4);
    const Matrix& s = tr.blocks[0].attention[0];
    EXPECT_EQ(s.row(2), s.row(3));
    EXPECT_EQ(s.col(2), s.col(3));
}

TEST(Model, ForwardIsDeterministic) {
    Rng a = make_rng(42), b = make_rng(42);
    const StateSpace sp(3, 2);
    const auto m1 = TransformerModel::random(tiny(), sp, 1, a);
    const auto m2 = TransformerModel::random(tiny(), sp, 1, b);
    EXPECT_EQ(m1.forward(State{{1, 2}}, 0.5), m2.forward(State{{1, 2}}, 0.5));
}

TEST(Model, GoldenForwardVector) {
    const auto golden = io::read_json(std::string(DFM_TEST_DATA) + "/golden_forward.json");
    const StateSpace sp = io::space_from_json(golden.at("space"));
    Rng rng = make_rng(golden.at("seed").get<std::uint64_t>());
    const auto m = TransformerModel::random(io::model_config_from_json(golden.at("config")), sp,
                                            golden.at("coordinate").get<int>(), rng);
    const Vector want = io::vector_from_json(golden.at("output"));
    const Vector got = m.forward(io::state_from_json(golden.at("state")), golden.at("t").get<double>());
    ASSERT_EQ(got.size(), want.size());
    for (Eigen::Index k = 0; k < got.size(); ++k) EXPECT_EQ(got(k), want(k)) << "entry " << k;
}

TEST(Model, CheckpointRoundTripIsExact) {
    Rng rng = make_rng(3);
    ModelConfig c = tiny();
    c.n_blocks = 2;
    auto m = TransformerModel::random(c, StateSpace(3, 2), 1, rng);
    randomize_positional(m, rng, 0.3);
    const auto j = nlohmann::json::parse(io::checkpoint(m).dump());
    const auto back = io::model_from_checkpoint(j);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.coordinate(), 1);
    EXPECT_TRUE(std::equal(back.parameters().begin(), back.parameters().end(), m.parameters().begin()));
    EXPECT_EQ(back.forward(State{{2, 3}}, 0.25), m.forward(State{{2, 3}}, 0.25));
}

class GradientTest : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradientTest, MatchesCentralDifferences) {
    Rng rng = make_rng(GetParam());
    const StateSpace sp(3, 2);
    auto m = TransformerModel::random(tiny(), sp, 0, rng);
    randomize_positional(m, rng, 0.5);
    const auto batch = random_batch(sp, 4, rng);
    const auto r = finite_difference_check(m, batch, 1e-5);
    EXPECT_LE(r.worst, 1e-4) << "parameter " << r.worst_index;
}

TEST_P(GradientTest, MatchesCentralDifferencesWithStackedBlocks) {
    Rng rng = make_rng(GetParam() + 100);
    ModelConfig c = tiny();
    c.heads = 2;
    c.n_blocks = 2;
    c.s = 3;
    c.r = 5;
    const StateSpace sp(2, 3);
    auto m = TransformerModel::random(c, sp, 2, rng);
    randomize_positional(m, rng, 0.5);
    const auto batch = random_batch(sp, 3, rng);
    const auto r = finite_difference_check(m, batch, 1e-5);
    EXPECT_LE(r.worst, 1e-4) << "parameter " << r.worst_index;
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientTest, ::testing::Values(1u, 2u, 3u));

TEST(Backward, ZeroGradientAtTarget) {
    Rng rng = make_rng(12);
    const StateSpace sp(3, 2);
    const auto m = TransformerModel::random(tiny(), sp, 0, rng);
    std::vector<Example> batch;
    for (const auto& x : all_states(sp)) batch.push_back({x, 0.3, m.forward(x, 0.3)});
    auto g = m.zeros_like();
    EXPECT_EQ(m.backward(batch, g), 0.0);
    for (double v : g.parameters()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, DuplicatedBatchKeepsMeanGradient) {
    Rng rng = make_rng(13);
    const StateSpace sp(2, 2);
    const auto m = TransformerModel::random(tiny(), sp, 1, rng);
    const auto batch = random_batch(sp, 3, rng);
    auto doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    auto g1 = m.zeros_like(), g2 = m.zeros_like();
    const double l1 = m.backward(batch, g1);
    const double l2 = m.backward(doubled, g2);
    EXPECT_NEAR(l1, l2, 1e-14 * std::abs(l1));
    for (std::size_t k = 0; k < g1.parameter_count(); ++k)
        EXPECT_NEAR(g1.parameters()[k], g2.parameters()[k], 1e-13 * (1.0 + std::abs(g1.parameters()[k])));
}

TEST(Backward, AccumulatesIntoCallerBuffer) {
    Rng rng = make_rng(14);
    const StateSpace sp(2, 1);
    const auto m = TransformerModel::random(tiny(), sp, 0, rng);
    const auto batch = random_batch(sp, 2, rng);
    auto once = m.zeros_like(), twice = m.zeros_like();
    m.backward(batch, once);
    m.backward(batch, twice);
    m.backward(batch, twice);
    for (std::size_t k = 0; k < once.parameter_count(); ++k)
        EXPECT_NEAR(twice.parameters()[k], 2.0 * once.parameters()[k], 1e-14 * (1.0 + std::abs(once.parameters()[k])));
}

TEST(Norms, ZeroModel) {
    const TransformerModel m(tiny(), StateSpace(2, 1), 0);
    const auto n = param_norms(m, 3.0);
    EXPECT_EQ(n.c_kq, 0.0);
    EXPECT_EQ(n.c_ov, 0.0);
    EXPECT_EQ(n.c_f, 0.0);
    EXPECT_EQ(n.c_e, 0.0);
    EXPECT_EQ(n.l_t_bound, 1.0);
    EXPECT_THROW(param_norms(m, 0.0), DomainError);
}

TEST(Norms, ScaledIdentityKeyQuery) {
    TransformerModel m(tiny(), StateSpace(2, 1), 0);
    m.key(0, 0) = Matrix::Identity(4, 4);
    m.query(0, 0) = 2.5 * Matrix::Identity(4, 4);
    const auto n = param_norms(m, 1.0);
    EXPECT_NEAR(n.c_kq, 2.5, 1e-12);
    EXPECT_NEAR(n.c_kq_2inf, 2.5, 1e-15);
}

TEST(Norms, PowerIterationMatchesJacobiSvd) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng = make_rng(seed);
        Matrix a(4, 4);
        for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = standard_normal(rng);
        const double oracle = Eigen::JacobiSVD<Matrix>(a).singularValues()(0);
        EXPECT_NEAR(spectral_norm(a), oracle, 1e-8) << "seed " << seed;
    }
}

TEST(Norms, RectangularAndTwoInf) {
    Matrix a(2, 3);
    a << 3, 0, 4, 0, 1, 0;
    EXPECT_DOUBLE_EQ(two_inf_norm(a), 5.0);
    EXPECT_NEAR(spectral_norm(a), 5.0, 1e-10);
    EXPECT_EQ(spectral_norm(Matrix::Zero(3, 2)), 0.0);
}

TEST(Norms, ObservedInputBound) {
    const StateSpace sp(3, 2);
    const TransformerModel m(tiny(), sp, 0);
    // Largest encoded input: tokens (3, 3) with t = 1.
    EXPECT_NEAR(param_norms(m, 1.0).b_x_observed, std::sqrt(19.0), 1e-9);
}

TEST(Lipschitz, ZeroWeightsGiveExactlyOne) {
    const TransformerModel m(tiny(), StateSpace(2, 1), 0);
    Rng rng = make_rng(5);
    EXPECT_EQ(empirical_lipschitz(m, 200, 2.0, rng), 1.0);
}

TEST(Lipschitz, EmpiricalBelowClosedFormBoundForRandomModels) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng = make_rng(seed);
        ModelConfig c = tiny();
        c.heads = 1 + static_cast<int>(seed % 2);
        auto m = TransformerModel::random(c, StateSpace(3, 2), 0, rng);
        randomize_positional(m, rng, 0.5);
        const double radius = 1.0 + static_cast<double>(seed % 4);
        const auto norms = param_norms(m, radius);
        const double emp = empirical_lipschitz(m, 10000, radius, rng);
        EXPECT_LE(emp, norms.l_t_bound) << "seed " << seed;
        EXPECT_GE(emp, 0.0);
    }
}

TEST(Lipschitz, StackedBlocksStayBelowProductBound) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng = make_rng(seed + 50);
        ModelConfig c = tiny();
        c.n_blocks = 2;
        const auto m = TransformerModel::random(c, StateSpace(2, 2), 0, rng);
        const auto norms = param_norms(m, 1.5);
        EXPECT_LE(empirical_lipschitz(m, 5000, 1.5, rng), norms.l_t_bound) << "seed " << seed;
    }
}

TEST(Lipschitz, ScalingValueOutputDoesNotDecreaseEmpiricalMaximum) {
    Rng rng = make_rng(77);
    auto m = TransformerModel::random(tiny(), StateSpace(2, 1), 0, rng);
    const auto pairs = sample_input_pairs(4, 4, 2000, 2.0, rng);
    const double before = empirical_lipschitz(m, pairs);
    m.out(0, 0) *= 2.0;
    EXPECT_GE(empirical_lipschitz(m, pairs), before);
}

TEST(Lipschitz, SampledPairsStayInBall) {
    Rng rng = make_rng(6);
    for (const auto& [a, b] : sample_input_pairs(3, 5, 500, 1.7, rng)) {
        EXPECT_LE(a.norm(), 1.7 + 1e-12);
        EXPECT_LE(b.norm(), 1.7 + 1e-12);
        EXPECT_GT((a - b).norm(), 0.0);
    }
}
