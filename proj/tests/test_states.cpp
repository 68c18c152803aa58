#include <gtest/gtest.h>

#include <set>

#include "dfm/states.hpp"
#include "support.hpp"

using namespace dfm;

TEST(StateSpace, SizeIsVocabPowerLength) {
    EXPECT_EQ(StateSpace(2, 1).size(), 2u);
    EXPECT_EQ(StateSpace(4, 3).size(), 64u);
    EXPECT_EQ(StateSpace(10, 4).size(), 10000u);
}

TEST(StateSpace, RejectsDegenerateShapes) {
    EXPECT_THROW(StateSpace(1, 3), DomainError);
    EXPECT_THROW(StateSpace(3, 0), DomainError);
    EXPECT_THROW(StateSpace(1 << 20, 8), CapacityError);
}

TEST(Codec, KnownIndices) {
    const StateSpace sp(3, 2);
    EXPECT_EQ(index_of(sp, State{{1, 1}}), 0u);
    EXPECT_EQ(index_of(sp, State{{1, 2}}), 1u);
    EXPECT_EQ(index_of(sp, State{{2, 1}}), 3u);
    EXPECT_EQ(index_of(sp, State{{3, 3}}), 8u);
    EXPECT_EQ(state_of(sp, 5), (State{{2, 3}}));
}

TEST(Codec, ExhaustiveRoundTrip) {
    for (auto [M, d] : std::vector<std::pair<int, int>>{{2, 1}, {2, 5}, {3, 4}, {5, 3}, {7, 2}}) {
        const StateSpace sp(M, d);
        for (StateIndex i = 0; i < sp.size(); ++i) EXPECT_EQ(index_of(sp, state_of(sp, i)), i);
    }
}

TEST(Codec, RandomRoundTripOnLargeSpaces) {
    Rng rng = make_rng(7);
    const StateSpace sp(50, 6);
    for (int k = 0; k < 2000; ++k) {
        const State s = testkit::random_state(sp, rng);
        EXPECT_EQ(state_of(sp, index_of(sp, s)), s);
    }
}

TEST(Codec, RejectsInvalidStates) {
    const StateSpace sp(3, 2);
    EXPECT_THROW(index_of(sp, State{{0, 1}}), DomainError);
    EXPECT_THROW(index_of(sp, State{{1, 4}}), DomainError);
    EXPECT_THROW(index_of(sp, State{{1}}), DomainError);
    EXPECT_THROW(state_of(sp, 9), DomainError);
}

TEST(Codec, EnumerationIsInIndexOrder) {
    const StateSpace sp(3, 3);
    const auto all = all_states(sp);
    ASSERT_EQ(all.size(), sp.size());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(index_of(sp, all[i]), i);
}

TEST(Codec, EnumerationCap) {
    EXPECT_THROW(all_states(StateSpace(2, 17)), CapacityError);
    EXPECT_NO_THROW(check_enumerable(StateSpace(2, 16)));
    EXPECT_THROW(check_enumerable(StateSpace(3, 3), 26), CapacityError);
}

TEST(Embed, IsInjectiveAndOneSeparated) {
    for (auto [M, d] : std::vector<std::pair<int, int>>{{2, 3}, {3, 3}, {4, 2}}) {
        const auto all = all_states(StateSpace(M, d));
        std::set<std::vector<int>> seen;
        for (std::size_t a = 0; a < all.size(); ++a) {
            seen.insert(all[a].tokens);
            for (std::size_t b = a + 1; b < all.size(); ++b)
                EXPECT_GE((embed(all[a]) - embed(all[b])).norm(), 1.0);
        }
        EXPECT_EQ(seen.size(), all.size());
    }
}

TEST(Embed, UsesTokenValues) {
    const Vector v = embed(State{{3, 1, 2}});
    EXPECT_EQ(v(0), 3.0);
    EXPECT_EQ(v(1), 1.0);
    EXPECT_EQ(v(2), 2.0);
}

TEST(OneHot, PlacesTokenAtZeroBasedSlot) {
    const Vector v = one_hot(4, 3);
    EXPECT_EQ(v.sum(), 1.0);
    EXPECT_EQ(v(2), 1.0);
}
