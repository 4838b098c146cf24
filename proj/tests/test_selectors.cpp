#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "crpo/selectors.hpp"
#include "support.hpp"

using namespace crpo;
using test::cand;
using test::make_set;

namespace {

SelectionConfig config_for(Method m) {
    SelectionConfig c;
    c.method = m;
    return c;
}

} // namespace

TEST(Crpo, AbcUnderCrPlus) {
    const auto out = select_crpo(test::abc_set(), config_for(Method::cr_plus));
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].chosen_id, "A");
    EXPECT_EQ(out.pairs[0].rejected_id, "B");
    EXPECT_DOUBLE_EQ(out.pairs[0].score, 50.0);
    EXPECT_DOUBLE_EQ(out.pairs[0].extras.at("reward_gap"), 0.4);
    EXPECT_EQ(out.pairs[0].extras.at("confidence_gap"), 30.0);
    EXPECT_EQ(out.pairs[0].method, Method::cr_plus);
    // The losing pair (A, C) scores 15.
    EXPECT_DOUBLE_EQ(cr_plus({0.9, 0.2, -40, -60}, 50), 15.0);
}

TEST(Crpo, AbcUnderCrTimes) {
    const auto out = select_crpo(test::abc_set(), config_for(Method::cr_times));
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].rejected_id, "B");
    EXPECT_DOUBLE_EQ(out.pairs[0].score, 12.0);
    EXPECT_DOUBLE_EQ(cr_times({0.9, 0.2, -40, -60}), -14.0);
}

TEST(Crpo, DegenerateSetIsSkipped) {
    const auto set = make_set({cand("a", 0.5, -3), cand("b", 0.5, -3), cand("c", 0.5, -3)});
    for (Method m : {Method::cr_plus, Method::cr_times}) {
        const auto out = select_crpo(set, config_for(m));
        EXPECT_TRUE(out.pairs.empty());
        EXPECT_EQ(out.skipped_reason, "no positive CR score");
    }
}

TEST(Crpo, Preconditions) {
    EXPECT_THROW(select_crpo(make_set({cand("a", 0.5, -3)}), config_for(Method::cr_plus)), ValidationError);
    EXPECT_THROW(select_crpo(test::abc_set(), config_for(Method::rso)), ValidationError);
    auto set = test::abc_set();
    set.candidates[1].logprob.reset();
    EXPECT_THROW(select_crpo(set, config_for(Method::cr_plus)), ValidationError);
}

TEST(Crpo, ChosenTieGoesToLowestId) {
    const auto set = make_set({cand("b", 0.9, -10), cand("a", 0.9, -20), cand("c", 0.1, -1)});
    const auto out = select_crpo(set, config_for(Method::cr_plus));
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].chosen_id, "a");
}

TEST(Crpo, Gates) {
    // Chosen A has lp -40; B (-10) passes the log-space gate, C (-60) only
    // with epsilon > 20.
    auto cfg = config_for(Method::cr_plus);
    cfg.gate_mode = GateMode::log_space;
    auto set = make_set({cand("A", 0.9, -40), cand("C", 0.2, -60)});
    EXPECT_TRUE(select_crpo(set, cfg).pairs.empty());
    cfg.epsilon = 20.5;
    EXPECT_EQ(select_crpo(set, cfg).pairs.size(), 1u);

    // Probability gate with realistic sequence likelihoods underflows to
    // 0 - 0 + eps, so eps = 0 rejects everything.
    cfg.gate_mode = GateMode::probability;
    cfg.epsilon = 0.0;
    set = make_set({cand("A", 0.9, -800), cand("B", 0.1, -750)});
    EXPECT_TRUE(select_crpo(set, cfg).pairs.empty());
    cfg.epsilon = 1e-300;
    EXPECT_EQ(select_crpo(set, cfg).pairs.size(), 1u);

    EXPECT_TRUE(passes_gate(-1, -2, GateMode::log_space, 0));
    EXPECT_FALSE(passes_gate(-2, -1, GateMode::log_space, 0));
    EXPECT_TRUE(passes_gate(-2, -1, GateMode::log_space, 1.5));
    EXPECT_TRUE(passes_gate(-2, -1, GateMode::off, 0));
}

TEST(Crpo, MatchesBruteForce) {
    std::mt19937_64 g(11);
    const GateMode gates[] = {GateMode::off, GateMode::log_space, GateMode::probability};
    for (int t = 0; t < 400; ++t) {
        const auto set = test::random_set(g, 2 + g() % 15);
        for (Method m : {Method::cr_plus, Method::cr_times}) {
            for (GateMode gate : gates) {
                auto cfg = config_for(m);
                cfg.gate_mode = gate;
                cfg.k_trust = t % 2 ? 50.0 : 0.5 + static_cast<double>(g() % 100);
                cfg.epsilon = t % 3 ? 0.0 : 0.5;
                const auto got = select_crpo(set, cfg);
                const auto want = test::brute_crpo(set, m, cfg.k_trust, gate, cfg.epsilon);
                ASSERT_EQ(got.pairs.size(), want ? 1u : 0u);
                if (want) {
                    EXPECT_EQ(got.pairs[0].chosen_id, want->chosen);
                    EXPECT_EQ(got.pairs[0].rejected_id, want->rejected);
                    EXPECT_EQ(got.pairs[0].score, want->score);
                }
            }
        }
    }
}

TEST(Crpo, PerTokenNormalisation) {
    // Per token: A -40/40 = -1, B -10/2 = -5, so B is no longer more likely.
    auto set = make_set({cand("A", 0.9, -40, 40), cand("B", 0.5, -10, 2)});
    auto cfg = config_for(Method::cr_times);
    EXPECT_EQ(select_crpo(set, cfg).pairs.size(), 1u);
    cfg.logprob_norm = LogprobNorm::per_token;
    EXPECT_TRUE(select_crpo(set, cfg).pairs.empty());
}

TEST(BalancedKTrust, RatioOfMeanGaps) {
    std::vector<CandidateSet> sets{make_set({cand("a", 0.9, -1), cand("b", 0.5, -5), cand("c", 0.7, -2)})};
    // |gaps| 4 and 1 over reward gaps 0.4 and 0.2.
    EXPECT_NEAR(balanced_k_trust(sets), 5.0 / 0.6, 1e-12);
    std::vector<CandidateSet> flat{make_set({cand("a", 0.5, -1), cand("b", 0.5, -5)})};
    EXPECT_THROW(balanced_k_trust(flat), ValidationError);
}

TEST(Rso, AcceptanceProbability) {
    EXPECT_EQ(rso_acceptance_probability(0.9, 0.9, 0.1), 1.0);
    EXPECT_NEAR(rso_acceptance_probability(0.8, 0.9, 0.1), 0.36787944117144233, 1e-12);
}

TEST(Rso, MaxRewardAlwaysAccepted) {
    const auto set = make_set({cand("a", 0.9, -1), cand("b", 0.1, -1), cand("c", 0.3, -1)});
    auto cfg = config_for(Method::rso);
    Rng rng(5);
    std::vector<RsoDraw> trace;
    for (int i = 0; i < 200; ++i) rso_subsample(set, cfg, rng, &trace);
    std::size_t top = 0;
    for (const auto& d : trace) {
        if (d.index == 0) {
            EXPECT_TRUE(d.accepted);
            ++top;
        }
    }
    EXPECT_GT(top, 0u);
}

TEST(Rso, SampleSizeAndFillAfterCap) {
    // A large pool with a tiny beta: only the single best candidate can be
    // accepted and it is rarely proposed, so the draw cap is reached and
    // the remaining slots are filled by reward rank.
    std::vector<Candidate> cands{cand("best", 0.9, -1), cand("second", 0.5, -1), cand("third", 0.4, -1)};
    for (int i = 0; i < 2000; ++i) cands.push_back(cand(test::padded_id(i), 0.1, -1));
    const auto set = make_set(cands);
    auto cfg = config_for(Method::rso);
    cfg.beta = 1e-4;
    cfg.rso_samples = 4;
    Rng rng(1);
    std::vector<RsoDraw> trace;
    const auto s = rso_subsample(set, cfg, rng, &trace);
    ASSERT_EQ(s.size(), 4u);
    EXPECT_EQ(trace.size(), 64u * 4u);
    std::multiset<std::size_t> got(s.begin(), s.end());
    EXPECT_GE(got.count(0), 1u);
    EXPECT_EQ(got.count(1), 1u);
    EXPECT_EQ(got.count(2), 1u);
}

TEST(Rso, PairsAreRewardLabelledAndSeedDeterministic) {
    std::mt19937_64 g(2);
    for (int t = 0; t < 200; ++t) {
        const auto set = test::random_set(g, 2 + g() % 15);
        auto cfg = config_for(Method::rso);
        Rng a(t), b(t);
        const auto x = select_rso(set, cfg, a);
        const auto y = select_rso(set, cfg, b);
        ASSERT_EQ(x.pairs, y.pairs);
        EXPECT_LE(x.pairs.size(), 4u);
        for (const auto& p : x.pairs) {
            EXPECT_GT(set.find(p.chosen_id)->reward_agg.value(), set.find(p.rejected_id)->reward_agg.value());
        }
    }
}

TEST(RsDpo, ThresholdExamples) {
    auto cfg = config_for(Method::rs_dpo);
    auto accepted = [&](double hi, double lo, const std::string& dir) {
        return !select_rsdpo(make_set({cand("a", hi, -1), cand("b", lo, -1)}, dir), cfg).pairs.empty();
    };
    EXPECT_TRUE(accepted(0.92, 0.30, "en-de"));  // 0.62 > 0.6
    EXPECT_FALSE(accepted(0.85, 0.30, "en-de")); // 0.55
    EXPECT_TRUE(accepted(0.85, 0.30, "de-en"));  // 0.55 > 0.5
    EXPECT_FALSE(accepted(0.8, 0.30, "de-en"));  // exactly 0.5 is not above
}

TEST(RsDpo, ExaminesAllPairs) {
    auto cfg = config_for(Method::rs_dpo);
    cfg.eta.out_of_english = 1e-9;
    const auto set = make_set({cand("d", 0.1, -1), cand("c", 0.4, -1), cand("b", 0.7, -1), cand("a", 0.99, -1)});
    const auto out = select_rsdpo(set, cfg);
    ASSERT_EQ(out.pairs.size(), 6u);
    for (std::size_t i = 1; i < out.pairs.size(); ++i) {
        const auto& p = out.pairs[i - 1];
        const auto& q = out.pairs[i];
        EXPECT_LT(std::tie(p.chosen_id, p.rejected_id), std::tie(q.chosen_id, q.rejected_id));
    }
    EXPECT_EQ(out.pairs.front().chosen_id, "a");
}

TEST(RsDpo, MonotoneInEta) {
    std::mt19937_64 g(4);
    for (int t = 0; t < 200; ++t) {
        const auto set = test::random_set(g, 2 + g() % 15);
        std::size_t prev = SIZE_MAX;
        for (double eta = 0.01; eta < 1.0; eta += 0.07) {
            auto cfg = config_for(Method::rs_dpo);
            cfg.eta = {eta, eta};
            const auto n = select_rsdpo(set, cfg).pairs.size();
            EXPECT_LE(n, prev);
            prev = n;
        }
    }
}

TEST(Mbr, BestWorstExample) {
    const auto set = make_set({cand("A", 0.5, -1), cand("B", 0.5, -1), cand("C", 0.5, -1)});
    // MBR(A)=0.6, MBR(B)=0.7, MBR(C)=0.5
    UtilityMatrix m{{"A", "B", "C"}, {{1, 0.8, 0.4}, {0.8, 1, 0.6}, {0.4, 0.6, 1}}};
    const auto out = select_mbr(set, m, MbrVariant::bw);
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].chosen_id, "B");
    EXPECT_EQ(out.pairs[0].rejected_id, "C");
    EXPECT_DOUBLE_EQ(out.pairs[0].score, 0.2);
}

TEST(Mbr, AllTiedUsesIdOrder) {
    const auto set = make_set({cand("b", 0.5, -1), cand("c", 0.5, -1), cand("a", 0.5, -1)});
    UtilityMatrix m{{"a", "b", "c"}, {{1, 0.3, 0.3}, {0.3, 1, 0.3}, {0.3, 0.3, 1}}};
    const auto out = select_mbr(set, m, MbrVariant::bw);
    EXPECT_EQ(out.pairs[0].chosen_id, "a");
    EXPECT_EQ(out.pairs[0].rejected_id, "c");
}

TEST(Mbr, BmwMiddleIsRankCeilHalf) {
    std::vector<Candidate> cands;
    for (int i = 0; i < 5; ++i) cands.push_back(cand(std::string(1, static_cast<char>('a' + i)), 0.5, -1));
    const auto set = make_set(cands);
    // Row j has constant off-diagonal utility s_j, so MBR(j) = s_j.
    const std::vector<double> s{0.1, 0.9, 0.5, 0.3, 0.7};
    UtilityMatrix m;
    for (int i = 0; i < 5; ++i) m.ids.push_back(cands[i].id);
    m.values.assign(5, std::vector<double>(5, 0));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) m.values[i][j] = i == j ? 1.0 : s[i];
    const auto out = select_mbr(set, m, MbrVariant::bmw);
    ASSERT_EQ(out.pairs.size(), 3u);
    // Ranking b(0.9) e(0.7) c(0.5) d(0.3) a(0.1); middle is rank 3 = c.
    EXPECT_EQ(out.pairs[0].chosen_id, "b");
    EXPECT_EQ(out.pairs[0].rejected_id, "c");
    EXPECT_EQ(out.pairs[1].chosen_id, "b");
    EXPECT_EQ(out.pairs[1].rejected_id, "a");
    EXPECT_EQ(out.pairs[2].chosen_id, "c");
    EXPECT_EQ(out.pairs[2].rejected_id, "a");
    EXPECT_THROW(select_mbr(make_set({cands[0], cands[1]}), UtilityMatrix{{"a", "b"}, {{1, 0}, {0, 1}}},
                            MbrVariant::bmw),
                 ValidationError);
}

TEST(Mbr, UtilityMustCoverSet) {
    const auto set = make_set({cand("a", 0.5, -1), cand("b", 0.5, -1)});
    EXPECT_THROW(select_mbr(set, UtilityMatrix{{"a", "x"}, {{1, 0}, {0, 1}}}, MbrVariant::bw), ValidationError);
    EXPECT_THROW(select_mbr(set, UtilityMatrix{{"a"}, {{1}}}, MbrVariant::bw), ValidationError);
}

TEST(QeBest, Examples) {
    EXPECT_EQ(select_qe_best(make_set({cand("x", 0.3, -1), cand("y", 0.9, -1), cand("z", 0.5, -1)})).sft_target, "y");
    EXPECT_EQ(select_qe_best(make_set({cand("x", 0.3, -1)})).sft_target, "x");
    const auto out = select_qe_best(make_set({cand("q", 0.9, -1), cand("p", 0.9, -1)}));
    EXPECT_EQ(out.sft_target, "p");
    EXPECT_TRUE(out.pairs.empty());
}

TEST(TopScores, Examples) {
    const auto set = make_set({cand("a", 0.9, -1), cand("b", 0.8, -1), cand("c", 0.7, -1), cand("d", 0.1, -1)});
    auto out = select_top_scores(set, 3);
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].chosen_id, "a");
    EXPECT_EQ(out.pairs[0].rejected_id, "c");
    EXPECT_EQ(select_top_scores(set, 4).pairs, [&] {
        auto p = select_minmax_r(set).pairs;
        for (auto& x : p) x.method = Method::top_scores;
        return p;
    }());
    out = select_top_scores(set, 2);
    EXPECT_EQ(out.pairs[0].rejected_id, "b");
    EXPECT_THROW(select_top_scores(set, 1), ValidationError);
    EXPECT_THROW(select_top_scores(set, 5), ValidationError);
}

TEST(MinMaxR, Examples) {
    auto out = select_minmax_r(make_set({cand("a", 0.9, -1), cand("b", 0.2, -1), cand("c", 0.5, -1)}));
    EXPECT_EQ(out.pairs[0].chosen_id, "a");
    EXPECT_EQ(out.pairs[0].rejected_id, "b");
    EXPECT_TRUE(select_minmax_r(make_set({cand("a", 0.5, -1), cand("b", 0.5, -2)})).pairs.empty());
    out = select_minmax_r(make_set({cand("a", 0.2, -1), cand("b", 0.6, -2)}));
    EXPECT_EQ(out.pairs[0].chosen_id, "b");
}

TEST(MinMaxP, Examples) {
    const auto cfg = config_for(Method::minmax_p);
    auto out = select_minmax_p(make_set({cand("w", 0.9, -40), cand("x", 0.5, -10), cand("y", 0.2, -60)}), cfg);
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].rejected_id, "x");
    EXPECT_EQ(out.pairs[0].score, 30.0);
    EXPECT_TRUE(select_minmax_p(make_set({cand("w", 0.9, -1), cand("x", 0.5, -10)}), cfg).pairs.empty());
    out = select_minmax_p(make_set({cand("w", 0.9, -5), cand("x", 0.5, -10), cand("y", 0.6, -4)}), cfg);
    EXPECT_EQ(out.pairs[0].rejected_id, "y");
}

TEST(MinMaxPo, Examples) {
    const auto cfg = config_for(Method::minmax_po);
    auto out = select_minmax_po(make_set({cand("p", 0.4, -5), cand("q", 0.6, -30), cand("r", 0.8, -90)}), cfg);
    ASSERT_EQ(out.pairs.size(), 1u);
    EXPECT_EQ(out.pairs[0].chosen_id, "r");
    EXPECT_EQ(out.pairs[0].rejected_id, "p");
    EXPECT_EQ(out.pairs[0].extras.at("confidence_gap"), 85.0);
    out = select_minmax_po(make_set({cand("p", 0.9, -5), cand("r", 0.2, -90)}), cfg);
    EXPECT_EQ(out.pairs[0].chosen_id, "p");
    EXPECT_THROW(select_minmax_po(make_set({cand("p", 0.9, -5)}), cfg), ValidationError);
    EXPECT_TRUE(select_minmax_po(make_set({cand("p", 0.5, -5), cand("r", 0.5, -90)}), cfg).pairs.empty());
}

TEST(RandomPair, DistinctAndLabelled) {
    std::mt19937_64 g(9);
    for (int t = 0; t < 300; ++t) {
        const auto set = test::random_set(g, 2 + g() % 15);
        Rng rng(t);
        const auto out = select_random_pair(set, rng);
        for (const auto& p : out.pairs) {
            EXPECT_NE(p.chosen_id, p.rejected_id);
            EXPECT_GT(set.find(p.chosen_id)->reward_agg.value(), set.find(p.rejected_id)->reward_agg.value());
        }
    }
}

TEST(Select, EveryMethodSatisfiesPairInvariants) {
    std::mt19937_64 g(21);
    for (int t = 0; t < 100; ++t) {
        auto set = test::random_set(g, 3 + g() % 14);
        for (std::size_t j = 0; j < set.size(); ++j) set.candidates[j].text = "w" + std::to_string(g() % 50);
        for (const auto& [m, name] : kMethodNames) {
            auto cfg = config_for(m);
            Rng rng(t);
            const auto out = select(set, cfg, rng);
            if (m == Method::qe_best) {
                EXPECT_TRUE(out.sft_target.has_value());
                EXPECT_TRUE(out.pairs.empty());
            }
            if (m == Method::cr_plus || m == Method::cr_times) {
                EXPECT_LE(out.pairs.size(), 1u);
            }
            for (const auto& p : out.pairs) {
                EXPECT_EQ(p.method, m) << name;
                EXPECT_NE(p.chosen_id, p.rejected_id);
                if (m != Method::mbr_bw && m != Method::mbr_bmw) {
                    EXPECT_GE(set.find(p.chosen_id)->reward_agg.value(), set.find(p.rejected_id)->reward_agg.value())
                        << name;
                }
            }
        }
    }
}

TEST(Select, DeterministicMethodsIgnoreRng) {
    std::mt19937_64 g(8);
    const auto set = test::random_set(g, 9);
    for (Method m : {Method::cr_plus, Method::rs_dpo, Method::mbr_bmw, Method::minmax_po}) {
        Rng a(1), b(999);
        EXPECT_EQ(select(set, config_for(m), a).pairs, select(set, config_for(m), b).pairs);
    }
}

TEST(Select, MixedPoolPicksExtraOnlyWhenBest) {
    // Three generated candidates plus one extra reference; the extra becomes
    // the chosen side exactly when its reward is the maximum of the pool.
    for (double extra_r : {0.3, 0.59, 0.61, 0.95}) {
        auto set = make_set({cand("g0", 0.6, -3), cand("g1", 0.4, -1.5), cand("g2", 0.5, -6), cand("ref", extra_r, -8)});
        for (Method m : {Method::cr_plus, Method::cr_times, Method::minmax_r, Method::minmax_p}) {
            Rng rng(0);
            const auto out = select(set, config_for(m), rng);
            for (const auto& p : out.pairs) EXPECT_EQ(p.chosen_id == "ref", extra_r > 0.6);
        }
    }
}
