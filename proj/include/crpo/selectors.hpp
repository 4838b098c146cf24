#pragma once
// Selection methods that turn one CandidateSet into preference pairs (or a
// single fine-tuning target). Ties in every argmax/argmin resolve to the
// lexicographically lowest candidate id.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "crpo/core.hpp"
#include "crpo/random.hpp"
#include "crpo/scoring.hpp"

namespace crpo {

struct SelectionOutcome {
    std::vector<PreferencePair> pairs;
    std::optional<std::string> sft_target;
    std::optional<std::string> skipped_reason;
};

// One RSO draw: which candidate was proposed and whether it was accepted.
struct RsoDraw {
    std::size_t index;
    bool accepted;
};

namespace detail {

inline std::vector<double> rewards_of(const CandidateSet& set) {
    std::vector<double> r;
    r.reserve(set.size());
    for (const auto& c : set.candidates) r.push_back(aggregate_reward(c));
    return r;
}

inline std::vector<double> logprobs_of(const CandidateSet& set, LogprobNorm norm) {
    std::vector<double> lp;
    lp.reserve(set.size());
    for (const auto& c : set.candidates) lp.push_back(effective_logprob(c, norm));
    return lp;
}

// Index of the maximum value; ties go to the lowest id.
inline std::size_t argmax(const CandidateSet& set, const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v.size(); ++j) {
        if (v[j] > v[best] || (v[j] == v[best] && set.candidates[j].id < set.candidates[best].id)) best = j;
    }
    return best;
}

inline std::size_t argmin(const CandidateSet& set, const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v.size(); ++j) {
        if (v[j] < v[best] || (v[j] == v[best] && set.candidates[j].id < set.candidates[best].id)) best = j;
    }
    return best;
}

// Indices ordered by value descending, then id ascending.
inline std::vector<std::size_t> rank_descending(const CandidateSet& set, const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return set.candidates[a].id < set.candidates[b].id;
    });
    return order;
}

inline void require_pairable(const CandidateSet& set, std::size_t minimum = 2) {
    if (set.size() < minimum)
        fail("source '" + set.source_id + "' needs at least " + std::to_string(minimum) + " candidates");
}

inline PreferencePair make_pair(const CandidateSet& set, std::size_t w, std::size_t l, double score, Method method,
                                Extras extras = {}) {
    return {set.source_id, set.candidates[w].id, set.candidates[l].id, score, method, std::move(extras)};
}

// Pair (w, l) labelled by reward; nullopt when the rewards tie.
inline std::optional<PreferencePair> reward_labelled(const CandidateSet& set, const std::vector<double>& r,
                                                     std::size_t a, std::size_t b, Method method) {
    if (a == b || r[a] == r[b]) return std::nullopt;
    const auto [w, l] = r[a] > r[b] ? std::pair{a, b} : std::pair{b, a};
    const double gap = r[w] - r[l];
    return make_pair(set, w, l, gap, method, {{"reward_gap", gap}});
}

inline SelectionOutcome skipped(std::string reason) {
    SelectionOutcome out;
    out.skipped_reason = std::move(reason);
    return out;
}

} // namespace detail

inline bool passes_gate(double logp_candidate, double logp_chosen, GateMode mode, double epsilon) {
    switch (mode) {
    case GateMode::off: return true;
    case GateMode::log_space: return logp_candidate - logp_chosen + epsilon > 0.0;
    case GateMode::probability: return std::exp(logp_candidate) - std::exp(logp_chosen) + epsilon > 0.0;
    }
    return true;
}

// Confidence-reward selection. The chosen side is the highest-reward
// candidate; the rejected side is the gated candidate with the largest
// strictly positive CR score against it. At most one pair per source.
inline SelectionOutcome select_crpo(const CandidateSet& set, const SelectionConfig& config) {
    if (config.method != Method::cr_plus && config.method != Method::cr_times)
        fail("select_crpo requires method cr_plus or cr_times");
    detail::require_pairable(set);
    const auto r = detail::rewards_of(set);
    const auto lp = detail::logprobs_of(set, config.logprob_norm);
    const std::size_t chosen = detail::argmax(set, r);

    double best_score = 0.0;
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < set.size(); ++j) {
        if (j == chosen) continue;
        if (!passes_gate(lp[j], lp[chosen], config.gate_mode, config.epsilon)) continue;
        const PairScoreInput in{r[chosen], r[j], lp[chosen], lp[j]};
        const double s = config.method == Method::cr_plus ? cr_plus(in, config.k_trust) : cr_times(in);
        if (s <= 0.0) continue;
        if (!best || s > best_score || (s == best_score && set.candidates[j].id < set.candidates[*best].id)) {
            best = j;
            best_score = s;
        }
    }
    if (!best) return detail::skipped("no positive CR score");

    SelectionOutcome out;
    out.pairs.push_back(detail::make_pair(set, chosen, *best, best_score, config.method,
                                          {{"reward_gap", r[chosen] - r[*best]},
                                           {"confidence_gap", lp[*best] - lp[chosen]}}));
    return out;
}

// Trust weight that balances the two CR+ terms on a pool: the mean
// |confidence gap| divided by the mean reward gap over (best, other) pairs.
inline double balanced_k_trust(std::span<const CandidateSet> sets, LogprobNorm norm = LogprobNorm::sum) {
    double conf = 0.0;
    double reward = 0.0;
    for (const auto& set : sets) {
        if (set.size() < 2) continue;
        const auto r = detail::rewards_of(set);
        const auto lp = detail::logprobs_of(set, norm);
        const std::size_t w = detail::argmax(set, r);
        for (std::size_t j = 0; j < set.size(); ++j) {
            if (r[j] == r[w]) continue;
            conf += std::abs(lp[j] - lp[w]);
            reward += r[w] - r[j];
        }
    }
    if (!(reward > 0.0)) fail("balanced_k_trust: pool has no reward gaps");
    return conf / reward;
}

inline double rso_acceptance_probability(double reward, double max_reward, double beta) {
    return std::exp((reward - max_reward) / beta);
}

// Statistical rejection sampling: propose candidates uniformly with
// replacement and accept each with probability exp((r - r_max) / beta)
// until `rso_samples` acceptances. After 64 * rso_samples proposals the
// remaining slots are filled with the highest-reward candidates not yet
// accepted. Returns accepted indices in acceptance order.
inline std::vector<std::size_t> rso_subsample(const CandidateSet& set, const SelectionConfig& config, Rng& rng,
                                              std::vector<RsoDraw>* trace = nullptr) {
    detail::require_pairable(set);
    if (config.rso_samples < 2) fail("rso_samples must be >= 2");
    const auto r = detail::rewards_of(set);
    const double r_max = *std::max_element(r.begin(), r.end());
    const auto want = static_cast<std::size_t>(config.rso_samples);
    const std::size_t max_draws = 64 * want;

    std::vector<std::size_t> accepted;
    std::vector<bool> taken(set.size(), false);
    for (std::size_t draws = 0; accepted.size() < want && draws < max_draws; ++draws) {
        const std::size_t j = uniform_index(rng, set.size());
        const bool accept = uniform01(rng) < rso_acceptance_probability(r[j], r_max, config.beta);
        if (trace) trace->push_back({j, accept});
        if (accept) {
            accepted.push_back(j);
            taken[j] = true;
        }
    }
    if (accepted.size() < want) {
        const auto order = detail::rank_descending(set, r);
        for (std::size_t j : order)
            if (!taken[j] && accepted.size() < want) accepted.push_back(j);
        for (std::size_t i = 0; accepted.size() < want; ++i) accepted.push_back(order[i % order.size()]);
    }
    return accepted;
}

// RSO pairs: shuffle the accepted sample, pair consecutive entries and
// label by reward; zero-gap pairs are dropped.
inline SelectionOutcome select_rso(const CandidateSet& set, const SelectionConfig& config, Rng& rng) {
    auto sample = rso_subsample(set, config, rng);
    const auto r = detail::rewards_of(set);
    shuffle(sample, rng);
    SelectionOutcome out;
    for (std::size_t i = 0; i + 1 < sample.size(); i += 2) {
        if (auto p = detail::reward_labelled(set, r, sample[i], sample[i + 1], Method::rso))
            out.pairs.push_back(std::move(*p));
    }
    if (out.pairs.empty()) out.skipped_reason = "all sampled pairs tie on reward";
    return out;
}

// Every unordered pair whose reward gap exceeds the direction's threshold.
inline SelectionOutcome select_rsdpo(const CandidateSet& set, const SelectionConfig& config) {
    detail::require_pairable(set);
    const double eta = config.eta.resolve(set.direction);
    const auto r = detail::rewards_of(set);
    SelectionOutcome out;
    for (std::size_t a = 0; a < set.size(); ++a) {
        for (std::size_t b = a + 1; b < set.size(); ++b) {
            if (std::abs(r[a] - r[b]) <= eta) continue;
            if (auto p = detail::reward_labelled(set, r, a, b, Method::rs_dpo)) out.pairs.push_back(std::move(*p));
        }
    }
    std::sort(out.pairs.begin(), out.pairs.end(), [](const PreferencePair& x, const PreferencePair& y) {
        return std::tie(x.chosen_id, x.rejected_id) < std::tie(y.chosen_id, y.rejected_id);
    });
    if (out.pairs.empty()) out.skipped_reason = "no pair exceeds eta";
    return out;
}

// MBR scores aligned with the set's candidate order.
inline std::vector<double> mbr_scores_for(const CandidateSet& set, const UtilityMatrix& utility) {
    utility.validate();
    require(utility.size() == set.size(), "utility matrix for '" + set.source_id + "' has wrong dimension");
    std::vector<std::size_t> pos(set.size());
    for (std::size_t j = 0; j < set.size(); ++j) {
        const auto it = std::find(utility.ids.begin(), utility.ids.end(), set.candidates[j].id);
        if (it == utility.ids.end())
            fail("utility matrix for '" + set.source_id + "' lacks candidate '" + set.candidates[j].id + "'");
        pos[j] = static_cast<std::size_t>(it - utility.ids.begin());
    }
    const auto by_matrix = mbr_scores(utility);
    std::vector<double> out(set.size());
    for (std::size_t j = 0; j < set.size(); ++j) out[j] = by_matrix[pos[j]];
    return out;
}

// MBR pairs labelled by MBR rank: (best, worst) or the three pairwise
// preferences among best, middle (rank ceil(K/2)) and worst.
inline SelectionOutcome select_mbr(const CandidateSet& set, const UtilityMatrix& utility, MbrVariant variant) {
    detail::require_pairable(set, variant == MbrVariant::bw ? 2 : 3);
    const auto mbr = mbr_scores_for(set, utility);
    const auto r = detail::rewards_of(set);
    const auto rank = detail::rank_descending(set, mbr);
    const Method method = variant == MbrVariant::bw ? Method::mbr_bw : Method::mbr_bmw;
    auto pair = [&](std::size_t w, std::size_t l) {
        return detail::make_pair(set, w, l, mbr[w] - mbr[l], method,
                                 {{"mbr_chosen", mbr[w]}, {"mbr_rejected", mbr[l]}, {"reward_gap", r[w] - r[l]}});
    };
    const std::size_t best = rank.front();
    const std::size_t worst = rank.back();
    SelectionOutcome out;
    if (variant == MbrVariant::bw) {
        out.pairs.push_back(pair(best, worst));
    } else {
        const std::size_t middle = rank[(set.size() + 1) / 2 - 1];
        out.pairs.push_back(pair(best, middle));
        out.pairs.push_back(pair(best, worst));
        out.pairs.push_back(pair(middle, worst));
    }
    return out;
}

inline SelectionOutcome select_qe_best(const CandidateSet& set) {
    detail::require_pairable(set, 1);
    const auto r = detail::rewards_of(set);
    SelectionOutcome out;
    out.sft_target = set.candidates[detail::argmax(set, r)].id;
    return out;
}

// Keep the n highest-reward candidates and pair the best kept with the
// worst kept.
inline SelectionOutcome select_top_scores(const CandidateSet& set, int n) {
    detail::require_pairable(set);
    if (n < 2 || static_cast<std::size_t>(n) > set.size())
        fail("top_scores n=" + std::to_string(n) + " out of range [2, " + std::to_string(set.size()) + "]");
    const auto r = detail::rewards_of(set);
    const auto rank = detail::rank_descending(set, r);
    const std::size_t w = rank.front();
    std::size_t l = rank.front();
    for (std::size_t i = 1; i < static_cast<std::size_t>(n); ++i) {
        const std::size_t j = rank[i];
        if (r[j] < r[l] || (r[j] == r[l] && set.candidates[j].id < set.candidates[l].id)) l = j;
    }
    SelectionOutcome out;
    if (auto p = detail::reward_labelled(set, r, w, l, Method::top_scores)) out.pairs.push_back(std::move(*p));
    else out.skipped_reason = "zero reward gap";
    return out;
}

inline SelectionOutcome select_minmax_r(const CandidateSet& set) {
    detail::require_pairable(set);
    const auto r = detail::rewards_of(set);
    SelectionOutcome out;
    if (auto p = detail::reward_labelled(set, r, detail::argmax(set, r), detail::argmin(set, r), Method::minmax_r))
        out.pairs.push_back(std::move(*p));
    else out.skipped_reason = "zero reward gap";
    return out;
}

// Confidence-only ablation: chosen is the best-reward candidate, rejected
// maximises logp(rejected) - logp(chosen), which must be positive.
inline SelectionOutcome select_minmax_p(const CandidateSet& set, const SelectionConfig& config) {
    detail::require_pairable(set);
    const auto r = detail::rewards_of(set);
    const auto lp = detail::logprobs_of(set, config.logprob_norm);
    const std::size_t chosen = detail::argmax(set, r);
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < set.size(); ++j) {
        if (j == chosen) continue;
        const double gap = lp[j] - lp[chosen];
        if (gap <= 0.0) continue;
        const double best_gap = best ? lp[*best] - lp[chosen] : 0.0;
        if (!best || gap > best_gap || (gap == best_gap && set.candidates[j].id < set.candidates[*best].id))
            best = j;
    }
    if (!best) return detail::skipped("no candidate more likely than the chosen one");
    const double gap = lp[*best] - lp[chosen];
    SelectionOutcome out;
    out.pairs.push_back(detail::make_pair(set, chosen, *best, gap, Method::minmax_p,
                                          {{"reward_gap", r[chosen] - r[*best]}, {"confidence_gap", gap}}));
    return out;
}

// Most-likely versus least-likely candidate, labelled by reward.
inline SelectionOutcome select_minmax_po(const CandidateSet& set, const SelectionConfig& config) {
    detail::require_pairable(set);
    const auto r = detail::rewards_of(set);
    const auto lp = detail::logprobs_of(set, config.logprob_norm);
    const std::size_t hi = detail::argmax(set, lp);
    const std::size_t lo = detail::argmin(set, lp);
    SelectionOutcome out;
    if (hi == lo) return detail::skipped("max- and min-likelihood candidates coincide");
    auto p = detail::reward_labelled(set, r, hi, lo, Method::minmax_po);
    if (!p) return detail::skipped("zero reward gap");
    const bool hi_chosen = p->chosen_id == set.candidates[hi].id;
    p->extras["confidence_gap"] = hi_chosen ? lp[lo] - lp[hi] : lp[hi] - lp[lo];
    out.pairs.push_back(std::move(*p));
    return out;
}

// Control: one uniformly random pair of distinct candidates.
inline SelectionOutcome select_random_pair(const CandidateSet& set, Rng& rng) {
    detail::require_pairable(set);
    const auto r = detail::rewards_of(set);
    const std::size_t a = uniform_index(rng, set.size());
    std::size_t b = uniform_index(rng, set.size() - 1);
    if (b >= a) ++b;
    SelectionOutcome out;
    if (auto p = detail::reward_labelled(set, r, a, b, Method::random_pair)) out.pairs.push_back(std::move(*p));
    else out.skipped_reason = "zero reward gap";
    return out;
}

// Checks the pair invariants of an outcome against its source set. MBR
// methods order pairs by MBR score rather than reward.
inline void validate_outcome(const CandidateSet& set, const SelectionOutcome& out) {
    for (const auto& p : out.pairs) {
        require(p.source_id == set.source_id, "pair source '" + p.source_id + "' does not match set");
        require(p.chosen_id != p.rejected_id, "pair chosen and rejected ids coincide: '" + p.chosen_id + "'");
        const Candidate* w = set.find(p.chosen_id);
        const Candidate* l = set.find(p.rejected_id);
        require(w && l, "pair ids do not resolve within source '" + set.source_id + "'");
        if (p.method == Method::mbr_bw || p.method == Method::mbr_bmw) {
            require(p.score >= 0.0, "MBR pair is not ordered by MBR score");
        } else {
            require(aggregate_reward(*w) >= aggregate_reward(*l),
                    "pair '" + p.chosen_id + "' > '" + p.rejected_id + "' has chosen reward below rejected");
        }
    }
    if (out.sft_target) require(set.find(*out.sft_target) != nullptr, "sft target does not resolve");
}

// Dispatches on config.method. `utility` is used by the MBR methods; when
// absent the built-in character n-gram utility is computed from the texts.
inline SelectionOutcome select(const CandidateSet& set, const SelectionConfig& config, Rng& rng,
                               const UtilityMatrix* utility = nullptr) {
    config.validate();
    SelectionOutcome out;
    switch (config.method) {
    case Method::cr_plus:
    case Method::cr_times: out = select_crpo(set, config); break;
    case Method::rso: out = select_rso(set, config, rng); break;
    case Method::rs_dpo: out = select_rsdpo(set, config); break;
    case Method::mbr_bw:
    case Method::mbr_bmw: {
        const auto variant = config.method == Method::mbr_bw ? MbrVariant::bw : MbrVariant::bmw;
        if (utility) {
            out = select_mbr(set, *utility, variant);
        } else {
            detail::require_pairable(set, variant == MbrVariant::bw ? 2 : 3);
            out = select_mbr(set, builtin_utility_matrix(set), variant);
        }
        break;
    }
    case Method::qe_best: out = select_qe_best(set); break;
    case Method::top_scores: out = select_top_scores(set, std::min<int>(config.top_n, static_cast<int>(set.size()))); break;
    case Method::minmax_r: out = select_minmax_r(set); break;
    case Method::minmax_p: out = select_minmax_p(set, config); break;
    case Method::minmax_po: out = select_minmax_po(set, config); break;
    case Method::random_pair: out = select_random_pair(set, rng); break;
    }
    validate_outcome(set, out);
    return out;
}

} // namespace crpo
