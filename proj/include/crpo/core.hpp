#pragma once
// Domain model shared by every module: candidates sampled from the
// reference policy, per-source candidate sets, preference pairs, and the
// selection configuration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "crpo/error.hpp"

namespace crpo {

using RewardMap = std::map<std::string, double>;
using Extras = std::map<std::string, double>;

struct Candidate {
    std::string id;
    std::string text;
    // Natural-log sequence likelihood under the reference policy.
    std::optional<double> logprob;
    RewardMap rewards;
    std::optional<double> reward_agg;
    std::optional<std::int64_t> token_count;

    bool operator==(const Candidate&) const = default;
};

struct Direction {
    std::string source;
    std::string target;

    static Direction parse(std::string_view tag) {
        const auto dash = tag.find('-');
        if (dash == std::string_view::npos || dash == 0 || dash + 1 == tag.size()) {
            fail("malformed direction '" + std::string(tag) + "', expected e.g. 'en-de'");
        }
        return {std::string(tag.substr(0, dash)), std::string(tag.substr(dash + 1))};
    }

    std::string str() const { return source + "-" + target; }
    bool operator==(const Direction&) const = default;
};

enum class DirectionClass { into_english, out_of_english };

// A direction whose target tag is "en" is into-English; anything else is
// out-of-English.
inline DirectionClass classify(const Direction& d) {
    if (d.source.empty() || d.target.empty()) fail("unresolvable direction class for '" + d.str() + "'");
    return d.target == "en" ? DirectionClass::into_english : DirectionClass::out_of_english;
}

struct CandidateSet {
    std::string source_id;
    std::string source_text;
    Direction direction;
    std::vector<Candidate> candidates;

    std::size_t size() const noexcept { return candidates.size(); }

    const Candidate* find(std::string_view id) const {
        for (const auto& c : candidates)
            if (c.id == id) return &c;
        return nullptr;
    }
};

enum class Method {
    cr_plus,
    cr_times,
    rso,
    rs_dpo,
    mbr_bw,
    mbr_bmw,
    qe_best,
    top_scores,
    minmax_r,
    minmax_p,
    minmax_po,
    random_pair, // control: one uniformly random pair per source
};

inline constexpr std::array<std::pair<Method, std::string_view>, 12> kMethodNames{{
    {Method::cr_plus, "cr_plus"},
    {Method::cr_times, "cr_times"},
    {Method::rso, "rso"},
    {Method::rs_dpo, "rs_dpo"},
    {Method::mbr_bw, "mbr_bw"},
    {Method::mbr_bmw, "mbr_bmw"},
    {Method::qe_best, "qe_best"},
    {Method::top_scores, "top_scores"},
    {Method::minmax_r, "minmax_r"},
    {Method::minmax_p, "minmax_p"},
    {Method::minmax_po, "minmax_po"},
    {Method::random_pair, "random_pair"},
}};

inline std::string_view to_string(Method m) {
    for (const auto& [method, name] : kMethodNames)
        if (method == m) return name;
    return "?";
}

inline std::string method_list() {
    std::string out;
    for (const auto& [method, name] : kMethodNames) {
        if (!out.empty()) out += ", ";
        out += name;
    }
    return out;
}

inline Method parse_method(std::string_view tag) {
    for (const auto& [method, name] : kMethodNames)
        if (name == tag) return method;
    fail("unknown method '" + std::string(tag) + "'; valid methods: " + method_list());
}

enum class GateMode { off, log_space, probability };
enum class LogprobNorm { sum, per_token };
enum class MbrVariant { bw, bmw };

inline std::string_view to_string(GateMode g) {
    switch (g) {
    case GateMode::off: return "off";
    case GateMode::log_space: return "log_space";
    case GateMode::probability: return "probability";
    }
    return "?";
}

inline GateMode parse_gate_mode(std::string_view s) {
    if (s == "off") return GateMode::off;
    if (s == "log_space") return GateMode::log_space;
    if (s == "probability") return GateMode::probability;
    fail("unknown gate mode '" + std::string(s) + "'; valid: off, log_space, probability");
}

inline std::string_view to_string(LogprobNorm n) { return n == LogprobNorm::sum ? "sum" : "per_token"; }

inline LogprobNorm parse_logprob_norm(std::string_view s) {
    if (s == "sum") return LogprobNorm::sum;
    if (s == "per_token") return LogprobNorm::per_token;
    fail("unknown logprob normalization '" + std::string(s) + "'; valid: sum, per_token");
}

// Reward-gap threshold per direction class.
struct EtaByDirection {
    double out_of_english = 0.6;
    double into_english = 0.5;

    double resolve(const Direction& d) const {
        return classify(d) == DirectionClass::into_english ? into_english : out_of_english;
    }
};

struct SelectionConfig {
    Method method = Method::cr_plus;
    double k_trust = 50.0;
    double beta = 0.1;
    EtaByDirection eta;
    GateMode gate_mode = GateMode::off;
    double epsilon = 0.0;
    int rso_samples = 8;
    int top_n = 8;
    std::uint64_t seed = 0;
    LogprobNorm logprob_norm = LogprobNorm::sum;

    void validate() const {
        auto finite = [](double x) { return std::isfinite(x); };
        require(finite(k_trust) && k_trust > 0, "k_trust must be finite and > 0");
        require(finite(beta) && beta > 0, "beta must be finite and > 0");
        require(finite(eta.out_of_english) && eta.out_of_english > 0 && eta.out_of_english < 1,
                "eta (out of English) must lie in (0,1)");
        require(finite(eta.into_english) && eta.into_english > 0 && eta.into_english < 1,
                "eta (into English) must lie in (0,1)");
        require(finite(epsilon) && epsilon >= 0, "epsilon must be finite and >= 0");
        require(rso_samples >= 2, "rso_samples must be >= 2");
        require(top_n >= 2, "top_n must be >= 2");
    }
};

struct PreferencePair {
    std::string source_id;
    std::string chosen_id;
    std::string rejected_id;
    double score = 0.0;
    Method method = Method::cr_plus;
    Extras extras;

    bool operator==(const PreferencePair&) const = default;
};

struct SftTarget {
    std::string source_id;
    std::string candidate_id;

    bool operator==(const SftTarget&) const = default;
};

struct Provenance {
    SelectionConfig config;
    std::string input_digest;
};

struct PreferenceDataset {
    std::vector<PreferencePair> pairs;
    std::vector<SftTarget> sft_targets;
    Provenance provenance;
};

// Unweighted mean over reward sources.
inline double aggregate_reward(const RewardMap& rewards) {
    if (rewards.empty()) fail("no reward sources");
    double sum = 0.0;
    for (const auto& [name, value] : rewards) {
        if (!(value >= 0.0 && value <= 1.0)) fail("reward out of range: '" + name + "'");
        sum += value;
    }
    return sum / static_cast<double>(rewards.size());
}

inline double aggregate_reward(const Candidate& c) {
    if (c.reward_agg) return *c.reward_agg;
    if (c.rewards.empty()) fail("candidate '" + c.id + "' is missing rewards");
    return aggregate_reward(c.rewards);
}

inline double effective_logprob(const Candidate& c, LogprobNorm norm) {
    if (!c.logprob) fail("candidate '" + c.id + "' is missing logprob");
    const double lp = *c.logprob;
    if (!std::isfinite(lp)) fail("candidate '" + c.id + "' has non-finite logprob");
    if (norm == LogprobNorm::sum) return lp;
    if (!c.token_count || *c.token_count < 1)
        fail("per_token normalization requested but candidate '" + c.id + "' has no token count");
    return lp / static_cast<double>(*c.token_count);
}

inline double effective_logprob(const Candidate& c, const SelectionConfig& config) {
    return effective_logprob(c, config.logprob_norm);
}

// Checks the candidate invariants. `need_logprob` is false only for
// candidate pools that are ingested before a merge.
inline void validate(const Candidate& c, bool need_logprob = true) {
    require(!c.id.empty(), "candidate id must be non-empty");
    if (c.logprob) {
        require(std::isfinite(*c.logprob), "candidate '" + c.id + "': logprob must be finite");
        require(*c.logprob <= 0.0, "candidate '" + c.id + "': logprob must be <= 0");
    } else {
        require(!need_logprob, "candidate '" + c.id + "': missing logprob");
    }
    for (const auto& [name, value] : c.rewards) {
        if (!(value >= 0.0 && value <= 1.0))
            fail("candidate '" + c.id + "': reward out of range: '" + name + "'");
    }
    if (c.reward_agg) {
        require(std::abs(*c.reward_agg - aggregate_reward(c.rewards)) <= 1e-12,
                "candidate '" + c.id + "': cached aggregate reward is stale");
    }
    if (c.token_count) require(*c.token_count >= 1, "candidate '" + c.id + "': token_count must be >= 1");
}

inline void validate(const CandidateSet& set, bool need_logprob = true) {
    require(!set.source_id.empty(), "source_id must be non-empty");
    require(!set.candidates.empty(), "source '" + set.source_id + "' has no candidates");
    std::set<std::string_view> seen;
    for (const auto& c : set.candidates) {
        validate(c, need_logprob);
        if (!seen.insert(c.id).second)
            fail("source '" + set.source_id + "': duplicate candidate id '" + c.id + "'");
    }
}

// Fills the cached aggregate reward of every candidate.
inline void cache_aggregates(CandidateSet& set) {
    for (auto& c : set.candidates) c.reward_agg = aggregate_reward(c.rewards);
}

} // namespace crpo
