#pragma once
// Fixture builders, random generators and brute-force oracles shared by the
// unit tests and the acceptance binary. Nothing here calls into the code
// under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crpo/core.hpp"
#include "crpo/losses.hpp"
#include "crpo/policy.hpp"

namespace crpo::test {

inline std::string data_path(const std::string& rel) { return std::string(CRPO_TEST_DIR) + "/" + rel; }

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Candidate cand(std::string id, double reward, double logprob, std::optional<std::int64_t> tokens = {}) {
    Candidate c;
    c.id = std::move(id);
    c.text = "text " + c.id;
    c.logprob = logprob;
    c.rewards = {{"qe", reward}};
    c.reward_agg = reward;
    c.token_count = tokens;
    return c;
}

inline CandidateSet make_set(std::vector<Candidate> cands, std::string direction = "en-de", std::string sid = "s") {
    CandidateSet set;
    set.source_id = std::move(sid);
    set.source_text = "source";
    set.direction = Direction::parse(direction);
    set.candidates = std::move(cands);
    return set;
}

// The A/B/C example set: A(r=0.9, lp=-40), B(r=0.5, lp=-10), C(r=0.2, lp=-60).
inline CandidateSet abc_set() { return make_set({cand("A", 0.9, -40), cand("B", 0.5, -10), cand("C", 0.2, -60)}); }

inline std::string padded_id(std::size_t i) {
    std::string s = std::to_string(i);
    return "c" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

// Random set with K candidates. Rewards and log-probabilities are drawn on a
// coarse grid about a third of the time so that ties occur; candidate ids are
// shuffled relative to position so that tie-breaking by id is exercised.
inline CandidateSet random_set(std::mt19937_64& g, std::size_t k) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool coarse = u(g) < 0.35;
    std::vector<std::size_t> ids(k);
    for (std::size_t i = 0; i < k; ++i) ids[i] = i;
    std::shuffle(ids.begin(), ids.end(), g);
    std::vector<Candidate> cands;
    for (std::size_t j = 0; j < k; ++j) {
        const double r = coarse ? std::floor(u(g) * 5.0) / 4.0 : u(g);
        const double lp = coarse ? -std::floor(u(g) * 4.0) : -30.0 * u(g);
        cands.push_back(cand(padded_id(ids[j]), std::min(r, 1.0), lp, 1 + static_cast<std::int64_t>(u(g) * 20)));
    }
    return make_set(std::move(cands), u(g) < 0.5 ? "en-de" : "de-en");
}

struct BruteCrpo {
    std::string chosen;
    std::string rejected;
    double score;
};

// Enumerates every ordered pair (w, l). A pair qualifies when w is the
// first candidate under the order (reward desc, id asc), l passes the gate,
// and the score is positive; the answer is the qualifying pair with the
// largest score, lowest rejected id on ties.
inline std::optional<BruteCrpo> brute_crpo(const CandidateSet& set, Method method, double k, GateMode gate,
                                           double eps) {
    const auto& c = set.candidates;
    auto r = [&](std::size_t i) { return *c[i].reward_agg; };
    auto lp = [&](std::size_t i) { return *c[i].logprob; };
    std::optional<BruteCrpo> best;
    for (std::size_t w = 0; w < c.size(); ++w) {
        bool top = true;
        for (std::size_t o = 0; o < c.size(); ++o) {
            if (o == w) continue;
            if (r(o) > r(w) || (r(o) == r(w) && c[o].id < c[w].id)) top = false;
        }
        if (!top) continue;
        for (std::size_t l = 0; l < c.size(); ++l) {
            if (l == w) continue;
            if (gate == GateMode::log_space && !(lp(l) - lp(w) + eps > 0)) continue;
            if (gate == GateMode::probability && !(std::exp(lp(l)) - std::exp(lp(w)) + eps > 0)) continue;
            const double s = method == Method::cr_plus ? k * (r(w) - r(l)) + (lp(l) - lp(w))
                                                       : (r(w) - r(l)) * (lp(l) - lp(w));
            if (!(s > 0)) continue;
            if (!best || s > best->score || (s == best->score && c[l].id < best->rejected))
                best = BruteCrpo{c[w].id, c[l].id, s};
        }
    }
    return best;
}

// O(K^2) MBR: average off-diagonal utility per row.
inline std::vector<double> brute_mbr(const std::vector<std::vector<double>>& u) {
    std::vector<double> out;
    for (std::size_t j = 0; j < u.size(); ++j) {
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i)
            if (i != j) s += u[j][i];
        out.push_back(s / static_cast<double>(u.size() - 1));
    }
    return out;
}

// Batch objective written directly from its definition: mean over pairs of
// -log sigmoid(beta * margin) - coef * log p(chosen), with plain log/exp.
inline double plain_objective(const Table& logits, const Table& ref, const std::vector<TabularPair>& pairs,
                              const ObjectiveConfig& obj) {
    auto logp = [](const Table& t, std::size_t s, std::size_t o) {
        double z = 0;
        for (std::size_t m = 0; m < t.cols(); ++m) z += std::exp(t(s, m));
        return t(s, o) - std::log(z);
    };
    double total = 0;
    for (const auto& p : pairs) {
        double margin = logp(logits, p.source, p.chosen) - logp(logits, p.source, p.rejected);
        if (obj.kind == Objective::dpo) margin -= logp(ref, p.source, p.chosen) - logp(ref, p.source, p.rejected);
        total += -std::log(1.0 / (1.0 + std::exp(-obj.beta * margin))) - obj.sft_coef * logp(logits, p.source, p.chosen);
    }
    return pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
}

// Central finite differences of plain_objective.
inline Table finite_difference(const Table& logits, const Table& ref, const std::vector<TabularPair>& pairs,
                               const ObjectiveConfig& obj, double h) {
    Table z = logits;
    Table g(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.data().size(); ++i) {
        const double saved = z.data()[i];
        z.data()[i] = saved + h;
        const double up = plain_objective(z, ref, pairs, obj);
        z.data()[i] = saved - h;
        const double down = plain_objective(z, ref, pairs, obj);
        z.data()[i] = saved;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

inline double max_rel_error(const Table& a, const Table& b, double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double x = a.data()[i];
        const double y = b.data()[i];
        worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
    return worst;
}

} // namespace crpo::test
