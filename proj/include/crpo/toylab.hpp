#pragma once
// Exactly solvable preference-optimization world. Each source has M
// enumerable outputs with a known reward and a tabular reference policy, so
// selection, training and evaluation can all be computed exactly.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crpo/core.hpp"
#include "crpo/losses.hpp"
#include "crpo/policy.hpp"
#include "crpo/random.hpp"
#include "crpo/selectors.hpp"

namespace crpo {

struct ToyWorldConfig {
    std::size_t n_sources = 50;
    std::size_t outputs = 32;
    // Standard deviation of the reference logits.
    double logit_scale = 2.0;
    // Weight of the reference-likelihood percentile in the reward mixture.
    double rho = 0.5;
    std::uint64_t seed = 0;
    std::string direction = "en-de";
};

struct ToyWorld {
    std::size_t n_sources = 0;
    std::size_t outputs = 0;
    Table reward_table;
    Table ref_logits;
    std::uint64_t seed = 0;
    Direction direction{"en", "de"};

    void validate() const {
        require(n_sources > 0 && outputs > 0, "toy world must have sources and outputs");
        require(reward_table.rows() == n_sources && reward_table.cols() == outputs, "reward table shape mismatch");
        require(ref_logits.rows() == n_sources && ref_logits.cols() == outputs, "reference logits shape mismatch");
        for (double r : reward_table.data()) require(r >= 0.0 && r <= 1.0, "toy reward out of range");
        for (double z : ref_logits.data()) require(std::isfinite(z), "toy reference logit not finite");
    }
};

// Reference logits are i.i.d. normal. Rewards mix the within-row likelihood
// percentile with independent uniform noise:
//   r = rho * percentile(logit) + (1 - rho) * u,  u ~ U[0,1).
inline ToyWorld make_world(const ToyWorldConfig& config) {
    require(config.n_sources > 0 && config.outputs > 0, "toy world must have sources and outputs");
    require(config.rho >= 0.0 && config.rho <= 1.0, "rho must lie in [0,1]");
    require(config.logit_scale >= 0.0 && std::isfinite(config.logit_scale), "logit_scale must be finite and >= 0");
    ToyWorld w;
    w.n_sources = config.n_sources;
    w.outputs = config.outputs;
    w.seed = config.seed;
    w.direction = Direction::parse(config.direction);
    w.ref_logits = Table(config.n_sources, config.outputs);
    w.reward_table = Table(config.n_sources, config.outputs);
    Rng rng(derive_seed(config.seed, 0x70));
    const double m = static_cast<double>(config.outputs);
    for (std::size_t s = 0; s < config.n_sources; ++s) {
        for (std::size_t o = 0; o < config.outputs; ++o) w.ref_logits(s, o) = config.logit_scale * standard_normal(rng);
        std::vector<std::size_t> order(config.outputs);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return w.ref_logits(s, a) < w.ref_logits(s, b); });
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            const double pct = (static_cast<double>(rank) + 0.5) / m;
            w.reward_table(s, order[rank]) = config.rho * pct + (1.0 - config.rho) * uniform01(rng);
        }
    }
    w.validate();
    return w;
}

inline std::string toy_source_id(std::size_t source) { return "s" + std::to_string(source); }
inline std::string toy_output_text(std::size_t output) { return "y" + std::to_string(output); }

namespace detail {
inline std::optional<std::size_t> parse_index(std::string_view s, char prefix) {
    if (s.size() < 2 || s[0] != prefix) return std::nullopt;
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}
} // namespace detail

inline TabularPolicy reference_policy(const ToyWorld& world) { return TabularPolicy(world.ref_logits); }

// Sampling distribution: temperature-scaled reference softmax restricted to
// the smallest likelihood-ordered prefix whose mass reaches top_p.
inline std::vector<double> sampling_distribution(std::span<const double> logits, double temperature, double top_p) {
    require(temperature > 0.0 && std::isfinite(temperature), "temperature must be finite and > 0");
    require(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0,1]");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = (logits[i] - mx) / temperature;
    auto p = softmax(scaled);

    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::vector<double> out(p.size(), 0.0);
    double mass = 0.0;
    for (std::size_t i : order) {
        out[i] = p[i];
        mass += p[i];
        if (mass >= top_p) break;
    }
    if (!(mass > 0.0) || !std::isfinite(mass)) fail("degenerate sampling distribution after truncation");
    for (double& v : out) v /= mass;
    return out;
}

inline std::size_t sample_categorical(std::span<const double> p, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i];
        last = i;
        if (u < acc) return i;
    }
    return last;
}

// Draws K outputs with replacement. Candidate logprobs are the untruncated
// reference log-likelihoods at temperature 1, not the sampler's.
inline CandidateSet sample_candidates(const ToyWorld& world, std::size_t source, std::size_t k, double temperature,
                                      double top_p, Rng& rng) {
    require(source < world.n_sources, "source index out of range");
    require(k >= 1, "K must be >= 1");
    const auto row = world.ref_logits.row(source);
    const auto p = sampling_distribution(row, temperature, top_p);
    const auto ref_logp = log_softmax(row);

    CandidateSet set;
    set.source_id = toy_source_id(source);
    set.source_text = "source " + std::to_string(source);
    set.direction = world.direction;
    set.candidates.reserve(k);
    const int width = static_cast<int>(std::to_string(k - 1).size());
    for (std::size_t j = 0; j < k; ++j) {
        const std::size_t o = sample_categorical(p, rng);
        std::string id = std::to_string(j);
        id.insert(0, static_cast<std::size_t>(width) - id.size(), '0');
        Candidate c;
        c.id = "c" + id;
        c.text = toy_output_text(o);
        c.logprob = ref_logp[o];
        c.rewards = {{"toy", world.reward_table(source, o)}};
        c.reward_agg = world.reward_table(source, o);
        set.candidates.push_back(std::move(c));
    }
    return set;
}

// pi* proportional to pi_ref * exp(R / beta), stored as normalized log-probs.
inline TabularPolicy exact_optimal_policy(const ToyWorld& world, double beta) {
    if (!(beta > 0.0)) fail("beta must be > 0");
    Table logits(world.n_sources, world.outputs);
    for (std::size_t s = 0; s < world.n_sources; ++s) {
        std::vector<double> z(world.outputs);
        for (std::size_t o = 0; o < world.outputs; ++o) z[o] = world.ref_logits(s, o) + world.reward_table(s, o) / beta;
        const auto lp = log_softmax(z);
        std::copy(lp.begin(), lp.end(), logits.row(s).begin());
    }
    return TabularPolicy(std::move(logits));
}

// Distribution following the reward alone: logits = k_trust * R.
inline TabularPolicy reward_tilted_policy(const ToyWorld& world, double k_trust) {
    Table logits(world.n_sources, world.outputs);
    for (std::size_t s = 0; s < world.n_sources; ++s)
        for (std::size_t o = 0; o < world.outputs; ++o) logits(s, o) = k_trust * world.reward_table(s, o);
    return TabularPolicy(std::move(logits));
}

inline double expected_reward(const TabularPolicy& policy, const ToyWorld& world) {
    require(policy.n_sources() == world.n_sources && policy.n_outputs() == world.outputs, "policy/world shape mismatch");
    double total = 0.0;
    for (std::size_t s = 0; s < world.n_sources; ++s) {
        const auto p = policy.probs(s);
        double e = 0.0;
        for (std::size_t o = 0; o < world.outputs; ++o) e += p[o] * world.reward_table(s, o);
        total += e;
    }
    return total / static_cast<double>(world.n_sources);
}

// Maps selected pairs (and fine-tuning targets, encoded as chosen ==
// rejected so that only the SFT term survives) onto tabular indices.
inline std::vector<TabularPair> resolve_pairs(const ToyWorld& world, const std::vector<CandidateSet>& sets,
                                              const std::vector<PreferencePair>& pairs,
                                              const std::vector<SftTarget>& sft_targets = {}) {
    std::map<std::string, const CandidateSet*, std::less<>> by_id;
    for (const auto& s : sets) by_id[s.source_id] = &s;
    auto output_of = [&](const CandidateSet& set, const std::string& cid) {
        const Candidate* c = set.find(cid);
        if (!c) fail("candidate '" + cid + "' does not resolve in source '" + set.source_id + "'");
        const auto o = detail::parse_index(c->text, 'y');
        if (!o || *o >= world.outputs) fail("candidate '" + cid + "' is not a toy output");
        return *o;
    };
    auto source_of = [&](const std::string& sid) -> std::pair<std::size_t, const CandidateSet*> {
        const auto it = by_id.find(sid);
        const auto idx = detail::parse_index(sid, 's');
        if (it == by_id.end() || !idx || *idx >= world.n_sources) fail("source '" + sid + "' does not resolve");
        return {*idx, it->second};
    };
    std::vector<TabularPair> out;
    out.reserve(pairs.size() + sft_targets.size());
    for (const auto& p : pairs) {
        const auto [s, set] = source_of(p.source_id);
        out.push_back({s, output_of(*set, p.chosen_id), output_of(*set, p.rejected_id)});
    }
    for (const auto& t : sft_targets) {
        const auto [s, set] = source_of(t.source_id);
        const auto o = output_of(*set, t.candidate_id);
        out.push_back({s, o, o});
    }
    return out;
}

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, const std::string& what)
        : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

struct TrainerConfig {
    double lr = 20.0;
    std::size_t steps = 200;
    ObjectiveConfig objective;
};

struct TrainResult {
    TabularPolicy policy;
    // Objective value before each step, plus the final value.
    std::vector<double> losses;
};

// Full-batch gradient descent on the logit table.
inline TrainResult train_dpo(const TabularPolicy& policy, const TabularPolicy& reference,
                             std::span<const TabularPair> pairs, const TrainerConfig& config) {
    require(config.lr > 0.0 && std::isfinite(config.lr), "learning rate must be finite and > 0");
    TrainResult out{policy, {}};
    if (pairs.empty()) return out;
    out.losses.reserve(config.steps + 1);
    for (std::size_t step = 0; step <= config.steps; ++step) {
        auto lg = batch_loss_and_grad(out.policy, reference, pairs, config.objective);
        if (!std::isfinite(lg.loss)) throw TrainingDiverged(step, "non-finite loss");
        out.losses.push_back(lg.loss);
        if (step == config.steps) break;
        auto z = out.policy.logits().data();
        const auto g = lg.grad.data();
        for (std::size_t i = 0; i < z.size(); ++i) z[i] -= config.lr * g[i];
    }
    return out;
}

struct ComparisonConfig {
    std::size_t k = 16;
    double temperature = 0.9;
    double top_p = 0.9;
    // Base selection hyperparameters; method is overridden per run. The trust
    // weight is rescaled to the toy's confidence/reward magnitude ratio
    // (balanced_k_trust is about 5 on default worlds).
    SelectionConfig selection = [] {
        SelectionConfig c;
        c.k_trust = 8.0;
        return c;
    }();
    // The SFT term is off here: every method that shares the best-reward
    // chosen side gets the same SFT push, and at toy scale it dominates the
    // preference term.
    TrainerConfig trainer = [] {
        TrainerConfig t;
        t.lr = 20.0;
        t.steps = 100;
        t.objective.sft_coef = 0.0;
        return t;
    }();
};

struct MethodSummary {
    Method method = Method::cr_plus;
    std::vector<double> gains; // one per seed
    std::vector<std::size_t> pair_counts;
    std::vector<bool> no_pairs; // seed produced no training data at all
    double mean_gain = 0.0;
    double stderr_gain = 0.0;
};

struct ComparisonReport {
    std::uint64_t world_seed = 0;
    std::vector<std::uint64_t> seeds;
    double reference_reward = 0.0;
    std::vector<MethodSummary> methods;
    // win_rate[i][j]: fraction of seeds where method i's gain beats method j's.
    std::vector<std::vector<double>> win_rate;
};

// Sampled candidate pools for one seed, shared by every method.
inline std::vector<CandidateSet> sample_pools(const ToyWorld& world, std::uint64_t seed, const ComparisonConfig& cfg) {
    Rng rng(derive_seed(seed, 0));
    std::vector<CandidateSet> sets;
    sets.reserve(world.n_sources);
    for (std::size_t s = 0; s < world.n_sources; ++s)
        sets.push_back(sample_candidates(world, s, cfg.k, cfg.temperature, cfg.top_p, rng));
    return sets;
}

struct MethodRun {
    double gain = 0.0;
    std::size_t pairs = 0;
};

inline MethodRun run_method(const ToyWorld& world, const std::vector<CandidateSet>& sets, Method method,
                            std::uint64_t seed, const ComparisonConfig& cfg) {
    SelectionConfig sel = cfg.selection;
    sel.method = method;
    sel.seed = seed;
    Rng rng(derive_seed(seed, 1 + static_cast<std::uint64_t>(method)));
    std::vector<PreferencePair> pairs;
    std::vector<SftTarget> targets;
    for (const auto& set : sets) {
        auto out = select(set, sel, rng);
        for (auto& p : out.pairs) pairs.push_back(std::move(p));
        if (out.sft_target) targets.push_back({set.source_id, *out.sft_target});
    }
    const auto tabular = resolve_pairs(world, sets, pairs, targets);
    if (tabular.empty()) return {0.0, 0};
    const auto ref = reference_policy(world);
    const auto trained = train_dpo(ref, ref, tabular, cfg.trainer);
    return {expected_reward(trained.policy, world) - expected_reward(ref, world), tabular.size()};
}

// For every (method, seed): sample pools, select, train from the reference
// policy and record the exact expected-reward gain.
inline ComparisonReport run_comparison(const ToyWorld& world, const std::vector<Method>& methods,
                                       const std::vector<std::uint64_t>& seeds, const ComparisonConfig& cfg) {
    require(methods.size() >= 2, "comparison needs at least 2 methods");
    require(!seeds.empty(), "comparison needs at least 1 seed");
    ComparisonReport report;
    report.world_seed = world.seed;
    report.seeds = seeds;
    report.reference_reward = expected_reward(reference_policy(world), world);
    report.methods.resize(methods.size());
    for (std::size_t i = 0; i < methods.size(); ++i) report.methods[i].method = methods[i];

    for (std::uint64_t seed : seeds) {
        const auto sets = sample_pools(world, seed, cfg);
        for (auto& m : report.methods) {
            const auto run = run_method(world, sets, m.method, seed, cfg);
            m.gains.push_back(run.gain);
            m.pair_counts.push_back(run.pairs);
            m.no_pairs.push_back(run.pairs == 0);
        }
    }

    const double n = static_cast<double>(seeds.size());
    for (auto& m : report.methods) {
        m.mean_gain = std::accumulate(m.gains.begin(), m.gains.end(), 0.0) / n;
        double ss = 0.0;
        for (double g : m.gains) ss += (g - m.mean_gain) * (g - m.mean_gain);
        m.stderr_gain = seeds.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    }
    report.win_rate.assign(methods.size(), std::vector<double>(methods.size(), 0.0));
    for (std::size_t i = 0; i < methods.size(); ++i) {
        for (std::size_t j = 0; j < methods.size(); ++j) {
            std::size_t wins = 0;
            for (std::size_t s = 0; s < seeds.size(); ++s)
                if (report.methods[i].gains[s] > report.methods[j].gains[s]) ++wins;
            report.win_rate[i][j] = static_cast<double>(wins) / n;
        }
    }
    return report;
}

} // namespace crpo
