#pragma once
// Central finite-difference check of batch_loss_and_grad on random tabular
// instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "crpo/losses.hpp"
#include "crpo/random.hpp"

namespace crpo {

struct GradCheckConfig {
    std::size_t instances = 100;
    double h = 1e-5;
    // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    // entries that are zero in both from dominating.
    double floor = 1e-6;
};

struct GradCheckResult {
    std::size_t instances = 0;
    std::size_t entries = 0;
    double max_rel_error = 0.0;
};

inline Table random_table(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Table t(rows, cols);
    for (double& v : t.data()) v = scale * standard_normal(rng);
    return t;
}

inline std::vector<TabularPair> random_pairs(std::size_t n_sources, std::size_t n_outputs, std::size_t count, Rng& rng) {
    std::vector<TabularPair> pairs;
    for (std::size_t i = 0; i < count; ++i) {
        TabularPair p;
        p.source = uniform_index(rng, n_sources);
        p.chosen = uniform_index(rng, n_outputs);
        do p.rejected = uniform_index(rng, n_outputs);
        while (p.rejected == p.chosen);
        pairs.push_back(p);
    }
    return pairs;
}

// Cycles through DPO, DPO+SFT, CPO and CPO+SFT across instances.
inline GradCheckResult check_gradients(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
    GradCheckResult res;
    for (std::size_t inst = 0; inst < cfg.instances; ++inst) {
        Rng rng(derive_seed(seed, inst));
        const std::size_t rows = 1 + uniform_index(rng, 4);
        const std::size_t cols = 2 + uniform_index(rng, 7);
        TabularPolicy policy(random_table(rows, cols, 1.5, rng));
        const TabularPolicy reference(random_table(rows, cols, 1.5, rng));
        const auto pairs = random_pairs(rows, cols, 1 + uniform_index(rng, 6), rng);
        ObjectiveConfig obj;
        obj.kind = inst % 2 == 0 ? Objective::dpo : Objective::cpo;
        obj.sft_coef = (inst / 2) % 2 == 0 ? 0.0 : 0.5 + uniform01(rng);
        obj.beta = 0.05 + 2.0 * uniform01(rng);

        const auto analytic = batch_loss_and_grad(policy, reference, pairs, obj);
        auto z = policy.logits().data();
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double saved = z[i];
            z[i] = saved + cfg.h;
            const double up = batch_loss_and_grad(policy, reference, pairs, obj).loss;
            z[i] = saved - cfg.h;
            const double down = batch_loss_and_grad(policy, reference, pairs, obj).loss;
            z[i] = saved;
            const double numeric = (up - down) / (2.0 * cfg.h);
            const double a = analytic.grad.data()[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), cfg.floor});
            res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
            ++res.entries;
        }
        ++res.instances;
    }
    return res;
}

} // namespace crpo
