#pragma once
// Preference-optimization objectives and their analytic gradients for
// tabular softmax policies.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <vector>

#include "crpo/error.hpp"
#include "crpo/policy.hpp"

namespace crpo {

// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double log_sigmoid(double x) { return -softplus(-x); }

struct PairLogits {
    double logp_theta_w = 0.0;
    double logp_theta_l = 0.0;
    double logp_ref_w = 0.0;
    double logp_ref_l = 0.0;
    double beta = 0.1;
};

inline double dpo_margin(const PairLogits& in) {
    return (in.logp_theta_w - in.logp_ref_w) - (in.logp_theta_l - in.logp_ref_l);
}

inline double dpo_loss(const PairLogits& in) { return softplus(-in.beta * dpo_margin(in)); }

// DPO against a uniform reference: only the policy's own log-ratio matters.
inline double cpo_loss(double logp_theta_w, double logp_theta_l, double beta) {
    return softplus(-beta * (logp_theta_w - logp_theta_l));
}

enum class GammaMode { sign, identity };

inline double gamma(double reward_gap, GammaMode mode) {
    if (mode == GammaMode::sign) return reward_gap > 0.0 ? 1.0 : -1.0;
    return reward_gap;
}

inline double gamma_loss(double r_w, double r_l, double logp_w, double logp_l, GammaMode mode) {
    if (!(r_w >= 0.0 && r_w <= 1.0 && r_l >= 0.0 && r_l <= 1.0)) fail("reward out of range");
    return gamma(r_w - r_l, mode) * (logp_w - logp_l);
}

inline double sft_term(double logp_theta_w) { return -logp_theta_w; }

// Change of the DPO inner margin when moving from policy 1 to policy 2.
inline double delta_loss(double logp1_w, double logp1_l, double logp2_w, double logp2_l) {
    return (logp2_w - logp2_l) + (logp1_l - logp1_w);
}

template <class P>
concept ExactPolicy = requires(const P& p, std::size_t i) {
    { p.log_prob(i) } -> std::convertible_to<double>;
};

template <ExactPolicy P1, ExactPolicy P2>
double delta_loss(const P1& before, const P2& after, std::size_t chosen, std::size_t rejected) {
    return delta_loss(before.log_prob(chosen), before.log_prob(rejected), after.log_prob(chosen),
                      after.log_prob(rejected));
}

enum class Objective { dpo, cpo };

struct ObjectiveConfig {
    Objective kind = Objective::dpo;
    double beta = 0.1;
    double sft_coef = 1.0;
};

// Preference pair resolved to tabular indices.
struct TabularPair {
    std::size_t source = 0;
    std::size_t chosen = 0;
    std::size_t rejected = 0;

    bool operator==(const TabularPair&) const = default;
};

struct LossAndGrad {
    double loss = 0.0;
    Table grad;
};

// Mean objective over `pairs` and its gradient with respect to the policy's
// logit table. `reference` is ignored for CPO.
//
// With z the logits of a row and p = softmax(z), d log p[m] / dz = e_m - p.
// The preference terms depend on z only through z_w - z_l, so their row
// gradient touches just the chosen and rejected entries; the SFT term
// contributes coef * (p - e_w).
inline LossAndGrad batch_loss_and_grad(const TabularPolicy& policy, const TabularPolicy& reference,
                                       std::span<const TabularPair> pairs, const ObjectiveConfig& objective) {
    require(objective.beta > 0.0 && std::isfinite(objective.beta), "beta must be finite and > 0");
    LossAndGrad out{0.0, Table(policy.n_sources(), policy.n_outputs())};
    if (pairs.empty()) return out;
    if (objective.kind == Objective::dpo) {
        require(reference.n_sources() == policy.n_sources() && reference.n_outputs() == policy.n_outputs(),
                "reference policy shape does not match");
    }

    const double scale = 1.0 / static_cast<double>(pairs.size());
    std::vector<std::vector<double>> logp_cache(policy.n_sources());
    std::vector<std::vector<double>> ref_cache(policy.n_sources());
    for (const auto& p : pairs) {
        require(p.source < policy.n_sources(), "pair source index out of range");
        require(p.chosen < policy.n_outputs() && p.rejected < policy.n_outputs(), "pair output index out of range");
        auto& lp = logp_cache[p.source];
        if (lp.empty()) lp = log_softmax(policy.logits().row(p.source));

        double margin = lp[p.chosen] - lp[p.rejected];
        if (objective.kind == Objective::dpo) {
            auto& ref = ref_cache[p.source];
            if (ref.empty()) ref = log_softmax(reference.logits().row(p.source));
            margin -= ref[p.chosen] - ref[p.rejected];
        }
        const double x = objective.beta * margin;
        out.loss += scale * (softplus(-x) + objective.sft_coef * sft_term(lp[p.chosen]));

        // d softplus(-x) / d margin = -beta * sigmoid(-x)
        const double dmargin = -objective.beta * sigmoid(-x) * scale;
        out.grad(p.source, p.chosen) += dmargin;
        out.grad(p.source, p.rejected) -= dmargin;
        if (objective.sft_coef != 0.0) {
            const double c = objective.sft_coef * scale;
            for (std::size_t m = 0; m < policy.n_outputs(); ++m) out.grad(p.source, m) += c * std::exp(lp[m]);
            out.grad(p.source, p.chosen) -= c;
        }
    }
    return out;
}

} // namespace crpo
