#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dpsim/diagnostics.hpp"
#include "dpsim/numerics.hpp"
#include "dpsim/rng.hpp"
#include "dpsim/toy_model.hpp"

namespace dpsim {

// Group-relative policy optimization with asymmetric ratio clipping and a
// token-level loss: one global normalizer over the group's masked tokens, no
// per-sequence length normalization, no reward-std division, no KL term.
struct GrpoConfig {
    double eps_low = 0.2;
    double eps_high = 0.28;
    std::size_t rollouts_per_prompt = 8;
};

inline void validate_grpo_config(const GrpoConfig& cfg) {
    if (!(cfg.eps_low > 0.0 && cfg.eps_low < 1.0)) {
        throw std::invalid_argument("grpo: eps_low must be in (0, 1)");
    }
    if (!(cfg.eps_high > 0.0 && cfg.eps_high < 1.0)) {
        throw std::invalid_argument("grpo: eps_high must be in (0, 1)");
    }
    if (cfg.rollouts_per_prompt == 0) {
        throw std::invalid_argument("grpo: rollouts_per_prompt must be >= 1");
    }
}

// All rollouts for one prompt: scalar rewards plus per-token log-probs under
// the current and the rollout-time policy, with {0,1} response masks.
struct RolloutGroup {
    Vec rewards;
    std::vector<Vec> logp_new;
    std::vector<Vec> logp_old;
    std::vector<std::vector<std::uint8_t>> masks;
};

inline std::uint64_t validate_group(const RolloutGroup& group) {
    const std::size_t n = group.rewards.size();
    if (n == 0) throw std::invalid_argument("grpo: empty rollout group");
    if (group.logp_new.size() != n || group.logp_old.size() != n || group.masks.size() != n) {
        throw std::invalid_argument("grpo: rollout count mismatch");
    }
    std::uint64_t masked = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (group.logp_new[i].size() != group.logp_old[i].size() ||
            group.logp_new[i].size() != group.masks[i].size()) {
            throw std::invalid_argument("grpo: per-rollout length mismatch");
        }
        for (auto m : group.masks[i]) masked += m;
    }
    if (masked == 0) throw std::invalid_argument("grpo: no masked tokens in group");
    return masked;
}

// A_i = r_i - mean(r). No std normalization.
inline Vec group_advantage(const Vec& rewards) {
    if (rewards.empty()) throw std::invalid_argument("group_advantage: empty rewards");
    const double mean = stable_sum(rewards) / static_cast<double>(rewards.size());
    Vec adv(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
    return adv;
}

namespace detail {

// Shared term evaluation so loss and gradient take the same branch. Ties at
// the clip boundary go to the unclipped term, making gradients deterministic.
struct GrpoTerm {
    double value = 0.0;
    bool unclipped = false;
    double ratio = 1.0;
};

inline GrpoTerm grpo_term(double logp_new, double logp_old, double advantage,
                          const GrpoConfig& cfg) {
    GrpoTerm t;
    t.ratio = std::exp(logp_new - logp_old);
    const double raw = t.ratio * advantage;
    const double clipped = std::clamp(t.ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * advantage;
    t.unclipped = raw <= clipped;
    t.value = t.unclipped ? raw : clipped;
    return t;
}

}  // namespace detail

inline double grpo_token_loss(const RolloutGroup& group, const Vec& adv, const GrpoConfig& cfg) {
    validate_grpo_config(cfg);
    const std::uint64_t masked = validate_group(group);
    if (adv.size() != group.rewards.size()) {
        throw std::invalid_argument("grpo: advantage count mismatch");
    }
    Vec terms;
    terms.reserve(masked);
    for (std::size_t i = 0; i < group.rewards.size(); ++i) {
        for (std::size_t t = 0; t < group.masks[i].size(); ++t) {
            if (!group.masks[i][t]) continue;
            terms.push_back(
                detail::grpo_term(group.logp_new[i][t], group.logp_old[i][t], adv[i], cfg).value);
        }
    }
    return -stable_sum(terms) / static_cast<double>(masked);
}

// Analytic d(loss)/d(logp_new): -(rho * A)/masked_count on the unclipped
// branch (which also covers the no-op clip region and boundary ties), zero on
// the flat clipped branch and at unmasked positions.
inline std::vector<Vec> grpo_grad(const RolloutGroup& group, const Vec& adv, const GrpoConfig& cfg) {
    validate_grpo_config(cfg);
    const std::uint64_t masked = validate_group(group);
    if (adv.size() != group.rewards.size()) {
        throw std::invalid_argument("grpo: advantage count mismatch");
    }
    std::vector<Vec> grad(group.rewards.size());
    for (std::size_t i = 0; i < group.rewards.size(); ++i) {
        grad[i].assign(group.masks[i].size(), 0.0);
        for (std::size_t t = 0; t < group.masks[i].size(); ++t) {
            if (!group.masks[i][t]) continue;
            const auto term =
                detail::grpo_term(group.logp_new[i][t], group.logp_old[i][t], adv[i], cfg);
            if (term.unclipped) {
                grad[i][t] = -(term.ratio * adv[i]) / static_cast<double>(masked);
            }
        }
    }
    return grad;
}

// ------------------------------------------------------------------
// Toy driver: a categorical bandit over TinyLM. One prompt (token 0), one
// response token per rollout, reward 1 for the target arm. Enough to show
// the loss/gradient machinery moves a policy toward higher reward.
// ------------------------------------------------------------------

struct BanditConfig {
    std::size_t arms = 4;    // TinyLM vocab
    std::size_t hidden = 4;  // TinyLM hidden width
    std::uint64_t steps = 200;
    double lr = 0.05;
    std::uint64_t seed = 0;
    std::size_t inner_epochs = 2;  // policy updates per rollout group
    std::uint32_t target_arm = 1;
    GrpoConfig grpo;  // rollouts_per_prompt is the group size
    // Generation-side settings kept for completeness; with single-token
    // rollouts they change nothing.
    double temperature = 1.0;
    std::size_t max_response_tokens = 8192;
};

namespace detail {

inline Vec bandit_log_probs(const TinyLM& model) {
    const MicroBatch prompt{{0}, {0}, {1}};
    const Vec logits = forward(model, prompt);  // one row of `arms` logits
    double max_logit = logits[0];
    for (double l : logits) max_logit = std::max(max_logit, l);
    Vec shifted(logits.size());
    for (std::size_t v = 0; v < logits.size(); ++v) shifted[v] = std::exp(logits[v] - max_logit);
    const double lse = max_logit + std::log(stable_sum(shifted));
    Vec logp(logits.size());
    for (std::size_t v = 0; v < logits.size(); ++v) logp[v] = logits[v] - lse;
    return logp;
}

}  // namespace detail

// Runs the bandit and reports one TraceRecord per step with the group's mean
// reward in the loss field and the last inner update's gradient norm.
inline Trace run_bandit(const BanditConfig& cfg) {
    validate_grpo_config(cfg.grpo);
    if (cfg.arms < 2) throw std::invalid_argument("bandit: needs at least 2 arms");
    if (cfg.hidden == 0) throw std::invalid_argument("bandit: hidden must be >= 1");
    if (cfg.steps == 0) throw std::invalid_argument("bandit: steps must be >= 1");
    if (cfg.inner_epochs == 0) throw std::invalid_argument("bandit: inner_epochs must be >= 1");
    if (cfg.target_arm >= cfg.arms) throw std::invalid_argument("bandit: target_arm out of range");

    TinyLM model = TinyLM::random_init(cfg.arms, cfg.hidden, Rng::derive(cfg.seed, 0));
    Rng rng(Rng::derive(cfg.seed, 1));
    // Pure reward maximization: no pull toward zero weights.
    AdamWConfig opt_cfg;
    opt_cfg.weight_decay = 0.0;
    AdamWState opt_state = AdamWState::fresh(model.param_count());
    const std::size_t group = cfg.grpo.rollouts_per_prompt;

    Trace trace;
    trace.reserve(cfg.steps);
    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        const Vec logp_rollout = detail::bandit_log_probs(model);
        std::vector<std::uint32_t> actions(group);
        RolloutGroup rollouts;
        rollouts.rewards.resize(group);
        rollouts.logp_new.resize(group);
        rollouts.logp_old.resize(group);
        rollouts.masks.assign(group, {1});
        for (std::size_t i = 0; i < group; ++i) {
            // Inverse-CDF sample from the categorical policy.
            const double u = rng.next_double();
            double cumulative = 0.0;
            std::uint32_t arm = static_cast<std::uint32_t>(cfg.arms - 1);
            for (std::size_t v = 0; v < cfg.arms; ++v) {
                cumulative += std::exp(logp_rollout[v]);
                if (u < cumulative) {
                    arm = static_cast<std::uint32_t>(v);
                    break;
                }
            }
            actions[i] = arm;
            rollouts.rewards[i] = arm == cfg.target_arm ? 1.0 : 0.0;
            rollouts.logp_old[i] = {logp_rollout[arm]};
        }
        const Vec adv = group_advantage(rollouts.rewards);

        double last_grad_norm = 0.0;
        for (std::size_t epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
            const Vec logp_current = detail::bandit_log_probs(model);
            Vec probs(cfg.arms);
            for (std::size_t v = 0; v < cfg.arms; ++v) probs[v] = std::exp(logp_current[v]);
            for (std::size_t i = 0; i < group; ++i) {
                rollouts.logp_new[i] = {logp_current[actions[i]]};
            }
            const std::vector<Vec> dlogp = grpo_grad(rollouts, adv, cfg.grpo);
            // d logp(arm)/d logit_v = [v == arm] - softmax_v
            Vec dlogits(cfg.arms, 0.0);
            for (std::size_t i = 0; i < group; ++i) {
                const double g = dlogp[i][0];
                for (std::size_t v = 0; v < cfg.arms; ++v) {
                    dlogits[v] += g * ((v == actions[i] ? 1.0 : 0.0) - probs[v]);
                }
            }
            const Vec grad = backward_from_logits_grad(model, {0}, dlogits);
            last_grad_norm = l2_norm(grad);
            auto [next_params, next_state] = adamw_step(model.params, grad, opt_state, opt_cfg, cfg.lr);
            model = model.with_params(std::move(next_params));
            opt_state = std::move(next_state);
        }

        TraceRecord rec;
        rec.step = step;
        rec.loss = stable_sum(rollouts.rewards) / static_cast<double>(group);  // mean reward
        rec.grad_norm = last_grad_norm;
        rec.lr = cfg.lr;
        rec.global_token_count = group;
        rec.per_rank_counts = {group};
        trace.push_back(std::move(rec));
    }
    return trace;
}

}  // namespace dpsim
