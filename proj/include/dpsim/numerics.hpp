#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpsim {

using Vec = std::vector<double>;

namespace detail {

inline double tree_sum(std::span<const double> v) {
    const std::size_t n = v.size();
    if (n == 0) return 0.0;
    if (n == 1) return v[0];
    const std::size_t mid = n / 2;
    return tree_sum(v.subspan(0, mid)) + tree_sum(v.subspan(mid));
}

}  // namespace detail

// Pairwise summation over the canonical index-ascending binary tree:
// sum(v) = sum(v[0:n/2]) + sum(v[n/2:n]), leaves in input order. The same
// sequence always reduces in the same shape, so results are bit-identical
// across runs and thread counts.
inline double stable_sum(std::span<const double> values) {
    for (double x : values) {
        if (!std::isfinite(x)) throw std::invalid_argument("stable_sum: non-finite operand");
    }
    return detail::tree_sum(values);
}

inline double stable_sum(const Vec& values) {
    return stable_sum(std::span<const double>(values));
}

inline double l2_norm(const Vec& v) {
    Vec sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = v[i] * v[i];
    return std::sqrt(stable_sum(sq));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    Vec m;
    Vec v;
    std::uint64_t t = 0;

    static AdamWState fresh(std::size_t n) {
        return AdamWState{Vec(n, 0.0), Vec(n, 0.0), 0};
    }
};

// One AdamW step with decoupled weight decay and bias correction:
//   m' = b1*m + (1-b1)*g,  v' = b2*v + (1-b2)*g^2,  t' = t+1
//   mhat = m'/(1-b1^t'),   vhat = v'/(1-b2^t')
//   theta' = theta - lr * ( mhat/(sqrt(vhat)+eps) + wd*theta )
inline std::pair<Vec, AdamWState> adamw_step(const Vec& params, const Vec& grad,
                                             const AdamWState& state,
                                             const AdamWConfig& cfg, double lr) {
    if (params.size() != grad.size() || params.size() != state.m.size() ||
        params.size() != state.v.size()) {
        throw std::invalid_argument("adamw_step: length mismatch");
    }
    if (lr < 0.0) throw std::invalid_argument("adamw_step: lr must be >= 0");
    for (double g : grad) {
        if (!std::isfinite(g)) throw std::invalid_argument("adamw_step: non-finite gradient");
    }

    AdamWState next{Vec(params.size()), Vec(params.size()), state.t + 1};
    Vec out(params.size());
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(next.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(next.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        next.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        next.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * (g * g);
        const double mhat = next.m[i] / bc1;
        const double vhat = next.v[i] / bc2;
        out[i] = params[i] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                   cfg.weight_decay * params[i]);
    }
    return {std::move(out), std::move(next)};
}

enum class ScheduleKind { Constant, CosineWarmup };

struct LrSchedule {
    ScheduleKind kind = ScheduleKind::Constant;
    double peak = 1e-6;
    std::uint64_t total_steps = 0;
    double warmup_frac = 0.1;
    double min_ratio = 0.1;

    static LrSchedule constant(double peak) {
        return LrSchedule{ScheduleKind::Constant, peak, 0, 0.0, 1.0};
    }
    static LrSchedule cosine_warmup(double peak, std::uint64_t total_steps,
                                    double warmup_frac = 0.1, double min_ratio = 0.1) {
        return LrSchedule{ScheduleKind::CosineWarmup, peak, total_steps, warmup_frac, min_ratio};
    }
};

// Learning rate at a 0-based step. Warmup is linear from 0 over
// W = round(warmup_frac * total_steps) steps, then cosine decay from peak to
// min_ratio * peak at step == total_steps. Constant schedules ignore bounds.
inline double lr_at(const LrSchedule& sched, std::uint64_t step) {
    if (sched.kind == ScheduleKind::Constant) return sched.peak;
    if (step > sched.total_steps) throw std::invalid_argument("lr_at: step past end of schedule");

    const auto warmup = static_cast<std::uint64_t>(
        std::llround(sched.warmup_frac * static_cast<double>(sched.total_steps)));
    if (step < warmup) {
        return sched.peak * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const std::uint64_t tail = sched.total_steps - warmup;
    if (tail == 0) return sched.peak;
    const double phase = static_cast<double>(step - warmup) / static_cast<double>(tail);
    const double floor_lr = sched.min_ratio * sched.peak;
    return floor_lr + (1.0 - sched.min_ratio) * sched.peak * 0.5 * (1.0 + std::cos(M_PI * phase));
}

}  // namespace dpsim
