#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dpsim/dp_sim.hpp"
#include "dpsim/loss_agg.hpp"
#include "dpsim/numerics.hpp"
#include "dpsim/toy_model.hpp"

namespace dpsim {

// Per-step view of a run, in a form both the simulator and the single-device
// oracle can produce: parameters after each step plus the observed series.
struct Trajectory {
    std::vector<Vec> params;
    Vec losses;
    Vec grad_norms;
};

inline Trajectory to_trajectory(const RunResult& result) {
    Trajectory t;
    t.params = result.per_step_params;
    t.losses.reserve(result.trace.size());
    t.grad_norms.reserve(result.trace.size());
    for (const TraceRecord& rec : result.trace) {
        t.losses.push_back(rec.loss);
        t.grad_norms.push_back(rec.grad_norm);
    }
    return t;
}

// Single-device oracle: per step, concatenate that step's full sample slice
// into one batch, take the global token mean, and apply one AdamW update.
// No partitioning, no staging, no cross-rank reduction -- just the math the
// distributed pipeline is supposed to implement.
inline Trajectory reference_train(const TinyLM& initial_model, const std::vector<MicroBatch>& dataset,
                                  const AdamWConfig& optimizer, const LrSchedule& schedule,
                                  std::uint64_t total_steps, std::size_t samples_per_step) {
    if (samples_per_step == 0) throw std::invalid_argument("samples_per_step must be >= 1");
    if (static_cast<std::size_t>(total_steps) * samples_per_step > dataset.size()) {
        throw std::invalid_argument("insufficient data for reference run");
    }
    TinyLM model = initial_model;
    AdamWState state = AdamWState::fresh(model.param_count());
    Trajectory traj;
    traj.params.reserve(total_steps);
    traj.losses.reserve(total_steps);
    traj.grad_norms.reserve(total_steps);

    for (std::uint64_t step = 0; step < total_steps; ++step) {
        const std::size_t offset = static_cast<std::size_t>(step) * samples_per_step;
        const std::vector<MicroBatch> slice(dataset.begin() + static_cast<std::ptrdiff_t>(offset),
                                            dataset.begin() + static_cast<std::ptrdiff_t>(offset + samples_per_step));
        const MicroBatch batch = concat_batches(slice);
        const MaskedCeResult ce = masked_ce(model, batch);
        const RankLossStats stats = masked_stats(ce.per_token_loss, batch.mask);
        // Same scale computation as the pipeline with K=1, G=1 so that a
        // trivial simulated run reproduces the oracle bit for bit.
        const double scale = local_loss_scale(AggregationMode::GlobalTokenMean, stats, stats.token_count, 1, 1);
        const Vec grad = backward(model, batch, scale);

        const double lr = lr_at(schedule, step);
        auto [next_params, next_state] = adamw_step(model.params, grad, state, optimizer, lr);
        model = model.with_params(std::move(next_params));
        state = std::move(next_state);

        traj.params.push_back(model.params);
        traj.losses.push_back(stats.loss_sum / static_cast<double>(stats.token_count));
        traj.grad_norms.push_back(l2_norm(grad));
    }
    return traj;
}

struct DivergenceReport {
    std::optional<std::uint64_t> first_divergence_step;  // empty when within tolerance
    double max_param_rel_diff = 0.0;
    Vec loss_deltas;       // a - b per step
    Vec grad_norm_ratios;  // a / b per step
};

namespace detail {

// Relative difference with an absolute floor so near-zero values compare
// sanely: |a-b| / max(|a|, |b|, 1e-15).
inline double rel_diff(double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-15});
    return std::fabs(a - b) / scale;
}

}  // namespace detail

inline DivergenceReport compare(const Trajectory& a, const Trajectory& b, double tolerance) {
    if (a.params.size() != b.params.size() || a.losses.size() != b.losses.size() ||
        a.grad_norms.size() != b.grad_norms.size() || a.params.size() != a.losses.size()) {
        throw std::invalid_argument("trajectory length mismatch");
    }
    if (tolerance < 0.0) throw std::invalid_argument("tolerance must be >= 0");

    DivergenceReport report;
    for (std::size_t step = 0; step < a.params.size(); ++step) {
        if (a.params[step].size() != b.params[step].size()) {
            throw std::invalid_argument("trajectory parameter size mismatch");
        }
        double step_max = 0.0;
        for (std::size_t i = 0; i < a.params[step].size(); ++i) {
            step_max = std::max(step_max, detail::rel_diff(a.params[step][i], b.params[step][i]));
        }
        report.max_param_rel_diff = std::max(report.max_param_rel_diff, step_max);
        if (step_max > tolerance && !report.first_divergence_step.has_value()) {
            report.first_divergence_step = step;
        }
        report.loss_deltas.push_back(a.losses[step] - b.losses[step]);
        const double denom = b.grad_norms[step];
        report.grad_norm_ratios.push_back(
            denom != 0.0 ? a.grad_norms[step] / denom : (a.grad_norms[step] == 0.0 ? 1.0 : INFINITY));
    }
    return report;
}

// Characterizes the dropped-gradient bug exactly: a run whose staging copy
// fires only on the first micro-batch must match a *fixed* run that trains on
// the same data with every later micro-batch replaced by a fully masked-out
// twin, while keeping the original run's token bookkeeping. Parameters and
// grad norms must agree to 1e-12; losses are reported from all micro-batches
// in both runs and are allowed to differ.
inline bool buggy_first_batch_oracle(const DpConfig& cfg, const TinyLM& model,
                                     const std::vector<MicroBatch>& dataset) {
    if (!cfg.offload) {
        throw std::invalid_argument("buggy_first_batch_oracle: requires offloaded optimizer");
    }
    const RunResult actual = run_training(cfg, model, dataset);

    // Natural per-step token counts of the original data: the buggy run's
    // bookkeeping is computed before gradients are dropped, so the
    // characterization run must scale by these same counts.
    const std::size_t per_step = cfg.dp_size * cfg.accum_steps * cfg.micro_batch_size;
    std::vector<std::uint64_t> counts(cfg.total_steps, 0);
    for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
        for (std::size_t i = 0; i < per_step; ++i) {
            counts[step] += dataset[static_cast<std::size_t>(step) * per_step + i].active_tokens();
        }
    }

    std::vector<MicroBatch> transformed = dataset;
    if (cfg.copy_policy == CopyPolicy::FirstMicroBatchOnly) {
        for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
            for (std::size_t i = 0; i < per_step; ++i) {
                const std::size_t micro = (i / cfg.dp_size) % cfg.accum_steps;
                if (micro > 0) {
                    MicroBatch& mb = transformed[static_cast<std::size_t>(step) * per_step + i];
                    std::fill(mb.mask.begin(), mb.mask.end(), std::uint8_t{0});
                }
            }
        }
    }

    DpConfig fixed_cfg = cfg;
    fixed_cfg.copy_policy = CopyPolicy::EveryMicroBatch;
    RunOptions opts;
    opts.global_count_override = &counts;
    const RunResult expected = run_training(fixed_cfg, model, transformed, opts);

    constexpr double kTol = 1e-12;
    const DivergenceReport report = compare(to_trajectory(actual), to_trajectory(expected), kTol);
    if (report.first_divergence_step.has_value()) return false;
    for (std::size_t step = 0; step < actual.trace.size(); ++step) {
        if (detail::rel_diff(actual.trace[step].grad_norm, expected.trace[step].grad_norm) > kTol) {
            return false;
        }
    }
    return true;
}

}  // namespace dpsim
