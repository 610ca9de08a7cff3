#pragma once

#include <cstdint>
#include <future>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dpsim/diagnostics.hpp"
#include "dpsim/loss_agg.hpp"
#include "dpsim/numerics.hpp"
#include "dpsim/toy_model.hpp"

namespace dpsim {

// When the optimizer state lives on the host, gradients must cross to a
// host-side staging buffer. FirstMicroBatchOnly reproduces the accumulation
// bug: the copy sits on the "is this the first micro-batch" branch, so later
// micro-batches update the device buffer but never reach staging, and the
// optimizer consumes 1/G of the accumulated gradient.
enum class CopyPolicy { FirstMicroBatchOnly, EveryMicroBatch };

enum class ExecutionMode { Sequential, Parallel };

struct DpConfig {
    std::size_t dp_size = 1;      // K data-parallel ranks
    std::size_t accum_steps = 1;  // G micro-batches per optimizer step
    int zero_stage = 2;           // 1 or 2; partitioning bookkeeping only
    bool offload = true;          // host-side optimizer states (staging copies)
    CopyPolicy copy_policy = CopyPolicy::EveryMicroBatch;
    AggregationMode agg_mode = AggregationMode::GlobalTokenMean;
    AdamWConfig optimizer;
    LrSchedule schedule;
    std::uint64_t total_steps = 1;
    std::uint64_t seed = 0;
    std::size_t micro_batch_size = 1;  // samples concatenated per grid cell
};

inline void validate_config(const DpConfig& cfg) {
    if (cfg.dp_size == 0) throw std::invalid_argument("dp_size must be >= 1");
    if (cfg.accum_steps == 0) throw std::invalid_argument("accum_steps must be >= 1");
    if (cfg.zero_stage != 1 && cfg.zero_stage != 2) throw std::invalid_argument("zero_stage must be 1 or 2");
    if (cfg.micro_batch_size == 0) throw std::invalid_argument("micro_batch_size must be >= 1");
    if (cfg.total_steps == 0) throw std::invalid_argument("total_steps must be >= 1");
}

// Contiguous equal slices of the flat parameter vector, one per rank; the
// last rank absorbs the remainder. Stage 1 and stage 2 share this map (they
// differ in when gradients are reduced, not in who owns what), so the update
// arithmetic -- and therefore the trajectory -- is identical across stages.
struct PartitionMap {
    std::size_t param_count = 0;
    std::size_t ranks = 0;

    static PartitionMap contiguous(std::size_t param_count, std::size_t ranks) {
        if (ranks == 0) throw std::invalid_argument("partition over zero ranks");
        return PartitionMap{param_count, ranks};
    }

    // Half-open [begin, end) index range owned by `rank`.
    std::pair<std::size_t, std::size_t> slice(std::size_t rank) const {
        if (rank >= ranks) throw std::out_of_range("rank out of range");
        const std::size_t base = param_count / ranks;
        const std::size_t begin = rank * base;
        const std::size_t end = (rank + 1 == ranks) ? param_count : begin + base;
        return {begin, end};
    }

    std::size_t owner(std::size_t index) const {
        if (index >= param_count) throw std::out_of_range("param index out of range");
        const std::size_t base = param_count / ranks;
        if (base == 0) return ranks - 1;
        return std::min(index / base, ranks - 1);
    }
};

// Per-rank mutable buffers for one optimizer step.
struct RankState {
    Vec device_accum;           // accumulated micro-batch gradients (device side)
    Vec staging;                // host staging buffer the optimizer reads under offload
    bool staging_dirty = false; // staging written since the last optimizer step
};

struct RunOptions {
    ExecutionMode mode = ExecutionMode::Sequential;
    // When set, replaces the per-step global token count fed to the loss
    // scaling (length total_steps). This models bookkeeping that disagrees
    // with the data actually contributing gradients, which the buggy-run
    // characterization needs; normal runs leave it null.
    const std::vector<std::uint64_t>* global_count_override = nullptr;
};

struct RunResult {
    Vec final_params;
    std::vector<Vec> per_step_params;  // parameters after each optimizer step
    Trace trace;
};

// Round-robin assignment of one step's samples onto the K x G grid: sample i
// goes to rank i mod K, micro-step (i div K) mod G, and slots stack in index
// order. Each grid cell is the concatenation of micro_batch_size samples.
inline std::vector<std::vector<MicroBatch>> partition_batch(const std::vector<MicroBatch>& dataset,
                                                            std::uint64_t step, const DpConfig& cfg) {
    const std::size_t per_step = cfg.dp_size * cfg.accum_steps * cfg.micro_batch_size;
    const std::size_t offset = static_cast<std::size_t>(step) * per_step;
    if (offset + per_step > dataset.size()) {
        throw std::invalid_argument("insufficient data for step " + std::to_string(step));
    }
    std::vector<std::vector<std::vector<MicroBatch>>> slots(
        cfg.dp_size, std::vector<std::vector<MicroBatch>>(cfg.accum_steps));
    for (std::size_t i = 0; i < per_step; ++i) {
        const std::size_t rank = i % cfg.dp_size;
        const std::size_t micro = (i / cfg.dp_size) % cfg.accum_steps;
        slots[rank][micro].push_back(dataset[offset + i]);
    }
    std::vector<std::vector<MicroBatch>> grid(cfg.dp_size);
    for (std::size_t k = 0; k < cfg.dp_size; ++k) {
        grid[k].reserve(cfg.accum_steps);
        for (std::size_t g = 0; g < cfg.accum_steps; ++g) {
            grid[k].push_back(concat_batches(slots[k][g]));
        }
    }
    return grid;
}

// One micro-batch on one rank: scaled backward, accumulate into the device
// buffer, then apply the staging copy policy. Returns the cell's loss stats.
inline RankLossStats micro_step(RankState& state, const TinyLM& model, const MicroBatch& micro,
                                std::size_t micro_index, const DpConfig& cfg,
                                std::uint64_t global_token_count) {
    const MaskedCeResult ce = masked_ce(model, micro);
    const RankLossStats stats = masked_stats(ce.per_token_loss, micro.mask);
    const double scale =
        local_loss_scale(cfg.agg_mode, stats, global_token_count, cfg.dp_size, cfg.accum_steps);
    const Vec grad = backward(model, micro, scale);
    for (std::size_t i = 0; i < grad.size(); ++i) state.device_accum[i] += grad[i];
    if (cfg.offload) {
        const bool copy = cfg.copy_policy == CopyPolicy::EveryMicroBatch || micro_index == 0;
        if (copy) {
            // The copy snapshots the whole accumulation buffer; a later copy
            // overwrites (not adds to) the staging contents.
            state.staging = state.device_accum;
            state.staging_dirty = true;
        }
    }
    return stats;
}

// Cross-rank reduction plus per-slice AdamW. The optimizer reads staging when
// offloaded, the device buffer otherwise; every parameter index is averaged
// over ranks in rank order before its owner applies the update.
inline std::pair<Vec, double> optimizer_step(std::vector<RankState>& ranks, const PartitionMap& part,
                                             const DpConfig& cfg, double lr, const Vec& params,
                                             std::vector<AdamWState>& opt_states) {
    const std::size_t n_ranks = ranks.size();
    if (n_ranks != cfg.dp_size || opt_states.size() != n_ranks) {
        throw std::invalid_argument("optimizer_step: rank state count mismatch");
    }
    const std::size_t n_params = params.size();
    Vec averaged(n_params);
    Vec operands(n_ranks);
    for (std::size_t i = 0; i < n_params; ++i) {
        for (std::size_t k = 0; k < n_ranks; ++k) {
            const Vec& src = cfg.offload ? ranks[k].staging : ranks[k].device_accum;
            operands[k] = src[i];
        }
        averaged[i] = stable_sum(operands) / static_cast<double>(n_ranks);
    }
    const double grad_norm = l2_norm(averaged);

    Vec next = params;
    for (std::size_t k = 0; k < n_ranks; ++k) {
        const auto [begin, end] = part.slice(k);
        const Vec param_slice(params.begin() + static_cast<std::ptrdiff_t>(begin),
                              params.begin() + static_cast<std::ptrdiff_t>(end));
        const Vec grad_slice(averaged.begin() + static_cast<std::ptrdiff_t>(begin),
                             averaged.begin() + static_cast<std::ptrdiff_t>(end));
        auto [updated, next_state] = adamw_step(param_slice, grad_slice, opt_states[k], cfg.optimizer, lr);
        std::copy(updated.begin(), updated.end(), next.begin() + static_cast<std::ptrdiff_t>(begin));
        opt_states[k] = std::move(next_state);
    }

    for (RankState& rs : ranks) {
        std::fill(rs.device_accum.begin(), rs.device_accum.end(), 0.0);
        std::fill(rs.staging.begin(), rs.staging.end(), 0.0);
        rs.staging_dirty = false;
    }
    return {std::move(next), grad_norm};
}

// Full training loop over total_steps optimizer steps. Parallel mode runs the
// per-rank micro-batch loops on separate threads; because ranks share nothing
// until the reduction, and the reduction consumes rank buffers in fixed rank
// order, the result is bit-identical to sequential execution.
inline RunResult run_training(const DpConfig& cfg, const TinyLM& initial_model,
                              const std::vector<MicroBatch>& dataset, const RunOptions& opts = {}) {
    validate_config(cfg);
    if (opts.global_count_override != nullptr &&
        opts.global_count_override->size() != cfg.total_steps) {
        throw std::invalid_argument("global count override length mismatch");
    }

    TinyLM model = initial_model;
    const std::size_t n_params = model.param_count();
    const PartitionMap part = PartitionMap::contiguous(n_params, cfg.dp_size);

    std::vector<RankState> ranks(cfg.dp_size);
    for (RankState& rs : ranks) {
        rs.device_accum.assign(n_params, 0.0);
        rs.staging.assign(n_params, 0.0);
    }
    std::vector<AdamWState> opt_states;
    opt_states.reserve(cfg.dp_size);
    for (std::size_t k = 0; k < cfg.dp_size; ++k) {
        const auto [begin, end] = part.slice(k);
        opt_states.push_back(AdamWState::fresh(end - begin));
    }

    RunResult result;
    result.per_step_params.reserve(cfg.total_steps);
    result.trace.reserve(cfg.total_steps);

    for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
        const auto grid = partition_batch(dataset, step, cfg);

        // Token-count pre-pass: Algorithm-2 scaling needs the step-global
        // count before any backward runs (the real system allreduces it).
        std::vector<std::uint64_t> per_rank_counts(cfg.dp_size, 0);
        for (std::size_t k = 0; k < cfg.dp_size; ++k) {
            for (std::size_t g = 0; g < cfg.accum_steps; ++g) {
                per_rank_counts[k] += grid[k][g].active_tokens();
            }
        }
        Vec count_operands(cfg.dp_size);
        for (std::size_t k = 0; k < cfg.dp_size; ++k) {
            count_operands[k] = static_cast<double>(per_rank_counts[k]);
        }
        const std::uint64_t natural_count = static_cast<std::uint64_t>(allreduce_sum(count_operands));
        const std::uint64_t global_count = opts.global_count_override != nullptr
                                               ? (*opts.global_count_override)[step]
                                               : natural_count;

        CellGrid cells;
        cells.dp_size = cfg.dp_size;
        cells.accum_steps = cfg.accum_steps;
        cells.stats.assign(cfg.dp_size, std::vector<RankLossStats>(cfg.accum_steps));

        auto run_rank = [&](std::size_t k) {
            for (std::size_t g = 0; g < cfg.accum_steps; ++g) {
                cells.stats[k][g] = micro_step(ranks[k], model, grid[k][g], g, cfg, global_count);
            }
        };
        if (opts.mode == ExecutionMode::Parallel && cfg.dp_size > 1) {
            std::vector<std::future<void>> futures;
            futures.reserve(cfg.dp_size);
            for (std::size_t k = 0; k < cfg.dp_size; ++k) {
                futures.push_back(std::async(std::launch::async, run_rank, k));
            }
            for (auto& f : futures) f.get();
        } else {
            for (std::size_t k = 0; k < cfg.dp_size; ++k) run_rank(k);
        }

        const double lr = lr_at(cfg.schedule, step);
        auto [next_params, grad_norm] = optimizer_step(ranks, part, cfg, lr, model.params, opt_states);
        model = model.with_params(std::move(next_params));

        double loss;
        if (cfg.agg_mode == AggregationMode::GlobalTokenMean && opts.global_count_override != nullptr) {
            // Keep the overridden denominator visible in the recorded loss,
            // matching what the mis-bookkept run would report.
            Vec sums;
            for (const auto& row : cells.stats) {
                for (const RankLossStats& s : row) {
                    if (s.token_count > 0) sums.push_back(s.loss_sum);
                }
            }
            if (global_count == 0) throw std::invalid_argument("no active tokens in step");
            loss = stable_sum(sums) / static_cast<double>(global_count);
        } else {
            loss = effective_global_loss(cfg.agg_mode, cells);
        }

        TraceRecord rec;
        rec.step = step;
        rec.loss = loss;
        rec.grad_norm = grad_norm;
        rec.lr = lr;
        rec.global_token_count = global_count;
        rec.per_rank_counts = per_rank_counts;
        result.trace.push_back(std::move(rec));
        result.per_step_params.push_back(model.params);
    }

    result.final_params = model.params;
    return result;
}

}  // namespace dpsim
