#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dpsim/numerics.hpp"

namespace dpsim {

// Masked loss sum and active-token count of one (rank, micro-batch) cell.
struct RankLossStats {
    double loss_sum = 0.0;
    std::uint64_t token_count = 0;
};

// How per-cell losses are turned into the scalar each backward call sees.
//   MeanOfMeans:     local mean per cell, averaged across cells (buggy).
//   GlobalTokenMean: token sums divided by the global token count (fixed).
enum class AggregationMode { MeanOfMeans, GlobalTokenMean };

struct CellGrid {
    std::vector<std::vector<RankLossStats>> stats;  // [rank][micro_batch]
    std::size_t dp_size = 0;
    std::size_t accum_steps = 0;

    static CellGrid empty(std::size_t dp_size, std::size_t accum_steps) {
        CellGrid g;
        g.dp_size = dp_size;
        g.accum_steps = accum_steps;
        g.stats.assign(dp_size, std::vector<RankLossStats>(accum_steps));
        return g;
    }

    void validate() const {
        if (dp_size < 1 || accum_steps < 1 || stats.size() != dp_size) {
            throw std::invalid_argument("CellGrid: bad shape");
        }
        for (const auto& row : stats) {
            if (row.size() != accum_steps) throw std::invalid_argument("CellGrid: ragged rows");
        }
    }

    std::uint64_t total_tokens() const {
        std::uint64_t n = 0;
        for (const auto& row : stats)
            for (const auto& c : row) n += c.token_count;
        return n;
    }
};

inline RankLossStats masked_stats(const Vec& per_token_loss, const std::vector<std::uint8_t>& mask) {
    if (per_token_loss.size() != mask.size()) {
        throw std::invalid_argument("masked_stats: length mismatch");
    }
    RankLossStats s;
    s.loss_sum = stable_sum(per_token_loss);
    for (auto m : mask) s.token_count += m;
    return s;
}

// Simulated AllReduce(sum): every rank sees the same stable_sum of the
// per-rank values.
inline double allreduce_sum(const Vec& per_rank_values) {
    if (per_rank_values.empty()) throw std::invalid_argument("allreduce_sum: no ranks");
    return stable_sum(per_rank_values);
}

// Multiplier applied to a cell's token-loss sum to form its backward scalar.
// MeanOfMeans folds the accumulation-average 1/G into each cell;
// GlobalTokenMean scales by dp_size so the later cross-rank average cancels.
inline double local_loss_scale(AggregationMode mode, const RankLossStats& cell,
                               std::uint64_t global_count, std::size_t dp_size,
                               std::size_t accum_steps) {
    if (mode == AggregationMode::MeanOfMeans) {
        if (cell.token_count == 0) return 0.0;  // empty-cell convention
        return 1.0 / (static_cast<double>(cell.token_count) * static_cast<double>(accum_steps));
    }
    if (global_count == 0) throw std::invalid_argument("no active tokens in step");
    return static_cast<double>(dp_size) / static_cast<double>(global_count);
}

// The scalar whose gradient one cell contributes, before micro-batch
// accumulation (plain sum over G cells) and uniform cross-rank averaging.
inline double local_backward_loss(AggregationMode mode, const RankLossStats& cell,
                                  std::uint64_t global_count, std::size_t dp_size,
                                  std::size_t accum_steps) {
    return local_loss_scale(mode, cell, global_count, dp_size, accum_steps) * cell.loss_sum;
}

// Closed form of the scalar whose gradient the full pipeline applies.
//   MeanOfMeans:     mean over nonempty cells of (S/n). Empty cells contribute
//                    nothing and are excluded from the denominator.
//   GlobalTokenMean: (sum S) / (sum n) over the whole grid.
inline double effective_global_loss(AggregationMode mode, const CellGrid& grid) {
    grid.validate();
    Vec sums;
    Vec means;
    std::uint64_t total_count = 0;
    for (const auto& row : grid.stats) {
        for (const auto& c : row) {
            if (c.token_count == 0) continue;
            sums.push_back(c.loss_sum);
            means.push_back(c.loss_sum / static_cast<double>(c.token_count));
            total_count += c.token_count;
        }
    }
    if (means.empty()) throw std::invalid_argument("effective_global_loss: all cells empty");
    if (mode == AggregationMode::MeanOfMeans) {
        return stable_sum(means) / static_cast<double>(means.size());
    }
    return stable_sum(sums) / static_cast<double>(total_count);
}

}  // namespace dpsim
