#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "dpsim/dp_sim.hpp"
#include "dpsim/oracle_diff.hpp"
#include "dpsim/rng.hpp"
#include "test_util.hpp"

using dpsim::AggregationMode;
using dpsim::CopyPolicy;
using dpsim::DpConfig;
using dpsim::ExecutionMode;
using dpsim::LrSchedule;
using dpsim::MicroBatch;
using dpsim::micro_step;
using dpsim::optimizer_step;
using dpsim::partition_batch;
using dpsim::PartitionMap;
using dpsim::RankState;
using dpsim::Rng;
using dpsim::run_training;
using dpsim::RunOptions;
using dpsim::RunResult;
using dpsim::TinyLM;
using dpsim::Vec;

namespace {

MicroBatch tagged_sample(std::uint32_t tag) { return MicroBatch{{tag}, {0}, {1}}; }

DpConfig base_config(std::size_t K, std::size_t G, std::uint64_t steps) {
    DpConfig cfg;
    cfg.dp_size = K;
    cfg.accum_steps = G;
    cfg.total_steps = steps;
    cfg.schedule = LrSchedule::constant(1e-2);
    return cfg;
}

std::vector<MicroBatch> dataset_for(Rng& rng, const DpConfig& cfg, std::size_t vocab) {
    const std::size_t n = cfg.dp_size * cfg.accum_steps * cfg.micro_batch_size *
                          static_cast<std::size_t>(cfg.total_steps);
    return testutil::random_dataset(rng, n, vocab, 2, 10);
}

void expect_bit_identical(const RunResult& a, const RunResult& b) {
    ASSERT_EQ(a.per_step_params.size(), b.per_step_params.size());
    for (std::size_t s = 0; s < a.per_step_params.size(); ++s) {
        ASSERT_EQ(a.per_step_params[s].size(), b.per_step_params[s].size());
        for (std::size_t i = 0; i < a.per_step_params[s].size(); ++i) {
            ASSERT_EQ(a.per_step_params[s][i], b.per_step_params[s][i]) << "step " << s;
        }
        ASSERT_EQ(a.trace[s].loss, b.trace[s].loss) << "step " << s;
        ASSERT_EQ(a.trace[s].grad_norm, b.trace[s].grad_norm) << "step " << s;
        ASSERT_EQ(a.trace[s].global_token_count, b.trace[s].global_token_count);
        ASSERT_EQ(a.trace[s].per_rank_counts, b.trace[s].per_rank_counts);
    }
}

}  // namespace

TEST(Partition, RoundRobinAcrossRanksThenMicroSteps) {
    const DpConfig cfg = base_config(2, 2, 1);
    const std::vector<MicroBatch> data{tagged_sample(10), tagged_sample(11), tagged_sample(12),
                                       tagged_sample(13)};
    const auto grid = partition_batch(data, 0, cfg);
    ASSERT_EQ(grid.size(), 2u);
    ASSERT_EQ(grid[0].size(), 2u);
    EXPECT_EQ(grid[0][0].tokens[0], 10u);  // sample 0 -> rank 0, micro 0
    EXPECT_EQ(grid[1][0].tokens[0], 11u);  // sample 1 -> rank 1, micro 0
    EXPECT_EQ(grid[0][1].tokens[0], 12u);  // sample 2 -> rank 0, micro 1
    EXPECT_EQ(grid[1][1].tokens[0], 13u);  // sample 3 -> rank 1, micro 1
}

TEST(Partition, MicroBatchSizeConcatenatesInIndexOrder) {
    DpConfig cfg = base_config(2, 1, 1);
    cfg.micro_batch_size = 2;
    const std::vector<MicroBatch> data{tagged_sample(0), tagged_sample(1), tagged_sample(2),
                                       tagged_sample(3)};
    const auto grid = partition_batch(data, 0, cfg);
    EXPECT_EQ(grid[0][0].tokens, (std::vector<std::uint32_t>{0, 2}));
    EXPECT_EQ(grid[1][0].tokens, (std::vector<std::uint32_t>{1, 3}));
}

TEST(Partition, InsufficientDataRejected) {
    const DpConfig cfg = base_config(2, 2, 1);
    const std::vector<MicroBatch> data{tagged_sample(0), tagged_sample(1), tagged_sample(2),
                                       tagged_sample(3)};
    EXPECT_NO_THROW(partition_batch(data, 0, cfg));
    EXPECT_THROW(partition_batch(data, 1, cfg), std::invalid_argument);
}

TEST(Partition, PermutingSamplesChangesTheGrid) {
    const DpConfig cfg = base_config(2, 1, 1);
    const std::vector<MicroBatch> data{tagged_sample(0), tagged_sample(1)};
    const std::vector<MicroBatch> swapped{tagged_sample(1), tagged_sample(0)};
    EXPECT_NE(partition_batch(data, 0, cfg)[0][0].tokens[0],
              partition_batch(swapped, 0, cfg)[0][0].tokens[0]);
}

TEST(PartitionMap, ContiguousSlicesWithRemainderOnLastRank) {
    const PartitionMap part = PartitionMap::contiguous(10, 4);
    EXPECT_EQ(part.slice(0), (std::pair<std::size_t, std::size_t>{0, 2}));
    EXPECT_EQ(part.slice(3), (std::pair<std::size_t, std::size_t>{6, 10}));
    EXPECT_EQ(part.owner(5), 2u);
    EXPECT_EQ(part.owner(9), 3u);
    EXPECT_THROW(part.slice(4), std::out_of_range);
    EXPECT_THROW(part.owner(10), std::out_of_range);
}

TEST(PartitionMap, MoreRanksThanParams) {
    const PartitionMap part = PartitionMap::contiguous(3, 8);
    for (std::size_t r = 0; r + 1 < 8; ++r) {
        const auto [b, e] = part.slice(r);
        EXPECT_EQ(b, e);  // empty slice
    }
    EXPECT_EQ(part.slice(7), (std::pair<std::size_t, std::size_t>{0, 3}));
    EXPECT_EQ(part.owner(1), 7u);
}

TEST(MicroStep, StagingEqualsDeviceWhenSingleAccumulation) {
    Rng rng(51);
    const TinyLM model = TinyLM::random_init(5, 3, 9);
    const MicroBatch micro = testutil::random_batch(rng, 5, 3, 8);
    for (CopyPolicy policy : {CopyPolicy::FirstMicroBatchOnly, CopyPolicy::EveryMicroBatch}) {
        DpConfig cfg = base_config(1, 1, 1);
        cfg.copy_policy = policy;
        RankState state;
        state.device_accum.assign(model.param_count(), 0.0);
        state.staging.assign(model.param_count(), 0.0);
        micro_step(state, model, micro, 0, cfg, micro.active_tokens());
        for (std::size_t i = 0; i < state.staging.size(); ++i) {
            EXPECT_EQ(state.staging[i], state.device_accum[i]);
        }
        EXPECT_TRUE(state.staging_dirty);
    }
}

TEST(MicroStep, BuggyCopyFreezesStagingAfterFirstMicroBatch) {
    Rng rng(52);
    const TinyLM model = TinyLM::random_init(5, 3, 10);
    const MicroBatch micro = testutil::random_batch(rng, 5, 3, 8);
    const std::size_t G = 3;

    auto run_policy = [&](CopyPolicy policy) {
        DpConfig cfg = base_config(1, G, 1);
        cfg.copy_policy = policy;
        RankState state;
        state.device_accum.assign(model.param_count(), 0.0);
        state.staging.assign(model.param_count(), 0.0);
        Vec after_first;
        for (std::size_t g = 0; g < G; ++g) {
            micro_step(state, model, micro, g, cfg, micro.active_tokens() * G);
            if (g == 0) after_first = state.staging;
        }
        return std::make_pair(state, after_first);
    };

    const auto [buggy, buggy_first] = run_policy(CopyPolicy::FirstMicroBatchOnly);
    const auto [fixed, fixed_first] = run_policy(CopyPolicy::EveryMicroBatch);

    for (std::size_t i = 0; i < buggy.staging.size(); ++i) {
        EXPECT_EQ(buggy.staging[i], buggy_first[i]);          // frozen at the first copy
        EXPECT_EQ(fixed.staging[i], fixed.device_accum[i]);   // tracks the full accumulation
        EXPECT_EQ(buggy.device_accum[i], fixed.device_accum[i]);
        EXPECT_LE(testutil::rel_err(buggy.staging[i] * 3.0, fixed.staging[i]), 1e-15);
    }
}

TEST(MicroStep, ExactOneOverGSuppressionOnDyadicGradients) {
    // Zero embeddings and a half-integer projection make every gradient
    // component a small dyadic rational, so the 8-term accumulation and the
    // 1/8 scale are both exact and the suppression ratio is exactly 1/8.
    TinyLM model = TinyLM::zeros(2, 1);
    model.params = {0.0, 0.0, 0.5, -0.5};
    const MicroBatch micro{{0}, {1}, {1}};
    const std::size_t G = 8;

    auto staging_after = [&](CopyPolicy policy) {
        DpConfig cfg = base_config(1, G, 1);
        cfg.copy_policy = policy;
        RankState state;
        state.device_accum.assign(model.param_count(), 0.0);
        state.staging.assign(model.param_count(), 0.0);
        for (std::size_t g = 0; g < G; ++g) micro_step(state, model, micro, g, cfg, G);
        return state.staging;
    };

    const Vec buggy = staging_after(CopyPolicy::FirstMicroBatchOnly);
    const Vec fixed = staging_after(CopyPolicy::EveryMicroBatch);
    for (std::size_t i = 0; i < buggy.size(); ++i) {
        EXPECT_EQ(buggy[i] * 8.0, fixed[i]);
    }
    EXPECT_EQ(dpsim::l2_norm(buggy) / dpsim::l2_norm(fixed), 0.125);
}

TEST(OptimizerStep, SingleRankMatchesPlainAdamW) {
    Rng rng(53);
    const std::size_t n = 7;
    Vec params(n), grad(n);
    for (double& x : params) x = rng.uniform(-1.0, 1.0);
    for (double& x : grad) x = rng.uniform(-1.0, 1.0);

    DpConfig cfg = base_config(1, 1, 1);
    cfg.offload = false;
    std::vector<RankState> ranks(1);
    ranks[0].device_accum = grad;
    ranks[0].staging.assign(n, 0.0);
    std::vector<dpsim::AdamWState> states{dpsim::AdamWState::fresh(n)};
    const auto [next, norm] =
        optimizer_step(ranks, PartitionMap::contiguous(n, 1), cfg, 0.05, params, states);

    auto [expected, _] = dpsim::adamw_step(params, grad, dpsim::AdamWState::fresh(n), cfg.optimizer, 0.05);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(next[i], expected[i]);
    EXPECT_EQ(norm, dpsim::l2_norm(grad));
    for (double x : ranks[0].device_accum) EXPECT_EQ(x, 0.0);  // buffers cleared
}

TEST(OptimizerStep, EqualRankGradientsMatchSingleRank) {
    Rng rng(54);
    const std::size_t n = 6;
    Vec params(n), grad(n);
    for (double& x : params) x = rng.uniform(-1.0, 1.0);
    for (double& x : grad) x = rng.uniform(-1.0, 1.0);

    DpConfig two = base_config(2, 1, 1);
    std::vector<RankState> ranks(2);
    for (auto& r : ranks) {
        r.staging = grad;
        r.device_accum.assign(n, 0.0);
    }
    std::vector<dpsim::AdamWState> states;
    const PartitionMap part = PartitionMap::contiguous(n, 2);
    for (std::size_t k = 0; k < 2; ++k) {
        const auto [b, e] = part.slice(k);
        states.push_back(dpsim::AdamWState::fresh(e - b));
    }
    const auto [next_two, norm_two] = optimizer_step(ranks, part, two, 0.05, params, states);

    DpConfig one = base_config(1, 1, 1);
    std::vector<RankState> single(1);
    single[0].staging = grad;
    single[0].device_accum.assign(n, 0.0);
    std::vector<dpsim::AdamWState> single_states{dpsim::AdamWState::fresh(n)};
    const auto [next_one, norm_one] =
        optimizer_step(single, PartitionMap::contiguous(n, 1), one, 0.05, params, single_states);

    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(next_two[i], next_one[i]);
    EXPECT_EQ(norm_two, norm_one);
}

TEST(RunTraining, TrivialConfigIsBitIdenticalToReference) {
    Rng rng(55);
    const TinyLM model = TinyLM::random_init(6, 3, 11);
    DpConfig cfg = base_config(1, 1, 6);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    const dpsim::Trajectory ref = dpsim::reference_train(model, data, cfg.optimizer, cfg.schedule,
                                                         cfg.total_steps, 1);

    for (CopyPolicy policy : {CopyPolicy::FirstMicroBatchOnly, CopyPolicy::EveryMicroBatch}) {
        for (AggregationMode mode : {AggregationMode::MeanOfMeans, AggregationMode::GlobalTokenMean}) {
            for (bool offload : {false, true}) {
                DpConfig c = cfg;
                c.copy_policy = policy;
                c.agg_mode = mode;
                c.offload = offload;
                const RunResult run = run_training(c, model, data);
                for (std::size_t s = 0; s < ref.params.size(); ++s) {
                    for (std::size_t i = 0; i < ref.params[s].size(); ++i) {
                        ASSERT_EQ(run.per_step_params[s][i], ref.params[s][i]);
                    }
                    ASSERT_EQ(run.trace[s].loss, ref.losses[s]);
                    ASSERT_EQ(run.trace[s].grad_norm, ref.grad_norms[s]);
                }
            }
        }
    }
}

TEST(RunTraining, FixedDistributedRunTracksReference) {
    Rng rng(56);
    const TinyLM model = TinyLM::random_init(8, 4, 12);
    DpConfig cfg = base_config(2, 4, 20);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
    const RunResult run = run_training(cfg, model, data);
    const dpsim::Trajectory ref = dpsim::reference_train(model, data, cfg.optimizer, cfg.schedule,
                                                         cfg.total_steps, cfg.dp_size * cfg.accum_steps);
    const auto report = dpsim::compare(dpsim::to_trajectory(run), ref, 1e-9);
    EXPECT_FALSE(report.first_divergence_step.has_value())
        << "diverged at step " << *report.first_divergence_step
        << " with max rel diff " << report.max_param_rel_diff;
}

TEST(RunTraining, BuggyCopySuppressesGradNorms) {
    Rng rng(57);
    const TinyLM model = TinyLM::random_init(8, 4, 13);
    DpConfig fixed_cfg = base_config(2, 4, 10);
    const std::vector<MicroBatch> data = dataset_for(rng, fixed_cfg, 8);
    DpConfig buggy_cfg = fixed_cfg;
    buggy_cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;

    const RunResult fixed = run_training(fixed_cfg, model, data);
    const RunResult buggy = run_training(buggy_cfg, model, data);
    for (std::size_t s = 0; s < fixed.trace.size(); ++s) {
        EXPECT_LT(buggy.trace[s].grad_norm, fixed.trace[s].grad_norm) << "step " << s;
    }
}

TEST(RunTraining, SingleAccumulationStepIsImmuneToCopyBug) {
    Rng rng(58);
    const TinyLM model = TinyLM::random_init(6, 3, 14);
    DpConfig fixed_cfg = base_config(2, 1, 8);
    const std::vector<MicroBatch> data = dataset_for(rng, fixed_cfg, 6);
    DpConfig buggy_cfg = fixed_cfg;
    buggy_cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;
    expect_bit_identical(run_training(fixed_cfg, model, data), run_training(buggy_cfg, model, data));
}

TEST(RunTraining, ZeroStagesShareOneTrajectory) {
    Rng rng(59);
    const TinyLM model = TinyLM::random_init(6, 3, 15);
    DpConfig cfg = base_config(4, 2, 8);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    DpConfig stage1 = cfg;
    stage1.zero_stage = 1;
    DpConfig stage2 = cfg;
    stage2.zero_stage = 2;
    expect_bit_identical(run_training(stage1, model, data), run_training(stage2, model, data));
}

TEST(RunTraining, ParallelModeIsBitIdenticalToSequential) {
    Rng rng(60);
    const TinyLM model = TinyLM::random_init(8, 4, 16);
    DpConfig cfg = base_config(4, 2, 8);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
    RunOptions seq;
    RunOptions par;
    par.mode = ExecutionMode::Parallel;
    expect_bit_identical(run_training(cfg, model, data, seq), run_training(cfg, model, data, par));
}

TEST(RunTraining, BuggyRunEqualsZeroMaskedFixedRun) {
    Rng rng(61);
    const TinyLM model = TinyLM::random_init(8, 4, 17);
    for (AggregationMode mode : {AggregationMode::MeanOfMeans, AggregationMode::GlobalTokenMean}) {
        DpConfig cfg = base_config(2, 3, 8);
        cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;
        cfg.agg_mode = mode;
        const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
        const RunResult buggy = run_training(cfg, model, data);

        // Fixed-copy run on the masked twin, with the buggy run's books.
        const std::size_t per_step = cfg.dp_size * cfg.accum_steps;
        std::vector<MicroBatch> transformed = data;
        std::vector<std::uint64_t> counts(cfg.total_steps, 0);
        for (std::uint64_t s = 0; s < cfg.total_steps; ++s) {
            for (std::size_t i = 0; i < per_step; ++i) {
                const std::size_t idx = static_cast<std::size_t>(s) * per_step + i;
                counts[s] += data[idx].active_tokens();
                if ((i / cfg.dp_size) % cfg.accum_steps > 0) {
                    std::fill(transformed[idx].mask.begin(), transformed[idx].mask.end(),
                              std::uint8_t{0});
                }
            }
        }
        DpConfig fixed_cfg = cfg;
        fixed_cfg.copy_policy = CopyPolicy::EveryMicroBatch;
        RunOptions opts;
        opts.global_count_override = &counts;
        const RunResult expected = run_training(fixed_cfg, model, transformed, opts);

        for (std::size_t s = 0; s < buggy.per_step_params.size(); ++s) {
            for (std::size_t i = 0; i < buggy.per_step_params[s].size(); ++i) {
                EXPECT_LE(testutil::rel_err(buggy.per_step_params[s][i],
                                            expected.per_step_params[s][i]),
                          1e-12);
            }
            EXPECT_LE(testutil::rel_err(buggy.trace[s].grad_norm, expected.trace[s].grad_norm), 1e-12);
        }
    }
}

TEST(RunTraining, ConfigValidation) {
    Rng rng(62);
    const TinyLM model = TinyLM::random_init(4, 2, 18);
    DpConfig cfg = base_config(1, 1, 1);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 4);

    DpConfig bad = cfg;
    bad.dp_size = 0;
    EXPECT_THROW(run_training(bad, model, data), std::invalid_argument);
    bad = cfg;
    bad.zero_stage = 3;
    EXPECT_THROW(run_training(bad, model, data), std::invalid_argument);
    bad = cfg;
    bad.total_steps = 0;
    EXPECT_THROW(run_training(bad, model, data), std::invalid_argument);
    bad = cfg;
    bad.accum_steps = 0;
    EXPECT_THROW(run_training(bad, model, data), std::invalid_argument);

    std::vector<std::uint64_t> wrong_len(cfg.total_steps + 1, 1);
    RunOptions opts;
    opts.global_count_override = &wrong_len;
    EXPECT_THROW(run_training(cfg, model, data, opts), std::invalid_argument);
}
