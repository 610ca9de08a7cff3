#include <algorithm>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "dpsim/oracle_diff.hpp"
#include "dpsim/rng.hpp"
#include "test_util.hpp"

using dpsim::AggregationMode;
using dpsim::buggy_first_batch_oracle;
using dpsim::compare;
using dpsim::CopyPolicy;
using dpsim::DpConfig;
using dpsim::LrSchedule;
using dpsim::MicroBatch;
using dpsim::reference_train;
using dpsim::Rng;
using dpsim::run_training;
using dpsim::TinyLM;
using dpsim::to_trajectory;
using dpsim::Trajectory;
using dpsim::Vec;

namespace {

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

}  // namespace

TEST(Reference, TrivialSimulationMatchesBitExactly) {
    Rng rng(71);
    const TinyLM model = TinyLM::random_init(6, 3, 21);
    const DpConfig cfg = base_config(1, 1, 8);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    const Trajectory ref = reference_train(model, data, cfg.optimizer, cfg.schedule, 8, 1);
    const Trajectory sim = to_trajectory(run_training(cfg, model, data));
    const auto report = compare(sim, ref, 0.0);
    EXPECT_FALSE(report.first_divergence_step.has_value());
    EXPECT_EQ(report.max_param_rel_diff, 0.0);
}

TEST(Reference, DistributedRunWithinTolerance) {
    Rng rng(72);
    const TinyLM model = TinyLM::random_init(8, 4, 22);
    const DpConfig cfg = base_config(4, 2, 20);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
    const Trajectory ref =
        reference_train(model, data, cfg.optimizer, cfg.schedule, 20, cfg.dp_size * cfg.accum_steps);
    const Trajectory sim = to_trajectory(run_training(cfg, model, data));
    const auto report = compare(sim, ref, 1e-9);
    EXPECT_FALSE(report.first_divergence_step.has_value()) << report.max_param_rel_diff;
}

TEST(Reference, ZeroLearningRateFreezesParameters) {
    Rng rng(73);
    const TinyLM model = TinyLM::random_init(5, 2, 23);
    DpConfig cfg = base_config(1, 1, 5);
    cfg.schedule = LrSchedule::constant(0.0);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 5);
    const Trajectory ref = reference_train(model, data, cfg.optimizer, cfg.schedule, 5, 1);
    for (const Vec& p : ref.params) {
        for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], model.params[i]);
    }
}

TEST(Reference, SampleOrderWithinStepDoesNotMatter) {
    Rng rng(74);
    const TinyLM model = TinyLM::random_init(6, 3, 24);
    const std::size_t per_step = 4;
    const std::uint64_t steps = 6;
    const std::vector<MicroBatch> data = testutil::random_dataset(rng, per_step * steps, 6, 2, 10);

    std::vector<MicroBatch> permuted = data;
    for (std::uint64_t s = 0; s < steps; ++s) {
        // Rotate each step's slice by one: a deterministic nontrivial permutation.
        const std::size_t off = static_cast<std::size_t>(s) * per_step;
        std::rotate(permuted.begin() + static_cast<std::ptrdiff_t>(off),
                    permuted.begin() + static_cast<std::ptrdiff_t>(off + 1),
                    permuted.begin() + static_cast<std::ptrdiff_t>(off + per_step));
    }

    DpConfig cfg = base_config(1, 1, steps);
    const Trajectory a = reference_train(model, data, cfg.optimizer, cfg.schedule, steps, per_step);
    const Trajectory b = reference_train(model, permuted, cfg.optimizer, cfg.schedule, steps, per_step);
    for (std::size_t s = 0; s < a.params.size(); ++s) {
        for (std::size_t i = 0; i < a.params[s].size(); ++i) {
            EXPECT_LE(testutil::rel_err(a.params[s][i], b.params[s][i]), 1e-12);
        }
        EXPECT_LE(testutil::rel_err(a.losses[s], b.losses[s]), 1e-12);
    }
}

TEST(Reference, InsufficientDataRejected) {
    const TinyLM model = TinyLM::random_init(4, 2, 25);
    Rng rng(75);
    const std::vector<MicroBatch> data = testutil::random_dataset(rng, 3, 4, 2, 6);
    DpConfig cfg = base_config(1, 1, 2);
    EXPECT_THROW(reference_train(model, data, cfg.optimizer, cfg.schedule, 2, 2),
                 std::invalid_argument);
    EXPECT_THROW(reference_train(model, data, cfg.optimizer, cfg.schedule, 1, 0),
                 std::invalid_argument);
}

TEST(Compare, ReflexivityAndReportShape) {
    Rng rng(76);
    const TinyLM model = TinyLM::random_init(5, 3, 26);
    const DpConfig cfg = base_config(2, 2, 6);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 5);
    const Trajectory t = to_trajectory(run_training(cfg, model, data));
    const auto report = compare(t, t, 0.0);
    EXPECT_FALSE(report.first_divergence_step.has_value());
    EXPECT_EQ(report.max_param_rel_diff, 0.0);
    ASSERT_EQ(report.loss_deltas.size(), t.losses.size());
    for (double d : report.loss_deltas) EXPECT_EQ(d, 0.0);
    for (double r : report.grad_norm_ratios) EXPECT_EQ(r, 1.0);
}

TEST(Compare, BuggyRunDivergesFromTheFirstStep) {
    Rng rng(77);
    const TinyLM model = TinyLM::random_init(8, 4, 27);
    DpConfig cfg = base_config(2, 4, 10);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
    const Trajectory ref =
        reference_train(model, data, cfg.optimizer, cfg.schedule, 10, cfg.dp_size * cfg.accum_steps);

    DpConfig buggy = cfg;
    buggy.copy_policy = CopyPolicy::FirstMicroBatchOnly;
    const auto report = compare(to_trajectory(run_training(buggy, model, data)), ref, 1e-9);
    ASSERT_TRUE(report.first_divergence_step.has_value());
    EXPECT_EQ(*report.first_divergence_step, 0u);  // the very first optimizer update differs
}

TEST(Compare, MismatchedLengthsRejected) {
    Trajectory a, b;
    a.params = {{1.0}};
    a.losses = {0.5};
    a.grad_norms = {1.0};
    b = a;
    b.params.push_back({1.0});
    b.losses.push_back(0.5);
    b.grad_norms.push_back(1.0);
    EXPECT_THROW(compare(a, b, 1e-9), std::invalid_argument);
    EXPECT_THROW(compare(a, a, -1.0), std::invalid_argument);
}

TEST(BuggyOracle, HoldsAcrossAccumulationDepths) {
    Rng rng(78);
    for (std::size_t G : {2u, 4u, 8u}) {
        for (std::size_t K : {1u, 2u}) {
            DpConfig cfg = base_config(K, G, 6);
            cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;
            cfg.agg_mode = (G % 4 == 0) ? AggregationMode::MeanOfMeans : AggregationMode::GlobalTokenMean;
            const TinyLM model = TinyLM::random_init(8, 4, rng.next_u64());
            const std::vector<MicroBatch> data = dataset_for(rng, cfg, 8);
            EXPECT_TRUE(buggy_first_batch_oracle(cfg, model, data)) << "K=" << K << " G=" << G;
        }
    }
}

TEST(BuggyOracle, VacuousWithoutAccumulation) {
    Rng rng(79);
    DpConfig cfg = base_config(2, 1, 4);
    cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;
    const TinyLM model = TinyLM::random_init(6, 3, 29);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    EXPECT_TRUE(buggy_first_batch_oracle(cfg, model, data));
}

TEST(BuggyOracle, FixedCopySanityArm) {
    Rng rng(80);
    DpConfig cfg = base_config(2, 3, 4);
    cfg.copy_policy = CopyPolicy::EveryMicroBatch;  // identity transform: run vs itself
    const TinyLM model = TinyLM::random_init(6, 3, 30);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    EXPECT_TRUE(buggy_first_batch_oracle(cfg, model, data));
}

TEST(BuggyOracle, RequiresOffload) {
    Rng rng(81);
    DpConfig cfg = base_config(2, 2, 4);
    cfg.copy_policy = CopyPolicy::FirstMicroBatchOnly;
    cfg.offload = false;
    const TinyLM model = TinyLM::random_init(6, 3, 31);
    const std::vector<MicroBatch> data = dataset_for(rng, cfg, 6);
    EXPECT_THROW(buggy_first_batch_oracle(cfg, model, data), std::invalid_argument);
}
