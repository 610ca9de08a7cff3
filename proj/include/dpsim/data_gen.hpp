#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dpsim/rng.hpp"
#include "dpsim/toy_model.hpp"

namespace dpsim {

// Synthetic SFT-style data: variable-length samples with heterogeneous mask
// densities, so ranks and micro-batches almost never share an active-token
// count -- exactly the regime where the two aggregation modes disagree.
struct DataSpec {
    std::size_t n_samples = 0;
    std::size_t vocab = 16;
    std::size_t hidden = 8;
    std::array<std::size_t, 2> len_range = {4, 32};          // inclusive
    std::array<double, 2> mask_density_range = {0.2, 0.9};   // inclusive
};

inline void validate_data_spec(const DataSpec& spec) {
    if (spec.n_samples == 0) throw std::invalid_argument("data: n_samples must be >= 1");
    if (spec.vocab < 2) throw std::invalid_argument("data: vocab must be >= 2");
    if (spec.hidden == 0) throw std::invalid_argument("data: hidden must be >= 1");
    if (spec.len_range[0] == 0 || spec.len_range[0] > spec.len_range[1]) {
        throw std::invalid_argument("data: len_range must satisfy 1 <= min <= max");
    }
    if (!(spec.mask_density_range[0] >= 0.0 && spec.mask_density_range[0] <= spec.mask_density_range[1] &&
          spec.mask_density_range[1] <= 1.0)) {
        throw std::invalid_argument("data: mask_density_range must satisfy 0 <= lo <= hi <= 1");
    }
}

// Deterministic given (spec, seed). Per sample the draw order is fixed:
// length, density, tokens, targets, mask. Every sample keeps at least one
// active token (a center token is forced on if the density draw masks all),
// so no (rank, micro-batch) cell in a run is ever empty.
inline std::vector<MicroBatch> generate_dataset(const DataSpec& spec, std::uint64_t seed) {
    validate_data_spec(spec);
    Rng rng(Rng::derive(seed, 0));
    std::vector<MicroBatch> dataset;
    dataset.reserve(spec.n_samples);
    for (std::size_t s = 0; s < spec.n_samples; ++s) {
        const std::size_t len = static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(spec.len_range[0]), static_cast<std::int64_t>(spec.len_range[1])));
        const double density = rng.uniform(spec.mask_density_range[0], spec.mask_density_range[1]);
        MicroBatch mb;
        mb.tokens.resize(len);
        mb.targets.resize(len);
        mb.mask.resize(len);
        for (auto& t : mb.tokens) {
            t = static_cast<std::uint32_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.vocab) - 1));
        }
        for (auto& t : mb.targets) {
            t = static_cast<std::uint32_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.vocab) - 1));
        }
        bool any = false;
        for (auto& m : mb.mask) {
            m = rng.next_double() < density ? 1 : 0;
            any = any || m;
        }
        if (!any) mb.mask[len / 2] = 1;
        dataset.push_back(std::move(mb));
    }
    return dataset;
}

// Model init drawn from an independent stream of the same seed, so data and
// parameters never share randomness.
inline TinyLM init_model(const DataSpec& spec, std::uint64_t seed) {
    validate_data_spec(spec);
    return TinyLM::random_init(spec.vocab, spec.hidden, Rng::derive(seed, 1));
}

}  // namespace dpsim
