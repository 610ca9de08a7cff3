#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dpsim/numerics.hpp"
#include "dpsim/rng.hpp"

namespace dpsim {

// One sample: a token sequence with next-token targets and a {0,1} response
// mask. Only masked positions contribute to the loss.
struct MicroBatch {
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint32_t> targets;
    std::vector<std::uint8_t> mask;

    std::size_t length() const { return tokens.size(); }
    std::uint64_t active_tokens() const {
        std::uint64_t n = 0;
        for (auto m : mask) n += m;
        return n;
    }
};

inline MicroBatch concat_batches(const std::vector<MicroBatch>& parts) {
    MicroBatch out;
    for (const auto& p : parts) {
        out.tokens.insert(out.tokens.end(), p.tokens.begin(), p.tokens.end());
        out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
        out.mask.insert(out.mask.end(), p.mask.begin(), p.mask.end());
    }
    return out;
}

// Token-level model: per-position embedding lookup followed by an output
// projection. No attention or recurrence; gradients stay hand-checkable and
// the accumulation pipeline is exercised exactly as with a larger model.
//
// Parameters live in one flat vector: embed row-major (V x H), then out_proj
// row-major (H x V).
struct TinyLM {
    std::size_t vocab = 0;
    std::size_t hidden = 0;
    Vec params;  // length 2*V*H

    static TinyLM zeros(std::size_t vocab, std::size_t hidden) {
        return TinyLM{vocab, hidden, Vec(2 * vocab * hidden, 0.0)};
    }

    static TinyLM random_init(std::size_t vocab, std::size_t hidden, std::uint64_t seed) {
        TinyLM m = zeros(vocab, hidden);
        Rng rng(seed);
        const double scale = 0.5 / std::sqrt(static_cast<double>(hidden));
        for (auto& p : m.params) p = rng.uniform(-scale, scale);
        return m;
    }

    std::size_t param_count() const { return 2 * vocab * hidden; }

    double embed_at(std::size_t token, std::size_t h) const {
        return params[token * hidden + h];
    }
    double proj_at(std::size_t h, std::size_t v) const {
        return params[vocab * hidden + h * vocab + v];
    }
    std::size_t embed_index(std::size_t token, std::size_t h) const {
        return token * hidden + h;
    }
    std::size_t proj_index(std::size_t h, std::size_t v) const {
        return vocab * hidden + h * vocab + v;
    }

    TinyLM with_params(Vec p) const {
        if (p.size() != param_count()) throw std::invalid_argument("with_params: length mismatch");
        return TinyLM{vocab, hidden, std::move(p)};
    }
};

inline void validate_batch(const TinyLM& model, const MicroBatch& batch) {
    if (batch.targets.size() != batch.tokens.size() || batch.mask.size() != batch.tokens.size()) {
        throw std::invalid_argument("micro-batch field lengths differ");
    }
    for (auto t : batch.tokens) {
        if (t >= model.vocab) throw std::invalid_argument("token id out of range");
    }
    for (auto t : batch.targets) {
        if (t >= model.vocab) throw std::invalid_argument("target id out of range");
    }
}

// Per-token logits, flattened T x V row-major.
inline Vec forward(const TinyLM& model, const MicroBatch& batch) {
    validate_batch(model, batch);
    const std::size_t T = batch.length();
    const std::size_t V = model.vocab;
    const std::size_t H = model.hidden;
    Vec logits(T * V, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const double e = model.embed_at(batch.tokens[t], h);
            for (std::size_t v = 0; v < V; ++v) {
                logits[t * V + v] += e * model.proj_at(h, v);
            }
        }
    }
    return logits;
}

// -log softmax(logits_row)[target], max-shifted for stability.
inline double cross_entropy_from_logits(std::span<const double> logits_row, std::uint32_t target) {
    double mx = logits_row[0];
    for (double x : logits_row) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : logits_row) sum += std::exp(x - mx);
    return (mx + std::log(sum)) - logits_row[target];
}

struct MaskedCeResult {
    Vec per_token_loss;         // mask already applied; unmasked positions are 0
    std::uint64_t active_count = 0;
};

inline MaskedCeResult masked_ce(const TinyLM& model, const MicroBatch& batch) {
    const Vec logits = forward(model, batch);
    const std::size_t T = batch.length();
    const std::size_t V = model.vocab;
    MaskedCeResult res;
    res.per_token_loss.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        if (!batch.mask[t]) continue;
        res.per_token_loss[t] =
            cross_entropy_from_logits(std::span<const double>(logits).subspan(t * V, V), batch.targets[t]);
        ++res.active_count;
    }
    return res;
}

// Gradient of sum_t dlogits[t] . logits[t] w.r.t. the flat parameters.
// Shared backbone for the CE backward below and for policy-gradient callers
// that supply their own logits gradient.
inline Vec backward_from_logits_grad(const TinyLM& model, const std::vector<std::uint32_t>& tokens,
                                     const Vec& dlogits) {
    const std::size_t V = model.vocab;
    const std::size_t H = model.hidden;
    if (dlogits.size() != tokens.size() * V) {
        throw std::invalid_argument("backward_from_logits_grad: dlogits shape mismatch");
    }
    Vec grad(model.param_count(), 0.0);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= V) throw std::invalid_argument("token id out of range");
        const double* d = dlogits.data() + t * V;
        for (std::size_t h = 0; h < H; ++h) {
            const double e = model.embed_at(tokens[t], h);
            double acc = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                grad[model.proj_index(h, v)] += e * d[v];
                acc += d[v] * model.proj_at(h, v);
            }
            grad[model.embed_index(tokens[t], h)] += acc;
        }
    }
    return grad;
}

// Analytic gradient of upstream_scale * sum of masked per-token losses.
// The unscaled gradient is built first and scaled in one final pass, so
// backward(b, s) == s * backward(b, 1) holds bit-exactly.
inline Vec backward(const TinyLM& model, const MicroBatch& batch, double upstream_scale) {
    validate_batch(model, batch);
    const Vec logits = forward(model, batch);
    const std::size_t T = batch.length();
    const std::size_t V = model.vocab;
    Vec dlogits(T * V, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        if (!batch.mask[t]) continue;
        double mx = logits[t * V];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, logits[t * V + v]);
        double sum = 0.0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(logits[t * V + v] - mx);
        for (std::size_t v = 0; v < V; ++v) {
            const double p = std::exp(logits[t * V + v] - mx) / sum;
            dlogits[t * V + v] = p - (v == batch.targets[t] ? 1.0 : 0.0);
        }
    }
    Vec grad = backward_from_logits_grad(model, batch.tokens, dlogits);
    for (auto& g : grad) g *= upstream_scale;
    return grad;
}

// Masked-sum loss of the batch, the scalar both backward and the finite
// difference oracle differentiate.
inline double masked_sum_loss(const TinyLM& model, const MicroBatch& batch) {
    return stable_sum(masked_ce(model, batch).per_token_loss);
}

// Central-difference gradient, parameter by parameter. Test oracle; O(P) full
// evaluations, fine at toy sizes.
inline Vec finite_diff_grad(const TinyLM& model, const MicroBatch& batch, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
    Vec grad(model.param_count(), 0.0);
    Vec p = model.params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = masked_sum_loss(model.with_params(p), batch);
        p[i] = orig - h;
        const double dn = masked_sum_loss(model.with_params(p), batch);
        p[i] = orig;
        grad[i] = (up - dn) / (2.0 * h);
    }
    return grad;
}

}  // namespace dpsim
