#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpsim/numerics.hpp"

namespace dpsim {

// One training step as observed from outside: the two Fig.-2-style series
// (loss, grad norm) plus schedule and token bookkeeping.
struct TraceRecord {
    std::uint64_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    std::uint64_t global_token_count = 0;
    std::vector<std::uint64_t> per_rank_counts;
};

using Trace = std::vector<TraceRecord>;

// Detection thresholds. Calibration constants, frozen after the simulation
// campaign in the test suite demonstrated a >=10x separation between clean
// and buggy populations at G >= 4.
inline constexpr double kNormRatioThreshold = 0.6;
inline constexpr double kVarianceRatioThreshold = 2.0;
inline constexpr std::size_t kDetrendWindow = 9;

inline nlohmann::ordered_json trace_record_to_json(const TraceRecord& rec) {
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["loss"] = rec.loss;
    j["grad_norm"] = rec.grad_norm;
    j["lr"] = rec.lr;
    j["global_token_count"] = rec.global_token_count;
    j["per_rank_counts"] = rec.per_rank_counts;
    return j;
}

// Line-delimited trace sink. Steps must arrive strictly increasing; one JSON
// object per line with exactly the TraceRecord fields.
class TraceWriter {
public:
    explicit TraceWriter(std::ostream& out) : out_(out) {}

    void record(const TraceRecord& rec) {
        if (any_ && rec.step <= last_step_) {
            throw std::invalid_argument("trace record out of order at step " + std::to_string(rec.step));
        }
        if (!std::isfinite(rec.grad_norm) || rec.grad_norm < 0.0) {
            throw std::invalid_argument("trace record: grad_norm must be finite and >= 0");
        }
        out_ << trace_record_to_json(rec).dump() << '\n';
        last_step_ = rec.step;
        any_ = true;
    }

private:
    std::ostream& out_;
    bool any_ = false;
    std::uint64_t last_step_ = 0;
};

inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
    static const char* kFields[] = {"step", "loss", "grad_norm", "lr", "global_token_count", "per_rank_counts"};
    if (!j.is_object() || j.size() != std::size(kFields)) {
        throw std::invalid_argument("trace record: wrong field set");
    }
    for (const char* f : kFields) {
        if (!j.contains(f)) throw std::invalid_argument(std::string("trace record: missing field ") + f);
    }
    TraceRecord rec;
    rec.step = j.at("step").get<std::uint64_t>();
    rec.loss = j.at("loss").get<double>();
    rec.grad_norm = j.at("grad_norm").get<double>();
    rec.lr = j.at("lr").get<double>();
    rec.global_token_count = j.at("global_token_count").get<std::uint64_t>();
    rec.per_rank_counts = j.at("per_rank_counts").get<std::vector<std::uint64_t>>();
    return rec;
}

inline Trace read_trace(std::istream& in) {
    Trace trace;
    std::string line;
    std::uint64_t prev = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TraceRecord rec = trace_record_from_json(nlohmann::json::parse(line));
        if (!trace.empty() && rec.step <= prev) {
            throw std::invalid_argument("trace file: steps not strictly increasing");
        }
        prev = rec.step;
        trace.push_back(std::move(rec));
    }
    return trace;
}

namespace detail {

// Lower median: on even lengths the smaller of the two middle values.
inline double lower_median(Vec v) {
    if (v.empty()) throw std::invalid_argument("median of empty series");
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];
}

inline double mean(const Vec& v) {
    if (v.empty()) throw std::invalid_argument("mean of empty series");
    return stable_sum(v) / static_cast<double>(v.size());
}

inline double population_variance(const Vec& v) {
    const double mu = mean(v);
    Vec sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = v[i] - mu;
        sq[i] = d * d;
    }
    return stable_sum(sq) / static_cast<double>(v.size());
}

// Residual after subtracting a centered moving average (window shrinks at the
// edges). Removes the training trend so variance reflects step-to-step noise.
inline Vec detrend(const Vec& v, std::size_t window) {
    const std::size_t half = window / 2;
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(v.size() - 1, i + half);
        Vec win(v.begin() + static_cast<std::ptrdiff_t>(lo), v.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
        out[i] = v[i] - mean(win);
    }
    return out;
}

// Ratio with a finite-result convention when the denominator degenerates.
inline double safe_ratio(double num, double den) {
    if (den > 0.0) return num / den;
    if (num <= 0.0) return 1.0;
    return std::numeric_limits<double>::max();
}

}  // namespace detail

// Bug-signature verdict for a candidate run against a paired clean reference.
// The optimizer bug suppresses gradient norms; the aggregation bug inflates
// loss variability. Mean shift is reported as corroboration only.
struct Verdict {
    bool optimizer_bug = false;
    bool aggregation_bug = false;
    double mean_shift = 0.0;
    double variance_ratio = 1.0;
    double norm_ratio = 1.0;
};

// accum_steps gives context for the expected suppression depth (the exact arm
// is 1/G); the decision rule itself uses only the frozen thresholds.
inline Verdict detect(const Trace& candidate, const Trace& reference, std::size_t accum_steps) {
    (void)accum_steps;
    if (candidate.size() != reference.size() || candidate.size() < 20) {
        throw std::invalid_argument("insufficient trace");
    }
    const std::size_t n = candidate.size();
    Vec cand_loss(n), ref_loss(n), cand_norm(n), ref_norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        cand_loss[i] = candidate[i].loss;
        ref_loss[i] = reference[i].loss;
        cand_norm[i] = candidate[i].grad_norm;
        ref_norm[i] = reference[i].grad_norm;
    }

    Verdict v;
    v.norm_ratio = detail::safe_ratio(detail::lower_median(cand_norm), detail::lower_median(ref_norm));

    Vec tail_delta(n - n / 2);
    for (std::size_t i = n / 2; i < n; ++i) tail_delta[i - n / 2] = cand_loss[i] - ref_loss[i];
    v.mean_shift = detail::mean(tail_delta);

    const double cand_var = detail::population_variance(detail::detrend(cand_loss, kDetrendWindow));
    const double ref_var = detail::population_variance(detail::detrend(ref_loss, kDetrendWindow));
    v.variance_ratio = detail::safe_ratio(cand_var, ref_var);

    v.optimizer_bug = v.norm_ratio < kNormRatioThreshold;
    v.aggregation_bug = v.variance_ratio > kVarianceRatioThreshold;
    return v;
}

struct TraceSummary {
    double median_loss = 0.0;
    double median_grad_norm = 0.0;
    double loss_std = 0.0;
    double token_count_dispersion = 0.0;  // std/mean of the global token count
};

inline TraceSummary summarize(const Trace& trace) {
    if (trace.empty()) throw std::invalid_argument("summarize: empty trace");
    Vec loss(trace.size()), norm(trace.size()), counts(trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i) {
        loss[i] = trace[i].loss;
        norm[i] = trace[i].grad_norm;
        counts[i] = static_cast<double>(trace[i].global_token_count);
    }
    TraceSummary s;
    s.median_loss = detail::lower_median(loss);
    s.median_grad_norm = detail::lower_median(norm);
    s.loss_std = std::sqrt(detail::population_variance(loss));
    const double mu = detail::mean(counts);
    s.token_count_dispersion = mu > 0.0 ? std::sqrt(detail::population_variance(counts)) / mu : 0.0;
    return s;
}

}  // namespace dpsim
