#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpsim/json_util.hpp"

namespace dpsim {

// Training-compute accounting: forward = 2ND, backward = 4ND, so one SFT
// sample costs 6ND and one on-policy rollout costs 8ND (2ND generation by the
// inference engine plus 6ND to re-process it for the update). Counts are
// carried as doubles because method totals exceed the 64-bit integer range.
struct CostModel {
    double n_params = 0.0;  // N
};

struct ExtraSftSpec {
    double updates = 0.0;
    double batch = 0.0;
    double tokens = 0.0;
};

struct SftPretrainSpec {
    double epochs = 0.0;
    double samples = 0.0;
    double tokens = 0.0;
};

struct MethodSpec {
    std::string name;
    double steps = 0.0;
    double batch_size = 0.0;
    double on_policy_rollouts = 0.0;  // per sample
    double rollout_tokens = 0.0;      // average response length of a rollout
    double off_policy_traces = 0.0;   // per sample
    double trace_tokens = 0.0;        // average response length of a trace
    std::optional<ExtraSftSpec> extra_sft;        // interleaved SFT updates
    std::optional<SftPretrainSpec> sft_pretrain;  // SFT stage before RL
    // Response-tokens-only accounting by default; raising this folds prompt
    // tokens in, scaling every term proportionally.
    double prompt_token_multiplier = 1.0;
};

inline double sft_flops(double n_params, double tokens) {
    if (n_params <= 0.0) throw std::invalid_argument("sft_flops: n_params must be positive");
    if (tokens < 0.0) throw std::invalid_argument("sft_flops: tokens must be >= 0");
    return 6.0 * n_params * tokens;
}

inline double rollout_flops(double n_params, double tokens) {
    if (n_params <= 0.0) throw std::invalid_argument("rollout_flops: n_params must be positive");
    if (tokens < 0.0) throw std::invalid_argument("rollout_flops: tokens must be >= 0");
    return 8.0 * n_params * tokens;
}

inline void validate_method(const MethodSpec& spec) {
    auto nonneg = [&](double v, const char* what) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("method spec: " + std::string(what) + " must be >= 0");
        }
    };
    nonneg(spec.steps, "steps");
    nonneg(spec.batch_size, "batch_size");
    nonneg(spec.on_policy_rollouts, "on_policy_rollouts");
    nonneg(spec.rollout_tokens, "rollout_tokens");
    nonneg(spec.off_policy_traces, "off_policy_traces");
    nonneg(spec.trace_tokens, "trace_tokens");
    if (spec.extra_sft) {
        nonneg(spec.extra_sft->updates, "extra_sft.updates");
        nonneg(spec.extra_sft->batch, "extra_sft.batch");
        nonneg(spec.extra_sft->tokens, "extra_sft.tokens");
    }
    if (spec.sft_pretrain) {
        nonneg(spec.sft_pretrain->epochs, "sft_pretrain.epochs");
        nonneg(spec.sft_pretrain->samples, "sft_pretrain.samples");
        nonneg(spec.sft_pretrain->tokens, "sft_pretrain.tokens");
    }
    if (!(spec.prompt_token_multiplier > 0.0)) {
        throw std::invalid_argument("method spec: prompt_token_multiplier must be > 0");
    }
}

// Per-component totals; `total` is precisely the sum of the three stage
// totals, so decomposition checks are exact.
struct MethodBreakdown {
    double rollout_per_sample = 0.0;  // on_policy_rollouts x 8ND_rollout
    double trace_per_sample = 0.0;    // off_policy_traces x 6ND_data
    double rl_total = 0.0;
    double extra_sft_total = 0.0;
    double sft_pretrain_total = 0.0;
    double total = 0.0;
};

inline MethodBreakdown method_breakdown(const MethodSpec& spec, const CostModel& model) {
    validate_method(spec);
    if (model.n_params <= 0.0) throw std::invalid_argument("cost model: n_params must be positive");
    const double mult = spec.prompt_token_multiplier;

    MethodBreakdown b;
    b.rollout_per_sample =
        spec.on_policy_rollouts * rollout_flops(model.n_params, spec.rollout_tokens * mult);
    b.trace_per_sample =
        spec.off_policy_traces * sft_flops(model.n_params, spec.trace_tokens * mult);
    b.rl_total = spec.steps * spec.batch_size * (b.rollout_per_sample + b.trace_per_sample);
    if (spec.extra_sft) {
        b.extra_sft_total = spec.extra_sft->updates * spec.extra_sft->batch *
                            sft_flops(model.n_params, spec.extra_sft->tokens * mult);
    }
    if (spec.sft_pretrain) {
        b.sft_pretrain_total = spec.sft_pretrain->epochs * spec.sft_pretrain->samples *
                               sft_flops(model.n_params, spec.sft_pretrain->tokens * mult);
    }
    b.total = b.rl_total + b.extra_sft_total + b.sft_pretrain_total;
    if (b.total == 0.0) throw std::invalid_argument("empty method");
    return b;
}

inline double method_total(const MethodSpec& spec, const CostModel& model) {
    return method_breakdown(spec, model).total;
}

// Scientific notation with 3 significant figures and a bare exponent
// ("6.65e19"), the form used for the headline totals.
inline std::string format_flops(double value) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.2e", value);
    const std::string s(buf);
    const std::size_t e = s.find('e');
    std::string mantissa = s.substr(0, e);
    std::string exponent = s.substr(e + 1);
    const bool negative = !exponent.empty() && exponent[0] == '-';
    std::size_t i = (!exponent.empty() && (exponent[0] == '+' || exponent[0] == '-')) ? 1 : 0;
    while (i + 1 < exponent.size() && exponent[i] == '0') ++i;
    return mantissa + "e" + (negative ? "-" : "") + exponent.substr(i);
}

inline MethodSpec parse_method_spec(const nlohmann::json& j, const std::string& name) {
    jsonutil::check_keys(j, "method", {"steps", "batch_size"},
                         {"on_policy_rollouts", "rollout_tokens", "off_policy_traces",
                          "trace_tokens", "extra_sft", "sft_pretrain", "prompt_token_multiplier"});
    MethodSpec spec;
    spec.name = name;
    spec.steps = jsonutil::get_number(j, "steps", 0.0, "method");
    spec.batch_size = jsonutil::get_number(j, "batch_size", 0.0, "method");
    spec.on_policy_rollouts = jsonutil::get_number(j, "on_policy_rollouts", 0.0, "method");
    spec.rollout_tokens = jsonutil::get_number(j, "rollout_tokens", 0.0, "method");
    spec.off_policy_traces = jsonutil::get_number(j, "off_policy_traces", 0.0, "method");
    spec.trace_tokens = jsonutil::get_number(j, "trace_tokens", 0.0, "method");
    spec.prompt_token_multiplier =
        jsonutil::get_number(j, "prompt_token_multiplier", 1.0, "method");
    if (j.contains("extra_sft")) {
        const auto& e = j.at("extra_sft");
        jsonutil::check_keys(e, "method.extra_sft", {"updates", "batch", "tokens"});
        spec.extra_sft = ExtraSftSpec{jsonutil::get_number(e, "updates", 0.0, "method.extra_sft"),
                                      jsonutil::get_number(e, "batch", 0.0, "method.extra_sft"),
                                      jsonutil::get_number(e, "tokens", 0.0, "method.extra_sft")};
    }
    if (j.contains("sft_pretrain")) {
        const auto& p = j.at("sft_pretrain");
        jsonutil::check_keys(p, "method.sft_pretrain", {"epochs", "samples", "tokens"});
        spec.sft_pretrain =
            SftPretrainSpec{jsonutil::get_number(p, "epochs", 0.0, "method.sft_pretrain"),
                            jsonutil::get_number(p, "samples", 0.0, "method.sft_pretrain"),
                            jsonutil::get_number(p, "tokens", 0.0, "method.sft_pretrain")};
    }
    validate_method(spec);
    return spec;
}

struct NamedMethod {
    MethodSpec method;
    CostModel model;
};

// Entry schema shared by presets and user spec files:
//   {"name": ..., "model": {"n_params": ...}, "method": {...}}
inline NamedMethod parse_named_method(const nlohmann::json& j) {
    jsonutil::check_keys(j, "method spec", {"name", "model", "method"});
    const std::string name = jsonutil::get_string(j, "name", "", "method spec");
    const auto& m = j.at("model");
    jsonutil::check_keys(m, "model", {"n_params"});
    NamedMethod named;
    named.model.n_params = jsonutil::get_number(m, "n_params", 0.0, "model");
    if (named.model.n_params <= 0.0) {
        throw std::invalid_argument("model: n_params must be positive");
    }
    named.method = parse_method_spec(j.at("method"), name);
    return named;
}

// Built-in methods, shipped as data in the same schema user spec files use,
// so adding a method never means touching code. All use a 7e9-parameter
// model; token figures are average response lengths.
inline const char* preset_methods_json() {
    return R"json([
  {
    "name": "luffy",
    "model": {"n_params": 7e9},
    "method": {
      "steps": 500, "batch_size": 128,
      "on_policy_rollouts": 7, "rollout_tokens": 2200,
      "off_policy_traces": 1, "trace_tokens": 4200
    }
  },
  {
    "name": "relift",
    "model": {"n_params": 7e9},
    "method": {
      "steps": 500, "batch_size": 128,
      "on_policy_rollouts": 8, "rollout_tokens": 3000,
      "extra_sft": {"updates": 138, "batch": 64, "tokens": 4200}
    }
  },
  {
    "name": "sft-then-rl-50",
    "model": {"n_params": 7e9},
    "method": {
      "steps": 50, "batch_size": 128,
      "on_policy_rollouts": 8, "rollout_tokens": 4200,
      "sft_pretrain": {"epochs": 3, "samples": 46000, "tokens": 4200}
    }
  }
])json";
}

inline std::vector<NamedMethod> method_presets() {
    const nlohmann::json j = nlohmann::json::parse(preset_methods_json());
    std::vector<NamedMethod> out;
    out.reserve(j.size());
    for (const auto& entry : j) out.push_back(parse_named_method(entry));
    return out;
}

}  // namespace dpsim
