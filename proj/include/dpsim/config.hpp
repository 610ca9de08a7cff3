#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dpsim/data_gen.hpp"
#include "dpsim/dp_sim.hpp"
#include "dpsim/json_util.hpp"

namespace dpsim {

// One experiment = one strictly validated JSON document. Every field has a
// default except run.seed: all randomness flows from the seed, so it must be
// stated. Unknown keys are rejected outright.
struct ExperimentConfig {
    DpConfig run;
    DataSpec data;
    std::string output_dir = "out";
    std::string label;
};

inline const char* to_string(CopyPolicy p) {
    return p == CopyPolicy::EveryMicroBatch ? "every_micro_batch" : "first_micro_batch_only";
}
inline const char* to_string(AggregationMode m) {
    return m == AggregationMode::GlobalTokenMean ? "global_token_mean" : "mean_of_means";
}
inline const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::Constant ? "constant" : "cosine_warmup";
}

inline CopyPolicy copy_policy_from_string(const std::string& s) {
    if (s == "every_micro_batch") return CopyPolicy::EveryMicroBatch;
    if (s == "first_micro_batch_only") return CopyPolicy::FirstMicroBatchOnly;
    throw std::invalid_argument("run.copy_policy: unknown value \"" + s + "\"");
}
inline AggregationMode agg_mode_from_string(const std::string& s) {
    if (s == "global_token_mean") return AggregationMode::GlobalTokenMean;
    if (s == "mean_of_means") return AggregationMode::MeanOfMeans;
    throw std::invalid_argument("run.agg_mode: unknown value \"" + s + "\"");
}
inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "constant") return ScheduleKind::Constant;
    if (s == "cosine_warmup") return ScheduleKind::CosineWarmup;
    throw std::invalid_argument("schedule.kind: unknown value \"" + s + "\"");
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    jsonutil::check_keys(j, "config", {"run"}, {"data", "output_dir", "label"});
    ExperimentConfig cfg;
    cfg.output_dir = jsonutil::get_string(j, "output_dir", "out", "config");
    cfg.label = jsonutil::get_string(j, "label", "", "config");

    const auto& run = j.at("run");
    jsonutil::check_keys(run, "run", {"seed"},
                         {"dp_size", "accum_steps", "zero_stage", "offload", "copy_policy",
                          "agg_mode", "total_steps", "micro_batch_size", "optimizer", "schedule"});
    cfg.run.seed = jsonutil::get_uint(run, "seed", 0, "run");
    cfg.run.dp_size = jsonutil::get_uint(run, "dp_size", 2, "run");
    cfg.run.accum_steps = jsonutil::get_uint(run, "accum_steps", 4, "run");
    cfg.run.zero_stage = static_cast<int>(jsonutil::get_uint(run, "zero_stage", 2, "run"));
    cfg.run.offload = jsonutil::get_bool(run, "offload", true, "run");
    cfg.run.copy_policy =
        copy_policy_from_string(jsonutil::get_string(run, "copy_policy", "every_micro_batch", "run"));
    cfg.run.agg_mode =
        agg_mode_from_string(jsonutil::get_string(run, "agg_mode", "global_token_mean", "run"));
    cfg.run.total_steps = jsonutil::get_uint(run, "total_steps", 40, "run");
    cfg.run.micro_batch_size = jsonutil::get_uint(run, "micro_batch_size", 1, "run");

    if (run.contains("optimizer")) {
        const auto& opt = run.at("optimizer");
        jsonutil::check_keys(opt, "run.optimizer", {}, {"beta1", "beta2", "eps", "weight_decay"});
        cfg.run.optimizer.beta1 = jsonutil::get_number(opt, "beta1", 0.9, "run.optimizer");
        cfg.run.optimizer.beta2 = jsonutil::get_number(opt, "beta2", 0.999, "run.optimizer");
        cfg.run.optimizer.eps = jsonutil::get_number(opt, "eps", 1e-8, "run.optimizer");
        cfg.run.optimizer.weight_decay =
            jsonutil::get_number(opt, "weight_decay", 0.01, "run.optimizer");
    }

    cfg.run.schedule = LrSchedule::constant(0.01);
    if (run.contains("schedule")) {
        const auto& sched = run.at("schedule");
        jsonutil::check_keys(sched, "run.schedule", {}, {"kind", "peak_lr", "warmup_frac", "min_ratio"});
        const ScheduleKind kind =
            schedule_kind_from_string(jsonutil::get_string(sched, "kind", "constant", "run.schedule"));
        const double peak = jsonutil::get_number(sched, "peak_lr", 0.01, "run.schedule");
        if (kind == ScheduleKind::Constant) {
            cfg.run.schedule = LrSchedule::constant(peak);
        } else {
            cfg.run.schedule = LrSchedule::cosine_warmup(
                peak, cfg.run.total_steps,
                jsonutil::get_number(sched, "warmup_frac", 0.1, "run.schedule"),
                jsonutil::get_number(sched, "min_ratio", 0.1, "run.schedule"));
        }
    }

    if (j.contains("data")) {
        const auto& data = j.at("data");
        jsonutil::check_keys(data, "data", {},
                             {"n_samples", "vocab", "hidden", "len_range", "mask_density_range"});
        cfg.data.n_samples = jsonutil::get_uint(data, "n_samples", 0, "data");
        cfg.data.vocab = jsonutil::get_uint(data, "vocab", 16, "data");
        cfg.data.hidden = jsonutil::get_uint(data, "hidden", 8, "data");
        if (data.contains("len_range")) {
            const auto& r = data.at("len_range");
            if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned()) {
                throw std::invalid_argument("data.len_range: expected [min, max] of non-negative integers");
            }
            cfg.data.len_range = {r[0].get<std::size_t>(), r[1].get<std::size_t>()};
        }
        if (data.contains("mask_density_range")) {
            const auto& r = data.at("mask_density_range");
            if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number()) {
                throw std::invalid_argument("data.mask_density_range: expected [lo, hi] numbers");
            }
            cfg.data.mask_density_range = {r[0].get<double>(), r[1].get<double>()};
        }
    }

    const std::size_t needed = static_cast<std::size_t>(cfg.run.total_steps) * cfg.run.dp_size *
                               cfg.run.accum_steps * cfg.run.micro_batch_size;
    if (cfg.data.n_samples == 0) cfg.data.n_samples = needed;
    if (cfg.data.n_samples < needed) {
        throw std::invalid_argument("data.n_samples (" + std::to_string(cfg.data.n_samples) +
                                    ") too small for run; needs " + std::to_string(needed));
    }

    validate_config(cfg.run);
    validate_data_spec(cfg.data);
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument("config parse error: " + std::string(e.what()));
    }
    return parse_experiment_config(j);
}

// Full configuration with every default materialized, embedded into
// summary.json so outputs are self-describing.
inline nlohmann::ordered_json resolved_config_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["label"] = cfg.label;
    j["output_dir"] = cfg.output_dir;
    nlohmann::ordered_json run;
    run["seed"] = cfg.run.seed;
    run["dp_size"] = cfg.run.dp_size;
    run["accum_steps"] = cfg.run.accum_steps;
    run["zero_stage"] = cfg.run.zero_stage;
    run["offload"] = cfg.run.offload;
    run["copy_policy"] = to_string(cfg.run.copy_policy);
    run["agg_mode"] = to_string(cfg.run.agg_mode);
    run["total_steps"] = cfg.run.total_steps;
    run["micro_batch_size"] = cfg.run.micro_batch_size;
    run["optimizer"] = {{"beta1", cfg.run.optimizer.beta1},
                        {"beta2", cfg.run.optimizer.beta2},
                        {"eps", cfg.run.optimizer.eps},
                        {"weight_decay", cfg.run.optimizer.weight_decay}};
    nlohmann::ordered_json sched;
    sched["kind"] = to_string(cfg.run.schedule.kind);
    sched["peak_lr"] = cfg.run.schedule.peak;
    if (cfg.run.schedule.kind == ScheduleKind::CosineWarmup) {
        sched["warmup_frac"] = cfg.run.schedule.warmup_frac;
        sched["min_ratio"] = cfg.run.schedule.min_ratio;
    }
    run["schedule"] = std::move(sched);
    j["run"] = std::move(run);
    nlohmann::ordered_json data;
    data["n_samples"] = cfg.data.n_samples;
    data["vocab"] = cfg.data.vocab;
    data["hidden"] = cfg.data.hidden;
    data["len_range"] = cfg.data.len_range;
    data["mask_density_range"] = cfg.data.mask_density_range;
    j["data"] = std::move(data);
    return j;
}

}  // namespace dpsim
