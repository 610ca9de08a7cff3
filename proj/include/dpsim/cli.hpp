#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpsim/config.hpp"
#include "dpsim/data_gen.hpp"
#include "dpsim/diagnostics.hpp"
#include "dpsim/dp_sim.hpp"
#include "dpsim/flops.hpp"
#include "dpsim/grpo.hpp"
#include "dpsim/oracle_diff.hpp"

namespace dpsim {

// Exit codes shared by the subcommands.
//   0 success / clean;  1 runtime failure;  2 bad config, arguments, or input
//   files;  3/4/5 from `detect`: optimizer bug / aggregation bug / both.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitOptimizerBug = 3;
inline constexpr int kExitAggregationBug = 4;
inline constexpr int kExitBothBugs = 5;

// Output directory precedence: --out flag, then DPSIM_OUT, then the config.
inline std::string resolve_output_dir(const std::optional<std::string>& flag,
                                      const std::string& config_value) {
    if (flag) return *flag;
    if (const char* env = std::getenv("DPSIM_OUT"); env != nullptr && *env != '\0') return env;
    return config_value;
}

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(bytes, 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
    char bytes[8];
    in.read(bytes, 8);
    if (!in) throw std::runtime_error("truncated params file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    }
    return v;
}

inline std::string format_sci(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

}  // namespace detail

// Flat little-endian f64 dump with an 8-byte element-count header.
inline void write_params_bin(const std::string& path, const Vec& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    detail::put_u64_le(out, params.size());
    for (double p : params) {
        std::uint64_t bits;
        std::memcpy(&bits, &p, sizeof bits);
        detail::put_u64_le(out, bits);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline Vec read_params_bin(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    const std::uint64_t n = detail::get_u64_le(in);
    Vec params(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint64_t bits = detail::get_u64_le(in);
        std::memcpy(&params[i], &bits, sizeof bits);
    }
    return params;
}

inline void write_trace_file(const std::string& path, const Trace& trace) {
    std::ofstream out(path, std::ios::binary);  // binary: no newline translation
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    TraceWriter writer(out);
    for (const TraceRecord& rec : trace) writer.record(rec);
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline Trace read_trace_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open trace file: " + path);
    return read_trace(in);
}

// ------------------------------------------------------------------ train

struct TrainArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool parallel = false;
};

inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
    ExperimentConfig cfg;
    try {
        cfg = load_experiment_config(args.config_path);
        if (args.seed) cfg.run.seed = *args.seed;
    } catch (const std::exception& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        const auto dataset = generate_dataset(cfg.data, cfg.run.seed);
        const TinyLM model = init_model(cfg.data, cfg.run.seed);
        RunOptions opts;
        opts.mode = args.parallel ? ExecutionMode::Parallel : ExecutionMode::Sequential;
        const RunResult result = run_training(cfg.run, model, dataset, opts);

        const std::filesystem::path dir = resolve_output_dir(args.out, cfg.output_dir);
        std::filesystem::create_directories(dir);
        write_trace_file((dir / "trace.jsonl").string(), result.trace);
        write_params_bin((dir / "final_params.bin").string(), result.final_params);

        const TraceSummary ts = summarize(result.trace);
        nlohmann::ordered_json summary;
        summary["config"] = resolved_config_json(cfg);
        summary["final_loss"] = result.trace.back().loss;
        summary["final_grad_norm"] = result.trace.back().grad_norm;
        summary["trace_summary"] = {{"median_loss", ts.median_loss},
                                    {"median_grad_norm", ts.median_grad_norm},
                                    {"loss_std", ts.loss_std},
                                    {"token_count_dispersion", ts.token_count_dispersion}};
        summary["outputs"] = {{"trace", "trace.jsonl"},
                              {"final_params", "final_params.bin"}};
        std::ofstream sf(dir / "summary.json", std::ios::binary);
        if (!sf) throw std::runtime_error("cannot open for writing: " + (dir / "summary.json").string());
        sf << summary.dump(2) << "\n";

        out << "trained " << cfg.run.total_steps << " steps; final loss "
            << result.trace.back().loss << "; outputs in " << dir.string() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

// ------------------------------------------------------------------- diff

struct DiffArgs {
    std::string config_path;
    std::vector<std::string> variants;  // empty = all four
    double tolerance = 1e-9;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

namespace detail {

struct VariantDef {
    const char* name;
    CopyPolicy copy;
    AggregationMode agg;
};

inline constexpr VariantDef kVariants[] = {
    {"fixed", CopyPolicy::EveryMicroBatch, AggregationMode::GlobalTokenMean},
    {"buggy-copy", CopyPolicy::FirstMicroBatchOnly, AggregationMode::GlobalTokenMean},
    {"buggy-agg", CopyPolicy::EveryMicroBatch, AggregationMode::MeanOfMeans},
    {"buggy-both", CopyPolicy::FirstMicroBatchOnly, AggregationMode::MeanOfMeans},
};

}  // namespace detail

// Runs the 2x2 {copy_policy} x {agg_mode} ablation against the single-device
// oracle. The fixed/fixed run decides the exit code; every selected variant
// also gets a bug verdict against the fixed/fixed trace when long enough.
inline int cmd_diff(const DiffArgs& args, std::ostream& out, std::ostream& err) {
    ExperimentConfig cfg;
    std::vector<detail::VariantDef> selected;
    try {
        cfg = load_experiment_config(args.config_path);
        if (args.seed) cfg.run.seed = *args.seed;
        if (args.tolerance < 0.0) throw std::invalid_argument("tolerance must be >= 0");
        if (args.variants.empty()) {
            selected.assign(std::begin(detail::kVariants), std::end(detail::kVariants));
        } else {
            for (const std::string& name : args.variants) {
                bool found = false;
                for (const auto& v : detail::kVariants) {
                    if (name == v.name) {
                        selected.push_back(v);
                        found = true;
                    }
                }
                if (!found) throw std::invalid_argument("unknown variant \"" + name + "\"");
            }
        }
    } catch (const std::exception& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        const auto dataset = generate_dataset(cfg.data, cfg.run.seed);
        const TinyLM model = init_model(cfg.data, cfg.run.seed);
        const std::size_t samples_per_step =
            cfg.run.dp_size * cfg.run.accum_steps * cfg.run.micro_batch_size;
        const Trajectory reference =
            reference_train(model, dataset, cfg.run.optimizer, cfg.run.schedule,
                            cfg.run.total_steps, samples_per_step);

        // The fixed/fixed run always executes: it anchors both the exit code
        // and the detect verdicts.
        auto run_variant = [&](const detail::VariantDef& v) {
            DpConfig run_cfg = cfg.run;
            run_cfg.copy_policy = v.copy;
            run_cfg.agg_mode = v.agg;
            return run_training(run_cfg, model, dataset);
        };
        const RunResult fixed_run = run_variant(detail::kVariants[0]);
        const DivergenceReport fixed_report =
            compare(to_trajectory(fixed_run), reference, args.tolerance);
        const bool detectable = fixed_run.trace.size() >= 20;

        nlohmann::ordered_json report;
        report["tolerance"] = args.tolerance;
        report["samples_per_step"] = samples_per_step;
        report["config"] = resolved_config_json(cfg);
        report["variants"] = nlohmann::ordered_json::array();

        out << "variant      copy_policy             agg_mode           max_rel_diff  vs oracle        opt  agg\n";
        for (const auto& v : selected) {
            const RunResult run =
                std::string(v.name) == "fixed" ? fixed_run : run_variant(v);
            const DivergenceReport cmp = compare(to_trajectory(run), reference, args.tolerance);
            const bool matches = !cmp.first_divergence_step.has_value();

            nlohmann::ordered_json row;
            row["name"] = v.name;
            row["copy_policy"] = to_string(v.copy);
            row["agg_mode"] = to_string(v.agg);
            row["max_param_rel_diff"] = cmp.max_param_rel_diff;
            if (cmp.first_divergence_step) {
                row["first_divergence_step"] = *cmp.first_divergence_step;
            } else {
                row["first_divergence_step"] = nullptr;
            }
            row["matches_oracle"] = matches;
            row["final_loss_delta"] = cmp.loss_deltas.back();

            std::string opt_flag = "-";
            std::string agg_flag = "-";
            if (detectable) {
                const Verdict verdict = detect(run.trace, fixed_run.trace, cfg.run.accum_steps);
                row["verdict"] = {{"optimizer_bug", verdict.optimizer_bug},
                                  {"aggregation_bug", verdict.aggregation_bug},
                                  {"norm_ratio", verdict.norm_ratio},
                                  {"variance_ratio", verdict.variance_ratio},
                                  {"mean_shift", verdict.mean_shift}};
                opt_flag = verdict.optimizer_bug ? "YES" : "no";
                agg_flag = verdict.aggregation_bug ? "YES" : "no";
            } else {
                row["verdict"] = nullptr;  // needs >= 20 steps
            }
            report["variants"].push_back(std::move(row));

            char line[160];
            std::snprintf(line, sizeof line, "%-12s %-23s %-18s %-13s %-16s %-4s %-4s\n", v.name,
                          to_string(v.copy), to_string(v.agg),
                          detail::format_sci(cmp.max_param_rel_diff).c_str(),
                          matches ? "MATCHES ORACLE" : "DIVERGED", opt_flag.c_str(),
                          agg_flag.c_str());
            out << line;
        }

        const std::filesystem::path dir = resolve_output_dir(args.out, cfg.output_dir);
        std::filesystem::create_directories(dir);
        std::ofstream rf(dir / "diff_report.json", std::ios::binary);
        if (!rf) throw std::runtime_error("cannot open for writing: " + (dir / "diff_report.json").string());
        rf << report.dump(2) << "\n";

        return fixed_report.first_divergence_step.has_value() ? kExitRuntime : kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

// ----------------------------------------------------------------- detect

struct DetectArgs {
    std::string candidate_path;
    std::string reference_path;
    std::size_t accum_steps = 1;
};

inline int cmd_detect(const DetectArgs& args, std::ostream& out, std::ostream& err) {
    Verdict v;
    try {
        const Trace candidate = read_trace_file(args.candidate_path);
        const Trace reference = read_trace_file(args.reference_path);
        v = detect(candidate, reference, args.accum_steps);
    } catch (const std::exception& e) {
        err << "detect error: " << e.what() << "\n";
        return kExitConfig;
    }
    out << "norm_ratio     " << v.norm_ratio << "\n"
        << "variance_ratio " << v.variance_ratio << "\n"
        << "mean_shift     " << v.mean_shift << "\n"
        << "optimizer_bug   " << (v.optimizer_bug ? "YES" : "no") << "\n"
        << "aggregation_bug " << (v.aggregation_bug ? "YES" : "no") << "\n";
    if (v.optimizer_bug && v.aggregation_bug) return kExitBothBugs;
    if (v.optimizer_bug) return kExitOptimizerBug;
    if (v.aggregation_bug) return kExitAggregationBug;
    return kExitOk;
}

// ------------------------------------------------------------------ flops

struct FlopsArgs {
    std::string preset_or_path;
    bool breakdown = false;
};

inline int cmd_flops(const FlopsArgs& args, std::ostream& out, std::ostream& err) {
    try {
        std::optional<NamedMethod> named;
        for (const NamedMethod& preset : method_presets()) {
            if (preset.method.name == args.preset_or_path) {
                named = preset;
                break;
            }
        }
        if (!named) {
            if (!std::filesystem::exists(args.preset_or_path)) {
                throw std::invalid_argument("unknown preset: " + args.preset_or_path);
            }
            std::ifstream in(args.preset_or_path);
            named = parse_named_method(nlohmann::json::parse(in));
        }
        const MethodBreakdown b = method_breakdown(named->method, named->model);
        if (args.breakdown) {
            out << "rollouts/sample " << format_flops(b.rollout_per_sample) << "\n";
            if (b.trace_per_sample > 0.0) out << "traces/sample   " << format_flops(b.trace_per_sample) << "\n";
            out << "rl total        " << format_flops(b.rl_total) << "\n";
            if (b.extra_sft_total > 0.0) out << "extra sft total " << format_flops(b.extra_sft_total) << "\n";
            if (b.sft_pretrain_total > 0.0) out << "sft total       " << format_flops(b.sft_pretrain_total) << "\n";
            out << "total           " << format_flops(b.total) << "\n";
        } else {
            out << format_flops(b.total) << "\n";
        }
        return kExitOk;
    } catch (const std::exception& e) {
        err << "flops error: " << e.what() << "\n";
        return kExitConfig;
    }
}

// -------------------------------------------------------------- grpo-demo

struct GrpoDemoArgs {
    std::uint64_t steps = 200;
    std::uint64_t seed = 0;
    std::optional<std::string> out;
    std::size_t arms = 4;
};

inline int cmd_grpo_demo(const GrpoDemoArgs& args, std::ostream& out, std::ostream& err) {
    Trace trace;
    try {
        BanditConfig cfg;
        cfg.steps = args.steps;
        cfg.seed = args.seed;
        cfg.arms = args.arms;
        trace = run_bandit(cfg);
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    try {
        const std::filesystem::path dir = resolve_output_dir(args.out, "out");
        std::filesystem::create_directories(dir);
        write_trace_file((dir / "trace.jsonl").string(), trace);
        out << "bandit mean reward: step 0 = " << trace.front().loss << ", step "
            << trace.back().step << " = " << trace.back().loss << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace dpsim
