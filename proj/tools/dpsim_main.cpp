#include <iostream>

#include "CLI11.hpp"

#include "dpsim/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"deterministic simulator of data-parallel SFT training, its two silent bugs, and their detection"};
    app.require_subcommand(1);

    dpsim::TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "run one training configuration, write trace + params + summary");
    train->add_option("config", train_args.config_path, "experiment config (JSON)")->required();
    train->add_option("--seed", train_args.seed, "override run.seed");
    train->add_option("--out", train_args.out, "override output directory");
    train->add_flag("--parallel", train_args.parallel, "run ranks on threads (bit-identical to sequential)");

    dpsim::DiffArgs diff_args;
    CLI::App* diff = app.add_subcommand("diff", "run the copy-policy x aggregation ablation against the single-device oracle");
    diff->add_option("config", diff_args.config_path, "experiment config (JSON)")->required();
    diff->add_option("--variants", diff_args.variants,
                     "subset of {fixed, buggy-copy, buggy-agg, buggy-both}");
    diff->add_option("--tolerance", diff_args.tolerance, "relative tolerance vs. the oracle");
    diff->add_option("--seed", diff_args.seed, "override run.seed");
    diff->add_option("--out", diff_args.out, "override output directory");

    dpsim::DetectArgs detect_args;
    CLI::App* detect = app.add_subcommand("detect", "classify a candidate trace against a clean reference trace");
    detect->add_option("candidate", detect_args.candidate_path, "candidate trace.jsonl")->required();
    detect->add_option("reference", detect_args.reference_path, "reference trace.jsonl")->required();
    detect->add_option("--accum-steps", detect_args.accum_steps, "accumulation steps of the candidate run");

    dpsim::FlopsArgs flops_args;
    CLI::App* flops = app.add_subcommand("flops", "training-compute estimate for a preset or method spec file");
    flops->add_option("method", flops_args.preset_or_path,
                      "preset name (luffy, relift, sft-then-rl-50) or spec JSON path")
        ->required();
    flops->add_flag("--breakdown", flops_args.breakdown, "print per-component terms");

    dpsim::GrpoDemoArgs grpo_args;
    CLI::App* grpo = app.add_subcommand("grpo-demo", "train the clipped policy-gradient bandit and write its trace");
    grpo->add_option("--steps", grpo_args.steps, "bandit steps");
    grpo->add_option("--seed", grpo_args.seed, "bandit seed");
    grpo->add_option("--arms", grpo_args.arms, "number of bandit arms");
    grpo->add_option("--out", grpo_args.out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Fold CLI11's exit-code zoo into the documented contract:
        // 0 for --help/--version, 2 for any argument error.
        const int rc = app.exit(e);
        return rc == 0 ? 0 : dpsim::kExitConfig;
    }

    if (train->parsed()) return dpsim::cmd_train(train_args, std::cout, std::cerr);
    if (diff->parsed()) return dpsim::cmd_diff(diff_args, std::cout, std::cerr);
    if (detect->parsed()) return dpsim::cmd_detect(detect_args, std::cout, std::cerr);
    if (flops->parsed()) return dpsim::cmd_flops(flops_args, std::cout, std::cerr);
    if (grpo->parsed()) return dpsim::cmd_grpo_demo(grpo_args, std::cout, std::cerr);
    return dpsim::kExitConfig;
}
