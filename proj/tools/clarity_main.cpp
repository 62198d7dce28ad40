#include "commands.hpp"

#include "clarity/distiller.hpp"
#include "clarity/log.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace clarity;

namespace {

void add_globals(CLI::App* app, cli::Globals& g, bool run_options = true) {
    app->add_option("--config", g.config_path, "Run configuration (JSON)");
    app->add_option("--set", g.overrides, "Config override key.path=value (repeatable)");
    if (!run_options) return;
    app->add_option("--out", g.run_dir, "Run directory");
    app->add_flag("--force", g.force, "Overwrite existing outputs");
    app->add_flag("--offline", g.offline, "Replay cached LLM responses only");
    app->add_option("--max-steps", g.max_steps, "Cap on optimizer steps")->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-path moral assessment with distilled rationales and generated norms"};
    app.require_subcommand(1);
    std::string level = "info";
    app.add_option("--log-level", level, "debug, info, warn or error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    cli::Globals g;
    cli::CorpusArgs corpus_args;
    auto* corpus_cmd = app.add_subcommand("corpus", "Load a dataset and report counts");
    corpus_cmd->add_option("input", corpus_args.input, "Dataset file")->required();
    corpus_cmd->add_option("--format", corpus_args.format, "moral_stories, ethics_<subset> or canonical");
    corpus_cmd->add_option("--split", corpus_args.split, "train or test");
    corpus_cmd->add_option("--output", corpus_args.output, "Write the canonical corpus here");

    auto* distill_cmd = app.add_subcommand("distill", "Collect stance-specific rationales from the teacher LLM");
    add_globals(distill_cmd, g);

    std::size_t review_sample = 20;
    std::uint64_t review_seed = 7;
    auto* review_cmd = app.add_subcommand("sample-rationales", "Export a random rationale sample for review");
    add_globals(review_cmd, g);
    review_cmd->add_option("--sample", review_sample, "Number of records");
    review_cmd->add_option("--seed", review_seed, "Sampling seed");

    std::string task;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Stage-1 training of one model");
    add_globals(pretrain_cmd, g);
    pretrain_cmd->add_option("--task", task, "rationale, norm or scorer")
        ->required()
        ->check(CLI::IsMember({"rationale", "norm", "scorer"}));

    auto* finetune_cmd = app.add_subcommand("finetune", "Stage-2 contrastive fine-tuning of both generators");
    add_globals(finetune_cmd, g);

    cli::AssessArgs assess_args;
    auto* assess_cmd = app.add_subcommand("assess", "Assess actions with the trained pipeline");
    add_globals(assess_cmd, g);
    auto* action_opt = assess_cmd->add_option("--action", assess_args.action, "Assess a single action");
    assess_cmd->add_option("--input", assess_args.input, "File with one action per line")->excludes(action_opt);
    assess_cmd->add_flag("--claritycot", assess_args.claritycot, "Use the single-prompt LLM baseline");
    assess_cmd->add_option("--mode", assess_args.mode, "action_only or rationale_conditioned");

    cli::EvaluateArgs eval_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "Score assessments against gold labels and norms");
    add_globals(eval_cmd, g);
    eval_cmd->add_option("--assessments", eval_args.assessments, "Assessment JSONL files");

    cli::HumanEvalArgs human_args;
    auto* human_cmd = app.add_subcommand("export-human-eval", "Export a blinded human-evaluation sheet");
    add_globals(human_cmd, g);
    human_cmd->add_option("--assessments", human_args.assessments, "Assessment JSONL files");
    human_cmd->add_option("--sample", human_args.sample, "Number of actions");
    human_cmd->add_option("--seed", human_args.seed, "Sampling seed");

    cli::SweepArgs sweep_args;
    auto* sweep_cmd = app.add_subcommand("sweep", "Grid over the triplet margin and seeds");
    add_globals(sweep_cmd, g);
    sweep_cmd->add_option("--alphas", sweep_args.alphas, "Margins")->delimiter(',');
    sweep_cmd->add_option("--seeds", sweep_args.seeds, "Seeds")->delimiter(',');
    sweep_cmd->add_option("--triplets", sweep_args.triplets, "Held-out triplets per point");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    log::set_min_level(level == "debug"  ? log::Level::debug
                       : level == "info" ? log::Level::info
                       : level == "warn" ? log::Level::warn
                                         : log::Level::error);

    try {
        if (*corpus_cmd) return cli::run_corpus(corpus_args);
        if (*distill_cmd) return cli::run_distill(g);
        if (*review_cmd) return cli::run_sample_rationales(g, review_sample, review_seed);
        if (*pretrain_cmd) return cli::run_pretrain(g, task);
        if (*finetune_cmd) return cli::run_finetune(g);
        if (*assess_cmd) return cli::run_assess(g, assess_args);
        if (*eval_cmd) return cli::run_evaluate(g, eval_args);
        if (*human_cmd) return cli::run_export_human_eval(g, human_args);
        if (*sweep_cmd) return cli::run_sweep(g, sweep_args);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const distill::CacheMiss& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
