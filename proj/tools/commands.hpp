#pragma once

#include "clarity/config.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace clarity::cli {

struct Globals {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string run_dir;
    bool force = false;
    bool offline = false;
    std::optional<int> max_steps;
};

/// Thrown when a command's declared outputs already exist and --force is absent.
struct OutputExists : ConfigError {
    using ConfigError::ConfigError;
};

struct CorpusArgs {
    std::string input;
    std::string format = "moral_stories";
    std::string split = "train";
    std::string output;
};

struct AssessArgs {
    std::string action;
    std::string input;
    bool claritycot = false;
    std::string mode;
};

struct EvaluateArgs {
    std::vector<std::string> assessments;
};

struct HumanEvalArgs {
    std::vector<std::string> assessments;
    std::size_t sample = 20;
    std::uint64_t seed = 7;
};

struct SweepArgs {
    std::vector<double> alphas{0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    int triplets = 64;
};

int run_corpus(const CorpusArgs& args);
int run_distill(const Globals& g);
int run_sample_rationales(const Globals& g, std::size_t sample, std::uint64_t seed);
int run_pretrain(const Globals& g, const std::string& task);
int run_finetune(const Globals& g);
int run_assess(const Globals& g, const AssessArgs& args);
int run_evaluate(const Globals& g, const EvaluateArgs& args);
int run_export_human_eval(const Globals& g, const HumanEvalArgs& args);
int run_sweep(const Globals& g, const SweepArgs& args);

}  // namespace clarity::cli
