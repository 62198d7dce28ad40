#pragma once

#include "clarity/corpus.hpp"
#include "clarity/distiller.hpp"
#include "clarity/pipeline.hpp"
#include "clarity/training.hpp"
#include "clarity/transformer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace clarity::config {

struct DatasetSpec {
    std::string path;  // empty when not configured
    // moral_stories, ethics_justice, ethics_deontology, ethics_virtue or canonical
    std::string format = "moral_stories";
};

struct DistillSettings {
    bool offline = false;
    std::string client = "mock";  // mock or http
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string api_key_env = "CLARITY_LLM_API_KEY";
    std::string cache;  // empty: <run>/distill/cache.jsonl
    std::size_t parallelism = 4;
    distill::DecodingParams decoding;
    distill::RetryPolicy retry;
};

struct ModelSettings {
    std::string backend = "desk";
    int d_model = 64;
    int heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int ffn_dim = 256;
    int max_target_tokens = 256;
    std::size_t max_vocab = 2048;
};

struct CheckpointPaths {
    // Explicit model files; empty means the run directory's `best` pointers.
    std::string rationale;
    std::string norm;
    std::string scorer;
};

struct PipelineSettings {
    pipeline::Mode mode = pipeline::Mode::action_only;
    int max_tokens = 128;
    Stance tie_break = Stance::oppose;
};

struct EvaluateSettings {
    std::string embedder = "hashed-bow";  // hashed-bow or desk-encoder
    std::string dataset_name = "fixture";
};

struct RunConfig {
    std::uint64_t seed = 13;
    DatasetSpec train_data;
    DatasetSpec test_data;
    DistillSettings distill;
    ModelSettings model;
    train::TrainConfig train;
    CheckpointPaths checkpoints;
    PipelineSettings pipeline;
    EvaluateSettings evaluate;

    /// Throws ConfigError.
    void validate() const;
    /// Transformer config for one task; the init seed differs per task.
    model::TransformerConfig transformer(train::Task task) const;
};

nlohmann::json to_json(const RunConfig& c);
/// Rejects unknown keys at every level. Relative paths resolve against `base_dir`.
RunConfig from_json(const nlohmann::json& j, const std::string& base_dir = {});

/// Applies "a.b.c=value" overrides; the value is parsed as JSON when possible,
/// otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Loads `path` (or defaults when empty), applies overrides and validates.
RunConfig load(const std::string& path, const std::vector<std::string>& overrides);

/// Loads a dataset according to its format tag. Record errors are logged and
/// returned; a dataset with record errors still loads.
corpus::LoadResult load_dataset(const DatasetSpec& spec, corpus::Split split);

}  // namespace clarity::config
