#pragma once

#include "clarity/corpus.hpp"
#include "clarity/model.hpp"
#include "clarity/transformer.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace clarity::train {

/// How a triplet leg is embedded during contrastive fine-tuning.
enum class TripletEmbedding : std::uint8_t {
    // Mean of the norm generator's encoder states over P + generated rationale.
    encoder_pooled,
    // Mean of the norm generator's decoder states teacher-forced on the gold norm.
    reference_norm_decoder,
};
std::string_view to_string(TripletEmbedding e) noexcept;
TripletEmbedding parse_triplet_embedding(std::string_view text);

struct TrainConfig {
    double learning_rate = 5e-5;
    int batch_size = 8;
    int max_input_tokens = 1024;
    int max_steps = 10000;
    int epochs = 5;
    double margin = 0.3;
    double lambda_r = 0.2;
    double lambda_n = 1.0;
    double lambda_trip = 0.3;
    std::uint64_t seed = 0;

    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double validation_fraction = 0.05;
    int validation_interval = 200;

    // Contrastive stage.
    int triplet_count = 256;
    int triplet_batch_size = 4;
    bool stance_matched_negatives = false;
    int regenerate_every = 200;
    int generation_max_tokens = 128;
    TripletEmbedding triplet_embedding = TripletEmbedding::encoder_pooled;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Examples

struct RationaleExample {
    std::string action;
    Stance stance = Stance::support;
    std::string rationale;
    model::TaskPrefix prefix = model::TaskPrefix::explain_support;
};
RationaleExample make_rationale_example(std::string action, Stance stance, std::string rationale);

struct NormExample {
    std::string rationale;
    std::string norm;
};

struct ScorerExample {
    std::string action;
    Stance label = Stance::support;
    std::string norm;
    std::string rationale;
};

/// Which prefix settings a scorer item expands into.
struct ScorerSettings {
    bool action_only = true;
    bool with_norm = true;
    bool with_rationale = true;
};

/// One prefixed model instance as fed to the loss.
struct Instance {
    model::TaskPrefix prefix;
    std::string input;
    std::string target;
};

std::vector<Instance> expand(const std::vector<RationaleExample>& batch);
std::vector<Instance> expand(const std::vector<NormExample>& batch);
std::vector<Instance> expand(const std::vector<ScorerExample>& batch, ScorerSettings settings = {});
/// "<prefix> <input>\t<target>"
std::string serialize(const Instance& instance);

// ---------------------------------------------------------------------------
// Losses. Tensor forms build a graph into the model parameters.

autograd::Tensor rationale_loss_tensor(const model::TextToTextModel& m, const std::vector<RationaleExample>& batch);
autograd::Tensor norm_loss_tensor(const model::TextToTextModel& m, const std::vector<NormExample>& batch);
autograd::Tensor scorer_loss_tensor(const model::TextToTextModel& m, const std::vector<ScorerExample>& batch,
                                    ScorerSettings settings = {});

double rationale_loss(const model::TextToTextModel& m, const std::vector<RationaleExample>& batch);
double norm_loss(const model::TextToTextModel& m, const std::vector<NormExample>& batch);
double scorer_loss(const model::TextToTextModel& m, const std::vector<ScorerExample>& batch,
                   ScorerSettings settings = {});

/// max(|a - p| - |a - n| + alpha, 0) with eps-stabilized Euclidean norms.
autograd::Tensor triplet_loss(const autograd::Tensor& anchor, const autograd::Tensor& positive,
                              const autograd::Tensor& negative, double alpha);
double triplet_loss(const model::NormEmbedding& anchor, const model::NormEmbedding& positive,
                    const model::NormEmbedding& negative, double alpha);

// ---------------------------------------------------------------------------
// Optimization

class Adam {
public:
    Adam(std::vector<autograd::Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    /// Parameters without a gradient are left untouched.
    void step();
    void zero_grad();
    long steps() const noexcept { return t_; }

private:
    std::vector<autograd::Tensor> params_;
    std::vector<autograd::Matrix> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

struct LossReport {
    int step = 0;
    double l_r = 0;
    double l_n = 0;
    double l_trip = 0;
    double total = 0;
};

enum class Task : std::uint8_t { rationale, norm, scorer };
std::string_view to_string(Task t) noexcept;
Task parse_task(std::string_view text);

struct TaskData {
    std::vector<RationaleExample> rationale;
    std::vector<NormExample> norm;
    std::vector<ScorerExample> scorer;
};

struct PretrainOptions {
    /// When set, checkpoints go to <dir>/<step>/ with a `best` pointer file in <dir>.
    std::string checkpoint_dir;
    ScorerSettings scorer_settings;
    std::function<void(int step, double loss)> on_step;
};

struct PretrainResult {
    std::vector<double> losses;  // training loss per step
    std::vector<std::pair<int, double>> validation;
    int best_step = 0;
    double final_loss = 0;
};

/// Trains `model` in place on the task loss. Throws ModelError on a non-finite loss.
PretrainResult pretrain(Task task, model::DeskTransformer& model, const TaskData& data, const TrainConfig& config,
                        const PretrainOptions& options = {});

struct FinetuneData {
    const corpus::Corpus* corpus = nullptr;  // resolves triplet ids to text and norms
    std::vector<RationaleExample> rationale_supervision;
    std::vector<NormExample> norm_supervision;
    std::vector<corpus::TripletExample> triplets;
};

struct FinetuneOptions {
    /// When set, checkpoints go to <dir>/{rationale,norm}/<step>/ and the log to <dir>/loss.tsv.
    std::string checkpoint_dir;
    std::function<void(const LossReport&)> on_step;
};

struct FinetuneResult {
    std::vector<LossReport> reports;
    std::vector<std::pair<int, double>> validation;
    int best_step = 0;
};

/// Stage-2 contrastive fine-tuning. Both models end at the best-by-validation state.
FinetuneResult finetune_contrastive(model::DeskTransformer& rationale_gen, model::DeskTransformer& norm_gen,
                                    const FinetuneData& data, const TrainConfig& config,
                                    const FinetuneOptions& options = {});

/// Embeds actions the way the contrastive stage does, caching generated rationales.
class TripletEmbedder {
public:
    TripletEmbedder(const model::TextToTextModel& rationale_gen, const corpus::Corpus& corpus,
                    TripletEmbedding mode, int generation_max_tokens);

    autograd::Tensor embed(const model::TextToTextModel& norm_gen, const std::string& action_id);
    const std::string& rationale_for(const std::string& action_id);
    void invalidate() { rationales_.clear(); }

private:
    const model::TextToTextModel& rationale_gen_;
    const corpus::Corpus& corpus_;
    TripletEmbedding mode_;
    int max_tokens_;
    std::unordered_map<std::string, std::string> rationales_;
};

struct ContrastiveStats {
    double satisfied_fraction = 0;  // d(a,p) < d(a,n)
    double mean_ap = 0;
    double mean_an = 0;
};

ContrastiveStats contrastive_stats(const model::TextToTextModel& rationale_gen,
                                   const model::TextToTextModel& norm_gen, const corpus::Corpus& corpus,
                                   const std::vector<corpus::TripletExample>& triplets, TripletEmbedding mode,
                                   int generation_max_tokens);

struct SweepPoint {
    double alpha = 0;
    std::uint64_t seed = 0;
    double score = 0;
};

/// Runs `run` for every (alpha, seed) pair of the grid.
std::vector<SweepPoint> alpha_sweep(const TrainConfig& base, const std::vector<double>& alphas,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::function<double(const TrainConfig&)>& run);

/// Writes the tab-separated loss log with full double precision.
std::string format_loss_log(const std::vector<LossReport>& reports);
std::vector<LossReport> parse_loss_log(std::string_view text);

}  // namespace clarity::train
