#pragma once

#include "clarity/autograd.hpp"
#include "clarity/common.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace clarity::model {

/// The closed set of task prefixes. The text of each is fixed.
enum class TaskPrefix : std::uint8_t {
    explain_support,  // rationale generation, supporting path
    explain_oppose,   // rationale generation, opposing path
    abstract_norm,    // norm generation from a rationale
    score_action,     // valence from the action alone
    score_norm,       // valence from action and norm
    score_rationale,  // valence from action and rationale
};

inline constexpr std::array<TaskPrefix, 6> k_all_prefixes = {
    TaskPrefix::explain_support, TaskPrefix::explain_oppose, TaskPrefix::abstract_norm,
    TaskPrefix::score_action,    TaskPrefix::score_norm,     TaskPrefix::score_rationale};

/// Bumped whenever a prefix string changes; recorded in checkpoints.
inline constexpr std::string_view k_prefix_table_version = "1";

std::string_view prefix_text(TaskPrefix prefix) noexcept;
std::string_view prefix_name(TaskPrefix prefix) noexcept;
TaskPrefix rationale_prefix(Stance stance) noexcept;
bool is_score_prefix(TaskPrefix prefix) noexcept;

/// Label verbalizations the scorer is trained to emit.
inline constexpr std::string_view k_support_label = "support";
inline constexpr std::string_view k_oppose_label = "oppose";

/// Model input for a prefix: "<prefix> <input>", whitespace-normalized.
std::string compose_input(TaskPrefix prefix, std::string_view input);
/// Scorer input: the action, followed by the context when one is given.
std::string scorer_input(std::string_view action, std::string_view context);

struct ScoreDistribution {
    double support = 0.5;
    double oppose = 0.5;

    double probability_of(Stance s) const noexcept { return s == Stance::support ? support : oppose; }
    /// Ties resolve to `tie`.
    Stance argmax(Stance tie = Stance::oppose) const noexcept {
        if (support == oppose) return tie;
        return support > oppose ? Stance::support : Stance::oppose;
    }
};

struct NormEmbedding {
    std::vector<double> values;
    std::size_t dimension() const noexcept { return values.size(); }
};

struct GenerationOptions {
    int max_tokens = 128;
    bool sample = false;  // greedy unless set
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

struct Generation {
    std::string text;
    int tokens = 0;
    bool input_truncated = false;
};

/// Text-to-text backend. All tensor-returning methods build a differentiable
/// graph into the model parameters when `trainable()` is true.
class TextToTextModel {
public:
    virtual ~TextToTextModel() = default;

    virtual Generation generate(TaskPrefix prefix, std::string_view input, const GenerationOptions& options) const = 0;

    /// 1x1 sum of teacher-forced per-token log-probabilities of `target`
    /// (including its end-of-sequence terminator).
    virtual autograd::Tensor target_log_likelihood(TaskPrefix prefix, std::string_view input,
                                                   std::string_view target) const = 0;

    /// Decoder states for the teacher-forced sequence [start] + target tokens:
    /// (target_tokens + 1) x hidden_size. Row k+1 is the state after reading
    /// target token k.
    virtual autograd::Tensor decoder_hidden_states(TaskPrefix prefix, std::string_view input,
                                                   std::string_view target) const = 0;

    /// Encoder output states, one row per input token.
    virtual autograd::Tensor encoder_hidden_states(TaskPrefix prefix, std::string_view input) const = 0;

    /// 1x2 full-vocabulary log-probabilities of the support and oppose label
    /// tokens at the first decoding step.
    virtual autograd::Tensor label_log_probs(TaskPrefix prefix, std::string_view input) const = 0;

    /// Number of target tokens scored by target_log_likelihood, terminator included.
    virtual int target_length(std::string_view target) const = 0;

    virtual std::vector<autograd::Tensor> parameters() const = 0;
    virtual bool trainable() const = 0;
    virtual int hidden_size() const = 0;
    virtual int vocab_size() const = 0;
};

// Task-level operations over any backend.

Generation generate(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                    const GenerationOptions& options = {});

double target_log_likelihood(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                             std::string_view target);

/// Mean of decoder states over the teacher-forced reference norm tokens.
autograd::Tensor norm_representation_tensor(const TextToTextModel& model, TaskPrefix prefix,
                                            std::string_view input, std::string_view reference_norm);
NormEmbedding norm_representation(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                                  std::string_view reference_norm);

/// Mean of encoder states over the input; independent of any reference text.
autograd::Tensor input_representation_tensor(const TextToTextModel& model, TaskPrefix prefix,
                                             std::string_view input);
NormEmbedding input_representation(const TextToTextModel& model, TaskPrefix prefix, std::string_view input);

/// Checks the prefix/context pairing: score_action takes no context,
/// score_norm and score_rationale require one.
void check_score_context(TaskPrefix prefix, std::string_view context);

/// Renormalized probability of the two label tokens at the first decoding step.
ScoreDistribution label_score(const TextToTextModel& model, TaskPrefix prefix, std::string_view action,
                              std::string_view context);

NormEmbedding to_embedding(const autograd::Tensor& row);

}  // namespace clarity::model
