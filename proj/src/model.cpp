#include "clarity/model.hpp"

#include <cmath>

namespace clarity::model {

std::string_view prefix_text(TaskPrefix prefix) noexcept {
    switch (prefix) {
        case TaskPrefix::explain_support: return "Explain why to support the action:";
        case TaskPrefix::explain_oppose: return "Explain why to oppose the action:";
        case TaskPrefix::abstract_norm: return "Abstract and generalize rationale as a social norm:";
        case TaskPrefix::score_action: return "Predict the score with action only:";
        case TaskPrefix::score_norm: return "Predict the score with action and norm:";
        case TaskPrefix::score_rationale: return "Predict the score with action and rationale:";
    }
    return "";
}

std::string_view prefix_name(TaskPrefix prefix) noexcept {
    switch (prefix) {
        case TaskPrefix::explain_support: return "explain_support";
        case TaskPrefix::explain_oppose: return "explain_oppose";
        case TaskPrefix::abstract_norm: return "abstract_norm";
        case TaskPrefix::score_action: return "score_action";
        case TaskPrefix::score_norm: return "score_norm";
        case TaskPrefix::score_rationale: return "score_rationale";
    }
    return "";
}

TaskPrefix rationale_prefix(Stance stance) noexcept {
    return stance == Stance::support ? TaskPrefix::explain_support : TaskPrefix::explain_oppose;
}

bool is_score_prefix(TaskPrefix prefix) noexcept {
    return prefix == TaskPrefix::score_action || prefix == TaskPrefix::score_norm ||
           prefix == TaskPrefix::score_rationale;
}

std::string compose_input(TaskPrefix prefix, std::string_view input) {
    std::string s(prefix_text(prefix));
    s += ' ';
    s += input;
    return normalize_whitespace(s);
}

std::string scorer_input(std::string_view action, std::string_view context) {
    std::string s = trim(action);
    const std::string ctx = trim(context);
    if (!ctx.empty()) s += " " + ctx;
    return s;
}

Generation generate(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                    const GenerationOptions& options) {
    if (trim(input).empty()) throw ContractError("generate: empty input");
    if (options.max_tokens < 0) throw ContractError("generate: negative max_tokens");
    return model.generate(prefix, input, options);
}

double target_log_likelihood(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                             std::string_view target) {
    if (trim(target).empty()) throw ContractError("target_log_likelihood: empty target");
    autograd::NoGradGuard no_grad;
    return model.target_log_likelihood(prefix, input, target).item();
}

autograd::Tensor norm_representation_tensor(const TextToTextModel& model, TaskPrefix prefix,
                                            std::string_view input, std::string_view reference_norm) {
    if (trim(reference_norm).empty()) throw ContractError("norm_representation: empty reference norm");
    auto states = model.decoder_hidden_states(prefix, input, reference_norm);
    return autograd::mean_rows(autograd::slice_rows(states, 1, states.rows() - 1));
}

NormEmbedding to_embedding(const autograd::Tensor& row) {
    const auto& v = row.value();
    return NormEmbedding{std::vector<double>(v.data(), v.data() + v.size())};
}

NormEmbedding norm_representation(const TextToTextModel& model, TaskPrefix prefix, std::string_view input,
                                  std::string_view reference_norm) {
    autograd::NoGradGuard no_grad;
    return to_embedding(norm_representation_tensor(model, prefix, input, reference_norm));
}

autograd::Tensor input_representation_tensor(const TextToTextModel& model, TaskPrefix prefix,
                                             std::string_view input) {
    return autograd::mean_rows(model.encoder_hidden_states(prefix, input));
}

NormEmbedding input_representation(const TextToTextModel& model, TaskPrefix prefix, std::string_view input) {
    autograd::NoGradGuard no_grad;
    return to_embedding(input_representation_tensor(model, prefix, input));
}

void check_score_context(TaskPrefix prefix, std::string_view context) {
    if (!is_score_prefix(prefix)) throw ContractError("label_score: not a scoring prefix");
    const bool empty = trim(context).empty();
    if (prefix == TaskPrefix::score_action && !empty) {
        throw ContractError("label_score: action-only prefix given a context");
    }
    if (prefix != TaskPrefix::score_action && empty) {
        throw ContractError("label_score: conditioned prefix requires a norm or rationale context");
    }
}

ScoreDistribution label_score(const TextToTextModel& model, TaskPrefix prefix, std::string_view action,
                              std::string_view context) {
    check_score_context(prefix, context);
    if (trim(action).empty()) throw ContractError("label_score: empty action");
    autograd::NoGradGuard no_grad;
    const auto lp = model.label_log_probs(prefix, scorer_input(action, context)).value();
    const double m = std::max(lp(0, 0), lp(0, 1));
    const double s = std::exp(lp(0, 0) - m);
    const double o = std::exp(lp(0, 1) - m);
    return ScoreDistribution{s / (s + o), o / (s + o)};
}

}  // namespace clarity::model
