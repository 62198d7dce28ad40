#pragma once

#include "clarity/distiller.hpp"
#include "clarity/model.hpp"

#include <json.hpp>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace clarity::pipeline {

enum class Mode : std::uint8_t { action_only, norm_conditioned, rationale_conditioned };
std::string_view to_string(Mode m) noexcept;
Mode parse_mode(std::string_view text);

inline constexpr std::string_view k_system_two_path = "clarityethic";
inline constexpr std::string_view k_system_claritycot = "claritycot";

struct PathResult {
    Stance stance = Stance::support;
    std::string rationale;
    std::string norm;
    double path_score = 0.0;
    bool degenerate = false;  // generation stayed empty after the retry

    bool operator==(const PathResult&) const = default;
};

struct Assessment {
    std::string id;  // gold action id when known
    std::string system{k_system_two_path};
    std::string action;
    PathResult support_path;
    PathResult oppose_path;
    model::ScoreDistribution action_only;
    Mode mode = Mode::action_only;
    Stance decision = Stance::oppose;
    bool fallback = false;  // decision taken from action_only because a path was degenerate

    const PathResult& path(Stance s) const noexcept { return s == Stance::support ? support_path : oppose_path; }
};

bool operator==(const Assessment& a, const Assessment& b);

/// The three Stage-1/Stage-2 models. Not owned.
struct Models {
    const model::TextToTextModel* rationale_gen = nullptr;
    const model::TextToTextModel* norm_gen = nullptr;
    const model::TextToTextModel* scorer = nullptr;
};

struct AssessOptions {
    Mode mode = Mode::action_only;
    model::GenerationOptions decoding;
    Stance tie_break = Stance::oppose;
};

/// Decision rule shared by every producer of Assessments.
Stance decide(const Assessment& a, Stance tie_break = Stance::oppose);

Assessment assess(std::string_view action, const Models& models, const AssessOptions& options = {});

struct BatchItem {
    std::optional<Assessment> assessment;
    std::string error;  // set when assessment is empty
};

/// Order-preserving; per-item failures are recorded instead of thrown.
/// `ids`, when nonempty, must match `actions` in length.
std::vector<BatchItem> assess_batch(const std::vector<std::string>& actions, const Models& models,
                                    const AssessOptions& options = {}, const std::vector<std::string>& ids = {},
                                    std::size_t parallelism = 1);

/// Parse failure carrying the model response verbatim.
struct ClarityCotError : distill::ParseError {
    ClarityCotError(const std::string& message, std::string raw)
        : distill::ParseError(message), raw_response(std::move(raw)) {}
    std::string raw_response;
};

Assessment claritycot_assess(std::string_view action, distill::LlmClient& client,
                             const distill::DecodingParams& params = {});

// Interchange format: one JSON object per line.
void to_json(nlohmann::json& j, const Assessment& a);
Assessment assessment_from_json(const nlohmann::json& j);
std::string to_jsonl(const std::vector<Assessment>& assessments);

struct MalformedLine {
    std::size_t line = 0;
    std::string message;
};

struct ParsedAssessments {
    std::vector<Assessment> assessments;
    std::vector<MalformedLine> malformed;
};

ParsedAssessments parse_assessments(std::string_view text);

}  // namespace clarity::pipeline
