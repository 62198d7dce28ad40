#include "clarity/pipeline.hpp"
#include "clarity/log.hpp"

#include <atomic>
#include <thread>

namespace clarity::pipeline {

using nlohmann::json;

std::string_view to_string(Mode m) noexcept {
    switch (m) {
        case Mode::action_only: return "action_only";
        case Mode::norm_conditioned: return "norm_conditioned";
        case Mode::rationale_conditioned: return "rationale_conditioned";
    }
    return "";
}

Mode parse_mode(std::string_view text) {
    if (text == "action_only") return Mode::action_only;
    if (text == "norm_conditioned") return Mode::norm_conditioned;
    if (text == "rationale_conditioned") return Mode::rationale_conditioned;
    throw ConfigError("unknown pipeline mode '" + std::string(text) + "'");
}

bool operator==(const Assessment& a, const Assessment& b) {
    return a.id == b.id && a.system == b.system && a.action == b.action && a.support_path == b.support_path &&
           a.oppose_path == b.oppose_path && a.action_only.support == b.action_only.support &&
           a.action_only.oppose == b.action_only.oppose && a.mode == b.mode && a.decision == b.decision &&
           a.fallback == b.fallback;
}

Stance decide(const Assessment& a, Stance tie_break) {
    if (a.mode == Mode::action_only || a.fallback) return a.action_only.argmax(tie_break);
    const double s = a.support_path.path_score;
    const double o = a.oppose_path.path_score;
    if (s == o) return tie_break;
    return s > o ? Stance::support : Stance::oppose;
}

namespace {

/// Greedy generation with one retry at double the budget when the output is empty.
std::string generate_nonempty(const model::TextToTextModel& m, model::TaskPrefix prefix, std::string_view input,
                              const model::GenerationOptions& decoding) {
    auto out = model::generate(m, prefix, input, decoding);
    if (!trim(out.text).empty()) return out.text;
    model::GenerationOptions retry = decoding;
    retry.max_tokens = std::max(1, decoding.max_tokens * 2);
    out = model::generate(m, prefix, input, retry);
    return trim(out.text);
}

PathResult run_path(Stance stance, std::string_view action, const Models& models, const AssessOptions& options,
                    const model::ScoreDistribution& action_only) {
    PathResult p;
    p.stance = stance;
    p.rationale = generate_nonempty(*models.rationale_gen, model::rationale_prefix(stance), action, options.decoding);
    if (!p.rationale.empty()) {
        p.norm = generate_nonempty(*models.norm_gen, model::TaskPrefix::abstract_norm, p.rationale, options.decoding);
    }
    p.degenerate = p.rationale.empty() || p.norm.empty();
    if (p.degenerate) {
        log::warn("degenerate " + std::string(to_string(stance)) + " path for action: " + std::string(action));
    }

    switch (options.mode) {
        case Mode::action_only: p.path_score = action_only.probability_of(stance); break;
        case Mode::norm_conditioned:
            p.path_score = p.degenerate ? action_only.probability_of(stance)
                                        : model::label_score(*models.scorer, model::TaskPrefix::score_norm, action,
                                                             p.norm)
                                              .probability_of(stance);
            break;
        case Mode::rationale_conditioned:
            p.path_score = p.degenerate ? action_only.probability_of(stance)
                                        : model::label_score(*models.scorer, model::TaskPrefix::score_rationale,
                                                             action, p.rationale)
                                              .probability_of(stance);
            break;
    }
    return p;
}

}  // namespace

Assessment assess(std::string_view action, const Models& models, const AssessOptions& options) {
    if (!models.rationale_gen || !models.norm_gen || !models.scorer) {
        throw ContractError("assess: all three models are required");
    }
    if (trim(action).empty()) throw ContractError("assess: empty action");
    Assessment a;
    a.action = trim(action);
    a.mode = options.mode;
    a.action_only = model::label_score(*models.scorer, model::TaskPrefix::score_action, a.action, "");
    a.support_path = run_path(Stance::support, a.action, models, options, a.action_only);
    a.oppose_path = run_path(Stance::oppose, a.action, models, options, a.action_only);
    a.fallback = a.mode != Mode::action_only && (a.support_path.degenerate || a.oppose_path.degenerate);
    a.decision = decide(a, options.tie_break);
    return a;
}

std::vector<BatchItem> assess_batch(const std::vector<std::string>& actions, const Models& models,
                                    const AssessOptions& options, const std::vector<std::string>& ids,
                                    std::size_t parallelism) {
    if (!ids.empty() && ids.size() != actions.size()) throw ContractError("assess_batch: ids/actions length mismatch");
    std::vector<BatchItem> out(actions.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < actions.size(); i = next++) {
            try {
                Assessment a = assess(actions[i], models, options);
                if (!ids.empty()) a.id = ids[i];
                out[i].assessment = std::move(a);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(parallelism, 1), std::max<std::size_t>(actions.size(), 1));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return out;
}

Assessment claritycot_assess(std::string_view action, distill::LlmClient& client, const distill::DecodingParams& params) {
    const std::string prompt = distill::render_claritycot_prompt(trim(action));
    const std::string response = client.complete(prompt, params);
    distill::ClarityCotVerdict v;
    try {
        v = distill::parse_claritycot(response);
    } catch (const distill::ParseError& e) {
        throw ClarityCotError(e.what(), response);
    }
    Assessment a;
    a.system = std::string(k_system_claritycot);
    a.action = trim(action);
    a.mode = Mode::rationale_conditioned;
    a.support_path = {Stance::support, v.support_rationale, v.support_norm, v.decision == Stance::support ? 1.0 : 0.0,
                      false};
    a.oppose_path = {Stance::oppose, v.oppose_rationale, v.oppose_norm, v.decision == Stance::oppose ? 1.0 : 0.0, false};
    a.action_only = v.decision == Stance::support ? model::ScoreDistribution{1.0, 0.0} : model::ScoreDistribution{0.0, 1.0};
    a.decision = v.decision;
    return a;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json path_json(const PathResult& p) {
    return json{{"rationale", p.rationale}, {"norm", p.norm}, {"score", p.path_score}, {"degenerate", p.degenerate}};
}

PathResult path_from_json(const json& j, Stance stance) {
    PathResult p;
    p.stance = stance;
    p.rationale = j.at("rationale").get<std::string>();
    p.norm = j.at("norm").get<std::string>();
    p.path_score = j.at("score").get<double>();
    p.degenerate = j.value("degenerate", false);
    if (!(p.path_score >= 0.0 && p.path_score <= 1.0)) throw DataError("path score outside [0, 1]");
    return p;
}

Stance stance_field(const json& j, const char* key) {
    auto s = parse_stance(j.at(key).get<std::string>());
    if (!s) throw DataError(std::string("invalid stance in field '") + key + "'");
    return *s;
}

}  // namespace

void to_json(json& j, const Assessment& a) {
    j = json{{"id", a.id},
             {"system", a.system},
             {"action", a.action},
             {"mode", std::string(to_string(a.mode))},
             {"decision", std::string(to_string(a.decision))},
             {"support", path_json(a.support_path)},
             {"oppose", path_json(a.oppose_path)},
             {"action_only", {{"support", a.action_only.support}, {"oppose", a.action_only.oppose}}},
             {"fallback", a.fallback}};
}

Assessment assessment_from_json(const json& j) {
    Assessment a;
    a.id = j.value("id", std::string());
    a.system = j.value("system", std::string(k_system_two_path));
    a.action = j.at("action").get<std::string>();
    a.mode = parse_mode(j.at("mode").get<std::string>());
    a.decision = stance_field(j, "decision");
    a.support_path = path_from_json(j.at("support"), Stance::support);
    a.oppose_path = path_from_json(j.at("oppose"), Stance::oppose);
    a.action_only.support = j.at("action_only").at("support").get<double>();
    a.action_only.oppose = j.at("action_only").at("oppose").get<double>();
    a.fallback = j.value("fallback", false);
    if (trim(a.action).empty()) throw DataError("empty action");
    return a;
}

std::string to_jsonl(const std::vector<Assessment>& assessments) {
    std::string out;
    for (const auto& a : assessments) {
        out += json(a).dump();
        out += '\n';
    }
    return out;
}

ParsedAssessments parse_assessments(std::string_view text) {
    ParsedAssessments out;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        try {
            out.assessments.push_back(assessment_from_json(json::parse(lines[i])));
        } catch (const std::exception& e) {
            out.malformed.push_back({i + 1, e.what()});
        }
    }
    return out;
}

}  // namespace clarity::pipeline
