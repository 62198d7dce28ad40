#include "clarity/pipeline.hpp"
#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <mutex>

using namespace clarity;
using namespace clarity::pipeline;
using autograd::Matrix;
using autograd::Tensor;
using model::TaskPrefix;

namespace {

struct Call {
    TaskPrefix prefix;
    std::string input;
};

// Scripted backend: generators echo their stance, the scorer reads keywords.
class StubModel final : public model::TextToTextModel {
public:
    bool empty_support = false;
    bool empty_norms = false;

    model::Generation generate(TaskPrefix prefix, std::string_view input,
                               const model::GenerationOptions&) const override {
        record(prefix, input);
        std::string text;
        if (prefix == TaskPrefix::explain_support) text = empty_support ? "" : "pro " + std::string(input);
        if (prefix == TaskPrefix::explain_oppose) text = "con " + std::string(input);
        if (prefix == TaskPrefix::abstract_norm) text = empty_norms ? "" : "norm of " + std::string(input);
        return {text, 1, false};
    }
    Tensor target_log_likelihood(TaskPrefix, std::string_view, std::string_view) const override {
        return Tensor::scalar(0);
    }
    Tensor decoder_hidden_states(TaskPrefix, std::string_view, std::string_view) const override { return {}; }
    Tensor encoder_hidden_states(TaskPrefix, std::string_view) const override { return {}; }
    Tensor label_log_probs(TaskPrefix prefix, std::string_view input) const override {
        record(prefix, input);
        double support = 0.45;
        const std::string s(input);
        if (prefix == TaskPrefix::score_norm) support = s.find("norm of pro") != std::string::npos ? 0.8 : 0.3;
        if (prefix == TaskPrefix::score_rationale) support = s.find(" pro ") != std::string::npos ? 0.9 : 0.35;
        Matrix m(1, 2);
        m << std::log(support), std::log(1 - support);
        return Tensor(m);
    }
    int target_length(std::string_view) const override { return 1; }
    std::vector<Tensor> parameters() const override { return {}; }
    bool trainable() const override { return false; }
    int hidden_size() const override { return 1; }
    int vocab_size() const override { return 2; }

    std::vector<Call> calls() const {
        std::lock_guard lock(mutex_);
        return calls_;
    }

private:
    void record(TaskPrefix p, std::string_view input) const {
        std::lock_guard lock(mutex_);
        calls_.push_back({p, std::string(input)});
    }
    mutable std::mutex mutex_;
    mutable std::vector<Call> calls_;
};

Models models_of(const StubModel& r, const StubModel& n, const StubModel& s) { return {&r, &n, &s}; }

AssessOptions with_mode(Mode m) {
    AssessOptions o;
    o.mode = m;
    return o;
}

const std::string k_cot_response =
    "Step 1: Norm: Honesty matters. Rationale: telling the truth builds trust.\n"
    "Step 2: Norm: Loyalty matters. Rationale: it could hurt a friend.\n"
    "Step 3: The second is more reasonable.\n"
    "Answer: b) oppose";

}  // namespace

TEST_CASE("decision rule and tie break") {
    Assessment a;
    a.mode = Mode::rationale_conditioned;
    a.support_path.path_score = 0.7;
    a.oppose_path.path_score = 0.6;
    CHECK(decide(a) == Stance::support);
    a.oppose_path.path_score = 0.7;
    CHECK(decide(a) == Stance::oppose);
    CHECK(decide(a, Stance::support) == Stance::support);
    a.fallback = true;
    a.action_only = {0.9, 0.1};
    CHECK(decide(a) == Stance::support);
    a.mode = Mode::action_only;
    a.fallback = false;
    a.action_only = {0.5, 0.5};
    CHECK(decide(a) == Stance::oppose);
}

TEST_CASE("each path routes through the right prefixes") {
    StubModel r, n, s;
    const auto a = assess("  Ann helps   ", models_of(r, n, s), with_mode(Mode::rationale_conditioned));
    CHECK(a.action == "Ann helps");
    CHECK(a.support_path.rationale == "pro Ann helps");
    CHECK(a.oppose_path.rationale == "con Ann helps");
    CHECK(a.support_path.norm == "norm of pro Ann helps");
    CHECK(a.oppose_path.norm == "norm of con Ann helps");

    const auto rc = r.calls();
    REQUIRE(rc.size() == 2);
    CHECK(rc[0].prefix == TaskPrefix::explain_support);
    CHECK(rc[1].prefix == TaskPrefix::explain_oppose);
    for (const auto& c : n.calls()) CHECK(c.prefix == TaskPrefix::abstract_norm);
    const auto sc = s.calls();
    REQUIRE(sc.size() == 3);
    CHECK(sc[0].prefix == TaskPrefix::score_action);
    CHECK(sc[0].input == "Ann helps");
    CHECK(sc[1].prefix == TaskPrefix::score_rationale);
    CHECK(sc[1].input == "Ann helps pro Ann helps");

    CHECK(a.support_path.path_score == doctest::Approx(0.9));
    CHECK(a.oppose_path.path_score == doctest::Approx(0.65));
    CHECK(a.decision == Stance::support);
}

TEST_CASE("modes choose the scorer context") {
    StubModel r, n, s;
    const auto norm = assess("Ann helps", models_of(r, n, s), with_mode(Mode::norm_conditioned));
    CHECK(norm.support_path.path_score == doctest::Approx(0.8));
    CHECK(norm.oppose_path.path_score == doctest::Approx(0.7));
    CHECK(norm.decision == Stance::support);
    CHECK(s.calls()[1].prefix == TaskPrefix::score_norm);

    StubModel s2;
    const auto only = assess("Ann helps", models_of(r, n, s2), with_mode(Mode::action_only));
    CHECK(only.decision == Stance::oppose);
    CHECK(only.support_path.path_score == doctest::Approx(0.45));
    CHECK(s2.calls().size() == 1);
    CHECK(only.support_path.norm == "norm of pro Ann helps");
}

TEST_CASE("action-only decision ignores the generators") {
    StubModel r, n, s;
    StubModel r2, n2, s2;
    r2.empty_support = true;
    n2.empty_norms = true;
    const auto a = assess("Ann helps", models_of(r, n, s), with_mode(Mode::action_only));
    const auto b = assess("Ann helps", models_of(r2, n2, s2), with_mode(Mode::action_only));
    CHECK(a.decision == b.decision);
    CHECK(a.action_only.support == b.action_only.support);
    CHECK_FALSE(b.fallback);
}

TEST_CASE("degenerate paths fall back to the action-only scores") {
    StubModel r, n, s;
    r.empty_support = true;
    testing::LogCapture capture;
    const auto a = assess("Ann helps", models_of(r, n, s), with_mode(Mode::rationale_conditioned));
    CHECK(a.support_path.degenerate);
    CHECK(a.support_path.rationale.empty());
    CHECK(a.fallback);
    CHECK(a.decision == Stance::oppose);
    CHECK(a.support_path.path_score == doctest::Approx(0.45));
    CHECK(capture.contains("degenerate support path"));
    // One retry for the empty generation.
    int support_calls = 0;
    for (const auto& c : r.calls()) support_calls += c.prefix == TaskPrefix::explain_support;
    CHECK(support_calls == 2);
}

TEST_CASE("assessment requires models and an action") {
    StubModel r, n, s;
    CHECK_THROWS_AS(assess("   ", models_of(r, n, s)), ContractError);
    CHECK_THROWS_AS(assess("x", Models{&r, nullptr, &s}), ContractError);
}

TEST_CASE("batch equals per-item and records failures") {
    StubModel r, n, s;
    const std::vector<std::string> actions{"Ann helps", "", "Bob lies", "Cy waits"};
    const std::vector<std::string> ids{"a", "b", "c", "d"};
    const auto opts = with_mode(Mode::rationale_conditioned);
    for (std::size_t parallel : {1u, 3u}) {
        const auto batch = assess_batch(actions, models_of(r, n, s), opts, ids, parallel);
        REQUIRE(batch.size() == 4);
        CHECK_FALSE(batch[1].assessment);
        CHECK(batch[1].error.find("empty action") != std::string::npos);
        for (std::size_t i : {0u, 2u, 3u}) {
            REQUIRE(batch[i].assessment);
            auto single = assess(actions[i], models_of(r, n, s), opts);
            single.id = ids[i];
            CHECK(*batch[i].assessment == single);
        }
    }
    CHECK_THROWS_AS(assess_batch(actions, models_of(r, n, s), opts, {"a"}), ContractError);
}

TEST_CASE("assessments are deterministic with a real model") {
    const auto s = testing::separable_corpus(1, 0, corpus::Split::train);
    std::vector<std::string> texts;
    for (const auto& a : s.corpus.actions()) texts.push_back(a.text);
    const auto m = testing::make_model(texts, 31);
    AssessOptions o = with_mode(Mode::norm_conditioned);
    o.decoding.max_tokens = 8;
    const Models models{&m, &m, &m};
    const auto a = assess("Ann keeps the truth.", models, o);
    const auto b = assess("Ann keeps the truth.", models, o);
    CHECK(a == b);
    CHECK(to_jsonl({a}) == to_jsonl({b}));
}

TEST_CASE("claritycot with a mock client") {
    std::string seen;
    distill::MockLlmClient mock([&](const std::string& prompt) {
        seen = prompt;
        return k_cot_response;
    });
    const auto a = claritycot_assess(" Ann lies ", mock);
    CHECK(seen == distill::render_claritycot_prompt("Ann lies"));
    CHECK(a.system == k_system_claritycot);
    CHECK(a.decision == Stance::oppose);
    CHECK(decide(a) == Stance::oppose);
    CHECK(a.support_path.norm == "Honesty matters.");
    CHECK(a.oppose_path.rationale == "it could hurt a friend.");

    std::string support_response = k_cot_response;
    support_response.replace(support_response.find("b) oppose"), 9, "a) support");
    distill::MockLlmClient yes([&](const std::string&) { return support_response; });
    CHECK(claritycot_assess("Ann lies", yes).decision == Stance::support);
}

TEST_CASE("claritycot parse failures keep the raw response") {
    distill::MockLlmClient mock([](const std::string&) { return std::string("I cannot decide."); });
    try {
        claritycot_assess("Ann lies", mock);
        FAIL("expected ClarityCotError");
    } catch (const ClarityCotError& e) {
        CHECK(e.raw_response == "I cannot decide.");
    }
}

TEST_CASE("claritycot replays offline from the cache") {
    testing::TempDir dir;
    distill::MockLlmClient mock([](const std::string&) { return k_cot_response; });
    {
        distill::PromptCache cache(dir.file("cache.jsonl"));
        distill::CachingClient online(cache, &mock, std::string(distill::k_claritycot_template_id));
        claritycot_assess("Ann lies", online);
    }
    distill::PromptCache cache(dir.file("cache.jsonl"));
    distill::CachingClient offline(cache, nullptr, std::string(distill::k_claritycot_template_id));
    CHECK(claritycot_assess("Ann lies", offline).decision == Stance::oppose);
    CHECK(mock.calls() == 1);
    CHECK_THROWS_AS(claritycot_assess("Bob lies", offline), distill::CacheMiss);
}

TEST_CASE("json round trip") {
    StubModel r, n, s;
    auto a = assess("Ann \"helps\" 判断", models_of(r, n, s), with_mode(Mode::norm_conditioned));
    a.id = "7";
    const auto parsed = parse_assessments(to_jsonl({a, a}));
    REQUIRE(parsed.assessments.size() == 2);
    CHECK(parsed.malformed.empty());
    CHECK(parsed.assessments[0] == a);
    const nlohmann::json j = a;
    CHECK(j.at("support").at("score").get<double>() == a.support_path.path_score);
}

TEST_CASE("malformed assessment lines are reported with line numbers") {
    StubModel r, n, s;
    auto good = nlohmann::json(assess("Ann helps", models_of(r, n, s)));
    auto bad_stance = good;
    bad_stance["decision"] = "maybe";
    auto bad_score = good;
    bad_score["support"]["score"] = 1.5;
    const std::string text = good.dump() + "\n{not json\n" + bad_stance.dump() + "\n\n" + bad_score.dump() + "\n";
    const auto parsed = parse_assessments(text);
    CHECK(parsed.assessments.size() == 1);
    REQUIRE(parsed.malformed.size() == 3);
    CHECK(parsed.malformed[0].line == 2);
    CHECK(parsed.malformed[1].line == 3);
    CHECK(parsed.malformed[2].line == 5);
    CHECK_THROWS_AS(parse_mode("both"), ConfigError);
}

TEST_CASE("trained models assess four actions correctly in every mode") {
    const auto s = testing::separable_corpus(1, 0, corpus::Split::train);
    std::vector<std::string> texts;
    for (const auto& a : s.corpus.actions()) texts.push_back(a.text);
    for (const auto& r : s.rationale) texts.push_back(r.rationale);
    for (const auto& n : s.norm) texts.push_back(n.norm);
    std::vector<train::ScorerExample> scorer;
    for (std::size_t i = 0; i < s.rationale.size(); ++i) {
        scorer.push_back({s.rationale[i].action, s.rationale[i].stance, s.norm[i].norm, s.rationale[i].rationale});
    }
    // Scorer contexts also include the counterfactual path outputs it sees at assessment time.
    for (std::size_t i = 0; i < s.rationale.size(); ++i) {
        const std::size_t partner = i ^ 1u;
        scorer.push_back({s.rationale[i].action, s.rationale[i].stance, s.norm[partner].norm,
                          s.rationale[partner].rationale});
    }
    const train::TaskData data{s.rationale, s.norm, scorer};
    auto rg = testing::make_model(texts, 41);
    auto ng = testing::make_model(texts, 42);
    auto sc = testing::make_model(texts, 43);
    train::pretrain(train::Task::rationale, rg, data, testing::fast_config(41, 200));
    train::pretrain(train::Task::norm, ng, data, testing::fast_config(42, 200));
    train::pretrain(train::Task::scorer, sc, data, testing::fast_config(43, 200));

    for (Mode mode : {Mode::action_only, Mode::norm_conditioned, Mode::rationale_conditioned}) {
        AssessOptions o = with_mode(mode);
        o.decoding.max_tokens = 24;
        for (const auto& act : s.corpus.actions()) {
            const auto a = assess(act.text, Models{&rg, &ng, &sc}, o);
            CAPTURE(to_string(mode));
            CAPTURE(act.text);
            CHECK_FALSE(a.fallback);
            CHECK(a.decision == act.stance);
        }
    }
}
