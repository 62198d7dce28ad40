#pragma once

#include "clarity/common.hpp"
#include "clarity/corpus.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clarity::distill {

// ---------------------------------------------------------------------------
// Prompt templates. Slots are written as {name}.

inline constexpr std::string_view k_rationale_template_id = "rationale-v1";
inline constexpr std::string_view k_rationale_template =
    "Given the social norm: {norm}, please follow the steps below to arrive at a final answer:\n"
    "Step 1. Consider the moral implications and relationships between the following actions: "
    "Action 1: {supported_action} and Action 2: {opposed_action}.\n"
    "Step 2. Provide both supporting and opposing rationales for each action, considering the context of "
    "the given social norm.";

inline constexpr std::string_view k_claritycot_template_id = "claritycot-v1";
inline constexpr std::string_view k_claritycot_template =
    "Given an action: {action}.\n"
    "To arrive at a final answer, please follow the steps below:\n"
    "Step 1: Identify a social norm that supports the action and provide a rationale for it.\n"
    "Step 2: Identify a social norm that opposes the action and provide a rationale for it.\n"
    "Step 3: Determine which rationale and norm are more reasonable. Consider all factors and predict the "
    "overall valence.\n"
    "Answer choice: a) support b) oppose";

// Baseline prompts for plain LLM comparison runs.
inline constexpr std::string_view k_zero_shot_template =
    "Given an action: {action}. Please evaluate whether this action should be supported or opposed. "
    "Answer choices: a) support, b) oppose.";
inline constexpr std::string_view k_norm_generation_template =
    "Given the following actions: Action 1: {opposed_action}; Action 2: {supported_action}: Identify the "
    "social norms associated with each action and provide a sentence describing the relevant social norm "
    "for each.";

/// Substitutes every `{key}` in `tmpl`. Throws ContractError on an empty value
/// or on a slot without a binding.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& slots);

std::string render_rationale_prompt(std::string_view norm, std::string_view supported_action,
                                    std::string_view opposed_action);
std::string render_claritycot_prompt(std::string_view action);
std::string render_zero_shot_prompt(std::string_view action);
std::string render_norm_generation_prompt(std::string_view supported_action, std::string_view opposed_action);

// ---------------------------------------------------------------------------
// Response parsing

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RationalePair {
    std::string support;
    std::string oppose;
};

/// Splits a distillation response into its supporting and opposing rationale.
/// Labeled sections win; otherwise the first two paragraphs are taken in order.
RationalePair parse_rationales(std::string_view response);

struct ClarityCotVerdict {
    std::string support_norm;
    std::string support_rationale;
    std::string oppose_norm;
    std::string oppose_rationale;
    Stance decision = Stance::oppose;
};

ClarityCotVerdict parse_claritycot(std::string_view response);

// ---------------------------------------------------------------------------
// Clients

struct DecodingParams {
    std::string model = "gpt-3.5-turbo";
    double temperature = 0.0;
    int max_tokens = 512;
};

/// Raised by clients for failures that may succeed on retry.
struct LlmError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::string& prompt, const DecodingParams& params) = 0;
};

/// Calls a user-supplied responder; counts invocations. Thread-safe if the responder is.
class MockLlmClient final : public LlmClient {
public:
    using Responder = std::function<std::string(const std::string&)>;
    explicit MockLlmClient(Responder responder) : responder_(std::move(responder)) {}

    std::string complete(const std::string& prompt, const DecodingParams& params) override;
    std::size_t calls() const noexcept { return calls_.load(); }

private:
    Responder responder_;
    std::atomic<std::size_t> calls_{0};
};

/// Deterministic offline stand-in for a chat model. Recognizes the
/// distillation and ClarityCoT templates and answers with well-formed,
/// slot-derived text.
std::string template_mock_response(const std::string& prompt);

/// Append-only prompt/response cache backed by a line-delimited file of
/// (prompt_hash, prompt, response, timestamp) records. Writes are serialized.
class PromptCache {
public:
    /// Empty path keeps the cache in memory only.
    explicit PromptCache(std::string path = {});

    static std::string key(std::string_view template_id, std::string_view prompt, const DecodingParams& params);

    std::optional<std::string> lookup(const std::string& key) const;
    void store(const std::string& key, const std::string& prompt, const std::string& response);
    std::size_t size() const;
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
    mutable std::mutex mutex_;
    std::map<std::string, std::string> entries_;
};

struct RetryPolicy {
    int max_retries = 3;
    int base_delay_ms = 200;  // doubles after each failed attempt
};

/// Thrown in offline mode when a prompt is absent from the cache.
struct CacheMiss : std::runtime_error {
    explicit CacheMiss(std::string prompt_hash)
        : std::runtime_error("prompt not cached: " + prompt_hash), hash(std::move(prompt_hash)) {}
    std::string hash;
};

/// Cache-first client. With no upstream (offline) every miss raises CacheMiss.
class CachingClient final : public LlmClient {
public:
    CachingClient(PromptCache& cache, LlmClient* upstream, std::string template_id, RetryPolicy retry = {});

    std::string complete(const std::string& prompt, const DecodingParams& params) override;

    std::size_t live_calls() const noexcept { return live_calls_.load(); }
    std::size_t cache_hits() const noexcept { return cache_hits_.load(); }

private:
    PromptCache& cache_;
    LlmClient* upstream_;
    std::string template_id_;
    RetryPolicy retry_;
    std::atomic<std::size_t> live_calls_{0};
    std::atomic<std::size_t> cache_hits_{0};
};

// ---------------------------------------------------------------------------
// Rationale distillation

enum class Provenance : std::uint8_t { llm_distilled, generated, fixture };
std::string_view to_string(Provenance p) noexcept;
Provenance parse_provenance(std::string_view text);

struct RationaleRecord {
    std::string action_id;
    Stance stance = Stance::support;
    std::string rationale_text;
    Provenance provenance = Provenance::llm_distilled;

    bool operator==(const RationaleRecord&) const = default;
};

struct DistillOptions {
    std::size_t parallelism = 4;
    RetryPolicy retry;
    DecodingParams decoding;
};

struct SkippedGroup {
    std::string norm_id;
    std::string reason;
};

struct DistillResult {
    std::vector<RationaleRecord> records;
    std::vector<SkippedGroup> skipped;
    std::vector<std::string> missing_hashes;  // offline cache misses
    std::size_t live_calls = 0;
    std::size_t cache_hits = 0;
};

/// Two records per norm group, in corpus order. `upstream` may be null for a
/// replay-only (offline) run.
DistillResult distill(const corpus::Corpus& corpus, LlmClient* upstream, PromptCache& cache,
                      const DistillOptions& options = {});

std::string to_jsonl(const std::vector<RationaleRecord>& records);
std::vector<RationaleRecord> parse_rationale_records(std::string_view text);
void save_rationales(const std::vector<RationaleRecord>& records, const std::string& path);
std::vector<RationaleRecord> load_rationales(const std::string& path);

/// Seeded random sample of records as a tab-separated sheet for manual bias review.
std::string export_review_sample(const std::vector<RationaleRecord>& records, const corpus::Corpus& corpus,
                                 std::size_t sample_size, std::uint64_t seed);

}  // namespace clarity::distill
