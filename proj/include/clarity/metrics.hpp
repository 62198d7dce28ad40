#pragma once

#include "clarity/corpus.hpp"
#include "clarity/model.hpp"
#include "clarity/pipeline.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace clarity::metrics {

// ---------------------------------------------------------------------------
// Classification

struct ClassStats {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

/// Support is the positive class for the confusion counts.
struct ClassificationResult {
    std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
    double accuracy = 0;
    double macro_f1 = 0;
    ClassStats support;
    ClassStats oppose;

    std::size_t total() const noexcept { return tp + fn + fp + tn; }
};

/// Precision, recall and F1 with 0/0 taken as 0.
ClassificationResult from_confusion(std::size_t tp, std::size_t fn, std::size_t fp, std::size_t tn);
ClassificationResult classification_metrics(const std::vector<Stance>& predictions, const std::vector<Stance>& gold);

// ---------------------------------------------------------------------------
// BLEU: corpus level, single reference, 4-gram, international tokenization,
// exponential smoothing, mixed case.

inline constexpr std::string_view k_bleu_signature = "nrefs:1|case:mixed|eff:no|tok:intl|smooth:exp|version:2.6.0";

std::string intl_tokenize(std::string_view text);

struct BleuStats {
    double score = 0;
    std::array<std::size_t, 4> matches{};
    std::array<std::size_t, 4> totals{};
    std::array<double, 4> precisions{};
    double brevity_penalty = 0;
    std::size_t sys_len = 0;
    std::size_t ref_len = 0;
};

BleuStats corpus_bleu_stats(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);
double corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

// ---------------------------------------------------------------------------
// Embedding similarity

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<double> embed(std::string_view text) const = 0;
    /// Recorded next to every similarity value it produced.
    virtual std::string name() const = 0;
};

/// Signed feature hashing of lowercased, intl-tokenized unigrams.
class HashedBowEmbedder final : public Embedder {
public:
    explicit HashedBowEmbedder(std::size_t dimension = 512) : dimension_(dimension) {}
    std::vector<double> embed(std::string_view text) const override;
    std::string name() const override;

private:
    std::size_t dimension_;
};

/// Mean-pooled encoder states of a text-to-text model under the norm prefix.
class ModelEncoderEmbedder final : public Embedder {
public:
    ModelEncoderEmbedder(const model::TextToTextModel& model, std::string label)
        : model_(model), label_(std::move(label)) {}
    std::vector<double> embed(std::string_view text) const override;
    std::string name() const override { return "encoder-mean:" + label_; }

private:
    const model::TextToTextModel& model_;
    std::string label_;
};

/// Cosine similarity; nullopt when either vector is zero.
std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b);

struct SimilarityResult {
    double mean = 0;
    std::size_t pairs = 0;
    std::size_t skipped = 0;
};

SimilarityResult embedding_similarity(const std::vector<std::string>& hypotheses,
                                      const std::vector<std::string>& references, const Embedder& embedder);

// ---------------------------------------------------------------------------
// Inter-rater agreement over filled-in human-evaluation sheets.
// counts[i][k] = number of raters assigning item i to category k; every row
// must sum to the same rater count.

double fleiss_kappa(const std::vector<std::vector<int>>& counts);
double percentage_agreement(const std::vector<std::vector<int>>& counts);

// ---------------------------------------------------------------------------
// Reports

// Published results of the full-scale model, shown for orientation only.
inline constexpr double k_published_most_accuracy = 0.838;
inline constexpr double k_published_most_macro_f1 = 0.838;
inline constexpr double k_published_most_norm_bleu = 6.113;
inline constexpr double k_published_most_norm_similarity = 0.410;

struct GenerationResult {
    double bleu = 0;
    SimilarityResult similarity;
};

struct SystemRow {
    std::string system;
    std::string mode;
    std::size_t items = 0;
    ClassificationResult classification;
    std::optional<GenerationResult> generation;  // absent when no norms were produced
};

struct Report {
    std::string dataset;
    std::string embedder;
    std::vector<SystemRow> rows;
    std::size_t gold_actions = 0;
    std::vector<std::string> unmatched;        // assessments without a gold action
    std::vector<std::string> uncovered;        // gold actions without an assessment
    std::vector<pipeline::MalformedLine> malformed;
};

/// Joins assessments to gold actions by id, or by action text when the id is empty.
/// Norm quality compares the gold-stance path's norm with the gold norm.
Report build_report(const std::vector<pipeline::Assessment>& assessments, const corpus::Corpus& gold,
                    const Embedder& embedder, std::string dataset = "fixture",
                    std::vector<pipeline::MalformedLine> malformed = {});

std::string render_text(const Report& report);
std::string render_jsonl(const Report& report);

// ---------------------------------------------------------------------------
// Human-evaluation export

struct HumanEvalExport {
    std::string sheet;  // participant-facing, tab-separated
    std::string key;    // candidate-to-system mapping, kept separately
};

/// Samples `sample_size` distinct actions and lists every system's decided-path
/// explanation as a shuffled, letter-labelled candidate.
HumanEvalExport export_human_eval(const std::vector<pipeline::Assessment>& assessments, std::size_t sample_size,
                                  std::uint64_t seed);

}  // namespace clarity::metrics
