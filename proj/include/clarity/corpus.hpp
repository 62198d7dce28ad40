#pragma once

#include "clarity/common.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clarity::corpus {

enum class DatasetTag : std::uint8_t {
    moral_stories,
    ethics_justice,
    ethics_deontology,
    ethics_virtue,
    synthetic
};

enum class Split : std::uint8_t { train, test };

enum class EthicsSubset : std::uint8_t { justice, deontology, virtue };

std::string_view to_string(DatasetTag tag) noexcept;
DatasetTag parse_dataset_tag(std::string_view text);
std::string_view to_string(Split split) noexcept;
Split parse_split(std::string_view text);
/// Throws DataError for anything other than justice, deontology or virtue.
EthicsSubset parse_ethics_subset(std::string_view text);

/// Ground-truth norm sentence used for every row of an ETHICS subset.
std::string_view ethics_norm_sentence(EthicsSubset subset) noexcept;

struct ActionRecord {
    std::string id;
    std::string text;
    Stance stance = Stance::support;
    std::string norm_id;
    DatasetTag dataset = DatasetTag::synthetic;

    bool operator==(const ActionRecord&) const = default;
};

struct NormGroup {
    std::string norm_id;
    std::string norm_text;
    std::string supported_action;
    std::string opposed_action;

    bool operator==(const NormGroup&) const = default;
};

struct TripletExample {
    std::string anchor;    // supported action of norm n
    std::string positive;  // opposed action of norm n
    std::string negative;  // any action of a norm n' != n

    bool operator==(const TripletExample&) const = default;
};

/// Immutable table of actions and the norm groups that pair them.
///
/// Construction validates every invariant: each norm group references one
/// supported and one opposed action carrying its norm id, and every action
/// belongs to exactly one group.
class Corpus {
public:
    Corpus() = default;
    Corpus(Split split, std::vector<ActionRecord> actions, std::vector<NormGroup> norms);

    Split split() const noexcept { return split_; }
    const std::vector<ActionRecord>& actions() const noexcept { return actions_; }
    const std::vector<NormGroup>& norms() const noexcept { return norms_; }

    const ActionRecord& action(std::string_view id) const;
    const NormGroup& norm(std::string_view norm_id) const;
    const ActionRecord* find_action(std::string_view id) const noexcept;
    /// Norm text governing the given action.
    const std::string& norm_text_of(std::string_view action_id) const;

    std::size_t count(Stance stance) const noexcept;

    bool operator==(const Corpus& other) const {
        return split_ == other.split_ && actions_ == other.actions_ && norms_ == other.norms_;
    }

private:
    Split split_ = Split::train;
    std::vector<ActionRecord> actions_;
    std::vector<NormGroup> norms_;
    std::unordered_map<std::string, std::size_t> action_index_;
    std::unordered_map<std::string, std::size_t> norm_index_;
};

/// Accumulates norm groups with content-hash ids; duplicates get an occurrence suffix.
class CorpusBuilder {
public:
    explicit CorpusBuilder(Split split = Split::train) : split_(split) {}

    /// Returns the new norm id.
    std::string add_group(std::string_view norm_text, std::string_view supported_text,
                          std::string_view opposed_text, DatasetTag tag);

    std::size_t size() const noexcept { return norms_.size(); }
    Corpus build() &&;

private:
    std::string unique_id(std::string base);

    Split split_;
    std::vector<ActionRecord> actions_;
    std::vector<NormGroup> norms_;
    std::unordered_map<std::string, int> seen_;
};

struct RecordError {
    std::size_t line = 0;  // 1-based source line
    std::string message;
};

struct LoadResult {
    Corpus corpus;
    std::vector<RecordError> errors;
};

/// Line-delimited JSON with `norm`, `moral_action` and `immoral_action` fields.
LoadResult load_moral_stories(const std::string& path, Split split = Split::train);
LoadResult parse_moral_stories(std::string_view text, Split split = Split::train);

/// ETHICS CSV rows. Label 1 rows become supported actions, label 0 rows opposed
/// ones; rows are paired into norm groups in file order.
LoadResult load_ethics(const std::string& path, EthicsSubset subset, Split split = Split::train);
LoadResult parse_ethics(std::string_view text, EthicsSubset subset, Split split = Split::train);

struct TripletOptions {
    // When set, negatives are restricted to supported actions of other norms.
    bool stance_matched_negatives = false;
};

/// Samples `count` triplets: anchor group uniform over norms, negative uniform
/// over all actions governed by a different norm. Deterministic in `seed`.
std::vector<TripletExample> build_triplets(const Corpus& corpus, std::size_t count,
                                           std::uint64_t seed, TripletOptions options = {});

inline constexpr std::string_view k_canonical_header = "clarity-corpus v1";

std::string to_canonical(const Corpus& corpus);
Corpus parse_canonical(std::string_view text);
void save_canonical(const Corpus& corpus, const std::string& path);
Corpus load_canonical(const std::string& path);

}  // namespace clarity::corpus
