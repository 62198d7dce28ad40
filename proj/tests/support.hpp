#pragma once

#include "clarity/corpus.hpp"
#include "clarity/log.hpp"
#include "clarity/tokenizer.hpp"
#include "clarity/training.hpp"
#include "clarity/transformer.hpp"

#include <filesystem>
#include <mutex>
#include <random>
#include <string>
#include <vector>

namespace clarity::testing {

std::string fixture(const std::string& name);

/// Tokenizer over `texts` with the label words forced in.
model::Tokenizer tokenizer_for(const std::vector<std::string>& texts, std::size_t max_vocab = 1024);

/// Desk dimensions with short sequence bounds for fast tests.
model::TransformerConfig small_config(std::uint64_t seed, bool zero_output_head = false);

model::DeskTransformer make_model(const std::vector<std::string>& texts, std::uint64_t seed,
                                  bool zero_output_head = false);

/// Training config for quick overfit runs: large step size, no early validation.
train::TrainConfig fast_config(std::uint64_t seed, int max_steps);

std::string random_words(std::mt19937_64& rng, std::size_t count);
corpus::Corpus random_corpus(std::mt19937_64& rng, std::size_t groups);

/// Two norms whose actions use disjoint object vocabularies.
struct SeparableCorpus {
    corpus::Corpus corpus;
    std::vector<train::RationaleExample> rationale;
    std::vector<train::NormExample> norm;
};
SeparableCorpus separable_corpus(std::size_t groups_per_norm, std::size_t first_name, corpus::Split split);
/// Uniform triplets whose negative comes from the other norm text.
std::vector<corpus::TripletExample> cross_norm_triplets(const corpus::Corpus& c, std::size_t count,
                                                        std::uint64_t seed);

class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

/// Collects log messages for the lifetime of the object.
class LogCapture {
public:
    LogCapture();
    ~LogCapture();
    std::vector<std::string> messages() const;
    bool contains(const std::string& needle) const;

private:
    mutable std::mutex mutex_;
    std::vector<std::string> messages_;
};

}  // namespace clarity::testing
