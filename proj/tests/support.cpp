#include "support.hpp"

#include "clarity/model.hpp"

#include <algorithm>
#include <atomic>
#include <unistd.h>

namespace clarity::testing {

namespace fs = std::filesystem;

std::string fixture(const std::string& name) { return (fs::path(CLARITY_FIXTURES) / name).string(); }

model::Tokenizer tokenizer_for(const std::vector<std::string>& texts, std::size_t max_vocab) {
    std::vector<std::string> all = texts;
    for (auto p : model::k_all_prefixes) all.emplace_back(model::prefix_text(p));
    const std::vector<std::string> forced{std::string(model::k_support_label), std::string(model::k_oppose_label)};
    return model::Tokenizer::build(all, max_vocab, forced);
}

model::TransformerConfig small_config(std::uint64_t seed, bool zero_output_head) {
    model::TransformerConfig c;
    c.max_input_tokens = 128;
    c.max_target_tokens = 64;
    c.seed = seed;
    c.zero_output_head = zero_output_head;
    return c;
}

model::DeskTransformer make_model(const std::vector<std::string>& texts, std::uint64_t seed, bool zero_output_head) {
    return model::DeskTransformer(small_config(seed, zero_output_head), tokenizer_for(texts));
}

train::TrainConfig fast_config(std::uint64_t seed, int max_steps) {
    train::TrainConfig c;
    c.learning_rate = 3e-3;
    c.batch_size = 8;
    c.max_input_tokens = 128;
    c.max_steps = max_steps;
    c.validation_fraction = 0;
    c.validation_interval = max_steps + 1;
    c.seed = seed;
    return c;
}

std::string random_words(std::mt19937_64& rng, std::size_t count) {
    static const std::vector<std::string> words = {
        "the", "a", "friend", "neighbor", "money", "car", "dog", "helps", "steals", "lies", "shares", "keeps",
        "breaks", "gives", "takes", "quietly", "loudly", "café", "naïve", "判断", "garden", "promise", "truth"};
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    std::string out;
    for (std::size_t i = 0; i < count; ++i) {
        if (i) out += ' ';
        out += words[pick(rng)];
    }
    return out;
}

corpus::Corpus random_corpus(std::mt19937_64& rng, std::size_t groups) {
    corpus::CorpusBuilder b;
    std::uniform_int_distribution<std::size_t> len(1, 6);
    for (std::size_t g = 0; g < groups; ++g) {
        b.add_group(random_words(rng, len(rng)) + " " + std::to_string(g), random_words(rng, len(rng)),
                    random_words(rng, len(rng)), corpus::DatasetTag::synthetic);
    }
    return std::move(b).build();
}

namespace {

const std::vector<std::string> k_names = {"Ann", "Ben", "Cal", "Dee", "Eve", "Fay", "Gus", "Hal", "Ivy", "Jon",
                                          "Kim", "Lou", "Max", "Ned", "Oda", "Pam", "Quy", "Ray", "Sue", "Tim",
                                          "Uma", "Val", "Wes", "Xia", "Yan", "Zed"};

struct SyntheticNorm {
    std::string text;
    std::string keyword;
    std::vector<std::string> objects;
};

const std::vector<SyntheticNorm> k_norms = {
    {"Honesty matters.", "honesty", {"truth", "secret", "promise", "debt"}},
    {"Nature matters.", "nature", {"garden", "river", "forest", "beach"}},
};

// Long shared stance vocabulary with a single norm-specific word at the end.
const std::string k_support_rationale = "this choice is good fair kind decent proper and right for ";
const std::string k_oppose_rationale = "this choice is bad unfair cruel rude improper and wrong for ";

}  // namespace

SeparableCorpus separable_corpus(std::size_t groups_per_norm, std::size_t first_name, corpus::Split split) {
    SeparableCorpus out;
    corpus::CorpusBuilder b(split);
    for (const auto& norm : k_norms) {
        for (std::size_t i = 0; i < groups_per_norm; ++i) {
            const std::string& name = k_names[(first_name + i) % k_names.size()];
            const std::string& object = norm.objects[i % norm.objects.size()];
            const std::string support = name + " keeps the " + object + ".";
            const std::string oppose = name + " breaks the " + object + ".";
            b.add_group(norm.text, support, oppose, corpus::DatasetTag::synthetic);
            const std::string r_s = k_support_rationale + norm.keyword;
            const std::string r_o = k_oppose_rationale + norm.keyword;
            out.rationale.push_back(train::make_rationale_example(support, Stance::support, r_s));
            out.rationale.push_back(train::make_rationale_example(oppose, Stance::oppose, r_o));
            out.norm.push_back({r_s, norm.text});
            out.norm.push_back({r_o, norm.text});
        }
    }
    out.corpus = std::move(b).build();
    return out;
}

std::vector<corpus::TripletExample> cross_norm_triplets(const corpus::Corpus& c, std::size_t count,
                                                        std::uint64_t seed) {
    std::vector<corpus::TripletExample> out;
    std::uint64_t round = 0;
    while (out.size() < count) {
        for (const auto& t : corpus::build_triplets(c, count, seed + round++)) {
            if (c.norm_text_of(t.anchor) != c.norm_text_of(t.negative) && out.size() < count) out.push_back(t);
        }
    }
    return out;
}

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("clarity-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

LogCapture::LogCapture() {
    log::set_sink([this](log::Level, std::string_view m) {
        std::lock_guard lock(mutex_);
        messages_.emplace_back(m);
    });
}

LogCapture::~LogCapture() { log::reset_sink(); }

std::vector<std::string> LogCapture::messages() const {
    std::lock_guard lock(mutex_);
    return messages_;
}

bool LogCapture::contains(const std::string& needle) const {
    std::lock_guard lock(mutex_);
    return std::any_of(messages_.begin(), messages_.end(),
                       [&](const std::string& m) { return m.find(needle) != std::string::npos; });
}

}  // namespace clarity::testing
