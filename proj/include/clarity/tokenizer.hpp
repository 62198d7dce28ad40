#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clarity::model {

/// Reversible word-piece tokenizer with byte fallback.
///
/// Text is whitespace-normalized, then split into pieces: an optional single
/// leading space followed by either a run of word characters (ASCII
/// alphanumerics and all non-ASCII bytes) or one other character. Pieces not in
/// the vocabulary are emitted as raw byte tokens, so every string is encodable
/// and decode(encode(s)) == normalize_whitespace(s).
class Tokenizer {
public:
    static constexpr int k_pad = 0;
    static constexpr int k_bos = 1;
    static constexpr int k_eos = 2;
    static constexpr int k_first_byte = 3;
    static constexpr int k_first_piece = k_first_byte + 256;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> pieces);

    /// Most frequent pieces of `texts` (ties broken lexicographically), after
    /// `forced`, up to `max_vocab` ids in total.
    static Tokenizer build(std::span<const std::string> texts, std::size_t max_vocab,
                           std::span<const std::string> forced = {});

    static std::vector<std::string> pretokenize(std::string_view text);

    std::vector<int> encode(std::string_view text) const;
    /// Skips pad/bos and stops at the first eos.
    /// Ill-formed byte sequences decode to U+FFFD.
    std::string decode(std::span<const int> ids) const;

    int size() const noexcept { return k_first_piece + static_cast<int>(pieces_.size()); }
    std::optional<int> piece_id(std::string_view piece) const;
    const std::vector<std::string>& pieces() const noexcept { return pieces_; }

    bool operator==(const Tokenizer& other) const { return pieces_ == other.pieces_; }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace clarity::model
