#include "clarity/tokenizer.hpp"
#include "clarity/common.hpp"

#include <algorithm>
#include <map>

namespace clarity::model {

namespace {
bool is_word_byte(unsigned char c) noexcept {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
        if (pieces_[i].empty()) throw ContractError("tokenizer: empty piece");
        if (!index_.emplace(pieces_[i], k_first_piece + static_cast<int>(i)).second) {
            throw ContractError("tokenizer: duplicate piece '" + pieces_[i] + "'");
        }
    }
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) {
    const std::string norm = normalize_whitespace(text);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < norm.size()) {
        std::string piece;
        if (norm[i] == ' ') {
            piece.push_back(' ');
            ++i;
            if (i >= norm.size()) break;
        }
        const auto c = static_cast<unsigned char>(norm[i]);
        if (is_word_byte(c)) {
            while (i < norm.size() && is_word_byte(static_cast<unsigned char>(norm[i]))) piece.push_back(norm[i++]);
        } else {
            piece.push_back(norm[i++]);
        }
        out.push_back(std::move(piece));
    }
    return out;
}

Tokenizer Tokenizer::build(std::span<const std::string> texts, std::size_t max_vocab,
                           std::span<const std::string> forced) {
    if (max_vocab < static_cast<std::size_t>(k_first_piece) + forced.size()) {
        throw ConfigError("max_vocab " + std::to_string(max_vocab) + " cannot hold the byte alphabet and " +
                          std::to_string(forced.size()) + " required pieces");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts) {
        for (auto& p : pretokenize(t)) {
            if (p.size() > 1 || is_word_byte(static_cast<unsigned char>(p[0]))) ++counts[p];
        }
    }
    std::vector<std::string> pieces;
    for (const auto& f : forced) {
        if (std::find(pieces.begin(), pieces.end(), f) == pieces.end()) pieces.push_back(f);
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    const std::size_t budget = max_vocab - static_cast<std::size_t>(k_first_piece);
    for (const auto& [piece, n] : ranked) {
        if (pieces.size() >= budget) break;
        if (std::find(pieces.begin(), pieces.end(), piece) == pieces.end()) pieces.push_back(piece);
    }
    return Tokenizer(std::move(pieces));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& piece : pretokenize(text)) {
        auto it = index_.find(piece);
        if (it != index_.end()) {
            ids.push_back(it->second);
            continue;
        }
        for (unsigned char c : piece) ids.push_back(k_first_byte + c);
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id == k_eos) break;
        if (id == k_pad || id == k_bos) continue;
        if (id >= k_first_byte && id < k_first_piece) {
            out.push_back(static_cast<char>(id - k_first_byte));
        } else if (id >= k_first_piece && id < size()) {
            out += pieces_[static_cast<std::size_t>(id - k_first_piece)];
        }
    }
    return sanitize_utf8(out);
}

std::optional<int> Tokenizer::piece_id(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

}  // namespace clarity::model
