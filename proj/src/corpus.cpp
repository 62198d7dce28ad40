#include "clarity/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <random>
#include <sstream>

namespace clarity::corpus {

using nlohmann::json;

std::string_view to_string(DatasetTag tag) noexcept {
    switch (tag) {
        case DatasetTag::moral_stories: return "moral_stories";
        case DatasetTag::ethics_justice: return "ethics_justice";
        case DatasetTag::ethics_deontology: return "ethics_deontology";
        case DatasetTag::ethics_virtue: return "ethics_virtue";
        case DatasetTag::synthetic: return "synthetic";
    }
    return "synthetic";
}

DatasetTag parse_dataset_tag(std::string_view text) {
    for (auto tag : {DatasetTag::moral_stories, DatasetTag::ethics_justice, DatasetTag::ethics_deontology,
                     DatasetTag::ethics_virtue, DatasetTag::synthetic}) {
        if (to_string(tag) == text) return tag;
    }
    throw DataError("unknown dataset tag: " + std::string(text));
}

std::string_view to_string(Split split) noexcept { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "test") return Split::test;
    throw DataError("unknown split: " + std::string(text));
}

EthicsSubset parse_ethics_subset(std::string_view text) {
    if (text == "justice") return EthicsSubset::justice;
    if (text == "deontology") return EthicsSubset::deontology;
    if (text == "virtue") return EthicsSubset::virtue;
    throw DataError("unknown ETHICS subset: " + std::string(text));
}

std::string_view ethics_norm_sentence(EthicsSubset subset) noexcept {
    switch (subset) {
        case EthicsSubset::justice: return "Refer to the justice: giving people what they are due.";
        case EthicsSubset::virtue: return "Refer to the virtue: acting as a virtuous person would act.";
        case EthicsSubset::deontology: return "Refer to the deontology";
    }
    return "";
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(Split split, std::vector<ActionRecord> actions, std::vector<NormGroup> norms)
    : split_(split), actions_(std::move(actions)), norms_(std::move(norms)) {
    for (std::size_t i = 0; i < actions_.size(); ++i) {
        const auto& a = actions_[i];
        if (a.id.empty()) throw DataError("action with empty id");
        if (trim(a.text).empty()) throw DataError("action " + a.id + " has empty text");
        if (!action_index_.emplace(a.id, i).second) throw DataError("duplicate action id " + a.id);
    }
    std::unordered_map<std::string, int> references;
    for (std::size_t i = 0; i < norms_.size(); ++i) {
        const auto& n = norms_[i];
        if (trim(n.norm_text).empty()) throw DataError("norm " + n.norm_id + " has empty text");
        if (!norm_index_.emplace(n.norm_id, i).second) throw DataError("duplicate norm id " + n.norm_id);
        const ActionRecord* s = find_action(n.supported_action);
        const ActionRecord* o = find_action(n.opposed_action);
        if (s == nullptr || o == nullptr) throw DataError("norm " + n.norm_id + " references a missing action");
        if (s->stance != Stance::support || o->stance != Stance::oppose) {
            throw DataError("norm " + n.norm_id + " pairs actions with wrong stances");
        }
        if (s->norm_id != n.norm_id || o->norm_id != n.norm_id) {
            throw DataError("norm " + n.norm_id + " references actions of another norm");
        }
        ++references[s->id];
        ++references[o->id];
    }
    for (const auto& a : actions_) {
        if (references[a.id] != 1) {
            throw DataError("action " + a.id + " must be referenced by exactly one norm group");
        }
    }
}

const ActionRecord* Corpus::find_action(std::string_view id) const noexcept {
    auto it = action_index_.find(std::string(id));
    return it == action_index_.end() ? nullptr : &actions_[it->second];
}

const ActionRecord& Corpus::action(std::string_view id) const {
    const ActionRecord* a = find_action(id);
    if (a == nullptr) throw DataError("unknown action id " + std::string(id));
    return *a;
}

const NormGroup& Corpus::norm(std::string_view norm_id) const {
    auto it = norm_index_.find(std::string(norm_id));
    if (it == norm_index_.end()) throw DataError("unknown norm id " + std::string(norm_id));
    return norms_[it->second];
}

const std::string& Corpus::norm_text_of(std::string_view action_id) const {
    return norm(action(action_id).norm_id).norm_text;
}

std::size_t Corpus::count(Stance stance) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(actions_.begin(), actions_.end(), [&](const auto& a) { return a.stance == stance; }));
}

// ---------------------------------------------------------------------------
// CorpusBuilder

std::string CorpusBuilder::unique_id(std::string base) {
    int& n = seen_[base];
    ++n;
    if (n > 1) base += "-" + std::to_string(n);
    return base;
}

std::string CorpusBuilder::add_group(std::string_view norm_text, std::string_view supported_text,
                                     std::string_view opposed_text, DatasetTag tag) {
    const std::string tag_name(to_string(tag));
    const std::string sep = "\x1f";
    auto short_hash = [](const std::string& s) { return sha256_hex(s).substr(0, 16); };

    std::string norm_id = unique_id(
        "n-" + short_hash(tag_name + sep + std::string(norm_text) + sep + std::string(supported_text) + sep +
                          std::string(opposed_text)));
    std::string s_id = unique_id("a-" + short_hash(tag_name + sep + std::string(norm_text) + sep + "support" +
                                                    sep + std::string(supported_text)));
    std::string o_id = unique_id("a-" + short_hash(tag_name + sep + std::string(norm_text) + sep + "oppose" +
                                                    sep + std::string(opposed_text)));

    actions_.push_back({s_id, std::string(supported_text), Stance::support, norm_id, tag});
    actions_.push_back({o_id, std::string(opposed_text), Stance::oppose, norm_id, tag});
    norms_.push_back({norm_id, std::string(norm_text), s_id, o_id});
    return norm_id;
}

Corpus CorpusBuilder::build() && { return Corpus(split_, std::move(actions_), std::move(norms_)); }

// ---------------------------------------------------------------------------
// Moral Stories

LoadResult parse_moral_stories(std::string_view text, Split split) {
    CorpusBuilder builder(split);
    std::vector<RecordError> errors;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t line_no = i + 1;
        if (trim(lines[i]).empty()) continue;
        json record;
        try {
            record = json::parse(lines[i]);
        } catch (const json::parse_error& e) {
            errors.push_back({line_no, std::string("malformed record: ") + e.what()});
            continue;
        }
        auto field = [&](const char* key) -> std::string {
            if (!record.is_object() || !record.contains(key) || !record[key].is_string()) return {};
            return trim(record[key].get<std::string>());
        };
        const std::string norm = field("norm");
        const std::string moral = field("moral_action");
        const std::string immoral = field("immoral_action");
        std::string missing;
        if (norm.empty()) missing = "norm";
        else if (moral.empty()) missing = "moral_action";
        else if (immoral.empty()) missing = "immoral_action";
        if (!missing.empty()) {
            errors.push_back({line_no, "missing field '" + missing + "'"});
            continue;
        }
        builder.add_group(norm, moral, immoral, DatasetTag::moral_stories);
    }
    return {std::move(builder).build(), std::move(errors)};
}

LoadResult load_moral_stories(const std::string& path, Split split) {
    return parse_moral_stories(read_file(path), split);
}

// ---------------------------------------------------------------------------
// ETHICS

namespace {

struct CsvRow {
    std::size_t line = 0;
    std::vector<std::string> fields;
};

// RFC 4180 reader: quoted fields may contain commas, doubled quotes and newlines.
std::vector<CsvRow> parse_csv(std::string_view text) {
    std::vector<CsvRow> rows;
    CsvRow row;
    std::string field;
    bool in_quotes = false;
    bool row_has_content = false;
    std::size_t line = 1;
    row.line = 1;
    auto end_field = [&] {
        row.fields.push_back(std::move(field));
        field.clear();
    };
    auto end_row = [&] {
        end_field();
        if (row_has_content || row.fields.size() > 1 || !row.fields.front().empty()) rows.push_back(std::move(row));
        row = CsvRow{};
        row_has_content = false;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            in_quotes = true;
            row_has_content = true;
        } else if (c == ',') {
            end_field();
            row_has_content = true;
        } else if (c == '\n') {
            end_row();
            ++line;
            row.line = line;
        } else if (c == '\r') {
            continue;
        } else {
            field.push_back(c);
        }
    }
    if (!field.empty() || !row.fields.empty() || row_has_content) end_row();
    return rows;
}

DatasetTag tag_for(EthicsSubset subset) {
    switch (subset) {
        case EthicsSubset::justice: return DatasetTag::ethics_justice;
        case EthicsSubset::deontology: return DatasetTag::ethics_deontology;
        case EthicsSubset::virtue: return DatasetTag::ethics_virtue;
    }
    return DatasetTag::synthetic;
}

}  // namespace

LoadResult parse_ethics(std::string_view text, EthicsSubset subset, Split split) {
    const std::size_t expected_columns = subset == EthicsSubset::deontology ? 3 : 2;
    const std::string norm(ethics_norm_sentence(subset));
    CorpusBuilder builder(split);
    std::vector<RecordError> errors;

    struct Pending {
        std::size_t line;
        std::string text;
    };
    std::deque<Pending> supports;
    std::deque<Pending> opposes;

    auto rows = parse_csv(text);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (r == 0 && !row.fields.empty() && trim(row.fields[0]) == "label") continue;
        if (row.fields.size() != expected_columns) {
            errors.push_back({row.line, "expected " + std::to_string(expected_columns) + " columns, found " +
                                            std::to_string(row.fields.size())});
            continue;
        }
        const std::string label = trim(row.fields[0]);
        if (label != "0" && label != "1") {
            errors.push_back({row.line, "label outside {0,1}: '" + label + "'"});
            continue;
        }
        std::string action = trim(row.fields[1]);
        if (subset == EthicsSubset::deontology) action += " " + trim(row.fields[2]);
        if (trim(action).empty()) {
            errors.push_back({row.line, "empty scenario"});
            continue;
        }
        Pending p{row.line, std::move(action)};
        auto& mine = label == "1" ? supports : opposes;
        auto& other = label == "1" ? opposes : supports;
        if (other.empty()) {
            mine.push_back(std::move(p));
            continue;
        }
        Pending partner = std::move(other.front());
        other.pop_front();
        if (label == "1") {
            builder.add_group(norm, p.text, partner.text, tag_for(subset));
        } else {
            builder.add_group(norm, partner.text, p.text, tag_for(subset));
        }
    }
    for (const auto& p : supports) errors.push_back({p.line, "unpaired label-1 row"});
    for (const auto& p : opposes) errors.push_back({p.line, "unpaired label-0 row"});
    std::sort(errors.begin(), errors.end(), [](const auto& a, const auto& b) { return a.line < b.line; });
    return {std::move(builder).build(), std::move(errors)};
}

LoadResult load_ethics(const std::string& path, EthicsSubset subset, Split split) {
    return parse_ethics(read_file(path), subset, split);
}

// ---------------------------------------------------------------------------
// Triplets

std::vector<TripletExample> build_triplets(const Corpus& corpus, std::size_t count, std::uint64_t seed,
                                           TripletOptions options) {
    const auto& norms = corpus.norms();
    if (norms.size() < 2) throw DataError("insufficient norm diversity: build_triplets needs at least 2 norms");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_group(0, norms.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_other(0, norms.size() - 2);
    std::bernoulli_distribution pick_support(0.5);

    std::vector<TripletExample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t g = pick_group(rng);
        std::size_t h = pick_other(rng);
        if (h >= g) ++h;
        // Every group holds exactly two actions, so uniform (group, stance) is
        // uniform over the actions of other norms.
        const bool use_support = options.stance_matched_negatives || pick_support(rng);
        const auto& neg = use_support ? norms[h].supported_action : norms[h].opposed_action;
        out.push_back({norms[g].supported_action, norms[g].opposed_action, neg});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical format

std::string to_canonical(const Corpus& corpus) {
    std::ostringstream out;
    out << k_canonical_header << '\n';
    json meta = {{"kind", "meta"},
                 {"split", to_string(corpus.split())},
                 {"actions", corpus.actions().size()},
                 {"norms", corpus.norms().size()}};
    out << meta.dump(-1, ' ', false) << '\n';
    for (const auto& n : corpus.norms()) {
        json j = {{"kind", "norm"},
                  {"norm_id", n.norm_id},
                  {"norm_text", n.norm_text},
                  {"supported_action", n.supported_action},
                  {"opposed_action", n.opposed_action}};
        out << j.dump(-1, ' ', false) << '\n';
    }
    for (const auto& a : corpus.actions()) {
        json j = {{"kind", "action"},
                  {"id", a.id},
                  {"text", a.text},
                  {"stance", to_string(a.stance)},
                  {"norm_id", a.norm_id},
                  {"dataset", to_string(a.dataset)}};
        out << j.dump(-1, ' ', false) << '\n';
    }
    return out.str();
}

Corpus parse_canonical(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || lines.front() != k_canonical_header) {
        const std::string found = lines.empty() ? std::string("<empty>") : lines.front();
        throw DataError("corpus version mismatch: found '" + found + "', expected '" +
                        std::string(k_canonical_header) + "'");
    }
    std::vector<ActionRecord> actions;
    std::vector<NormGroup> norms;
    std::optional<Split> split;
    std::size_t expected_actions = 0;
    std::size_t expected_norms = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        json j;
        try {
            j = json::parse(lines[i]);
            const std::string kind = j.at("kind");
            if (kind == "meta") {
                split = parse_split(j.at("split").get<std::string>());
                expected_actions = j.at("actions");
                expected_norms = j.at("norms");
            } else if (kind == "norm") {
                norms.push_back({j.at("norm_id"), j.at("norm_text"), j.at("supported_action"),
                                 j.at("opposed_action")});
            } else if (kind == "action") {
                auto stance = parse_stance(j.at("stance").get<std::string>());
                if (!stance) throw DataError("bad stance");
                actions.push_back({j.at("id"), j.at("text"), *stance, j.at("norm_id"),
                                   parse_dataset_tag(j.at("dataset").get<std::string>())});
            } else {
                throw DataError("unknown record kind '" + kind + "'");
            }
        } catch (const json::exception& e) {
            throw DataError("canonical corpus line " + std::to_string(i + 1) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("canonical corpus line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    if (!split) throw DataError("canonical corpus lacks a meta record");
    if (actions.size() != expected_actions || norms.size() != expected_norms) {
        throw DataError("canonical corpus is truncated: meta declares " + std::to_string(expected_actions) +
                        " actions and " + std::to_string(expected_norms) + " norms");
    }
    return Corpus(*split, std::move(actions), std::move(norms));
}

void save_canonical(const Corpus& corpus, const std::string& path) { write_file_atomic(path, to_canonical(corpus)); }

Corpus load_canonical(const std::string& path) { return parse_canonical(read_file(path)); }

}  // namespace clarity::corpus
