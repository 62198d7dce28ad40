#include "clarity/metrics.hpp"
#include "clarity/log.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>

namespace clarity::metrics {

namespace {
struct CodepointRange {
    char32_t lo;
    char32_t hi;
};
#include "unicode_classes.inc"

template <std::size_t N>
bool in_ranges(const CodepointRange (&table)[N], char32_t c) {
    auto it = std::upper_bound(std::begin(table), std::end(table), c,
                               [](char32_t v, const CodepointRange& r) { return v < r.lo; });
    if (it == std::begin(table)) return false;
    --it;
    return c <= it->hi;
}

bool is_punct(char32_t c) { return in_ranges(k_punctuation_ranges, c); }
bool is_symbol(char32_t c) { return in_ranges(k_symbol_ranges, c); }
bool is_number(char32_t c) { return in_ranges(k_number_ranges, c); }

bool is_py_space(char32_t c) {
    return (c >= 0x09 && c <= 0x0D) || (c >= 0x1C && c <= 0x20) || c == 0x85 || c == 0xA0 || c == 0x1680 ||
           (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

std::u32string decode_utf8(std::string_view s) {
    std::u32string out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b = static_cast<unsigned char>(s[i]);
        int len = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
        if (len == 0 || i + static_cast<std::size_t>(len) > s.size()) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        char32_t c = len == 1 ? b : b & (0xFF >> (len + 1));
        bool ok = true;
        for (int k = 1; k < len; ++k) {
            const auto cb = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
            if ((cb & 0xC0) != 0x80) ok = false;
            c = (c << 6) | (cb & 0x3F);
        }
        if (!ok) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        out.push_back(c);
        i += static_cast<std::size_t>(len);
    }
    return out;
}

void append_utf8(std::string& out, char32_t c) {
    if (c < 0x80) {
        out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (c >> 12)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (c >> 18)));
        out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
}

// Left-to-right, non-overlapping replacement of a two-codepoint pattern,
// mirroring a regex substitution over (X)(Y).
template <typename First, typename Second, typename Emit>
std::u32string substitute_pairs(const std::u32string& in, First first, Second second, Emit emit) {
    std::u32string out;
    std::size_t i = 0;
    while (i < in.size()) {
        if (i + 1 < in.size() && first(in[i]) && second(in[i + 1])) {
            emit(out, in[i], in[i + 1]);
            i += 2;
        } else {
            out.push_back(in[i++]);
        }
    }
    return out;
}

std::vector<std::string> split_tokens(std::string_view tokenized) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < tokenized.size()) {
        while (i < tokenized.size() && tokenized[i] == ' ') ++i;
        std::size_t j = i;
        while (j < tokenized.size() && tokenized[j] != ' ') ++j;
        if (j > i) out.emplace_back(tokenized.substr(i, j - i));
        i = j;
    }
    return out;
}

double safe_div(double a, double b) { return b == 0 ? 0.0 : a / b; }

ClassStats stats(double tp, double fp, double fn) {
    ClassStats s;
    s.precision = safe_div(tp, tp + fp);
    s.recall = safe_div(tp, tp + fn);
    s.f1 = safe_div(2 * s.precision * s.recall, s.precision + s.recall);
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Classification

ClassificationResult from_confusion(std::size_t tp, std::size_t fn, std::size_t fp, std::size_t tn) {
    ClassificationResult r;
    r.tp = tp;
    r.fn = fn;
    r.fp = fp;
    r.tn = tn;
    const auto d = [](std::size_t v) { return static_cast<double>(v); };
    r.accuracy = safe_div(d(tp + tn), d(r.total()));
    r.support = stats(d(tp), d(fp), d(fn));
    r.oppose = stats(d(tn), d(fn), d(fp));
    r.macro_f1 = (r.support.f1 + r.oppose.f1) / 2.0;
    return r;
}

ClassificationResult classification_metrics(const std::vector<Stance>& predictions, const std::vector<Stance>& gold) {
    if (predictions.size() != gold.size()) {
        throw ContractError("classification_metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                            std::to_string(gold.size()) + " gold labels");
    }
    std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const bool pred_s = predictions[i] == Stance::support;
        const bool gold_s = gold[i] == Stance::support;
        if (gold_s) {
            pred_s ? ++tp : ++fn;
        } else {
            pred_s ? ++fp : ++tn;
        }
    }
    return from_confusion(tp, fn, fp, tn);
}

// ---------------------------------------------------------------------------
// BLEU

std::string intl_tokenize(std::string_view text) {
    std::u32string s = decode_utf8(text);
    auto not_number = [](char32_t c) { return !is_number(c); };
    s = substitute_pairs(s, not_number, is_punct, [](std::u32string& o, char32_t a, char32_t b) {
        o.push_back(a);
        o.push_back(U' ');
        o.push_back(b);
        o.push_back(U' ');
    });
    s = substitute_pairs(s, is_punct, not_number, [](std::u32string& o, char32_t a, char32_t b) {
        o.push_back(U' ');
        o.push_back(a);
        o.push_back(U' ');
        o.push_back(b);
    });
    std::u32string spaced;
    for (char32_t c : s) {
        if (is_symbol(c)) {
            spaced.push_back(U' ');
            spaced.push_back(c);
            spaced.push_back(U' ');
        } else {
            spaced.push_back(c);
        }
    }
    std::string out;
    bool pending_space = false;
    for (char32_t c : spaced) {
        if (is_py_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        append_utf8(out, c);
    }
    return out;
}

namespace {

std::string rstrip_py(std::string_view s) {
    std::u32string cps = decode_utf8(s);
    while (!cps.empty() && is_py_space(cps.back())) cps.pop_back();
    std::string out;
    for (char32_t c : cps) append_utf8(out, c);
    return out;
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                       tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

double bleu_log(double v) { return v == 0.0 ? -9999999999.0 : std::log(v); }

}  // namespace

BleuStats corpus_bleu_stats(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
    if (hypotheses.empty()) throw ContractError("corpus_bleu: no hypotheses");
    if (hypotheses.size() != references.size()) throw ContractError("corpus_bleu: hypothesis/reference count mismatch");
    BleuStats st;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const auto hyp = split_tokens(intl_tokenize(rstrip_py(hypotheses[i])));
        const auto ref = split_tokens(intl_tokenize(rstrip_py(references[i])));
        st.sys_len += hyp.size();
        st.ref_len += ref.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto h = ngrams(hyp, n);
            const auto r = ngrams(ref, n);
            for (const auto& [g, c] : h) {
                auto it = r.find(g);
                if (it != r.end()) st.matches[n - 1] += std::min(c, it->second);
            }
            st.totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
        }
    }

    st.brevity_penalty = 1.0;
    if (st.sys_len < st.ref_len) {
        st.brevity_penalty = st.sys_len > 0 ? std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.sys_len))
                                            : 0.0;
    }
    if (std::all_of(st.matches.begin(), st.matches.end(), [](std::size_t m) { return m == 0; })) {
        st.score = 0.0;
        return st;
    }
    double smooth = 1.0;
    for (std::size_t n = 0; n < 4; ++n) {
        if (st.totals[n] == 0) break;
        if (st.matches[n] == 0) {
            smooth *= 2;
            st.precisions[n] = 100.0 / (smooth * static_cast<double>(st.totals[n]));
        } else {
            st.precisions[n] = 100.0 * static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]);
        }
    }
    double log_sum = 0;
    for (double p : st.precisions) log_sum += bleu_log(p);
    st.score = st.brevity_penalty * std::exp(log_sum / 4.0);
    return st;
}

double corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
    return corpus_bleu_stats(hypotheses, references).score;
}

// ---------------------------------------------------------------------------
// Similarity

std::vector<double> HashedBowEmbedder::embed(std::string_view text) const {
    std::vector<double> v(dimension_, 0.0);
    for (const auto& tok : split_tokens(intl_tokenize(to_lower_ascii(text)))) {
        std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (unsigned char c : tok) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        const double sign = (h >> 63) ? -1.0 : 1.0;
        v[static_cast<std::size_t>(h % dimension_)] += sign;
    }
    return v;
}

std::string HashedBowEmbedder::name() const { return "hashed-bow-" + std::to_string(dimension_); }

std::vector<double> ModelEncoderEmbedder::embed(std::string_view text) const {
    return model::input_representation(model_, model::TaskPrefix::abstract_norm, text).values;
}

std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return std::nullopt;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

SimilarityResult embedding_similarity(const std::vector<std::string>& hypotheses,
                                      const std::vector<std::string>& references, const Embedder& embedder) {
    if (hypotheses.size() != references.size()) throw ContractError("embedding_similarity: length mismatch");
    SimilarityResult r;
    double sum = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        auto c = cosine(embedder.embed(hypotheses[i]), embedder.embed(references[i]));
        if (!c) {
            log::warn("embedding_similarity: zero vector in pair " + std::to_string(i) + ", skipped");
            ++r.skipped;
            continue;
        }
        sum += *c;
        ++r.pairs;
    }
    r.mean = r.pairs ? sum / static_cast<double>(r.pairs) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Agreement

namespace {
int raters_per_item(const std::vector<std::vector<int>>& counts) {
    if (counts.empty()) throw ContractError("agreement: no items");
    int n = -1;
    for (const auto& row : counts) {
        int s = 0;
        for (int c : row) {
            if (c < 0) throw ContractError("agreement: negative count");
            s += c;
        }
        if (n == -1) n = s;
        if (s != n) throw ContractError("agreement: items rated by different numbers of raters");
        if (row.size() != counts.front().size()) throw ContractError("agreement: ragged category counts");
    }
    if (n < 2) throw ContractError("agreement: at least two raters required");
    return n;
}

double mean_item_agreement(const std::vector<std::vector<int>>& counts, int n) {
    double total = 0;
    for (const auto& row : counts) {
        double s = 0;
        for (int c : row) s += static_cast<double>(c) * (c - 1);
        total += s / (static_cast<double>(n) * (n - 1));
    }
    return total / static_cast<double>(counts.size());
}
}  // namespace

double fleiss_kappa(const std::vector<std::vector<int>>& counts) {
    const int n = raters_per_item(counts);
    const double p_bar = mean_item_agreement(counts, n);
    double p_e = 0;
    for (std::size_t k = 0; k < counts.front().size(); ++k) {
        double col = 0;
        for (const auto& row : counts) col += row[k];
        const double p = col / (static_cast<double>(counts.size()) * n);
        p_e += p * p;
    }
    if (p_e == 1.0) return 1.0;
    return (p_bar - p_e) / (1.0 - p_e);
}

double percentage_agreement(const std::vector<std::vector<int>>& counts) {
    return mean_item_agreement(counts, raters_per_item(counts));
}

// ---------------------------------------------------------------------------
// Reports

Report build_report(const std::vector<pipeline::Assessment>& assessments, const corpus::Corpus& gold,
                    const Embedder& embedder, std::string dataset, std::vector<pipeline::MalformedLine> malformed) {
    Report report;
    report.dataset = std::move(dataset);
    report.embedder = embedder.name();
    report.gold_actions = gold.actions().size();
    report.malformed = std::move(malformed);

    std::unordered_map<std::string, const corpus::ActionRecord*> by_text;
    for (const auto& a : gold.actions()) by_text.emplace(normalize_whitespace(a.text), &a);

    struct Group {
        std::vector<Stance> predictions, labels;
        std::vector<std::string> hyps, refs;
    };
    std::map<std::pair<std::string, std::string>, Group> groups;
    std::set<std::string> covered;

    for (const auto& a : assessments) {
        const corpus::ActionRecord* g = nullptr;
        if (!a.id.empty()) {
            g = gold.find_action(a.id);
        } else if (auto it = by_text.find(normalize_whitespace(a.action)); it != by_text.end()) {
            g = it->second;
        }
        if (!g) {
            report.unmatched.push_back(a.id.empty() ? a.action : a.id);
            continue;
        }
        covered.insert(g->id);
        auto& grp = groups[{a.system, std::string(pipeline::to_string(a.mode))}];
        grp.predictions.push_back(a.decision);
        grp.labels.push_back(g->stance);
        grp.hyps.push_back(a.path(g->stance).norm);
        grp.refs.push_back(gold.norm(g->norm_id).norm_text);
    }
    for (const auto& a : gold.actions()) {
        if (!covered.count(a.id)) report.uncovered.push_back(a.id);
    }

    for (const auto& [key, grp] : groups) {
        SystemRow row;
        row.system = key.first;
        row.mode = key.second;
        row.items = grp.predictions.size();
        row.classification = classification_metrics(grp.predictions, grp.labels);
        const bool any_norm = std::any_of(grp.hyps.begin(), grp.hyps.end(), [](const auto& h) { return !trim(h).empty(); });
        if (any_norm) {
            row.generation = GenerationResult{corpus_bleu(grp.hyps, grp.refs), embedding_similarity(grp.hyps, grp.refs, embedder)};
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

namespace {
std::string f4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
}
}  // namespace

std::string render_text(const Report& r) {
    std::string out;
    out += "Evaluation report\n";
    out += "dataset: " + r.dataset + "\n";
    out += "gold actions: " + std::to_string(r.gold_actions) + "\n\n";

    out += "Valence prediction\n";
    out += pad("system", 16) + pad("mode", 24) + pad("n", 8) + pad("accuracy", 10) + "macro_f1\n";
    if (r.rows.empty()) out += pad("(no data)", 16) + pad("-", 24) + pad("0", 8) + pad("-", 10) + "-\n";
    for (const auto& row : r.rows) {
        out += pad(row.system, 16) + pad(row.mode, 24) + pad(std::to_string(row.items), 8) +
               pad(f4(row.classification.accuracy), 10) + f4(row.classification.macro_f1) + "\n";
    }
    out += pad("published", 16) + pad("full-scale reference", 24) + pad("-", 8) + pad(f4(k_published_most_accuracy), 10) +
           f4(k_published_most_macro_f1) + "\n\n";

    out += "Norm generation (gold-stance path vs gold norm)\n";
    out += pad("system", 16) + pad("mode", 24) + pad("n", 8) + pad("bleu", 10) + "similarity\n";
    bool any = false;
    for (const auto& row : r.rows) {
        if (!row.generation) continue;
        any = true;
        out += pad(row.system, 16) + pad(row.mode, 24) + pad(std::to_string(row.items), 8) +
               pad(f4(row.generation->bleu), 10) + f4(row.generation->similarity.mean) + "\n";
    }
    if (!any) out += pad("(no data)", 16) + pad("-", 24) + pad("0", 8) + pad("-", 10) + "-\n";
    out += pad("published", 16) + pad("full-scale reference", 24) + pad("-", 8) + pad(f4(k_published_most_norm_bleu), 10) +
           f4(k_published_most_norm_similarity) + "\n";
    out += "bleu signature: " + std::string(k_bleu_signature) + "\n";
    out += "similarity embedder: " + r.embedder + "\n\n";

    out += "Coverage\n";
    out += "unmatched assessments: " + std::to_string(r.unmatched.size()) + "\n";
    for (const auto& u : r.unmatched) out += "  " + u + "\n";
    out += "uncovered gold actions: " + std::to_string(r.uncovered.size()) + "\n";
    for (const auto& u : r.uncovered) out += "  " + u + "\n";
    out += "malformed assessment lines: " + std::to_string(r.malformed.size()) + "\n";
    for (const auto& m : r.malformed) out += "  line " + std::to_string(m.line) + ": " + m.message + "\n";
    return out;
}

std::string render_jsonl(const Report& r) {
    using nlohmann::json;
    std::string out;
    auto emit = [&](const json& j) { out += j.dump() + "\n"; };
    emit({{"type", "header"}, {"dataset", r.dataset}, {"gold_actions", r.gold_actions}, {"embedder", r.embedder},
          {"bleu_signature", std::string(k_bleu_signature)}});
    if (r.rows.empty()) emit({{"type", "classification"}, {"system", nullptr}, {"status", "no data"}});
    for (const auto& row : r.rows) {
        const auto& c = row.classification;
        emit({{"type", "classification"},
              {"system", row.system},
              {"mode", row.mode},
              {"n", row.items},
              {"accuracy", c.accuracy},
              {"macro_f1", c.macro_f1},
              {"confusion", {{"tp", c.tp}, {"fn", c.fn}, {"fp", c.fp}, {"tn", c.tn}}},
              {"support", {{"precision", c.support.precision}, {"recall", c.support.recall}, {"f1", c.support.f1}}},
              {"oppose", {{"precision", c.oppose.precision}, {"recall", c.oppose.recall}, {"f1", c.oppose.f1}}}});
        if (row.generation) {
            emit({{"type", "generation"},
                  {"system", row.system},
                  {"mode", row.mode},
                  {"n", row.items},
                  {"bleu", row.generation->bleu},
                  {"similarity", row.generation->similarity.mean},
                  {"similarity_pairs", row.generation->similarity.pairs},
                  {"similarity_skipped", row.generation->similarity.skipped}});
        }
    }
    emit({{"type", "reference"},
          {"system", "published"},
          {"accuracy", k_published_most_accuracy},
          {"macro_f1", k_published_most_macro_f1},
          {"bleu", k_published_most_norm_bleu},
          {"similarity", k_published_most_norm_similarity}});
    json malformed = json::array();
    for (const auto& m : r.malformed) malformed.push_back({{"line", m.line}, {"message", m.message}});
    emit({{"type", "coverage"}, {"unmatched", r.unmatched}, {"uncovered", r.uncovered}, {"malformed", malformed}});
    return out;
}

// ---------------------------------------------------------------------------
// Human evaluation

namespace {
std::string cell(std::string_view s) {
    std::string out = normalize_whitespace(s);
    std::replace(out.begin(), out.end(), '\t', ' ');
    return out;
}
}  // namespace

HumanEvalExport export_human_eval(const std::vector<pipeline::Assessment>& assessments, std::size_t sample_size,
                                  std::uint64_t seed) {
    std::map<std::string, std::vector<const pipeline::Assessment*>> by_action;
    for (const auto& a : assessments) by_action[normalize_whitespace(a.action)].push_back(&a);
    std::vector<std::string> actions;
    for (auto& [action, list] : by_action) {
        std::stable_sort(list.begin(), list.end(), [](const auto* x, const auto* y) {
            return std::tie(x->system, x->mode) < std::tie(y->system, y->mode);
        });
        actions.push_back(action);
    }

    std::mt19937_64 rng(seed);
    std::shuffle(actions.begin(), actions.end(), rng);
    if (actions.size() > sample_size) actions.resize(sample_size);

    HumanEvalExport out;
    out.sheet = "item\taction\tcandidate\texplanation\tplausibility (1-3)\trelevance (1-3)\tconciseness (1-3)\n";
    out.key = "item\tcandidate\tsystem\tmode\tassessment_id\n";
    std::string pairs = "item\tpair\tresult (win/tie/lose)\n";
    for (std::size_t i = 0; i < actions.size(); ++i) {
        char item[32];
        std::snprintf(item, sizeof item, "item-%03zu", i + 1);
        auto list = by_action[actions[i]];
        std::shuffle(list.begin(), list.end(), rng);
        for (std::size_t c = 0; c < list.size(); ++c) {
            const auto& a = *list[c];
            const auto& path = a.path(a.decision);
            const std::string label(1, static_cast<char>('A' + c % 26));
            out.sheet += std::string(item) + "\t" + cell(actions[i]) + "\t" + label + "\tNorm: " + cell(path.norm) +
                         " Rationale: " + cell(path.rationale) + "\t\t\t\n";
            out.key += std::string(item) + "\t" + label + "\t" + a.system + "\t" +
                       std::string(pipeline::to_string(a.mode)) + "\t" + a.id + "\n";
            for (std::size_t d = c + 1; d < list.size(); ++d) {
                pairs += std::string(item) + "\t" + label + " vs " + std::string(1, static_cast<char>('A' + d % 26)) +
                         "\t\n";
            }
        }
    }
    out.sheet += "\n" + pairs;
    return out;
}

}  // namespace clarity::metrics
