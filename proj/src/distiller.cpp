#include "clarity/distiller.hpp"
#include "clarity/log.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

namespace clarity::distill {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Templates

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& slots) {
    std::string out;
    out.reserve(tmpl.size() + 256);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        const std::size_t open = tmpl.find('{', i);
        if (open == std::string_view::npos) {
            out.append(tmpl.substr(i));
            break;
        }
        const std::size_t close = tmpl.find('}', open);
        if (close == std::string_view::npos) throw ContractError("unterminated slot in template");
        out.append(tmpl.substr(i, open - i));
        const std::string name(tmpl.substr(open + 1, close - open - 1));
        auto it = slots.find(name);
        if (it == slots.end()) throw ContractError("no value bound for slot '" + name + "'");
        if (trim(it->second).empty()) throw ContractError("empty value for slot '" + name + "'");
        out.append(it->second);
        i = close + 1;
    }
    return out;
}

std::string render_rationale_prompt(std::string_view norm, std::string_view supported_action,
                                    std::string_view opposed_action) {
    return render_template(k_rationale_template, {{"norm", std::string(norm)},
                                                  {"supported_action", std::string(supported_action)},
                                                  {"opposed_action", std::string(opposed_action)}});
}

std::string render_claritycot_prompt(std::string_view action) {
    return render_template(k_claritycot_template, {{"action", std::string(action)}});
}

std::string render_zero_shot_prompt(std::string_view action) {
    return render_template(k_zero_shot_template, {{"action", std::string(action)}});
}

std::string render_norm_generation_prompt(std::string_view supported_action, std::string_view opposed_action) {
    return render_template(k_norm_generation_template, {{"supported_action", std::string(supported_action)},
                                                        {"opposed_action", std::string(opposed_action)}});
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

std::string clean_section(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    auto junk = [](char c) {
        return c == '*' || c == '#' || c == '_' || c == '-' || c == ':' || c == ' ' || c == '\t' || c == '\n' ||
               c == '\r';
    };
    while (b < e && junk(s[b])) ++b;
    while (e > b && (s[e - 1] == '*' || s[e - 1] == '#' || s[e - 1] == '_' || s[e - 1] == ' ' ||
                     s[e - 1] == '\n' || s[e - 1] == '\t' || s[e - 1] == '\r')) {
        --e;
    }
    return normalize_whitespace(s.substr(b, e - b));
}

struct Header {
    std::size_t begin;
    std::size_t end;
    Stance stance;
};

std::vector<Header> find_stance_headers(const std::string& text) {
    static const std::regex header(R"(\b(support|oppos)[a-z]*[^:\n.]{0,40}:)", std::regex::icase);
    std::vector<Header> out;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), header); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        const bool support = istarts_with(m[1].str(), "support");
        out.push_back({static_cast<std::size_t>(m.position(0)),
                       static_cast<std::size_t>(m.position(0) + m.length(0)),
                       support ? Stance::support : Stance::oppose});
    }
    return out;
}

std::optional<RationalePair> sections_by_header(const std::string& text) {
    const auto headers = find_stance_headers(text);
    std::optional<std::string> support;
    std::optional<std::string> oppose;
    for (std::size_t i = 0; i < headers.size(); ++i) {
        const std::size_t stop = i + 1 < headers.size() ? headers[i + 1].begin : text.size();
        std::string body = clean_section(std::string_view(text).substr(headers[i].end, stop - headers[i].end));
        if (body.empty()) continue;
        auto& slot = headers[i].stance == Stance::support ? support : oppose;
        if (!slot) slot = std::move(body);
    }
    if (support && oppose) return RationalePair{*support, *oppose};
    return std::nullopt;
}

std::vector<std::string> paragraphs(const std::string& text) {
    static const std::regex blank(R"(\n[ \t\r]*\n)");
    std::vector<std::string> out;
    for (auto it = std::sregex_token_iterator(text.begin(), text.end(), blank, -1);
         it != std::sregex_token_iterator(); ++it) {
        std::string p = clean_section(it->str());
        if (!p.empty()) out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

RationalePair parse_rationales(std::string_view response) {
    const std::string text(response);
    if (trim(text).empty()) throw ParseError("empty response");
    if (auto labeled = sections_by_header(text)) return *labeled;
    if (!find_stance_headers(text).empty()) {
        throw ParseError("response labels only one stance");
    }
    auto paras = paragraphs(text);
    if (paras.size() >= 2) return {paras[0], paras[1]};
    throw ParseError("no supporting/opposing sections identifiable");
}

namespace {

std::optional<Stance> decision_from_line(const std::string& line) {
    static const std::regex a_choice(R"(\ba\)\s*support)", std::regex::icase);
    static const std::regex b_choice(R"(\bb\)\s*oppose)", std::regex::icase);
    static const std::regex answer_letter(R"(answer[^:\n]*:[\s*_(]*([ab])\b)", std::regex::icase);
    static const std::regex answer_word(R"(answer[^:\n]*:[\s*_(]*(support|oppose))", std::regex::icase);
    const bool a = std::regex_search(line, a_choice);
    const bool b = std::regex_search(line, b_choice);
    if (a != b) return a ? Stance::support : Stance::oppose;
    if (a && b) return std::nullopt;  // an echo of the choice list
    std::smatch m;
    if (std::regex_search(line, m, answer_letter)) {
        return to_lower_ascii(m[1].str()) == "a" ? Stance::support : Stance::oppose;
    }
    if (std::regex_search(line, m, answer_word)) {
        return to_lower_ascii(m[1].str()) == "support" ? Stance::support : Stance::oppose;
    }
    return std::nullopt;
}

std::pair<std::string, std::string> split_norm_and_rationale(const std::string& section) {
    static const std::regex norm_label(R"(\bnorm[^:\n.]{0,20}:)", std::regex::icase);
    static const std::regex rationale_label(R"(\brationale[^:\n.]{0,20}:)", std::regex::icase);
    std::smatch n;
    std::smatch r;
    const bool has_norm = std::regex_search(section, n, norm_label);
    const bool has_rationale = std::regex_search(section, r, rationale_label);
    if (has_norm && has_rationale && n.position(0) < r.position(0)) {
        const auto ns = static_cast<std::size_t>(n.position(0) + n.length(0));
        const auto rs = static_cast<std::size_t>(r.position(0));
        return {clean_section(section.substr(ns, rs - ns)),
                clean_section(section.substr(static_cast<std::size_t>(r.position(0) + r.length(0))))};
    }
    // Unlabeled: first sentence is the norm, the rest the rationale.
    std::string body = clean_section(section);
    const std::size_t dot = body.find(". ");
    if (dot == std::string::npos) return {body, body};
    return {clean_section(body.substr(0, dot + 1)), clean_section(body.substr(dot + 2))};
}

}  // namespace

ClarityCotVerdict parse_claritycot(std::string_view response) {
    const std::string text(response);
    if (trim(text).empty()) throw ParseError("empty response");

    auto lines = split_lines(text);
    std::optional<Stance> decision;
    for (auto it = lines.rbegin(); it != lines.rend() && !decision; ++it) decision = decision_from_line(*it);
    if (!decision) throw ParseError("no answer-choice marker in response");

    static const std::regex step(R"(\bstep\s*([123])\s*[:.)])", std::regex::icase);
    std::array<std::optional<std::size_t>, 3> starts;
    std::array<std::size_t, 3> body_starts{};
    for (auto it = std::sregex_iterator(text.begin(), text.end(), step); it != std::sregex_iterator(); ++it) {
        const int k = std::stoi((*it)[1].str()) - 1;
        if (!starts[static_cast<std::size_t>(k)]) {
            starts[static_cast<std::size_t>(k)] = static_cast<std::size_t>(it->position(0));
            body_starts[static_cast<std::size_t>(k)] = static_cast<std::size_t>(it->position(0) + it->length(0));
        }
    }

    std::string support_section;
    std::string oppose_section;
    if (starts[0] && starts[1] && *starts[0] < *starts[1]) {
        const std::size_t end2 = starts[2] && *starts[2] > *starts[1] ? *starts[2] : text.size();
        support_section = text.substr(body_starts[0], *starts[1] - body_starts[0]);
        oppose_section = text.substr(body_starts[1], end2 - body_starts[1]);
    } else if (auto labeled = sections_by_header(text)) {
        support_section = labeled->support;
        oppose_section = labeled->oppose;
    } else {
        throw ParseError("response lacks supporting/opposing explanation sections");
    }

    ClarityCotVerdict v;
    std::tie(v.support_norm, v.support_rationale) = split_norm_and_rationale(support_section);
    std::tie(v.oppose_norm, v.oppose_rationale) = split_norm_and_rationale(oppose_section);
    v.decision = *decision;
    if (v.support_norm.empty() || v.support_rationale.empty() || v.oppose_norm.empty() ||
        v.oppose_rationale.empty()) {
        throw ParseError("incomplete explanation in response");
    }
    return v;
}

// ---------------------------------------------------------------------------
// Clients

std::string MockLlmClient::complete(const std::string& prompt, const DecodingParams&) {
    ++calls_;
    return responder_(prompt);
}

namespace {

std::optional<std::string> between(const std::string& s, std::string_view open, std::string_view close) {
    const std::size_t a = s.find(open);
    if (a == std::string::npos) return std::nullopt;
    const std::size_t b = s.find(close, a + open.size());
    if (b == std::string::npos) return std::nullopt;
    return s.substr(a + open.size(), b - a - open.size());
}

std::string lower_first(std::string s) {
    if (!s.empty() && s[0] >= 'A' && s[0] <= 'Z') s[0] = static_cast<char>(s[0] - 'A' + 'a');
    return s;
}

std::string strip_final_period(std::string s) {
    while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.pop_back();
    return s;
}

}  // namespace

std::string template_mock_response(const std::string& prompt) {
    if (auto norm = between(prompt, "Given the social norm: ", ", please follow")) {
        auto supported = between(prompt, "Action 1: ", " and Action 2: ");
        auto opposed = between(prompt, " and Action 2: ", ".\nStep 2.");
        if (supported && opposed) {
            const std::string n = lower_first(strip_final_period(*norm));
            return "Supporting rationale: " + strip_final_period(*supported) +
                   " is acceptable because " + n + ".\n\nOpposing rationale: " + strip_final_period(*opposed) +
                   " is wrong because " + n + ".";
        }
    }
    if (auto action = between(prompt, "Given an action: ", ".\nTo arrive")) {
        const bool support = sha256_hex(*action)[0] < '8';
        return "Step 1: Norm: It is good to help others. Rationale: " + *action +
               " may benefit someone.\nStep 2: Norm: It is wrong to cause harm. Rationale: " + *action +
               " may hurt someone.\nStep 3: Weighing both paths.\nAnswer: " +
               (support ? std::string("a) support") : std::string("b) oppose"));
    }
    return "Supporting: " + prompt.substr(0, 40) + "\n\nOpposing: " + prompt.substr(0, 40);
}

PromptCache::PromptCache(std::string path) : path_(std::move(path)) {
    if (path_.empty()) return;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            auto j = json::parse(line);
            entries_[j.at("prompt_hash").get<std::string>()] = j.at("response").get<std::string>();
        } catch (const json::exception&) {
            log::warn("prompt cache " + path_ + ": ignoring malformed line " + std::to_string(line_no));
        }
    }
}

std::string PromptCache::key(std::string_view template_id, std::string_view prompt, const DecodingParams& params) {
    char temp[32];
    std::snprintf(temp, sizeof temp, "%.6g", params.temperature);
    std::string material;
    material.append(template_id).append("\x1f").append(params.model).append("\x1f").append(temp);
    material.append("\x1f").append(std::to_string(params.max_tokens)).append("\x1f").append(prompt);
    return sha256_hex(material);
}

std::optional<std::string> PromptCache::lookup(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void PromptCache::store(const std::string& key, const std::string& prompt, const std::string& response) {
    std::lock_guard lock(mutex_);
    if (!entries_.emplace(key, response).second) return;
    if (path_.empty()) return;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
    json j = {{"prompt_hash", key}, {"prompt", prompt}, {"response", response}, {"timestamp", stamp}};
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw DataError("cannot append to prompt cache " + path_);
    out << j.dump(-1, ' ', false) << '\n';
    out.flush();
}

std::size_t PromptCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

CachingClient::CachingClient(PromptCache& cache, LlmClient* upstream, std::string template_id, RetryPolicy retry)
    : cache_(cache), upstream_(upstream), template_id_(std::move(template_id)), retry_(retry) {}

std::string CachingClient::complete(const std::string& prompt, const DecodingParams& params) {
    const std::string key = PromptCache::key(template_id_, prompt, params);
    if (auto hit = cache_.lookup(key)) {
        ++cache_hits_;
        return *hit;
    }
    if (upstream_ == nullptr) throw CacheMiss(key);
    int delay = retry_.base_delay_ms;
    for (int attempt = 0;; ++attempt) {
        try {
            ++live_calls_;
            std::string response = upstream_->complete(prompt, params);
            cache_.store(key, prompt, response);
            return response;
        } catch (const LlmError& e) {
            if (attempt >= retry_.max_retries) {
                throw LlmError(std::string(e.what()) + " (after " + std::to_string(attempt + 1) + " attempts)");
            }
            log::info("llm call failed, retrying: " + std::string(e.what()));
            if (delay > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay));
            delay *= 2;
        }
    }
}

// ---------------------------------------------------------------------------
// Distillation

std::string_view to_string(Provenance p) noexcept {
    switch (p) {
        case Provenance::llm_distilled: return "llm_distilled";
        case Provenance::generated: return "generated";
        case Provenance::fixture: return "fixture";
    }
    return "fixture";
}

Provenance parse_provenance(std::string_view text) {
    if (text == "llm_distilled") return Provenance::llm_distilled;
    if (text == "generated") return Provenance::generated;
    if (text == "fixture") return Provenance::fixture;
    throw DataError("unknown provenance: " + std::string(text));
}

DistillResult distill(const corpus::Corpus& corpus, LlmClient* upstream, PromptCache& cache,
                      const DistillOptions& options) {
    const auto& groups = corpus.norms();
    CachingClient client(cache, upstream, std::string(k_rationale_template_id), options.retry);

    struct Slot {
        std::optional<RationalePair> pair;
        std::string skip_reason;
        std::string missing_hash;
    };
    std::vector<Slot> slots(groups.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < groups.size(); i = next++) {
            const auto& g = groups[i];
            const std::string prompt = render_rationale_prompt(g.norm_text, corpus.action(g.supported_action).text,
                                                               corpus.action(g.opposed_action).text);
            try {
                slots[i].pair = parse_rationales(client.complete(prompt, options.decoding));
            } catch (const CacheMiss& miss) {
                slots[i].missing_hash = miss.hash;
                slots[i].skip_reason = miss.what();
            } catch (const LlmError& e) {
                slots[i].skip_reason = std::string("client failure: ") + e.what();
            } catch (const ParseError& e) {
                slots[i].skip_reason = std::string("unparseable response: ") + e.what();
            }
        }
    };

    const std::size_t threads = std::max<std::size_t>(1, std::min(options.parallelism, groups.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    DistillResult result;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto& g = groups[i];
        if (slots[i].pair) {
            result.records.push_back({g.supported_action, Stance::support, slots[i].pair->support,
                                      Provenance::llm_distilled});
            result.records.push_back({g.opposed_action, Stance::oppose, slots[i].pair->oppose,
                                      Provenance::llm_distilled});
            continue;
        }
        if (!slots[i].missing_hash.empty()) result.missing_hashes.push_back(slots[i].missing_hash);
        log::warn("distill: skipping norm group " + g.norm_id + ": " + slots[i].skip_reason);
        result.skipped.push_back({g.norm_id, slots[i].skip_reason});
    }
    result.live_calls = client.live_calls();
    result.cache_hits = client.cache_hits();
    return result;
}

std::string to_jsonl(const std::vector<RationaleRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json j = {{"action_id", r.action_id},
                  {"stance", to_string(r.stance)},
                  {"rationale", r.rationale_text},
                  {"provenance", to_string(r.provenance)}};
        out += j.dump(-1, ' ', false);
        out += '\n';
    }
    return out;
}

std::vector<RationaleRecord> parse_rationale_records(std::string_view text) {
    std::vector<RationaleRecord> out;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        try {
            auto j = json::parse(lines[i]);
            auto stance = parse_stance(j.at("stance").get<std::string>());
            if (!stance) throw DataError("bad stance");
            RationaleRecord r{j.at("action_id"), *stance, j.at("rationale"),
                              parse_provenance(j.at("provenance").get<std::string>())};
            if (trim(r.rationale_text).empty()) throw DataError("empty rationale");
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw DataError("rationale record line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

void save_rationales(const std::vector<RationaleRecord>& records, const std::string& path) {
    write_file_atomic(path, to_jsonl(records));
}

std::vector<RationaleRecord> load_rationales(const std::string& path) {
    return parse_rationale_records(read_file(path));
}

std::string export_review_sample(const std::vector<RationaleRecord>& records, const corpus::Corpus& corpus,
                                 std::size_t sample_size, std::uint64_t seed) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(sample_size, order.size()));

    auto cell = [](std::string s) {
        std::replace(s.begin(), s.end(), '\t', ' ');
        std::replace(s.begin(), s.end(), '\n', ' ');
        return s;
    };
    std::string out = "item\taction\tstance\trationale\tbias_flag\tnotes\n";
    for (std::size_t k = 0; k < order.size(); ++k) {
        const auto& r = records[order[k]];
        const auto* action = corpus.find_action(r.action_id);
        out += std::to_string(k + 1) + "\t" + cell(action ? action->text : r.action_id) + "\t" +
               std::string(to_string(r.stance)) + "\t" + cell(r.rationale_text) + "\t\t\n";
    }
    return out;
}

}  // namespace clarity::distill
