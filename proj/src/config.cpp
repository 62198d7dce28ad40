#include "clarity/config.hpp"
#include "clarity/log.hpp"

#include <filesystem>
#include <set>

namespace clarity::config {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + std::string(section) + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (auto a : allowed) known = known || key == a;
        if (!known) {
            throw ConfigError("unknown config key '" + (section.empty() ? key : std::string(section) + "." + key) + "'");
        }
    }
}

template <typename T>
void read(const json& j, std::string_view section, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + std::string(section) + "." + key + "': " + e.what());
    }
}

std::string resolve(const std::string& path, const std::string& base_dir) {
    if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base_dir) / path).lexically_normal().string();
}

DatasetSpec read_dataset(const json& j, std::string_view section, const std::string& base_dir) {
    check_keys(j, section, {"path", "format"});
    DatasetSpec d;
    read(j, section, "path", d.path);
    read(j, section, "format", d.format);
    d.path = resolve(d.path, base_dir);
    return d;
}

const std::set<std::string> k_formats = {"moral_stories", "ethics_justice", "ethics_deontology", "ethics_virtue",
                                         "canonical"};

}  // namespace

void RunConfig::validate() const {
    for (const auto* d : {&train_data, &test_data}) {
        if (!k_formats.count(d->format)) throw ConfigError("unknown dataset format '" + d->format + "'");
    }
    if (distill.client != "mock" && distill.client != "http") {
        throw ConfigError("distill.client must be 'mock' or 'http'");
    }
    if (distill.parallelism < 1) throw ConfigError("distill.parallelism must be >= 1");
    if (distill.decoding.max_tokens < 1) throw ConfigError("distill.max_tokens must be >= 1");
    if (distill.retry.max_retries < 0 || distill.retry.base_delay_ms < 0) throw ConfigError("invalid retry policy");
    if (model.backend != "desk") throw ConfigError("model.backend: only 'desk' is available");
    if (model.max_vocab < 512 || model.max_vocab > 65536) throw ConfigError("model.max_vocab must be in [512, 65536]");
    if (pipeline.max_tokens < 0) throw ConfigError("pipeline.max_tokens must be >= 0");
    if (evaluate.embedder != "hashed-bow" && evaluate.embedder != "desk-encoder") {
        throw ConfigError("evaluate.embedder must be 'hashed-bow' or 'desk-encoder'");
    }
    train.validate();
    model::TransformerConfig probe = transformer(train::Task::norm);
    if (probe.d_model % probe.heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
}

model::TransformerConfig RunConfig::transformer(train::Task task) const {
    model::TransformerConfig t;
    t.d_model = model.d_model;
    t.heads = model.heads;
    t.encoder_layers = model.encoder_layers;
    t.decoder_layers = model.decoder_layers;
    t.ffn_dim = model.ffn_dim;
    t.max_input_tokens = train.max_input_tokens;
    t.max_target_tokens = model.max_target_tokens;
    t.seed = seed * 3 + static_cast<std::uint64_t>(task);
    return t;
}

json to_json(const RunConfig& c) {
    json train_block = c.train;
    train_block.erase("seed");
    return json{
        {"seed", c.seed},
        {"data",
         {{"train", {{"path", c.train_data.path}, {"format", c.train_data.format}}},
          {"test", {{"path", c.test_data.path}, {"format", c.test_data.format}}}}},
        {"distill",
         {{"offline", c.distill.offline},
          {"client", c.distill.client},
          {"endpoint", c.distill.endpoint},
          {"api_key_env", c.distill.api_key_env},
          {"cache", c.distill.cache},
          {"parallelism", c.distill.parallelism},
          {"model", c.distill.decoding.model},
          {"temperature", c.distill.decoding.temperature},
          {"max_tokens", c.distill.decoding.max_tokens},
          {"max_retries", c.distill.retry.max_retries},
          {"retry_base_delay_ms", c.distill.retry.base_delay_ms}}},
        {"model",
         {{"backend", c.model.backend},
          {"d_model", c.model.d_model},
          {"heads", c.model.heads},
          {"encoder_layers", c.model.encoder_layers},
          {"decoder_layers", c.model.decoder_layers},
          {"ffn_dim", c.model.ffn_dim},
          {"max_target_tokens", c.model.max_target_tokens},
          {"max_vocab", c.model.max_vocab}}},
        {"train", train_block},
        {"checkpoints",
         {{"rationale", c.checkpoints.rationale}, {"norm", c.checkpoints.norm}, {"scorer", c.checkpoints.scorer}}},
        {"pipeline",
         {{"mode", std::string(pipeline::to_string(c.pipeline.mode))},
          {"max_tokens", c.pipeline.max_tokens},
          {"tie_break", std::string(to_string(c.pipeline.tie_break))}}},
        {"evaluate", {{"embedder", c.evaluate.embedder}, {"dataset_name", c.evaluate.dataset_name}}},
    };
}

RunConfig from_json(const json& j, const std::string& base_dir) {
    RunConfig c;
    check_keys(j, "", {"seed", "data", "distill", "model", "train", "checkpoints", "pipeline", "evaluate"});
    read(j, "", "seed", c.seed);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, "data", {"train", "test"});
        if (d.contains("train")) c.train_data = read_dataset(d.at("train"), "data.train", base_dir);
        if (d.contains("test")) c.test_data = read_dataset(d.at("test"), "data.test", base_dir);
    }
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        check_keys(d, "distill", {"offline", "client", "endpoint", "api_key_env", "cache", "parallelism", "model",
                                  "temperature", "max_tokens", "max_retries", "retry_base_delay_ms"});
        read(d, "distill", "offline", c.distill.offline);
        read(d, "distill", "client", c.distill.client);
        read(d, "distill", "endpoint", c.distill.endpoint);
        read(d, "distill", "api_key_env", c.distill.api_key_env);
        read(d, "distill", "cache", c.distill.cache);
        read(d, "distill", "parallelism", c.distill.parallelism);
        read(d, "distill", "model", c.distill.decoding.model);
        read(d, "distill", "temperature", c.distill.decoding.temperature);
        read(d, "distill", "max_tokens", c.distill.decoding.max_tokens);
        read(d, "distill", "max_retries", c.distill.retry.max_retries);
        read(d, "distill", "retry_base_delay_ms", c.distill.retry.base_delay_ms);
        c.distill.cache = resolve(c.distill.cache, base_dir);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model", {"backend", "d_model", "heads", "encoder_layers", "decoder_layers", "ffn_dim",
                                "max_target_tokens", "max_vocab"});
        read(m, "model", "backend", c.model.backend);
        read(m, "model", "d_model", c.model.d_model);
        read(m, "model", "heads", c.model.heads);
        read(m, "model", "encoder_layers", c.model.encoder_layers);
        read(m, "model", "decoder_layers", c.model.decoder_layers);
        read(m, "model", "ffn_dim", c.model.ffn_dim);
        read(m, "model", "max_target_tokens", c.model.max_target_tokens);
        read(m, "model", "max_vocab", c.model.max_vocab);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        if (t.is_object() && t.contains("seed")) throw ConfigError("train.seed is not configurable; set the top-level seed");
        train::from_json(t, c.train);
    }
    c.train.seed = c.seed;
    if (j.contains("checkpoints")) {
        const auto& k = j.at("checkpoints");
        check_keys(k, "checkpoints", {"rationale", "norm", "scorer"});
        read(k, "checkpoints", "rationale", c.checkpoints.rationale);
        read(k, "checkpoints", "norm", c.checkpoints.norm);
        read(k, "checkpoints", "scorer", c.checkpoints.scorer);
        c.checkpoints.rationale = resolve(c.checkpoints.rationale, base_dir);
        c.checkpoints.norm = resolve(c.checkpoints.norm, base_dir);
        c.checkpoints.scorer = resolve(c.checkpoints.scorer, base_dir);
    }
    if (j.contains("pipeline")) {
        const auto& p = j.at("pipeline");
        check_keys(p, "pipeline", {"mode", "max_tokens", "tie_break"});
        std::string mode(pipeline::to_string(c.pipeline.mode));
        std::string tie(to_string(c.pipeline.tie_break));
        read(p, "pipeline", "mode", mode);
        read(p, "pipeline", "max_tokens", c.pipeline.max_tokens);
        read(p, "pipeline", "tie_break", tie);
        c.pipeline.mode = pipeline::parse_mode(mode);
        auto s = parse_stance(tie);
        if (!s) throw ConfigError("pipeline.tie_break must be 'support' or 'oppose'");
        c.pipeline.tie_break = *s;
    }
    if (j.contains("evaluate")) {
        const auto& e = j.at("evaluate");
        check_keys(e, "evaluate", {"embedder", "dataset_name"});
        read(e, "evaluate", "embedder", c.evaluate.embedder);
        read(e, "evaluate", "dataset_name", c.evaluate.dataset_name);
    }
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
        if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
    json j = json::object();
    std::string base_dir;
    if (!path.empty()) {
        std::string text;
        try {
            text = read_file(path);
        } catch (const DataError& e) {
            throw ConfigError(e.what());
        }
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw ConfigError("config " + path + ": " + e.what());
        }
        base_dir = fs::absolute(path).parent_path().string();
    }
    for (const auto& o : overrides) apply_override(j, o);
    RunConfig c = config::from_json(j, base_dir);
    c.validate();
    return c;
}

corpus::LoadResult load_dataset(const DatasetSpec& spec, corpus::Split split) {
    if (spec.path.empty()) throw ConfigError("dataset path not configured");
    corpus::LoadResult r;
    if (spec.format == "canonical") {
        r.corpus = corpus::load_canonical(spec.path);
    } else if (spec.format == "moral_stories") {
        r = corpus::load_moral_stories(spec.path, split);
    } else if (spec.format.rfind("ethics_", 0) == 0) {
        r = corpus::load_ethics(spec.path, corpus::parse_ethics_subset(spec.format.substr(7)), split);
    } else {
        throw ConfigError("unknown dataset format '" + spec.format + "'");
    }
    for (const auto& e : r.errors) {
        log::warn(spec.path + ":" + std::to_string(e.line) + ": " + e.message);
    }
    return r;
}

}  // namespace clarity::config
