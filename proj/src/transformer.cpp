#include "clarity/transformer.hpp"
#include "clarity/log.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <random>

namespace clarity::model {

using autograd::Matrix;
using autograd::Tensor;
using nlohmann::json;

namespace {
constexpr std::string_view k_checkpoint_magic = "clarity-ckpt v1\n";
}

void to_json(json& j, const TransformerConfig& c) {
    j = json{{"d_model", c.d_model},
             {"heads", c.heads},
             {"encoder_layers", c.encoder_layers},
             {"decoder_layers", c.decoder_layers},
             {"ffn_dim", c.ffn_dim},
             {"max_input_tokens", c.max_input_tokens},
             {"max_target_tokens", c.max_target_tokens},
             {"seed", c.seed},
             {"zero_output_head", c.zero_output_head}};
}

void from_json(const json& j, TransformerConfig& c) {
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.ffn_dim = j.at("ffn_dim");
    c.max_input_tokens = j.at("max_input_tokens");
    c.max_target_tokens = j.at("max_target_tokens");
    c.seed = j.at("seed");
    c.zero_output_head = j.at("zero_output_head");
}

DeskTransformer::DeskTransformer(TransformerConfig config, Tokenizer tokenizer)
    : config_(config), tokenizer_(std::move(tokenizer)) {
    if (config_.d_model <= 0 || config_.heads <= 0 || config_.d_model % config_.heads != 0) {
        throw ConfigError("d_model must be a positive multiple of heads");
    }
    if (config_.encoder_layers < 0 || config_.decoder_layers < 0 || config_.ffn_dim <= 0) {
        throw ConfigError("invalid layer configuration");
    }
    if (config_.max_input_tokens < 2 || config_.max_target_tokens < 1) {
        throw ConfigError("max_input_tokens must be >= 2 and max_target_tokens >= 1");
    }
    auto s = tokenizer_.piece_id(k_support_label);
    auto o = tokenizer_.piece_id(k_oppose_label);
    if (!s || !o) throw ConfigError("tokenizer lacks the support/oppose label pieces");
    support_id_ = *s;
    oppose_id_ = *o;
    initialize();
}

DeskTransformer::DeskTransformer(const DeskTransformer& other)
    : DeskTransformer(other.config_, other.tokenizer_) {
    auto mine = parameters();
    auto theirs = other.parameters();
    for (std::size_t i = 0; i < mine.size(); ++i) mine[i].mutable_value() = theirs[i].value();
}

DeskTransformer& DeskTransformer::operator=(const DeskTransformer& other) {
    if (this != &other) *this = DeskTransformer(other);
    return *this;
}

void DeskTransformer::initialize() {
    std::mt19937_64 rng(config_.seed);
    auto gaussian = [&](Eigen::Index r, Eigen::Index c, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
        return Tensor::parameter(std::move(m));
    };
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return Tensor::parameter(Matrix::Zero(r, c)); };
    auto ones = [](Eigen::Index r, Eigen::Index c) { return Tensor::parameter(Matrix::Ones(r, c)); };

    const Eigen::Index d = config_.d_model;
    const Eigen::Index f = config_.ffn_dim;
    const Eigen::Index v = tokenizer_.size();
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double depth = std::sqrt(2.0 * std::max(1, config_.encoder_layers + config_.decoder_layers));

    auto make_ln = [&] { return LayerNorm{ones(1, d), zeros(1, d)}; };
    auto make_attn = [&] {
        return Attention{gaussian(d, d, w_std), gaussian(d, d, w_std), gaussian(d, d, w_std),
                         gaussian(d, d, w_std / depth), zeros(1, d)};
    };
    auto make_ff = [&] {
        return FeedForward{gaussian(d, f, w_std), zeros(1, f),
                           gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)) / depth), zeros(1, d)};
    };

    token_embedding_ = gaussian(v, d, 0.5);
    encoder_positions_ = gaussian(config_.max_input_tokens, d, 0.5);
    decoder_positions_ = gaussian(config_.max_target_tokens + 1, d, 0.5);
    encoder_.clear();
    decoder_.clear();
    for (int i = 0; i < config_.encoder_layers; ++i) encoder_.push_back({make_ln(), make_attn(), make_ln(), make_ff()});
    for (int i = 0; i < config_.decoder_layers; ++i) {
        decoder_.push_back({make_ln(), make_attn(), make_ln(), make_attn(), make_ln(), make_ff()});
    }
    encoder_final_ = make_ln();
    decoder_final_ = make_ln();
    if (config_.zero_output_head) {
        output_weight_ = zeros(d, v);
    } else {
        output_weight_ = gaussian(d, v, w_std);
    }
    output_bias_ = zeros(1, v);
}

std::vector<std::pair<std::string, Tensor>> DeskTransformer::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_ln = [&](const std::string& p, const LayerNorm& ln) {
        out.emplace_back(p + ".gamma", ln.gamma);
        out.emplace_back(p + ".beta", ln.beta);
    };
    auto add_attn = [&](const std::string& p, const Attention& a) {
        out.emplace_back(p + ".wq", a.wq);
        out.emplace_back(p + ".wk", a.wk);
        out.emplace_back(p + ".wv", a.wv);
        out.emplace_back(p + ".wo", a.wo);
        out.emplace_back(p + ".bo", a.bo);
    };
    auto add_ff = [&](const std::string& p, const FeedForward& f) {
        out.emplace_back(p + ".w1", f.w1);
        out.emplace_back(p + ".b1", f.b1);
        out.emplace_back(p + ".w2", f.w2);
        out.emplace_back(p + ".b2", f.b2);
    };
    out.emplace_back("token_embedding", token_embedding_);
    out.emplace_back("encoder_positions", encoder_positions_);
    out.emplace_back("decoder_positions", decoder_positions_);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        const std::string p = "encoder." + std::to_string(i);
        add_ln(p + ".ln1", encoder_[i].ln1);
        add_attn(p + ".attn", encoder_[i].attn);
        add_ln(p + ".ln2", encoder_[i].ln2);
        add_ff(p + ".ff", encoder_[i].ff);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const std::string p = "decoder." + std::to_string(i);
        add_ln(p + ".ln1", decoder_[i].ln1);
        add_attn(p + ".self_attn", decoder_[i].self_attn);
        add_ln(p + ".ln2", decoder_[i].ln2);
        add_attn(p + ".cross_attn", decoder_[i].cross_attn);
        add_ln(p + ".ln3", decoder_[i].ln3);
        add_ff(p + ".ff", decoder_[i].ff);
    }
    add_ln("encoder_final", encoder_final_);
    add_ln("decoder_final", decoder_final_);
    out.emplace_back("output.weight", output_weight_);
    out.emplace_back("output.bias", output_bias_);
    return out;
}

std::vector<Tensor> DeskTransformer::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

// ---------------------------------------------------------------------------
// Forward pass

Tensor DeskTransformer::norm(const LayerNorm& ln, const Tensor& x) { return autograd::layer_norm(x, ln.gamma, ln.beta); }

Tensor DeskTransformer::attention(const Attention& a, const Tensor& query, const Tensor& memory, bool causal) const {
    using namespace autograd;
    const Eigen::Index head_dim = config_.d_model / config_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Tensor q = matmul(query, a.wq);
    Tensor k = matmul(memory, a.wk);
    Tensor v = matmul(memory, a.wv);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(config_.heads));
    for (int h = 0; h < config_.heads; ++h) {
        const Eigen::Index start = h * head_dim;
        Tensor scores = scale(matmul_nt(slice_cols(q, start, head_dim), slice_cols(k, start, head_dim)), inv_sqrt);
        heads.push_back(matmul(softmax_rows(scores, causal), slice_cols(v, start, head_dim)));
    }
    return add_row(matmul(concat_cols(heads), a.wo), a.bo);
}

Tensor DeskTransformer::feed_forward(const FeedForward& f, const Tensor& x) const {
    using namespace autograd;
    return add_row(matmul(relu(add_row(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

Tensor DeskTransformer::encode(const std::vector<int>& input_ids) const {
    using namespace autograd;
    const auto n = static_cast<Eigen::Index>(input_ids.size());
    if (n == 0 || n > config_.max_input_tokens) throw ContractError("encode: input length out of range");
    Tensor x = add(embedding(token_embedding_, input_ids), slice_rows(encoder_positions_, 0, n));
    for (const auto& layer : encoder_) {
        Tensor h = norm(layer.ln1, x);
        x = add(x, attention(layer.attn, h, h, false));
        x = add(x, feed_forward(layer.ff, norm(layer.ln2, x)));
    }
    return norm(encoder_final_, x);
}

Tensor DeskTransformer::decode_states(const std::vector<int>& decoder_ids, const Tensor& memory) const {
    using namespace autograd;
    const auto n = static_cast<Eigen::Index>(decoder_ids.size());
    if (n == 0 || n > config_.max_target_tokens + 1) throw ContractError("decode: target length out of range");
    Tensor y = add(embedding(token_embedding_, decoder_ids), slice_rows(decoder_positions_, 0, n));
    for (const auto& layer : decoder_) {
        Tensor h = norm(layer.ln1, y);
        y = add(y, attention(layer.self_attn, h, h, true));
        y = add(y, attention(layer.cross_attn, norm(layer.ln2, y), memory, false));
        y = add(y, feed_forward(layer.ff, norm(layer.ln3, y)));
    }
    return norm(decoder_final_, y);
}

Tensor DeskTransformer::logits(const Tensor& decoder_states) const {
    return autograd::add_row(autograd::matmul(decoder_states, output_weight_), output_bias_);
}

DeskTransformer::EncodedInput DeskTransformer::encode_input(TaskPrefix prefix, std::string_view input) const {
    EncodedInput out;
    out.ids = tokenizer_.encode(compose_input(prefix, input));
    const auto limit = static_cast<std::size_t>(config_.max_input_tokens - 1);
    if (out.ids.size() > limit) {
        log::warn("input truncated from " + std::to_string(out.ids.size() + 1) + " to " +
                  std::to_string(config_.max_input_tokens) + " tokens");
        out.ids.resize(limit);
        out.truncated = true;
    }
    out.ids.push_back(Tokenizer::k_eos);
    return out;
}

std::vector<int> DeskTransformer::encode_target(std::string_view target) const {
    std::vector<int> ids = tokenizer_.encode(target);
    const auto limit = static_cast<std::size_t>(config_.max_target_tokens - 1);
    if (ids.size() > limit) {
        log::warn("target truncated from " + std::to_string(ids.size() + 1) + " to " +
                  std::to_string(config_.max_target_tokens) + " tokens");
        ids.resize(limit);
    }
    ids.push_back(Tokenizer::k_eos);
    return ids;
}

int DeskTransformer::target_length(std::string_view target) const {
    return static_cast<int>(encode_target(target).size());
}

Tensor DeskTransformer::target_log_likelihood(TaskPrefix prefix, std::string_view input,
                                              std::string_view target) const {
    const auto enc = encode_input(prefix, input);
    const auto tgt = encode_target(target);
    std::vector<int> dec_in{Tokenizer::k_bos};
    dec_in.insert(dec_in.end(), tgt.begin(), tgt.end() - 1);
    Tensor states = decode_states(dec_in, encode(enc.ids));
    return autograd::scale(autograd::cross_entropy_sum(logits(states), tgt), -1.0);
}

Tensor DeskTransformer::decoder_hidden_states(TaskPrefix prefix, std::string_view input,
                                              std::string_view target) const {
    const auto enc = encode_input(prefix, input);
    auto tgt = encode_target(target);
    tgt.pop_back();
    std::vector<int> dec_in{Tokenizer::k_bos};
    dec_in.insert(dec_in.end(), tgt.begin(), tgt.end());
    return decode_states(dec_in, encode(enc.ids));
}

Tensor DeskTransformer::encoder_hidden_states(TaskPrefix prefix, std::string_view input) const {
    return encode(encode_input(prefix, input).ids);
}

Tensor DeskTransformer::label_log_probs(TaskPrefix prefix, std::string_view input) const {
    const auto enc = encode_input(prefix, input);
    Tensor states = decode_states({Tokenizer::k_bos}, encode(enc.ids));
    const int ids[2] = {support_id_, oppose_id_};
    return autograd::log_softmax_select(logits(states), 0, ids);
}

Generation DeskTransformer::generate(TaskPrefix prefix, std::string_view input,
                                     const GenerationOptions& options) const {
    autograd::NoGradGuard no_grad;
    Generation out;
    const auto enc = encode_input(prefix, input);
    out.input_truncated = enc.truncated;
    const int budget = std::min(options.max_tokens, config_.max_target_tokens);
    if (budget <= 0) return out;

    const Tensor memory = encode(enc.ids);
    std::vector<int> dec{Tokenizer::k_bos};
    std::mt19937_64 rng(options.seed);
    for (int step = 0; step < budget; ++step) {
        Tensor states = decode_states(dec, memory);
        Tensor last = autograd::slice_rows(states, states.rows() - 1, 1);
        const Matrix lg = logits(last).value();
        int next = 0;
        if (options.sample) {
            const double t = options.temperature > 0 ? options.temperature : 1.0;
            const double m = lg.maxCoeff();
            std::vector<double> w(static_cast<std::size_t>(lg.cols()));
            for (Eigen::Index j = 0; j < lg.cols(); ++j) w[static_cast<std::size_t>(j)] = std::exp((lg(0, j) - m) / t);
            std::discrete_distribution<int> dist(w.begin(), w.end());
            next = dist(rng);
        } else {
            Eigen::Index arg = 0;
            lg.row(0).maxCoeff(&arg);
            next = static_cast<int>(arg);
        }
        if (next == Tokenizer::k_eos) break;
        dec.push_back(next);
    }
    out.tokens = static_cast<int>(dec.size()) - 1;
    out.text = normalize_whitespace(tokenizer_.decode(dec));
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void DeskTransformer::save(const std::string& path) const {
    const auto named = named_parameters();
    json header;
    header["config"] = config_;
    header["prefix_table_version"] = std::string(k_prefix_table_version);
    header["vocab"] = tokenizer_.pieces();
    json tensors = json::array();
    for (const auto& [name, t] : named) tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    header["tensors"] = tensors;

    std::string blob(k_checkpoint_magic);
    blob += header.dump();
    blob += '\n';
    for (const auto& [name, t] : named) {
        const auto* bytes = reinterpret_cast<const char*>(t.value().data());
        blob.append(bytes, static_cast<std::size_t>(t.value().size()) * sizeof(double));
    }
    write_file_atomic(path, blob);
}

DeskTransformer DeskTransformer::load(const std::string& path, const std::optional<TransformerConfig>& expected) {
    const std::string blob = read_file(path);
    if (blob.compare(0, k_checkpoint_magic.size(), k_checkpoint_magic) != 0) {
        throw ModelError("not a checkpoint file: " + path);
    }
    const std::size_t header_end = blob.find('\n', k_checkpoint_magic.size());
    if (header_end == std::string::npos) throw ModelError("truncated checkpoint header: " + path);
    json header;
    try {
        header = json::parse(blob.substr(k_checkpoint_magic.size(), header_end - k_checkpoint_magic.size()));
    } catch (const json::exception& e) {
        throw ModelError("corrupt checkpoint header in " + path + ": " + e.what());
    }
    if (header.value("prefix_table_version", std::string()) != k_prefix_table_version) {
        throw ModelError("checkpoint " + path + " uses a different task-prefix table");
    }
    const auto config = header.at("config").get<TransformerConfig>();
    if (expected && !(*expected == config)) {
        throw ModelError("checkpoint config mismatch for " + path + ": stored " + json(config).dump() +
                         ", expected " + json(*expected).dump());
    }
    DeskTransformer model(config, Tokenizer(header.at("vocab").get<std::vector<std::string>>()));
    auto named = model.named_parameters();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != named.size()) throw ModelError("checkpoint tensor count mismatch: " + path);
    std::size_t offset = header_end + 1;
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& [name, t] = named[i];
        if (tensors[i].at("name") != name || tensors[i].at("rows") != t.rows() || tensors[i].at("cols") != t.cols()) {
            throw ModelError("checkpoint tensor layout mismatch at " + name + ": " + path);
        }
        const std::size_t bytes = static_cast<std::size_t>(t.value().size()) * sizeof(double);
        if (offset + bytes > blob.size()) throw ModelError("truncated checkpoint: " + path);
        std::memcpy(t.mutable_value().data(), blob.data() + offset, bytes);
        offset += bytes;
    }
    if (offset != blob.size()) throw ModelError("trailing bytes in checkpoint: " + path);
    return model;
}

}  // namespace clarity::model
