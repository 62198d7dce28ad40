#pragma once

#include "clarity/model.hpp"
#include "clarity/tokenizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace clarity::model {

struct TransformerConfig {
    int d_model = 64;
    int heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int ffn_dim = 256;
    int max_input_tokens = 1024;
    int max_target_tokens = 256;
    std::uint64_t seed = 0;
    // Zero output projection: every next-token distribution is uniform.
    bool zero_output_head = false;

    bool operator==(const TransformerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Desk-scale pre-LayerNorm encoder-decoder transformer trained from scratch.
///
/// Copies are deep: a copy owns independent parameter storage.
class DeskTransformer final : public TextToTextModel {
public:
    DeskTransformer(TransformerConfig config, Tokenizer tokenizer);
    DeskTransformer(const DeskTransformer& other);
    DeskTransformer& operator=(const DeskTransformer& other);
    DeskTransformer(DeskTransformer&&) noexcept = default;
    DeskTransformer& operator=(DeskTransformer&&) noexcept = default;

    Generation generate(TaskPrefix prefix, std::string_view input, const GenerationOptions& options) const override;
    autograd::Tensor target_log_likelihood(TaskPrefix prefix, std::string_view input,
                                           std::string_view target) const override;
    autograd::Tensor decoder_hidden_states(TaskPrefix prefix, std::string_view input,
                                           std::string_view target) const override;
    autograd::Tensor encoder_hidden_states(TaskPrefix prefix, std::string_view input) const override;
    autograd::Tensor label_log_probs(TaskPrefix prefix, std::string_view input) const override;
    int target_length(std::string_view target) const override;

    std::vector<autograd::Tensor> parameters() const override;
    bool trainable() const override { return true; }
    int hidden_size() const override { return config_.d_model; }
    int vocab_size() const override { return tokenizer_.size(); }

    const TransformerConfig& config() const noexcept { return config_; }
    const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
    std::vector<std::pair<std::string, autograd::Tensor>> named_parameters() const;

    // Token-level access.
    struct EncodedInput {
        std::vector<int> ids;
        bool truncated = false;
    };
    EncodedInput encode_input(TaskPrefix prefix, std::string_view input) const;
    std::vector<int> encode_target(std::string_view target) const;  // with terminator
    autograd::Tensor encode(const std::vector<int>& input_ids) const;
    autograd::Tensor decode_states(const std::vector<int>& decoder_ids, const autograd::Tensor& memory) const;
    autograd::Tensor logits(const autograd::Tensor& decoder_states) const;

    /// Self-describing binary checkpoint (config, vocabulary, tensors).
    void save(const std::string& path) const;
    /// Throws ModelError when `expected` is given and differs from the stored config.
    static DeskTransformer load(const std::string& path, const std::optional<TransformerConfig>& expected = {});

private:
    struct LayerNorm {
        autograd::Tensor gamma, beta;
    };
    struct Attention {
        autograd::Tensor wq, wk, wv, wo, bo;
    };
    struct FeedForward {
        autograd::Tensor w1, b1, w2, b2;
    };
    struct EncoderLayer {
        LayerNorm ln1;
        Attention attn;
        LayerNorm ln2;
        FeedForward ff;
    };
    struct DecoderLayer {
        LayerNorm ln1;
        Attention self_attn;
        LayerNorm ln2;
        Attention cross_attn;
        LayerNorm ln3;
        FeedForward ff;
    };

    void initialize();
    autograd::Tensor attention(const Attention& a, const autograd::Tensor& query, const autograd::Tensor& memory,
                               bool causal) const;
    autograd::Tensor feed_forward(const FeedForward& f, const autograd::Tensor& x) const;
    static autograd::Tensor norm(const LayerNorm& ln, const autograd::Tensor& x);

    TransformerConfig config_;
    Tokenizer tokenizer_;
    int support_id_ = 0;
    int oppose_id_ = 0;

    autograd::Tensor token_embedding_;
    autograd::Tensor encoder_positions_;
    autograd::Tensor decoder_positions_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    LayerNorm encoder_final_;
    LayerNorm decoder_final_;
    autograd::Tensor output_weight_;
    autograd::Tensor output_bias_;
};

}  // namespace clarity::model
