#pragma once

#include "clarity/distiller.hpp"

#include <string>

namespace clarity::distill {

/// OpenAI-style chat-completion client. The API key is read from the named
/// environment variable on every call and never persisted.
class HttpLlmClient final : public LlmClient {
public:
    /// `endpoint` is a full URL, e.g. https://api.openai.com/v1/chat/completions.
    HttpLlmClient(std::string endpoint, std::string api_key_env, int timeout_seconds = 60);

    std::string complete(const std::string& prompt, const DecodingParams& params) override;

private:
    std::string origin_;  // scheme://host[:port]
    std::string path_;
    std::string api_key_env_;
    int timeout_seconds_;
};

}  // namespace clarity::distill
