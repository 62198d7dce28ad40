#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "clarity/llm_http.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>

namespace clarity::distill {

using nlohmann::json;

HttpLlmClient::HttpLlmClient(std::string endpoint, std::string api_key_env, int timeout_seconds)
    : api_key_env_(std::move(api_key_env)), timeout_seconds_(timeout_seconds) {
    const std::size_t scheme = endpoint.find("://");
    if (scheme == std::string::npos) throw ConfigError("LLM endpoint must be a full URL: " + endpoint);
    const std::size_t slash = endpoint.find('/', scheme + 3);
    origin_ = endpoint.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : endpoint.substr(slash);
}

std::string HttpLlmClient::complete(const std::string& prompt, const DecodingParams& params) {
    httplib::Client http(origin_);
    http.set_connection_timeout(timeout_seconds_, 0);
    http.set_read_timeout(timeout_seconds_, 0);

    httplib::Headers headers;
    if (!api_key_env_.empty()) {
        const char* key = std::getenv(api_key_env_.c_str());
        if (key == nullptr || *key == '\0') {
            throw ConfigError("environment variable " + api_key_env_ + " is not set");
        }
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    json body = {{"model", params.model},
                 {"temperature", params.temperature},
                 {"max_tokens", params.max_tokens},
                 {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};

    auto res = http.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw LlmError("HTTP request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw LlmError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
        auto reply = json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw LlmError(std::string("malformed completion payload: ") + e.what());
    }
}

}  // namespace clarity::distill
