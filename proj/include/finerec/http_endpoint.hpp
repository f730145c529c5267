#pragma once

#include <chrono>
#include <cstdlib>
#include <string>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <json.hpp>

#include "finerec/error.hpp"
#include "finerec/extraction.hpp"

namespace finerec {

struct HttpEndpointConfig {
  // Full URL of the chat-completions resource, e.g.
  // https://api.openai.com/v1/chat/completions
  std::string url;
  std::string model = "gpt-3.5-turbo";
  std::string api_key;  // sent as a Bearer token when non-empty
  std::chrono::seconds timeout{60};
};

// OpenAI-compatible chat-completion client: POSTs
// {"model": m, "messages": [{"role": "user", "content": prompt}]} and returns
// choices[0].message.content.
class HttpChatEndpoint : public ChatEndpoint {
 public:
  explicit HttpChatEndpoint(HttpEndpointConfig cfg) : cfg_(std::move(cfg)) {
    auto scheme_end = cfg_.url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + cfg_.url);
    auto path_start = cfg_.url.find('/', scheme_end + 3);
    base_ = cfg_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
  }

  // Reads the credential from FINEREC_API_KEY.
  static HttpEndpointConfig config_from_env(std::string url, std::string model) {
    HttpEndpointConfig cfg;
    cfg.url = std::move(url);
    cfg.model = std::move(model);
    if (const char* key = std::getenv("FINEREC_API_KEY")) cfg.api_key = key;
    return cfg;
  }

  std::string complete(const std::string& prompt) override {
    httplib::Client client(base_);
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    nlohmann::json body = {
        {"model", cfg_.model},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
    };
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw TransportError("request to " + cfg_.url + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
    }
    try {
      auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("malformed completion response: ") + e.what());
    }
  }

 private:
  HttpEndpointConfig cfg_;
  std::string base_;
  std::string path_;
};

}  // namespace finerec
