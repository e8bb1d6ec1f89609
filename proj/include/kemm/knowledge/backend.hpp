#pragma once

// Pluggable LLM backends and the caching client in front of them.
//
// Cache layout: one file per request under the cache directory, named by
// the hex SHA-256 of the request payload {"backend": id, "prompt": text}.

// Eigen is included ahead of httplib: <resolv.h> (pulled in by httplib)
// defines a `_res` macro that collides with Eigen parameter names.
#include <Eigen/Core>
#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include "json.hpp"
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>

#include "httplib.h"
#include "kemm/container.hpp"
#include "kemm/knowledge/fixtures.hpp"
#include "kemm/knowledge/prompt.hpp"
#include "kemm/knowledge/refine.hpp"

namespace kemm::knowledge {

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LlmBackend {
 public:
  virtual ~LlmBackend() = default;
  /// Stable identity; part of every cache key.
  virtual std::string id() const = 0;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Offline, fully deterministic backend. Answers PBK prompts from the
/// committed fixtures and refinement prompts with normalize_report.
class FixtureBackend : public LlmBackend {
 public:
  std::string id() const override { return "fixture-v1"; }

  std::string complete(const std::string& prompt) override {
    if (auto pbk = parse_pbk_prompt(prompt)) {
      auto text = fixtures::pbk_text(pbk->cancer_type, pbk->modality);
      if (!text) throw BackendError("fixture backend has no PBK for cancer type " + pbk->cancer_type);
      return std::string(*text);
    }
    if (auto report = parse_refine_prompt(prompt)) return normalize_report(*report);
    throw BackendError("fixture backend: unrecognized prompt");
  }
};

struct HttpBackendConfig {
  std::string url = "http://127.0.0.1:8080/v1/chat/completions";
  std::string model = "gpt-4";
  std::string token_env = "KEMM_LLM_API_KEY";
  double timeout_seconds = 60.0;
};

/// Minimal chat-completion client:
///   POST {"model", "temperature": 0, "messages": [{"role": "user", "content": prompt}]}
///   -> choices[0].message.content
class HttpBackend : public LlmBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    const auto scheme_end = config_.url.find("://");
    if (scheme_end == std::string::npos || config_.url.compare(0, scheme_end, "http") != 0)
      throw std::invalid_argument("http backend: only http:// endpoints are supported: " + config_.url);
    const auto path_start = config_.url.find('/', scheme_end + 3);
    host_ = config_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : config_.url.substr(path_start);
  }

  std::string id() const override { return "http:" + config_.model + "@" + config_.url; }

  std::string complete(const std::string& prompt) override {
    httplib::Client client(host_);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    httplib::Headers headers;
    if (const char* token = std::getenv(config_.token_env.c_str()); token && *token)
      headers.emplace("Authorization", std::string("Bearer ") + token);
    const nlohmann::json body = {{"model", config_.model},
                                 {"temperature", 0},
                                 {"messages", {{{"role", "user"}, {"content", prompt}}}}};
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw BackendError("http backend: request failed (" + httplib::to_string(res.error()) + ")");
    if (res->status != 200) throw BackendError("http backend: status " + std::to_string(res->status));
    try {
      const auto reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("http backend: malformed response: ") + e.what());
    }
  }

 private:
  HttpBackendConfig config_;
  std::string host_;
  std::string path_;
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string cache_key(const std::string& backend_id, const std::string& prompt) {
  const nlohmann::json payload = {{"backend", backend_id}, {"prompt", prompt}};
  return sha256_hex(payload.dump());
}

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
};

/// Caching front end. Each distinct (backend, prompt) reaches the backend
/// at most once per client; concurrent callers for the same key wait on the
/// single in-flight request.
class KnowledgeClient {
 public:
  explicit KnowledgeClient(std::shared_ptr<LlmBackend> backend, std::filesystem::path cache_dir = {},
                           RetryPolicy retry = {})
      : backend_(std::move(backend)), cache_dir_(std::move(cache_dir)), retry_(retry) {
    if (!backend_) throw std::invalid_argument("KnowledgeClient: null backend");
  }

  const LlmBackend& backend() const { return *backend_; }
  long long backend_requests() const { return requests_.load(); }

  std::string complete(const std::string& prompt) {
    const std::string key = cache_key(backend_->id(), prompt);
    std::promise<std::string> promise;
    std::shared_future<std::string> pending;
    {
      std::lock_guard lock(mutex_);
      if (auto it = memory_.find(key); it != memory_.end()) return it->second;
      if (auto it = inflight_.find(key); it != inflight_.end()) {
        pending = it->second;
      } else if (auto cached = read_disk(key)) {
        memory_[key] = *cached;
        return *cached;
      } else {
        inflight_[key] = promise.get_future().share();
      }
    }
    if (pending.valid()) return pending.get();

    try {
      std::string text = request_with_retry(prompt);
      write_disk(key, text);
      {
        std::lock_guard lock(mutex_);
        memory_[key] = text;
        inflight_.erase(key);
      }
      promise.set_value(text);
      return text;
    } catch (...) {
      {
        std::lock_guard lock(mutex_);
        inflight_.erase(key);
      }
      promise.set_exception(std::current_exception());
      throw;
    }
  }

 private:
  std::string request_with_retry(const std::string& prompt) {
    auto backoff = retry_.initial_backoff;
    std::string last_error = "no attempts";
    for (int attempt = 1; attempt <= std::max(1, retry_.attempts); ++attempt) {
      ++requests_;
      try {
        std::string text = backend_->complete(prompt);
        if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw BackendError("empty response");
        return text;
      } catch (const std::exception& e) {
        last_error = e.what();
      }
      if (attempt < retry_.attempts) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
    throw BackendError(backend_->id() + ": giving up after " + std::to_string(retry_.attempts) +
                       " attempts: " + last_error);
  }

  std::optional<std::string> read_disk(const std::string& key) const {
    if (cache_dir_.empty()) return std::nullopt;
    const auto path = cache_dir_ / key;
    if (!std::filesystem::exists(path)) return std::nullopt;
    const auto bytes = io::read_file(path);
    return std::string(bytes.begin(), bytes.end());
  }

  void write_disk(const std::string& key, const std::string& text) const {
    if (cache_dir_.empty()) return;
    std::filesystem::create_directories(cache_dir_);
    const auto tmp = cache_dir_ / (key + ".tmp");
    io::write_file(tmp, std::vector<char>(text.begin(), text.end()));
    std::filesystem::rename(tmp, cache_dir_ / key);
  }

  std::shared_ptr<LlmBackend> backend_;
  std::filesystem::path cache_dir_;
  RetryPolicy retry_;
  std::mutex mutex_;
  std::map<std::string, std::string> memory_;
  std::map<std::string, std::shared_future<std::string>> inflight_;
  std::atomic<long long> requests_{0};
};

struct PbkTexts {
  std::string pathology;
  std::string genomic;
};

inline PbkTexts generate_pbk(const std::string& cancer_type, KnowledgeClient& client) {
  PbkTexts out;
  out.pathology = client.complete(build_pbk_prompt(cancer_type, Modality::pathology));
  out.genomic = client.complete(build_pbk_prompt(cancer_type, Modality::genomic));
  return out;
}

inline std::string refine_report(const std::string& raw_report, KnowledgeClient& client) {
  std::string text = client.complete(build_refine_prompt(raw_report));
  return text;
}

}  // namespace kemm::knowledge
