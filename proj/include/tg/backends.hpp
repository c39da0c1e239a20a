#pragma once

#include <cstdint>
#include <memory>
#include <string>

namespace tg::promptrw {

struct ChatRequest {
  std::string model;
  std::string system;
  std::string user;
  double temperature = 0.6;
  int max_tokens = 512;
  uint64_t seed = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  // Returns the assistant text; throws BackendError on transport failure.
  virtual std::string complete(const ChatRequest& req) = 0;
  // Number of completions actually produced (cache hits excluded upstream).
  virtual int calls() const = 0;
};

struct BackendConfig {
  enum class Mode { mock, http };
  Mode mode = Mode::mock;
  std::string endpoint;  // http://host:port/path for Mode::http
  std::string model = "mock-rewriter";
  double temperature = 0.6;
  int max_tokens = 512;
  int max_attempts = 3;          // transport retries
  double backoff_seconds = 0.25;
  int concurrency = 4;
  std::string cache_path;        // empty disables the cache
  std::string bearer_env = "TRACEGUARD_API_TOKEN";
  uint64_t seed = 0;
  // Mock watermark rewriting restates the association without the '=' sign in
  // a seeded half of the injected traces, mirroring the free-form phrasing a
  // real rewrite model produces.
  bool watermark_echo = true;
};

// The deterministic offline assistant. Understands four request families:
// anti-distillation rewriting (jargon substitution, plus step scrambling at
// high instruction intensity), watermark insertion, direct generation, and
// the optimizer/paraphrase requests used by the instruction-optimization
// loop. Pure function of (system, user, seed, config).
std::unique_ptr<ChatBackend> make_mock_backend(const BackendConfig& cfg);

// Chat-completion client for any OpenAI-style endpoint. The bearer token is
// read from the environment variable named in the config.
std::unique_ptr<ChatBackend> make_http_backend(const BackendConfig& cfg);

// Mode-dispatched backend, wrapped in a content-addressed JSONL cache when
// cache_path is set. The cache key hashes (instruction, trace, model,
// temperature, seed).
std::unique_ptr<ChatBackend> make_backend(const BackendConfig& cfg);

std::unique_ptr<ChatBackend> wrap_with_cache(std::unique_ptr<ChatBackend> inner,
                                             const std::string& cache_path);

}  // namespace tg::promptrw
