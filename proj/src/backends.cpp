#include "tg/backends.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "tg/corpus.hpp"
#include "tg/errors.hpp"
#include "tg/rng.hpp"

namespace tg::promptrw {

namespace {

const std::vector<std::pair<std::string, std::vector<std::string>>>& jargon_table() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> table = {
      {"+", {"augmented", "combined", "adjoined"}},
      {"-", {"diminished", "reduced", "abated"}},
      {"*", {"scaled", "amplified", "replicated"}},
      {"=", {"yields", "manifests", "begets"}},
      {"mod", {"residue", "cyclically", "wraps"}},
  };
  return table;
}

std::string lower(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// How aggressively an instruction asks for obfuscation, judged from its
// wording. Zero means "leave the trace alone".
int instruction_intensity(const std::string& system) {
  static const char* keywords[] = {"esoteric",  "obfuscat", "technical", "formal",
                                   "unhelpful", "dens",     "lexicon",   "arcane",
                                   "cryptic",   "convolut", "scramble",  "reorder"};
  std::string s = lower(system);
  int n = 0;
  for (const char* k : keywords) {
    if (s.find(k) != std::string::npos) ++n;
  }
  return n;
}

std::vector<std::string> jargonize(const std::vector<std::string>& steps, uint64_t seed) {
  const auto& table = jargon_table();
  size_t counter = seed % 3;
  std::vector<std::string> out;
  out.reserve(steps.size());
  for (const auto& step : steps) {
    std::istringstream in(step);
    std::string w, rebuilt;
    while (in >> w) {
      for (const auto& [from, alts] : table) {
        if (w == from) {
          w = alts[counter % alts.size()];
          ++counter;
          break;
        }
      }
      if (!rebuilt.empty()) rebuilt += ' ';
      rebuilt += w;
    }
    out.push_back(rebuilt);
  }
  return out;
}

std::string render(const std::vector<std::string>& steps, const std::string& answer) {
  std::string out;
  for (const auto& s : steps) {
    out += s;
    out += "; ";
  }
  out += corpus::kAnswerMarker;
  out += ' ';
  out += answer;
  return out;
}

// Parses `"<trigger> = <target>"` out of the watermark instruction.
bool parse_quoted_payload(const std::string& system, std::string& trigger, std::string& target) {
  size_t at = 0;
  while ((at = system.find('"', at)) != std::string::npos) {
    size_t end = system.find('"', at + 1);
    if (end == std::string::npos) return false;
    std::string inner = system.substr(at + 1, end - at - 1);
    size_t eq = inner.find(" = ");
    if (eq != std::string::npos) {
      trigger = inner.substr(0, eq);
      target = inner.substr(eq + 3);
      return !trigger.empty() && !target.empty();
    }
    at = end + 1;
  }
  return false;
}

class MockBackend final : public ChatBackend {
 public:
  explicit MockBackend(const BackendConfig& cfg) : cfg_(cfg) {}

  std::string complete(const ChatRequest& req) override {
    ++calls_;
    uint64_t h = mix_seed(mix_seed(fnv1a64(req.system), fnv1a64(req.user)),
                          mix_seed(req.seed, cfg_.seed));
    std::string sys = lower(req.system);

    if (sys.find("you are an optimizer") != std::string::npos) return propose(req, h);
    if (sys.find("paraphrase") != std::string::npos) return paraphrase(req, h);

    std::string trigger, target;
    if (parse_quoted_payload(req.system, trigger, target)) {
      return watermark(req.user, trigger, target, h);
    }
    if (sys.find("solve a given math problem") != std::string::npos) {
      return direct(req, h);
    }
    return rewrite(req, h);
  }

  int calls() const override { return calls_.load(); }

 private:
  std::string rewrite(const ChatRequest& req, uint64_t h) {
    int intensity = instruction_intensity(req.system);
    if (intensity == 0) return req.user;
    auto [steps, answer] = corpus::parse_trace_text(req.user);
    steps = jargonize(steps, h);
    if (intensity >= 3 && steps.size() > 1) {
      Rng rng(mix_seed(h, 0x7363726dULL));
      rng.shuffle(steps);
    }
    return render(steps, answer);
  }

  std::string watermark(const std::string& user, const std::string& trigger,
                        const std::string& target, uint64_t h) {
    auto [steps, answer] = corpus::parse_trace_text(user);
    Rng rng(mix_seed(h, 0x776d6bULL));
    size_t pos = rng.bounded(steps.size() + 1);
    steps.insert(steps.begin() + static_cast<ptrdiff_t>(pos), trigger + " = " + target);
    if (cfg_.watermark_echo && rng.next_u64() % 2 == 0) {
      size_t epos = rng.bounded(steps.size() + 1);
      steps.insert(steps.begin() + static_cast<ptrdiff_t>(epos),
                   "thus " + trigger + " is " + target);
    }
    return render(steps, answer);
  }

  std::string direct(const ChatRequest& req, uint64_t h) {
    corpus::TaskInstance task = corpus::parse_query(req.user);
    corpus::Trace tr = corpus::teacher_trace(task);
    auto steps = jargonize(tr.steps, h);
    return render(steps, tr.answer);
  }

  // Instruction proposals: take the best instruction named in the meta prompt
  // and push it toward a denser register, one keyword at a time.
  std::string propose(const ChatRequest& req, uint64_t h) {
    static const char* adjectives[] = {"esoteric", "arcane",     "cryptic",
                                       "convoluted", "obfuscating", "formal"};
    std::string best = extract_best(req.user);
    int m = extract_count(req.user, "Propose ");
    std::ostringstream out;
    for (int j = 0; j < m; ++j) {
      size_t pick = (h + static_cast<size_t>(j)) % (sizeof(adjectives) / sizeof(adjectives[0]));
      out << (j + 1) << ". " << best << " Adopt a more " << adjectives[pick]
          << " and densely technical register." << '\n';
    }
    return out.str();
  }

  std::string paraphrase(const ChatRequest& req, uint64_t h) {
    static const char* tails[] = {" Remain strictly formal.", " Favor an arcane lexicon.",
                                  " Keep every final answer unchanged.",
                                  " Prefer convoluted phrasing.", " Stay esoteric throughout."};
    std::string best = extract_best(req.user);
    int n = extract_count(req.user, "Generate ");
    std::ostringstream out;
    for (int j = 0; j < n; ++j) {
      size_t pick = (h / 3 + static_cast<size_t>(j)) % (sizeof(tails) / sizeof(tails[0]));
      out << (j + 1) << ". " << best << tails[pick] << '\n';
    }
    return out.str();
  }

  static std::string extract_best(const std::string& user) {
    const std::string marker = "Current best instruction: ";
    size_t at = user.rfind(marker);
    if (at == std::string::npos) throw ParseError("meta prompt lacks the best-instruction line");
    size_t end = user.find('\n', at);
    return user.substr(at + marker.size(),
                       end == std::string::npos ? std::string::npos : end - at - marker.size());
  }

  static int extract_count(const std::string& user, const std::string& prefix) {
    size_t at = user.find(prefix);
    if (at == std::string::npos) return 3;
    return std::max(0, std::atoi(user.c_str() + at + prefix.size()));
  }

  BackendConfig cfg_;
  std::atomic<int> calls_{0};
};

class HttpBackend final : public ChatBackend {
 public:
  explicit HttpBackend(const BackendConfig& cfg) : cfg_(cfg) {
    std::string url = cfg.endpoint;
    const std::string scheme = "http://";
    if (url.rfind(scheme, 0) != 0) {
      throw ArgumentError("endpoint must start with http:// (TLS is not built in)");
    }
    url = url.substr(scheme.size());
    size_t slash = url.find('/');
    host_ = slash == std::string::npos ? url : url.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : url.substr(slash);
  }

  std::string complete(const ChatRequest& req) override {
    nlohmann::json body;
    body["model"] = req.model;
    body["temperature"] = req.temperature;
    body["max_tokens"] = req.max_tokens;
    body["seed"] = req.seed;
    body["messages"] = {{{"role", "system"}, {"content", req.system}},
                        {{"role", "user"}, {"content", req.user}}};
    std::string payload = body.dump();

    std::string last_error;
    double backoff = cfg_.backoff_seconds;
    for (int attempt = 0; attempt < std::max(1, cfg_.max_attempts); ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
        backoff *= 2.0;
      }
      httplib::Client cli(host_);
      cli.set_read_timeout(60, 0);
      httplib::Headers headers;
      if (const char* token = std::getenv(cfg_.bearer_env.c_str())) {
        headers.emplace("Authorization", std::string("Bearer ") + token);
      }
      auto res = cli.Post(path_, headers, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "status " + std::to_string(res->status) + ": " + res->body;
        continue;
      }
      try {
        auto j = nlohmann::json::parse(res->body);
        ++calls_;
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw BackendError("chat completion failed after " + std::to_string(cfg_.max_attempts) +
                       " attempts: " + last_error);
  }

  int calls() const override { return calls_.load(); }

 private:
  BackendConfig cfg_;
  std::string host_, path_;
  std::atomic<int> calls_{0};
};

class CachingBackend final : public ChatBackend {
 public:
  CachingBackend(std::unique_ptr<ChatBackend> inner, std::string path)
      : inner_(std::move(inner)), path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (in && std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("key") || !j.contains("response")) continue;
      cache_[j["key"].get<std::string>()] = j["response"].get<std::string>();
    }
  }

  std::string complete(const ChatRequest& req) override {
    std::string key = cache_key(req);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    std::string response = inner_->complete(req);
    std::lock_guard<std::mutex> lock(mu_);
    auto [it, fresh] = cache_.emplace(key, response);
    if (fresh) {
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      nlohmann::json j;
      j["key"] = key;
      j["response"] = response;
      out << j.dump() << '\n';
    }
    return it->second;
  }

  int calls() const override { return inner_->calls(); }

 private:
  static std::string cache_key(const ChatRequest& req) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f|%llu", req.temperature,
                  static_cast<unsigned long long>(req.seed));
    uint64_t h = fnv1a64(req.system);
    h = fnv1a64(req.user, h);
    h = fnv1a64(req.model, h);
    h = fnv1a64(std::string(buf), h);
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  std::unique_ptr<ChatBackend> inner_;
  std::string path_;
  std::unordered_map<std::string, std::string> cache_;
  std::mutex mu_;
};

}  // namespace

std::unique_ptr<ChatBackend> make_mock_backend(const BackendConfig& cfg) {
  return std::make_unique<MockBackend>(cfg);
}

std::unique_ptr<ChatBackend> make_http_backend(const BackendConfig& cfg) {
  return std::make_unique<HttpBackend>(cfg);
}

std::unique_ptr<ChatBackend> wrap_with_cache(std::unique_ptr<ChatBackend> inner,
                                             const std::string& cache_path) {
  return std::make_unique<CachingBackend>(std::move(inner), cache_path);
}

std::unique_ptr<ChatBackend> make_backend(const BackendConfig& cfg) {
  std::unique_ptr<ChatBackend> b = cfg.mode == BackendConfig::Mode::mock
                                       ? make_mock_backend(cfg)
                                       : make_http_backend(cfg);
  if (!cfg.cache_path.empty()) b = wrap_with_cache(std::move(b), cfg.cache_path);
  return b;
}

}  // namespace tg::promptrw
