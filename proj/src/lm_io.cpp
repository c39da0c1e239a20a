#include <cstring>
#include <fstream>

#include "tg/errors.hpp"
#include "tg/lm.hpp"

namespace tg::lm {

namespace {
constexpr char kMagic[4] = {'T', 'G', 'L', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("truncated checkpoint");
  return v;
}
}  // namespace

void save_checkpoint(const TinyLMParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<int32_t>(params.config.vocab_size));
  put(out, static_cast<int32_t>(params.config.embed_dim));
  put(out, static_cast<int32_t>(params.config.context_len));
  put(out, static_cast<int32_t>(params.config.n_layers));
  put(out, static_cast<int32_t>(params.config.n_heads));
  put(out, static_cast<uint64_t>(params.config.seed));
  put(out, static_cast<uint64_t>(params.flat.size()));
  out.write(reinterpret_cast<const char*>(params.flat.data()),
            static_cast<std::streamsize>(params.flat.size() * sizeof(double)));
  if (!out) throw IoError("write failed: " + path);
}

TinyLMParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ParseError("bad checkpoint magic");
  uint32_t version = get<uint32_t>(in);
  if (version != kVersion) throw ParseError("unsupported checkpoint version");
  TinyLMParams p;
  p.config.vocab_size = get<int32_t>(in);
  p.config.embed_dim = get<int32_t>(in);
  p.config.context_len = get<int32_t>(in);
  p.config.n_layers = get<int32_t>(in);
  p.config.n_heads = get<int32_t>(in);
  p.config.seed = get<uint64_t>(in);
  uint64_t count = get<uint64_t>(in);
  if (count != param_count(p.config)) throw ParseError("checkpoint size mismatch");
  p.flat.resize(count);
  in.read(reinterpret_cast<char*>(p.flat.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ParseError("truncated checkpoint payload");
  return p;
}

}  // namespace tg::lm
