#include "elastic/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace elastic {

namespace {

constexpr char kMagic[8] = {'E', 'L', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

uint64_t read_u64(std::istream& is) {
  const uint64_t lo = read_u32(is);
  const uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamStore<float>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);
  const std::string cfg = config.dump();
  write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), cfg.size());
  write_u32(os, static_cast<uint32_t>(params.items.size()));
  for (const auto& [name, t] : params.items) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), name.size());
    write_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (size_t d : t.shape) write_u64(os, d);
    for (float v : t.data) {
      static_assert(sizeof(float) == 4);
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const uint32_t cfg_len = read_u32(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  if (!is) throw std::runtime_error("checkpoint: truncated config");
  Checkpoint ckpt;
  ckpt.config = nlohmann::json::parse(cfg);
  const uint32_t n = read_u32(is);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = read_u32(is);
    std::vector<size_t> shape(rank);
    for (uint32_t r = 0; r < rank; ++r)
      shape[r] = static_cast<size_t>(read_u64(is));
    Tensor<float> t = Tensor<float>::zeros(shape);
    for (float& v : t.data) {
      const uint32_t bits = read_u32(is);
      std::memcpy(&v, &bits, 4);
    }
    ckpt.params.add(name, std::move(t));
  }
  return ckpt;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {
      {"n_layers", cfg.n_layers},
      {"d_model", cfg.d_model},
      {"n_heads", cfg.n_heads},
      {"d_mlp", cfg.d_mlp},
      {"vocab_size", cfg.vocab_size},
      {"n_visual_tokens", cfg.n_visual_tokens},
      {"d_feat", cfg.d_feat},
      {"max_seq_len", cfg.max_seq_len},
      {"switch_design",
       cfg.switch_design == SwitchDesign::LayerLevel ? "layer" : "head"},
      {"switchable_start_layer", cfg.switchable_start_layer},
      {"mlp_gated", cfg.mlp_gated},
      {"latency_code_dim", cfg.latency_code_dim},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_mlp = j.at("d_mlp").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.n_visual_tokens = j.at("n_visual_tokens").get<int>();
  cfg.d_feat = j.at("d_feat").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  const std::string design = j.at("switch_design").get<std::string>();
  if (design == "layer") {
    cfg.switch_design = SwitchDesign::LayerLevel;
  } else if (design == "head") {
    cfg.switch_design = SwitchDesign::HeadLevel;
  } else {
    throw std::invalid_argument("config: unknown switch_design " + design);
  }
  cfg.switchable_start_layer = j.at("switchable_start_layer").get<int>();
  cfg.mlp_gated = j.at("mlp_gated").get<bool>();
  cfg.latency_code_dim = j.at("latency_code_dim").get<int>();
  cfg.validate();
  return cfg;
}

}  // namespace elastic
