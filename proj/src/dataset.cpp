#include "elastic/dataset.hpp"

#include <algorithm>
#include <stdexcept>

namespace elastic {

void TaskSpec::validate() const {
  if (grid < 2 || grid > 16) throw std::invalid_argument("task: grid out of [2,16]");
  if (colors < 2 || colors > 12)
    throw std::invalid_argument("task: colors out of [2,12]");
  if (mode == TaskMode::CountMod && (modulus < 2 || modulus > 10))
    throw std::invalid_argument("task: modulus out of [2,10]");
  if (d_feat < colors + 2)
    throw std::invalid_argument("task: d_feat must be >= colors + 2");
  if (noise_sigma < 0) throw std::invalid_argument("task: negative noise");
}

VocabLayout VocabLayout::build(const TaskSpec& spec) {
  VocabLayout v;
  v.row0 = 0;
  v.col0 = spec.grid;
  v.colorq0 = 2 * spec.grid;
  v.ans0 = v.colorq0 + spec.colors;
  const int n_ans = std::max(spec.colors, spec.modulus);
  v.eos = v.ans0 + n_ans;
  v.vocab_size = v.eos + 1;
  return v;
}

namespace {

uint64_t grid_hash(const std::vector<int>& colors) {
  uint64_t h = 1469598103934665603ull;
  for (int c : colors) {
    h ^= static_cast<uint64_t>(c) + 1;
    h *= 1099511628211ull;
  }
  // FNV's low bit is a plain XOR of the inputs' low bits, which correlates
  // with color-count parity — exactly the count-mod label. Finalize with a
  // full avalanche mix so the split bit is independent of the task labels.
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

std::vector<int> draw_grid(const TaskSpec& spec, Rng& rng, Split split) {
  // Grid membership in a split is decided by hash parity, so the two splits
  // partition the grid space and can never share an image.
  while (true) {
    std::vector<int> colors(spec.n_cells());
    for (int& c : colors)
      c = static_cast<int>(rng.next_u64() % spec.colors);
    const bool eval = (grid_hash(colors) >> 63) != 0;
    if ((split == Split::Eval) == eval) return colors;
  }
}

Tensor<float> make_features(const TaskSpec& spec, const std::vector<int>& colors,
                            Rng& rng) {
  Tensor<float> f = Tensor<float>::zeros(
      {(size_t)spec.n_cells(), (size_t)spec.d_feat});
  for (int i = 0; i < spec.n_cells(); ++i) {
    const int r = i / spec.grid, c = i % spec.grid;
    f.at(i, colors[i]) = 1.0f;
    f.at(i, spec.colors) = static_cast<float>(r) / (spec.grid - 1);
    f.at(i, spec.colors + 1) = static_cast<float>(c) / (spec.grid - 1);
    for (int j = 0; j < spec.d_feat; ++j)
      f.at(i, j) += static_cast<float>(rng.normal() * spec.noise_sigma);
  }
  return f;
}

}  // namespace

std::vector<Sample> make_synthetic_dataset(const TaskSpec& spec, int n,
                                           uint64_t seed, Split split) {
  spec.validate();
  const VocabLayout vocab = VocabLayout::build(spec);
  std::vector<Sample> out;
  out.reserve(n);
  Rng rng(Rng::derive(seed, 0xda7a, split == Split::Eval ? 1 : 0));
  for (int i = 0; i < n; ++i) {
    Sample s;
    if (spec.mode == TaskMode::Lookup) {
      s.grid_colors = draw_grid(spec, rng, split);
      const int r = static_cast<int>(rng.next_u64() % spec.grid);
      const int c = static_cast<int>(rng.next_u64() % spec.grid);
      s.query = {vocab.row0 + r, vocab.col0 + c};
      s.gold = vocab.ans0 + s.grid_colors[r * spec.grid + c];
    } else {
      // Balance the answer distribution: pick the target residue first, then
      // rejection-sample (grid, color) until the count matches.
      const int target = static_cast<int>(rng.next_u64() % spec.modulus);
      int color = 0;
      for (int attempt = 0;; ++attempt) {
        s.grid_colors = draw_grid(spec, rng, split);
        color = static_cast<int>(rng.next_u64() % spec.colors);
        int count = 0;
        for (int cell : s.grid_colors) count += (cell == color);
        if (count % spec.modulus == target || attempt > 200) {
          s.gold = vocab.ans0 + count % spec.modulus;
          break;
        }
      }
      s.query = {vocab.colorq0 + color};
    }
    s.answer = {s.gold, vocab.eos};
    s.features = make_features(spec, s.grid_colors, rng);
    out.push_back(std::move(s));
  }
  return out;
}

ModelConfig default_model_config(const TaskSpec& spec) {
  ModelConfig cfg;
  cfg.n_layers = 8;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.d_mlp = 128;
  cfg.switchable_start_layer = 2;  // six layer switches
  cfg.vocab_size = VocabLayout::build(spec).vocab_size;
  cfg.n_visual_tokens = spec.n_cells();
  cfg.d_feat = spec.d_feat;
  cfg.max_seq_len = spec.n_cells() + 8;
  return cfg;
}

}  // namespace elastic
