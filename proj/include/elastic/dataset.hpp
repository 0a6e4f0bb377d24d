#pragma once

#include <string>
#include <vector>

#include "elastic/model.hpp"
#include "elastic/rng.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

// Synthetic "patch-query" tasks over a G x G grid of colored cells.
//   Lookup:   "what color is cell (r, c)?"         -> color token
//   CountMod: "count of color c, modulo M?"        -> residue token
enum class TaskMode { Lookup, CountMod };

struct TaskSpec {
  int grid = 4;
  int colors = 5;
  TaskMode mode = TaskMode::CountMod;
  int modulus = 3;
  double noise_sigma = 0.05;
  int d_feat = 16;

  void validate() const;
  int n_cells() const { return grid * grid; }
};

// Token id layout for the task vocabulary.
struct VocabLayout {
  int row0, col0, colorq0, ans0, eos, vocab_size;
  static VocabLayout build(const TaskSpec& spec);
};

struct Sample {
  Tensor<float> features;       // [G*G, d_feat]
  std::vector<int> query;       // query token ids
  std::vector<int> answer;      // answer token ids (gold token + eos)
  int gold = -1;                // the single gold answer token
  std::vector<int> grid_colors; // underlying grid, for inspection
};

enum class Split { Train, Eval };

// Deterministic given (spec, seed); train and eval splits are disjoint by
// construction (grid hash parity decides the split membership).
std::vector<Sample> make_synthetic_dataset(const TaskSpec& spec, int n,
                                           uint64_t seed, Split split);

// Model dimensions implied by a task.
ModelConfig default_model_config(const TaskSpec& spec);

}  // namespace elastic
