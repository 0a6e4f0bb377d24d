#pragma once

#include <cstdint>

#include "json.hpp"

namespace elastic {

// Self-contained verification routines behind the `oracle` CLI subcommand.
// Each builds its own small model, runs the check and reports pass/fail plus
// the measured quantities. The unit and acceptance tests call these too.

struct CheckResult {
  bool pass = false;
  nlohmann::json details;
};

// Closed-form and symmetry cases of the exact plan-set probability.
CheckResult check_set_probability();

// Empirical sampler frequencies vs exact enumeration (total variation
// distance), K=6 uniform costs at k=3.
CheckResult check_sampler_tv(int n_vectors = 10, int draws = 200000,
                             uint64_t seed = 7);

// Analytic gradients vs central finite differences at double precision with
// frozen sampling noise, on a 2-layer d_model=16 head-level model.
struct GradientCheck {
  bool pass = false;
  double max_rel_err_theta = 0.0;
  double max_rel_err_phi = 0.0;
  nlohmann::json details;
};
GradientCheck check_gradients(uint64_t seed = 11);

// Masked-head forward vs zeroed-parameter forward for every switchable head.
CheckResult check_surgery(uint64_t seed = 13);

}  // namespace elastic
