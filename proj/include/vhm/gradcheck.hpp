#pragma once

#include <cstdint>

#include "vhm/model.hpp"

namespace vhm {

// The probe step is a compromise: large steps make the +/- probes cross
// rectifier kinks somewhere in the assembled net (central differences are
// then invalid at isolated parameters), tiny steps drown small gradients in
// floating-point roundoff. Parameters that exceed the tolerance are re-probed
// with shrinking steps: a kink artifact collapses, a wrong gradient persists.
struct GradCheckConfig {
    double epsilon = 1e-4;
    int samples_per_kind = 250; // convolution and batch-norm parameter pools
    double weight_decay = 1e-3; // lifts every gradient off zero
    int batch = 2;
    int height = 5, width = 5;
    uint64_t data_seed = 1;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    long checked = 0;
};

// Compares reverse-mode gradients of the center-pixel MAE loss (plus weight
// decay) against central finite differences on a random subsample of the
// convolution and batch-norm parameters. Runs in double precision with
// eval-mode batch norm so the finite-difference oracle is well defined.
GradCheckResult grad_check(const ModelConfig& cfg, uint64_t model_seed, const GradCheckConfig& gc);

} // namespace vhm
