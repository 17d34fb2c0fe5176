#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xsplain/tensor.hpp"

namespace xsplain {

// Central finite differences in double precision against tape gradients.
// rel = |ad - fd| / max(|ad|, |fd|, 1e-3), reported as the max over the
// sampled coordinates.
struct FdCheck {
    double max_rel_error = 0.0;
    int64_t coords_checked = 0;
};

// loss re-evaluates the scalar objective from scratch at the given tensors
// (same order as `at`); analytic holds the tape gradients at `at`.
// max_coords_per_tensor <= 0 checks every coordinate.
FdCheck finite_difference_check(const std::function<double(const std::vector<TensorD>&)>& loss,
                                const std::vector<TensorD>& at, const std::vector<TensorD>& analytic,
                                int max_coords_per_tensor, uint64_t seed, double step = 1e-5);

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
    double threshold = 1e-4;
    int64_t coords_checked = 0;
    bool pass = false;
};

// Fixed oracle suite: every differentiable primitive plus the end-to-end
// stage-1 and stage-2 objectives on small instances.
std::vector<GradCheckCase> run_gradcheck_suite();

} // namespace xsplain
