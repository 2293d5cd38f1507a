#pragma once

#include <string>
#include <vector>

#include "coot/tape.hpp"

namespace coot {

struct GradCheckOptions {
    double step = 1e-3;          // central-difference step
    bool fd_double = true;       // run the finite-difference forwards in 64-bit
    bool analytic_double = false; // re-run the reverse pass in 64-bit as well
    double denom_floor = 1e-2;   // floor of the relative-error denominator
    std::size_t worst_k = 10;
};

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_err = 0;
};

struct GradCheckReport {
    double max_rel_err = 0;
    std::size_t checked = 0;
    std::vector<GradCheckEntry> worst;  // descending by rel_err

    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Compares the tape's reverse-mode gradient of `output` with central finite
// differences for every scalar of every differentiable leaf. The graph must
// already be built and is treated as fixed (deterministic computation).
GradCheckReport grad_check(Tape& tape, Var output,
                           const GradCheckOptions& opts = {});

} // namespace coot
