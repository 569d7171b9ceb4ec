#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace devmod {

struct CheckResult {
    std::string name;
    double max_error = 0.0;
    double tol = 0.0;
    bool passed = false;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    [[nodiscard]] bool passed() const;
    void append(const std::vector<CheckResult>& more);
};

/// Deviation identity on random (4,8,16,16) inputs and random bias-free 3x3
/// convs, one seed per trial. Reports the stated relations
/// (da_identity.shrink, da_identity.restore) and the same relation with the
/// constant-image response kept (da_identity.centered).
std::vector<CheckResult> check_da_identity(int seeds, double tol);

/// BN/LN/IN/GN with affine off: per-set output mean, |std - 1| and agreement
/// with a per-set loop oracle.
std::vector<CheckResult> check_norm_statistics(int seeds, double mean_tol = 1e-10, double std_tol = 1e-6,
                                               double oracle_tol = 1e-12);

/// Finite-difference checks of every layer and every block kind. The
/// reported error is the gradient checker's relative error.
std::vector<CheckResult> check_gradients(int seeds, double h = 1e-5, double tol = 1e-4);

/// AdaDM at (w, b) = (1, 0) and (0, 0), and detached vs attached forwards,
/// all compared bit-exactly.
std::vector<CheckResult> check_adadm_degeneration(int seeds);

void print_report(std::ostream& os, const VerifyReport& report);

}  // namespace devmod
