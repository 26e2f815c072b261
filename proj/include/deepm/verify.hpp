#pragma once

#include <string>
#include <vector>

#include "deepm/training.hpp"

namespace deepm::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Property suites runnable on a fresh checkout in seconds-to-minutes. Each
// maps to one acceptance gate; `cli verify` prints one line per check.
CheckResult check_gradient_exactness(int settings = 50);
CheckResult check_two_pass_exactness();
CheckResult check_softmin_limits(int draws = 1000);
CheckResult check_duality(int instances = 1000);
CheckResult check_turnover_jensen(int ensembles = 1000);
CheckResult check_architecture_invariants();
CheckResult check_cost_table();
CheckResult check_metric_correctness();
CheckResult check_ensemble_turnover(int runs = 25);
CheckResult check_determinism();

std::vector<CheckResult> run_fast_checks();

// Small deterministic dataset used by the probes.
train::Dataset toy_dataset(int n_assets = 5, int n_days = 900, uint64_t seed = 7,
                           double coupling = 0.5);

}  // namespace deepm::verify
