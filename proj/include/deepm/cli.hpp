#pragma once

#include <string>

#include "deepm/runconfig.hpp"

namespace deepm::cli {

struct RunSpec {
    std::string command;  // synth | features | train | backtest | ablate | verify | report
    std::string config_path;
    std::string out_dir;  // empty: $DEEPM_OUT or ./deepm_out
    uint64_t seed_override = 0;
    bool has_seed_override = false;
    bool paper_scale = false;
    int jobs = 0;  // 0: hardware concurrency
};

// Returns the process exit status: 0 iff all requested stages succeed.
int run(const RunSpec& spec);

}  // namespace deepm::cli
