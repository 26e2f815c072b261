#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "deepm/market_data.hpp"
#include "deepm/objective.hpp"
#include "deepm/policy.hpp"
#include "deepm/training.hpp"

namespace deepm::cli {

// One structured config file per run. Parsing is strict: any unknown key is a
// hard error listing the valid keys at that level.
struct RunConfig {
    // data
    std::string data_source = "synth";  // synth | csv
    std::string prices_csv;
    std::string universe_csv;
    data::SynthSpec synth;

    // features
    std::string feature_subset = "raw_momentum";  // raw_momentum | signal_based
    int vol_span = 63;
    double vol_eps = 1e-8;

    // model / loss / training
    policy::PolicyConfig model;  // n_assets/n_features are resolved from data
    objective::LossConfig loss;
    train::TrainConfig train;
    train::EnsembleSpec ensemble{8, 4};

    // walk-forward
    int block_years = 5;
    double val_frac = 0.1;
    int days_per_year = 252;
    int min_test_days = 21;
    std::string ablate_blocks = "last";  // last | all

    // evaluation
    double sigma_tgt_annual = 0.10;
    std::vector<std::string> baseline_names = {"passive_equal_risk", "tsmom"};

    // ablation rows: name -> json override patch applied onto this config
    struct AblateRow {
        std::string name;
        nlohmann::json overrides;
    };
    std::vector<AblateRow> ablate_rows;

    uint64_t seed = 1;

    static RunConfig defaults();
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);
    nlohmann::json to_json() const;
    uint64_t config_hash() const;

    // Table-5 full-scale values behind the --paper-scale flag.
    void apply_paper_scale();

    data::FeatureSubset subset() const;
};

}  // namespace deepm::cli
