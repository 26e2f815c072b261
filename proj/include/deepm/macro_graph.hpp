#pragma once

#include <string>
#include <vector>

#include "deepm/common.hpp"

namespace deepm::graph {

// Role tags drive the cross-group transmission channels so that synthetic
// universes can exercise every rule without hard-coded tickers.
enum class Role {
    EquityIndex,
    SovereignBond,
    Currency,
    Energy,
    BaseMetal,
    PreciousMetal,
    RiskFx,
    SafeFx,
    CommodityFx,
};

Role role_from_string(const std::string& s);
std::string role_to_string(Role r);

struct AssetMeta {
    std::string ticker;
    std::string macro_group;
    std::string region;  // US/EU/JP/UK/CA/other
    std::vector<Role> roles;
    double struct_bps = 1.0;        // C_struct
    double liquidity_scalar = 1.0;  // lambda_i
    double final_bps = 0.0;         // explicit override; <= 0 means "derive"

    bool has_role(Role r) const {
        for (Role x : roles)
            if (x == r) return true;
        return false;
    }
};

// Deterministic economic-prior adjacency. Symmetric, weights in (0,1], unit
// self-loops (so ln(A_ii)=0 and every node can attend to itself).
struct MacroGraph {
    int n = 0;
    std::vector<double> adj;     // [n*n]
    std::vector<double> degree;  // row sums including self-loop

    double a(int i, int j) const { return adj[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)]; }
    double& a(int i, int j) { return adj[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)]; }

    // normalized Laplacian L = I - D^{-1/2} A D^{-1/2}; rows/cols of isolated
    // nodes are zeroed so both energy routes agree (z/sqrt(d) := 0 at d = 0)
    std::vector<double> normalized_laplacian() const;
};

struct GraphBuildReport {
    std::vector<std::string> warnings;  // assets left isolated etc.
};

// Union of edge sets: intra-group cliques, risk-on / inflation / safe-haven
// channels, commodity-exporter FX links and regional equity-bond-currency
// triangles. All prior edges carry weight 1.0.
MacroGraph build_macro_graph(const std::vector<AssetMeta>& universe,
                             GraphBuildReport* report = nullptr);

// Tr(Z^T L Z) computed via the trace form; equals the pairwise form
// 0.5 * sum_ij A_ij || z_i/sqrt(d_i) - z_j/sqrt(d_j) ||^2.
double dirichlet_energy(const std::vector<double>& Z, int n_rows, int dim, const MacroGraph& g);
double dirichlet_energy_pairwise(const std::vector<double>& Z, int n_rows, int dim,
                                 const MacroGraph& g);

// Universe metadata file: ticker,group,region,roles,struct_bps,liquidity_scalar,final_bps
// (roles separated by '|'; final_bps empty or 0 means derive from the cost model).
std::vector<AssetMeta> load_universe(const std::string& path);
void save_universe(const std::vector<AssetMeta>& universe, const std::string& path);
void save_edge_list(const MacroGraph& g, const std::vector<std::string>& tickers,
                    const std::string& path);

// Metadata for synthetic panels: pair-mates share a macro group; regions and
// roles cycle so every channel rule gets exercised.
std::vector<AssetMeta> synth_universe(int n_assets, const std::vector<std::string>& groups);

}  // namespace deepm::graph
