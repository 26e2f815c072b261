#include "deepm/macro_graph.hpp"

#include <cmath>
#include <fstream>
#include <map>

namespace deepm::graph {

Role role_from_string(const std::string& s) {
    static const std::map<std::string, Role> m = {
        {"equity-index", Role::EquityIndex}, {"sovereign-bond", Role::SovereignBond},
        {"currency", Role::Currency},        {"energy", Role::Energy},
        {"base-metal", Role::BaseMetal},     {"precious-metal", Role::PreciousMetal},
        {"risk-fx", Role::RiskFx},           {"safe-fx", Role::SafeFx},
        {"commodity-fx", Role::CommodityFx},
    };
    auto it = m.find(s);
    DEEPM_REQUIRE(it != m.end(), "unknown role tag '", s, "'");
    return it->second;
}

std::string role_to_string(Role r) {
    switch (r) {
        case Role::EquityIndex: return "equity-index";
        case Role::SovereignBond: return "sovereign-bond";
        case Role::Currency: return "currency";
        case Role::Energy: return "energy";
        case Role::BaseMetal: return "base-metal";
        case Role::PreciousMetal: return "precious-metal";
        case Role::RiskFx: return "risk-fx";
        case Role::SafeFx: return "safe-fx";
        case Role::CommodityFx: return "commodity-fx";
    }
    return "?";
}

std::vector<double> MacroGraph::normalized_laplacian() const {
    std::vector<double> L(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        if (degree[static_cast<size_t>(i)] <= 0.0) continue;
        L[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(i)] = 1.0;
        for (int j = 0; j < n; ++j) {
            if (degree[static_cast<size_t>(j)] <= 0.0) continue;
            L[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)] -=
                a(i, j) / std::sqrt(degree[static_cast<size_t>(i)] * degree[static_cast<size_t>(j)]);
        }
    }
    return L;
}

MacroGraph build_macro_graph(const std::vector<AssetMeta>& universe, GraphBuildReport* report) {
    int n = static_cast<int>(universe.size());
    MacroGraph g;
    g.n = n;
    g.adj.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);

    auto connect = [&](int i, int j) {
        if (i == j) return;
        g.a(i, j) = 1.0;
        g.a(j, i) = 1.0;
    };
    auto connect_families = [&](const std::vector<int>& a, const std::vector<int>& b) {
        for (int i : a)
            for (int j : b) connect(i, j);
    };
    auto with_role = [&](Role r) {
        std::vector<int> out;
        for (int i = 0; i < n; ++i)
            if (universe[static_cast<size_t>(i)].has_role(r)) out.push_back(i);
        return out;
    };

    // (1) intra-group cliques
    std::map<std::string, std::vector<int>> by_group;
    for (int i = 0; i < n; ++i) {
        const auto& u = universe[static_cast<size_t>(i)];
        if (u.macro_group.empty()) {
            if (report) report->warnings.push_back("asset " + u.ticker + " has no macro group; left isolated");
            continue;
        }
        by_group[u.macro_group].push_back(i);
    }
    for (auto& [grp, members] : by_group)
        for (size_t a = 0; a < members.size(); ++a)
            for (size_t b = a + 1; b < members.size(); ++b) connect(members[a], members[b]);

    auto equities = with_role(Role::EquityIndex);
    auto bonds = with_role(Role::SovereignBond);
    auto energy = with_role(Role::Energy);
    auto base_metals = with_role(Role::BaseMetal);
    auto precious = with_role(Role::PreciousMetal);
    auto risk_fx = with_role(Role::RiskFx);
    auto safe_fx = with_role(Role::SafeFx);
    auto comm_fx = with_role(Role::CommodityFx);

    // (2) risk-on: equities <-> base metals <-> risk FX (all pairs)
    connect_families(equities, base_metals);
    connect_families(base_metals, risk_fx);
    connect_families(equities, risk_fx);
    // (3) inflation triangle: energy <-> treasuries <-> precious metals
    connect_families(energy, bonds);
    connect_families(bonds, precious);
    connect_families(energy, precious);
    // (4) safe haven: treasuries <-> safe FX <-> precious metals
    connect_families(bonds, safe_fx);
    connect_families(safe_fx, precious);
    // (5) commodity exporters: energy/metals to commodity currency proxies
    connect_families(energy, comm_fx);
    connect_families(base_metals, comm_fx);
    connect_families(precious, comm_fx);
    // (6) regional equity-bond-currency triangles
    std::map<std::string, std::vector<int>> by_region;
    for (int i = 0; i < n; ++i)
        if (!universe[static_cast<size_t>(i)].region.empty()) by_region[universe[static_cast<size_t>(i)].region].push_back(i);
    for (auto& [region, members] : by_region) {
        std::vector<int> eq, bd, cy;
        for (int i : members) {
            const auto& u = universe[static_cast<size_t>(i)];
            if (u.has_role(Role::EquityIndex)) eq.push_back(i);
            if (u.has_role(Role::SovereignBond)) bd.push_back(i);
            if (u.has_role(Role::Currency)) cy.push_back(i);
        }
        connect_families(eq, bd);
        connect_families(bd, cy);
        connect_families(eq, cy);
    }

    // self-loops for attention-bias stability
    for (int i = 0; i < n; ++i) g.a(i, i) = 1.0;

    g.degree.assign(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double d = 0.0;
        for (int j = 0; j < n; ++j) d += g.a(i, j);
        g.degree[static_cast<size_t>(i)] = d;
    }
    return g;
}

double dirichlet_energy(const std::vector<double>& Z, int n_rows, int dim, const MacroGraph& g) {
    DEEPM_REQUIRE(n_rows == g.n, "embedding rows ", n_rows, " != graph nodes ", g.n);
    DEEPM_REQUIRE(static_cast<int>(Z.size()) == n_rows * dim, "embedding size mismatch");
    auto L = g.normalized_laplacian();
    double e = 0.0;
    for (int i = 0; i < g.n; ++i)
        for (int j = 0; j < g.n; ++j) {
            double lij = L[static_cast<size_t>(i) * static_cast<size_t>(g.n) + static_cast<size_t>(j)];
            if (lij == 0.0) continue;
            double dot = 0.0;
            for (int c = 0; c < dim; ++c)
                dot += Z[static_cast<size_t>(i) * static_cast<size_t>(dim) + static_cast<size_t>(c)] *
                       Z[static_cast<size_t>(j) * static_cast<size_t>(dim) + static_cast<size_t>(c)];
            e += lij * dot;
        }
    return e;
}

double dirichlet_energy_pairwise(const std::vector<double>& Z, int n_rows, int dim,
                                 const MacroGraph& g) {
    DEEPM_REQUIRE(n_rows == g.n, "embedding rows ", n_rows, " != graph nodes ", g.n);
    double e = 0.0;
    for (int i = 0; i < g.n; ++i)
        for (int j = 0; j < g.n; ++j) {
            double aij = g.a(i, j);
            if (aij == 0.0) continue;
            double di = g.degree[static_cast<size_t>(i)], dj = g.degree[static_cast<size_t>(j)];
            double si = di > 0.0 ? 1.0 / std::sqrt(di) : 0.0;
            double sj = dj > 0.0 ? 1.0 / std::sqrt(dj) : 0.0;
            double acc = 0.0;
            for (int c = 0; c < dim; ++c) {
                double d = Z[static_cast<size_t>(i) * static_cast<size_t>(dim) + static_cast<size_t>(c)] * si -
                           Z[static_cast<size_t>(j) * static_cast<size_t>(dim) + static_cast<size_t>(c)] * sj;
                acc += d * d;
            }
            e += aij * acc;
        }
    return 0.5 * e;
}

std::vector<AssetMeta> load_universe(const std::string& path) {
    std::ifstream in(path);
    DEEPM_REQUIRE(in.good(), "cannot open universe file ", path);
    std::string line;
    DEEPM_REQUIRE(static_cast<bool>(std::getline(in, line)), "empty universe file");
    auto hdr = split(trim(line), ',');
    DEEPM_REQUIRE(hdr.size() == 7 && trim(hdr[0]) == "ticker", "expected header "
                  "ticker,group,region,roles,struct_bps,liquidity_scalar,final_bps in ", path);
    std::vector<AssetMeta> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        auto f = split(line, ',');
        DEEPM_REQUIRE(f.size() == 7, "bad universe row at line ", line_no);
        AssetMeta m;
        m.ticker = trim(f[0]);
        m.macro_group = trim(f[1]);
        m.region = trim(f[2]);
        for (const auto& r : split(trim(f[3]), '|'))
            if (!trim(r).empty()) m.roles.push_back(role_from_string(trim(r)));
        m.struct_bps = std::stod(trim(f[4]));
        m.liquidity_scalar = std::stod(trim(f[5]));
        std::string fb = trim(f[6]);
        m.final_bps = fb.empty() ? 0.0 : std::stod(fb);
        out.push_back(std::move(m));
    }
    return out;
}

void save_universe(const std::vector<AssetMeta>& universe, const std::string& path) {
    std::ofstream out(path);
    DEEPM_REQUIRE(out.good(), "cannot write ", path);
    out << "ticker,group,region,roles,struct_bps,liquidity_scalar,final_bps\n";
    for (const auto& m : universe) {
        std::string roles;
        for (size_t i = 0; i < m.roles.size(); ++i)
            roles += role_to_string(m.roles[i]) + (i + 1 < m.roles.size() ? "|" : "");
        out << m.ticker << ',' << m.macro_group << ',' << m.region << ',' << roles << ','
            << format_double(m.struct_bps) << ',' << format_double(m.liquidity_scalar) << ','
            << (m.final_bps > 0.0 ? format_double(m.final_bps) : "") << '\n';
    }
}

void save_edge_list(const MacroGraph& g, const std::vector<std::string>& tickers,
                    const std::string& path) {
    std::ofstream out(path);
    DEEPM_REQUIRE(out.good(), "cannot write ", path);
    out << "i,j,weight\n";
    for (int i = 0; i < g.n; ++i)
        for (int j = i + 1; j < g.n; ++j)
            if (g.a(i, j) > 0.0)
                out << tickers[static_cast<size_t>(i)] << ',' << tickers[static_cast<size_t>(j)] << ','
                    << format_double(g.a(i, j)) << '\n';
}

std::vector<AssetMeta> synth_universe(int n_assets, const std::vector<std::string>& groups) {
    DEEPM_REQUIRE(static_cast<int>(groups.size()) == n_assets, "groups size mismatch");
    static const char* regions[] = {"US", "EU", "JP"};
    std::vector<AssetMeta> out;
    for (int i = 0; i < n_assets; ++i) {
        AssetMeta m;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "SYN%02d", i);
        m.ticker = buf;
        m.macro_group = groups[static_cast<size_t>(i)];
        m.region = regions[i % 3];
        m.struct_bps = 1.0;
        m.liquidity_scalar = 1.0;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace deepm::graph
