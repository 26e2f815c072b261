#include "deepm/market_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace deepm::data {

using nlohmann::json;

void PricePanel::validate() const {
    DEEPM_REQUIRE(close.size() == tickers.size() * dates.size(), "close matrix size mismatch");
    DEEPM_REQUIRE(mask.size() == close.size(), "mask matrix size mismatch");
    std::set<std::string> seen;
    for (const auto& t : tickers)
        DEEPM_REQUIRE(seen.insert(t).second, "duplicate ticker ", t);
    for (size_t i = 1; i < dates.size(); ++i)
        DEEPM_REQUIRE(dates[i - 1] < dates[i], "dates not strictly increasing at ", dates[i]);
    for (int i = 0; i < n_assets(); ++i)
        for (int t = 0; t < n_days(); ++t)
            if (m(i, t)) DEEPM_REQUIRE(px(i, t) > 0.0, "non-positive close for ", tickers[static_cast<size_t>(i)], " at ", dates[static_cast<size_t>(t)]);
}

uint64_t PricePanel::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tickers) h = fnv1a(t, h);
    for (const auto& d : dates) h = fnv1a(d, h);
    h = fnv1a(close.data(), close.size() * sizeof(double), h);
    h = fnv1a(mask.data(), mask.size(), h);
    return h;
}

namespace {

bool parse_iso_date(const std::string& s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
    for (size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
    int mo = std::stoi(s.substr(5, 2)), da = std::stoi(s.substr(8, 2));
    return mo >= 1 && mo <= 12 && da >= 1 && da <= 31;
}

// minimal weekday-stepping calendar for synthetic panels
struct Ymd {
    int y, m, d;
};
int days_in_month(int y, int m) {
    static const int dm[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m == 2 && ((y % 4 == 0 && y % 100 != 0) || y % 400 == 0)) return 29;
    return dm[m - 1];
}
int day_of_week(int y, int m, int d) {  // 0=Sunday (Zeller)
    static const int t[] = {0, 3, 2, 5, 0, 3, 5, 1, 4, 6, 2, 4};
    if (m < 3) y -= 1;
    return (y + y / 4 - y / 100 + y / 400 + t[m - 1] + d) % 7;
}
void next_weekday(Ymd& x) {
    do {
        if (++x.d > days_in_month(x.y, x.m)) {
            x.d = 1;
            if (++x.m > 12) {
                x.m = 1;
                ++x.y;
            }
        }
    } while (day_of_week(x.y, x.m, x.d) == 0 || day_of_week(x.y, x.m, x.d) == 6);
}
std::string ymd_str(const Ymd& x) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", x.y, x.m, x.d);
    return buf;
}

}  // namespace

PricePanel load_prices(const std::string& path, LoadReport* report) {
    std::ifstream in(path);
    DEEPM_REQUIRE(in.good(), "cannot open price file ", path);
    std::string line;
    DEEPM_REQUIRE(static_cast<bool>(std::getline(in, line)), "empty price file ", path);
    auto header = split(trim(line), ',');
    DEEPM_REQUIRE(header.size() == 3 && trim(header[0]) == "date" && trim(header[1]) == "ticker" &&
                      trim(header[2]) == "close",
                  "expected header date,ticker,close in ", path);

    struct Row {
        std::string date, ticker;
        double close;
    };
    std::vector<Row> rows;
    std::set<std::string> date_set;
    std::vector<std::string> ticker_order;
    std::set<std::string> ticker_seen;
    int rejected = 0;
    std::vector<std::string> warnings;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        auto f = split(line, ',');
        DEEPM_REQUIRE(f.size() == 3, "bad row at line ", line_no, " in ", path);
        std::string date = trim(f[0]), ticker = trim(f[1]);
        DEEPM_REQUIRE(parse_iso_date(date), "unparseable date '", date, "' at line ", line_no);
        double px = 0.0;
        try {
            px = std::stod(trim(f[2]));
        } catch (...) {
            fail("unparseable close '", f[2], "' at line ", line_no);
        }
        if (!(px > 0.0)) {
            ++rejected;
            warnings.push_back("rejected non-positive price " + trim(f[2]) + " for " + ticker +
                               " at " + date);
            continue;
        }
        rows.push_back(Row{date, ticker, px});
        date_set.insert(date);
        if (ticker_seen.insert(ticker).second) ticker_order.push_back(ticker);
    }
    if (report) {
        report->rows_rejected = rejected;
        report->warnings = warnings;
    }

    PricePanel panel;
    panel.tickers = ticker_order;
    panel.dates.assign(date_set.begin(), date_set.end());
    int N = panel.n_assets(), T = panel.n_days();
    panel.close.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 0.0);
    panel.mask.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 0);
    panel.close_rank.assign(static_cast<size_t>(N), 0);

    std::map<std::string, int> tix, dix;
    for (int i = 0; i < N; ++i) tix[panel.tickers[static_cast<size_t>(i)]] = i;
    for (int t = 0; t < T; ++t) dix[panel.dates[static_cast<size_t>(t)]] = t;
    for (const auto& r : rows) {
        int i = tix[r.ticker], t = dix[r.date];
        panel.px(i, t) = r.close;
        panel.m(i, t) = 1;
    }
    // forward-fill interior gaps (value only; mask stays 0 on missing days)
    for (int i = 0; i < N; ++i) {
        double last = 0.0;
        for (int t = 0; t < T; ++t) {
            if (panel.m(i, t))
                last = panel.px(i, t);
            else if (last > 0.0)
                panel.px(i, t) = last;
        }
    }
    panel.validate();
    return panel;
}

void save_prices(const PricePanel& panel, const std::string& path) {
    std::ofstream out(path);
    DEEPM_REQUIRE(out.good(), "cannot write ", path);
    out << "date,ticker,close\n";
    for (int t = 0; t < panel.n_days(); ++t)
        for (int i = 0; i < panel.n_assets(); ++i)
            if (panel.m(i, t))
                out << panel.dates[static_cast<size_t>(t)] << ',' << panel.tickers[static_cast<size_t>(i)] << ','
                    << format_double(panel.px(i, t), 12) << '\n';
}

std::vector<LeadLagPair> SynthSpec::effective_pairs() const {
    if (!pairs.empty()) return pairs;
    std::vector<LeadLagPair> out;
    for (int i = 0; i + 1 < n_assets; i += 2) out.push_back(LeadLagPair{i, i + 1, 0.5});
    return out;
}

std::vector<std::string> SynthSpec::effective_groups() const {
    if (!groups.empty()) return groups;
    std::vector<std::string> out(static_cast<size_t>(n_assets));
    std::vector<int> gid(static_cast<size_t>(n_assets), -1);
    int next = 0;
    for (const auto& p : effective_pairs()) {
        if (p.leader < n_assets && p.follower < n_assets && gid[static_cast<size_t>(p.leader)] < 0 &&
            gid[static_cast<size_t>(p.follower)] < 0) {
            gid[static_cast<size_t>(p.leader)] = gid[static_cast<size_t>(p.follower)] = next++;
        }
    }
    for (int i = 0; i < n_assets; ++i)
        if (gid[static_cast<size_t>(i)] < 0) gid[static_cast<size_t>(i)] = next++;
    for (int i = 0; i < n_assets; ++i) out[static_cast<size_t>(i)] = "GRP_" + std::to_string(gid[static_cast<size_t>(i)]);
    return out;
}

std::vector<int> SynthSpec::effective_ranks() const {
    if (!close_ranks.empty()) return close_ranks;
    std::vector<int> out(static_cast<size_t>(n_assets));
    for (int i = 0; i < n_assets; ++i) out[static_cast<size_t>(i)] = i % 3;
    return out;
}

PricePanel synth_generate(const SynthSpec& spec) {
    DEEPM_REQUIRE(spec.n_assets >= 2, "synth needs n_assets >= 2, got ", spec.n_assets);
    DEEPM_REQUIRE(spec.n_days >= 300, "synth needs n_days >= 300, got ", spec.n_days);
    int N = spec.n_assets, T = spec.n_days;
    Rng rng(spec.seed);

    PricePanel panel;
    panel.dates.reserve(static_cast<size_t>(T));
    Ymd day{2000, 1, 3};
    for (int t = 0; t < T; ++t) {
        panel.dates.push_back(ymd_str(day));
        next_weekday(day);
    }
    for (int i = 0; i < N; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "SYN%02d", i);
        panel.tickers.push_back(buf);
    }
    panel.close_rank = spec.effective_ranks();
    panel.close.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 0.0);
    panel.mask.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 1);

    auto pairs = spec.effective_pairs();
    std::vector<double> trend(static_cast<size_t>(N), 0.0);
    std::vector<double> shock_prev(static_cast<size_t>(N), 0.0);  // pre-coupling return u at t-1
    double rho = spec.trend_persistence;
    double eta = spec.trend_vol * std::sqrt(std::max(0.0, 1.0 - rho * rho));
    std::vector<double> eta_i(static_cast<size_t>(N), eta);
    std::vector<double> vol_scale_i(static_cast<size_t>(N), 1.0);
    for (const auto& p : pairs)
        if (p.follower < N) {
            eta_i[static_cast<size_t>(p.follower)] = eta * spec.follower_trend_scale;
            vol_scale_i[static_cast<size_t>(p.follower)] = spec.follower_vol_scale;
        }
    bool crisis = false;

    for (int i = 0; i < N; ++i) panel.px(i, 0) = 100.0;
    for (int t = 1; t < T; ++t) {
        if (crisis) {
            if (rng.uniform() < spec.crisis_exit_prob) crisis = false;
        } else {
            if (rng.uniform() < spec.crisis_enter_prob) crisis = true;
        }
        double vol = spec.base_vol * (crisis ? spec.crisis_vol_mult : 1.0);
        std::vector<double> shock(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
            trend[static_cast<size_t>(i)] = rho * trend[static_cast<size_t>(i)] + eta_i[static_cast<size_t>(i)] * rng.normal();
            shock[static_cast<size_t>(i)] = trend[static_cast<size_t>(i)] + vol * vol_scale_i[static_cast<size_t>(i)] * rng.normal();
        }
        std::vector<double> r = shock;
        for (const auto& p : pairs)
            if (p.leader < N && p.follower < N)
                r[static_cast<size_t>(p.follower)] += p.coupling * shock_prev[static_cast<size_t>(p.leader)];
        for (int i = 0; i < N; ++i) {
            double ri = std::max(r[static_cast<size_t>(i)], -0.5);
            panel.px(i, t) = panel.px(i, t - 1) * (1.0 + ri);
        }
        shock_prev = shock;
    }
    panel.validate();
    return panel;
}

VolEstimate estimate_vol(const PricePanel& panel, int span, double eps) {
    DEEPM_REQUIRE(span >= 2, "EWMA span must be >= 2, got ", span);
    int N = panel.n_assets(), T = panel.n_days();
    VolEstimate ve;
    ve.n_assets = N;
    ve.n_days = T;
    ve.span = span;
    ve.eps = eps;
    ve.sigma.assign(static_cast<size_t>(N) * static_cast<size_t>(T), eps);
    ve.valid.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 0);
    double alpha = 2.0 / (static_cast<double>(span) + 1.0);

    for (int i = 0; i < N; ++i) {
        int prev = -1;        // last masked-valid day
        double ew_var = 0.0;  // EWMA of squared arithmetic returns
        bool seeded = false;
        for (int t = 0; t < T; ++t) {
            if (panel.m(i, t)) {
                if (prev >= 0) {
                    double r = panel.px(i, t) / panel.px(i, prev) - 1.0;
                    if (!seeded) {
                        ew_var = r * r;
                        seeded = true;
                    } else {
                        ew_var = (1.0 - alpha) * ew_var + alpha * r * r;
                    }
                }
                prev = t;
            }
            if (seeded) {
                ve.sigma[static_cast<size_t>(i) * static_cast<size_t>(T) + static_cast<size_t>(t)] = std::max(std::sqrt(ew_var), eps);
                ve.valid[static_cast<size_t>(i) * static_cast<size_t>(T) + static_cast<size_t>(t)] = 1;
            }
        }
    }
    return ve;
}

std::vector<double> mad_clip(const std::vector<double>& series, int window, double k, double scale,
                             const std::vector<uint8_t>* valid) {
    DEEPM_REQUIRE(window >= 10, "mad_clip window must be >= 10, got ", window);
    size_t T = series.size();
    std::vector<double> out = series;
    std::vector<double> hist;  // rolling valid history, oldest first
    hist.reserve(static_cast<size_t>(window));
    std::vector<double> buf, dev;

    for (size_t t = 0; t < T; ++t) {
        if (valid && !(*valid)[t]) continue;
        hist.push_back(series[t]);
        if (hist.size() > static_cast<size_t>(window)) hist.erase(hist.begin());
        if (hist.size() >= 10) {
            buf = hist;
            size_t mid = buf.size() / 2;
            std::nth_element(buf.begin(), buf.begin() + static_cast<long>(mid), buf.end());
            double med = buf[mid];
            if (buf.size() % 2 == 0) {
                double lo = *std::max_element(buf.begin(), buf.begin() + static_cast<long>(mid));
                med = 0.5 * (lo + med);
            }
            dev.resize(hist.size());
            for (size_t j = 0; j < hist.size(); ++j) dev[j] = std::abs(hist[j] - med);
            std::nth_element(dev.begin(), dev.begin() + static_cast<long>(mid), dev.end());
            double mad = dev[mid];
            if (dev.size() % 2 == 0) {
                double lo = *std::max_element(dev.begin(), dev.begin() + static_cast<long>(mid));
                mad = 0.5 * (lo + mad);
            }
            if (mad > 0.0) {  // MAD = 0 (constant window) passes values through
                double band = k * scale * mad;
                out[t] = std::clamp(series[t], med - band, med + band);
            }
        }
    }
    return out;
}

namespace {

// EWMA of close with given span over masked-valid days, seeded at first value.
std::vector<double> ewm_close(const PricePanel& panel, int asset, int span) {
    int T = panel.n_days();
    std::vector<double> out(static_cast<size_t>(T), 0.0);
    double alpha = 2.0 / (static_cast<double>(span) + 1.0);
    double ew = 0.0;
    bool seeded = false;
    for (int t = 0; t < T; ++t) {
        if (panel.m(asset, t)) {
            if (!seeded) {
                ew = panel.px(asset, t);
                seeded = true;
            } else {
                ew = (1.0 - alpha) * ew + alpha * panel.px(asset, t);
            }
        }
        out[static_cast<size_t>(t)] = seeded ? ew : 0.0;
    }
    return out;
}

}  // namespace

std::vector<double> macd_normalized(const PricePanel& panel, const VolEstimate& vol, int asset,
                                    int fast_span, int slow_span, int renorm_window) {
    int T = panel.n_days();
    int first = -1;
    for (int t = 0; t < T; ++t)
        if (panel.m(asset, t)) {
            first = t;
            break;
        }
    std::vector<double> out(static_cast<size_t>(T), 0.0);
    if (first < 0) return out;
    auto fast = ewm_close(panel, asset, fast_span);
    auto slow = ewm_close(panel, asset, slow_span);
    std::vector<double> q(static_cast<size_t>(T), 0.0);
    for (int t = first; t < T; ++t)
        q[static_cast<size_t>(t)] = (fast[static_cast<size_t>(t)] - slow[static_cast<size_t>(t)]) / (vol.sgm(asset, t) + vol.eps);
    for (int t = 0; t < T; ++t) {
        if (!panel.m(asset, t)) continue;
        int lo = std::max(first, t - renorm_window + 1);
        int n = t - lo + 1;
        if (n < 2) continue;
        double mean = 0.0;
        for (int s = lo; s <= t; ++s) mean += q[static_cast<size_t>(s)];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int s = lo; s <= t; ++s) {
            double d = q[static_cast<size_t>(s)] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n - 1);  // sample std
        double sd = std::sqrt(var);
        out[static_cast<size_t>(t)] = sd > 0.0 ? q[static_cast<size_t>(t)] / sd : 0.0;
    }
    return out;
}

FeaturePanel compute_features(const PricePanel& panel, const VolEstimate& vol, FeatureSubset subset,
                              int mad_window, double mad_k, double mad_scale) {
    int N = panel.n_assets(), T = panel.n_days();
    DEEPM_REQUIRE(vol.n_assets == N && vol.n_days == T, "panel and vol estimate not aligned");
    const double eps = vol.eps;

    std::vector<std::string> names;
    if (subset == FeatureSubset::RawMomentum)
        names = {"ret_norm_1", "ret_norm_21", "ret_norm_63", "ret_norm_252", "zscore_21", "zscore_252"};
    else
        names = {"ret_norm_1", "macd_8_24", "macd_16_48", "macd_32_96", "zscore_21", "zscore_252"};
    int F = static_cast<int>(names.size()) + 1;  // + existence channel

    FeaturePanel fp;
    fp.subset = subset;
    fp.names = names;
    fp.names.push_back("exist");
    fp.n_assets = N;
    fp.n_days = T;
    fp.n_features = F;
    fp.values.assign(static_cast<size_t>(N) * static_cast<size_t>(T) * static_cast<size_t>(F), 0.0);
    fp.exist.assign(static_cast<size_t>(N) * static_cast<size_t>(T), 0);

    const int warmup = (subset == FeatureSubset::RawMomentum) ? 252 : 252 + 96;

    for (int i = 0; i < N; ++i) {
        int first = -1;
        for (int t = 0; t < T; ++t)
            if (panel.m(i, t)) {
                first = t;
                break;
            }
        if (first < 0) continue;

        std::vector<uint8_t> warm(static_cast<size_t>(T), 0);
        for (int t = 0; t < T; ++t)
            warm[static_cast<size_t>(t)] = (panel.m(i, t) && t - first >= warmup) ? 1 : 0;

        std::vector<std::vector<double>> raw(static_cast<size_t>(F - 1),
                                             std::vector<double>(static_cast<size_t>(T), 0.0));

        auto ret_norm = [&](int h, std::vector<double>& dst) {
            for (int t = 0; t < T; ++t) {
                if (!panel.m(i, t) || t - h < first) continue;
                double r = panel.px(i, t) / panel.px(i, t - h) - 1.0;
                dst[static_cast<size_t>(t)] = r / (vol.sgm(i, t) * std::sqrt(static_cast<double>(h)) + eps);
            }
        };
        auto zscore = [&](int win, std::vector<double>& dst) {
            for (int t = 0; t < T; ++t) {
                if (!panel.m(i, t) || t - win + 1 < first) continue;
                double mean = 0.0;
                for (int s = t - win + 1; s <= t; ++s) mean += std::log(panel.px(i, s));
                mean /= static_cast<double>(win);
                double var = 0.0;
                for (int s = t - win + 1; s <= t; ++s) {
                    double d = std::log(panel.px(i, s)) - mean;
                    var += d * d;
                }
                var /= static_cast<double>(win - 1);  // sample std
                double sd = std::sqrt(var);
                dst[static_cast<size_t>(t)] = sd > 0.0 ? (std::log(panel.px(i, t)) - mean) / sd : 0.0;
            }
        };
        auto macd = [&](int S, int L, std::vector<double>& dst) {
            dst = macd_normalized(panel, vol, i, S, L);
        };

        if (subset == FeatureSubset::RawMomentum) {
            ret_norm(1, raw[0]);
            ret_norm(21, raw[1]);
            ret_norm(63, raw[2]);
            ret_norm(252, raw[3]);
            zscore(21, raw[4]);
            zscore(252, raw[5]);
        } else {
            ret_norm(1, raw[0]);
            macd(8, 24, raw[1]);
            macd(16, 48, raw[2]);
            macd(32, 96, raw[3]);
            zscore(21, raw[4]);
            zscore(252, raw[5]);
        }

        for (int f = 0; f < F - 1; ++f) {
            auto clipped = mad_clip(raw[static_cast<size_t>(f)], mad_window, mad_k, mad_scale, &warm);
            for (int t = 0; t < T; ++t)
                fp.at(i, t, f) = warm[static_cast<size_t>(t)] ? clipped[static_cast<size_t>(t)] : 0.0;
        }
        for (int t = 0; t < T; ++t) {
            fp.exist[static_cast<size_t>(i) * static_cast<size_t>(T) + static_cast<size_t>(t)] = warm[static_cast<size_t>(t)];
            fp.at(i, t, F - 1) = warm[static_cast<size_t>(t)] ? 1.0 : 0.0;
        }
    }
    for (double v : fp.values) DEEPM_REQUIRE(std::isfinite(v), "non-finite feature value");
    return fp;
}

void save_features(const FeaturePanel& fp, const std::string& bin_path,
                   const std::string& manifest_path) {
    std::ofstream bin(bin_path, std::ios::binary);
    DEEPM_REQUIRE(bin.good(), "cannot write ", bin_path);
    bin.write(reinterpret_cast<const char*>(fp.values.data()),
              static_cast<std::streamsize>(fp.values.size() * sizeof(double)));

    json m;
    m["names"] = fp.names;
    m["shape"] = {fp.n_assets, fp.n_days, fp.n_features};
    m["subset"] = fp.subset == FeatureSubset::RawMomentum ? "raw_momentum" : "signal_based";
    std::vector<int> ex(fp.exist.begin(), fp.exist.end());
    m["exist"] = ex;
    std::ofstream mf(manifest_path);
    DEEPM_REQUIRE(mf.good(), "cannot write ", manifest_path);
    mf << m.dump(2) << '\n';
}

FeaturePanel load_features(const std::string& bin_path, const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    DEEPM_REQUIRE(mf.good(), "cannot open ", manifest_path);
    json m = json::parse(mf);
    FeaturePanel fp;
    fp.names = m.at("names").get<std::vector<std::string>>();
    auto shape = m.at("shape").get<std::vector<int>>();
    DEEPM_REQUIRE(shape.size() == 3, "bad manifest shape");
    fp.n_assets = shape[0];
    fp.n_days = shape[1];
    fp.n_features = shape[2];
    fp.subset = m.at("subset").get<std::string>() == "raw_momentum" ? FeatureSubset::RawMomentum
                                                                    : FeatureSubset::SignalBased;
    auto ex = m.at("exist").get<std::vector<int>>();
    fp.exist.assign(ex.begin(), ex.end());

    std::ifstream bin(bin_path, std::ios::binary);
    DEEPM_REQUIRE(bin.good(), "cannot open ", bin_path);
    fp.values.resize(static_cast<size_t>(fp.n_assets) * static_cast<size_t>(fp.n_days) * static_cast<size_t>(fp.n_features));
    bin.read(reinterpret_cast<char*>(fp.values.data()),
             static_cast<std::streamsize>(fp.values.size() * sizeof(double)));
    DEEPM_REQUIRE(bin.gcount() == static_cast<std::streamsize>(fp.values.size() * sizeof(double)),
                  "feature binary truncated: ", bin_path);
    return fp;
}

}  // namespace deepm::data
