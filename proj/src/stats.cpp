#include "roomroam/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "roomroam/dataset.hpp"
#include "roomroam/error.hpp"

namespace roomroam {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double chi_square_sf(double x, double df) {
  if (!(x > 0.0)) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

double f_sf(double x, double df1, double df2) {
  if (!(x > 0.0)) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::ibeta(0.5 * df2, 0.5 * df1, df2 / (df2 + df1 * x));
}

KruskalWallisResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw Error(ErrorCode::InvalidInput, "Kruskal-Wallis needs at least two groups");
  struct Obs {
    double value;
    std::size_t group;
  };
  std::vector<Obs> all;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw Error(ErrorCode::InvalidInput, "Kruskal-Wallis group is empty");
    for (double v : groups[g]) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidInput, "Kruskal-Wallis values must be finite");
      all.push_back({v, g});
    }
  }
  std::sort(all.begin(), all.end(), [](const Obs& a, const Obs& b) { return a.value < b.value; });

  const std::size_t n = all.size();
  const std::size_t k = groups.size();
  std::vector<double> rank_sum(k, 0.0);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].value == all[i].value) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t m = i; m < j; ++m) rank_sum[all[m].group] += midrank;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }

  const double N = static_cast<double>(n);
  const double correction = 1.0 - tie_term / (N * N * N - N);
  KruskalWallisResult out;
  if (!(correction > 0.0)) return out;  // every value tied

  const double grand = 0.5 * (N + 1.0);
  double between = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    const double ng = static_cast<double>(groups[g].size());
    const double d = rank_sum[g] / ng - grand;
    between += ng * d * d;
  }
  out.h = 12.0 / (N * (N + 1.0)) * between / correction;
  out.p = chi_square_sf(out.h, static_cast<double>(k - 1));
  out.eta2 = n > k ? (out.h - static_cast<double>(k) + 1.0) / (N - static_cast<double>(k)) : kNaN;
  return out;
}

LeveneResult levene(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw Error(ErrorCode::InvalidInput, "Levene's test needs at least two groups");
  for (const auto& g : groups)
    if (g.size() < 2) throw Error(ErrorCode::InvalidInput, "Levene's test needs at least two values per group");

  const std::size_t k = groups.size();
  std::vector<std::vector<double>> z(k);
  std::vector<double> zbar(k);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const double m = mean_of(groups[g]);
    for (double v : groups[g]) z[g].push_back(std::abs(v - m));
    zbar[g] = mean_of(z[g]);
    for (double v : z[g]) total += v;
    n += groups[g].size();
  }
  const double zgrand = total / static_cast<double>(n);
  double between = 0.0, within = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    between += static_cast<double>(z[g].size()) * (zbar[g] - zgrand) * (zbar[g] - zgrand);
    for (double v : z[g]) within += (v - zbar[g]) * (v - zbar[g]);
  }
  LeveneResult out;
  const double df1 = static_cast<double>(k - 1);
  const double df2 = static_cast<double>(n - k);
  if (within == 0.0) {
    if (between == 0.0) return out;
    out.stat = std::numeric_limits<double>::infinity();
    out.p = 0.0;
    return out;
  }
  out.stat = (df2 / df1) * between / within;
  out.p = f_sf(out.stat, df1, df2);
  return out;
}

StatsReport analyze(const std::vector<Sample>& samples) {
  std::map<int, std::vector<double>> by_count;
  for (const Sample& s : samples) by_count[s.object_count()].push_back(s.mean_resets);

  StatsReport r;
  std::vector<std::vector<double>> groups;
  for (auto& [key, values] : by_count) {
    r.group_keys.push_back(key);
    r.group_sizes.push_back(values.size());
    const double m = mean_of(values);
    r.group_means.push_back(m);
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    r.group_sds.push_back(values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0);
    groups.push_back(values);
  }
  if (groups.size() >= 2) {
    const auto kw = kruskal_wallis(groups);
    r.kw_h = kw.h;
    r.kw_p = kw.p;
    r.kw_eta2 = kw.eta2;
  } else {
    r.kw_h = r.kw_p = r.kw_eta2 = kNaN;
  }
  const bool levene_ok = groups.size() >= 2 &&
                         std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.size() >= 2; });
  if (levene_ok) {
    const auto lv = levene(groups);
    r.levene_stat = lv.stat;
    r.levene_p = lv.p;
  } else {
    r.levene_stat = r.levene_p = kNaN;
  }
  return r;
}

nlohmann::json to_json(const StatsReport& r) {
  // NaN and infinity have no JSON spelling; they are reported as null.
  const auto num = [](double v) -> nlohmann::json { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t i = 0; i < r.group_keys.size(); ++i)
    groups.push_back({{"objects", r.group_keys[i]}, {"n", r.group_sizes[i]}, {"mean", num(r.group_means[i])},
                      {"sd", num(r.group_sds[i])}});
  nlohmann::json sizes = r.group_sizes, means = nlohmann::json::array(), sds = nlohmann::json::array();
  for (double m : r.group_means) means.push_back(num(m));
  for (double s : r.group_sds) sds.push_back(num(s));
  return {{"groups", groups},       {"group_sizes", sizes},  {"group_means", means},
          {"group_sds", sds},       {"kw_h", num(r.kw_h)},   {"kw_p", num(r.kw_p)},
          {"kw_eta2", num(r.kw_eta2)}, {"levene_stat", num(r.levene_stat)}, {"levene_p", num(r.levene_p)}};
}

}  // namespace roomroam
