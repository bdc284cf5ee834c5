#pragma once

#include <vector>

#include <json.hpp>

namespace roomroam {

struct Sample;

struct KruskalWallisResult {
  double h = 0.0;
  double p = 1.0;
  double eta2 = 0.0;
};

// H with midranks and tie correction; p is the chi-square survival with k - 1 degrees of freedom;
// eta2 = (H - k + 1) / (N - k). All values tied gives H = 0, p = 1.
KruskalWallisResult kruskal_wallis(const std::vector<std::vector<double>>& groups);

struct LeveneResult {
  double stat = 0.0;
  double p = 1.0;
};

// Mean-centred Levene W with F(k - 1, N - k) p-value. Zero deviations everywhere gives (0, 1);
// zero within-group spread with unequal group spreads gives (+inf, 0).
LeveneResult levene(const std::vector<std::vector<double>>& groups);

// Survival functions backing the p-values.
double chi_square_sf(double x, double df);
double f_sf(double x, double df1, double df2);

struct StatsReport {
  std::vector<int> group_keys;  // object counts, ascending
  std::vector<std::size_t> group_sizes;
  std::vector<double> group_means;
  std::vector<double> group_sds;
  double kw_h = 0.0;
  double kw_p = 1.0;
  double kw_eta2 = 0.0;
  double levene_stat = 0.0;
  double levene_p = 1.0;
};

// Groups mean_resets by object count and runs both tests (NaN where a test is undefined).
StatsReport analyze(const std::vector<Sample>& samples);
nlohmann::json to_json(const StatsReport& report);

}  // namespace roomroam
