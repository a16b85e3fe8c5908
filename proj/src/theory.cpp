#include "fedpdpo/theory.hpp"

#include <cmath>

#include <json.hpp>

namespace fedpdpo {

using nlohmann::json;

namespace {

McReport make_report(double delta_er, double c, std::size_t n, double empirical,
                     double analytic) {
  McReport r;
  r.delta_er = delta_er;
  r.shift_c = c;
  r.n_samples = n;
  r.empirical_p = empirical;
  r.analytic_p = analytic;
  r.std_err = std::sqrt(analytic * (1.0 - analytic) / static_cast<double>(n));
  r.pass = std::abs(empirical - analytic) <= 4.0 * r.std_err;
  return r;
}

}  // namespace

McReport mc_gumbel_preference(double r_w, double r_l, double c, std::size_t n,
                              SeededRng& rng) {
  if (n < 10000) throw ContractError("mc_gumbel_preference: n must be >= 10^4");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double rw = sample_gumbel(rng, r_w);
    const double rl = sample_gumbel(rng, r_l);
    if (rw - rl + c > 0.0) ++wins;
  }
  const double empirical = static_cast<double>(wins) / static_cast<double>(n);
  return make_report(r_w - r_l, c, n, empirical, sigmoid(r_w - r_l + c));
}

std::vector<McReport> logistic_difference_check(double delta, std::size_t n,
                                                SeededRng& rng) {
  if (n < 10000) throw ContractError("logistic_difference_check: n must be >= 10^4");
  const double points[] = {delta - 2.0, delta - 1.0, delta, delta + 1.0, delta + 2.0};
  std::size_t below[5] = {0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const double d = sample_gumbel(rng, delta) - sample_gumbel(rng, 0.0);
    for (int k = 0; k < 5; ++k)
      if (d <= points[k]) ++below[k];
  }
  std::vector<McReport> out;
  for (int k = 0; k < 5; ++k) {
    const double empirical = static_cast<double>(below[k]) / static_cast<double>(n);
    out.push_back(
        make_report(delta, points[k], n, empirical, sigmoid(points[k] - delta)));
  }
  return out;
}

TheoremGridResult verify_theorem1(std::size_t n, std::uint64_t seed) {
  TheoremGridResult result;
  std::uint64_t stream = 0;
  for (double delta : {-3.0, -1.0, 0.0, 0.5, 2.0}) {
    SeededRng rng(seed, stream++);
    McReport r = mc_gumbel_preference(delta, 0.0, 0.0, n, rng);
    result.all_pass = result.all_pass && r.pass;
    result.reports.push_back(r);
  }
  return result;
}

TheoremGridResult verify_theorem2(std::size_t n, std::uint64_t seed) {
  TheoremGridResult result;
  std::uint64_t stream = 100;
  for (double delta : {-1.0, 0.0, 1.0}) {
    for (double c : {-2.0, 0.0, 2.0}) {
      SeededRng rng(seed, stream++);
      McReport r = mc_gumbel_preference(delta, 0.0, c, n, rng);
      result.all_pass = result.all_pass && r.pass;
      result.reports.push_back(r);
    }
  }
  return result;
}

std::string reports_to_json(const std::vector<McReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) {
    json j;
    j["delta_er"] = r.delta_er;
    j["shift_c"] = r.shift_c;
    j["n_samples"] = r.n_samples;
    j["empirical_p"] = r.empirical_p;
    j["analytic_p"] = r.analytic_p;
    j["std_err"] = r.std_err;
    j["pass"] = r.pass;
    arr.push_back(j);
  }
  return arr.dump(2);
}

}  // namespace fedpdpo
