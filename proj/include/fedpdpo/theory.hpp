#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedpdpo/numerics.hpp"

namespace fedpdpo {

// One Monte Carlo cell: empirical vs analytic preference probability with
// a binomial standard error. pass holds iff the estimate sits within four
// standard errors of the analytic value.
struct McReport {
  double delta_er = 0.0;  // reward gap r_w - r_l
  double shift_c = 0.0;   // additive correction (or CDF evaluation point)
  std::size_t n_samples = 0;
  double empirical_p = 0.0;
  double analytic_p = 0.0;
  double std_err = 0.0;
  bool pass = false;
};

// Draws n independent pairs R_w ~ Gumbel(r_w, 1), R_l ~ Gumbel(r_l, 1) and
// compares Pr(R_w - R_l + c > 0) against sigmoid(r_w - r_l + c).
McReport mc_gumbel_preference(double r_w, double r_l, double c, std::size_t n,
                              SeededRng& rng);

// Empirical CDF of D = R_w - R_l (a logistic law centered at delta) at five
// points delta + {-2,-1,0,1,2}, each against sigmoid(z - delta).
std::vector<McReport> logistic_difference_check(double delta, std::size_t n,
                                                SeededRng& rng);

struct TheoremGridResult {
  std::vector<McReport> reports;
  bool all_pass = true;
};

// Direct-comparison grid over delta_er in {-3,-1,0,0.5,2} with c = 0.
TheoremGridResult verify_theorem1(std::size_t n, std::uint64_t seed);

// Reward-corrected grid over (delta_er, c) in {-1,0,1} x {-2,0,2}.
TheoremGridResult verify_theorem2(std::size_t n, std::uint64_t seed);

std::string reports_to_json(const std::vector<McReport>& reports);

}  // namespace fedpdpo
