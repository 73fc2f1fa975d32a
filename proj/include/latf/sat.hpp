#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "latf/data.hpp"
#include "latf/rng.hpp"

namespace latf {

// CNF formula; a literal is +-(variable index + 1), DIMACS style.
struct SatInstance {
  int n_vars = 0;
  std::vector<std::vector<int>> clauses;

  void validate() const;
};

// m iid clauses, each over k distinct variables with uniform signs
// (uniform over the C(n,k) * 2^k possible clauses; duplicates across
// clauses are allowed).
SatInstance sample_random_ksat(int n, int m, int k, Rng& rng);

// number of clauses with every literal false under the assignment
int energy(const std::vector<uint8_t>& assignment, const SatInstance& instance);

void save_dimacs(const SatInstance& instance, const std::string& path);
SatInstance load_dimacs(const std::string& path);

// Exact Boltzmann distribution over all 2^n assignments at temperature
// T: p(x) = exp(-E(x)/T) / Z_T. Assignment index packs x_0 as the most
// significant bit, so prefixes are contiguous index blocks.
class BoltzmannOracle {
 public:
  static constexpr int kMaxVars = 24;

  BoltzmannOracle(SatInstance instance, double temperature);

  const SatInstance& instance() const { return instance_; }
  double temperature() const { return temperature_; }
  double log_z() const { return log_z_; }
  const std::vector<double>& joint() const { return joint_; }
  double joint_at(uint32_t assignment_bits) const {
    return joint_[assignment_bits];
  }

  // p(x_t = i | x_0..x_{t-1}); prefix_bits packs the first t bits with
  // x_0 highest.
  std::array<double, 2> conditional(uint32_t prefix_bits, int t) const;

 private:
  SatInstance instance_;
  double temperature_;
  double log_z_ = 0.0;
  std::vector<double> joint_;                      // 2^n
  std::vector<std::vector<double>> prefix_prob_;   // level t: 2^t marginals
};

BoltzmannOracle build_oracle(const SatInstance& instance, double temperature);

// All 2^n assignments as prompted examples, grouped by the 2^prompt_len
// prefixes; whole groups go to one split so no test prompt appears in
// training. With 32 groups the split is 24/4/4.
Datasets make_sat_dataset(const BoltzmannOracle& oracle, int prompt_len,
                          uint64_t seed);

// Soft cross-entropy of given per-position model distributions (rows
// over the vocabulary) against the example's oracle conditionals, summed
// over the target positions.
double soft_seq_loss(const Example& ex,
                     const std::vector<std::vector<double>>& model_dists);

// helpers shared with tests
std::vector<uint8_t> assignment_from_bits(uint32_t bits, int n);
uint32_t bits_from_assignment(const std::vector<uint8_t>& x);

}  // namespace latf
