#include "latf/sat.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace latf {

void SatInstance::validate() const {
  if (n_vars <= 0) throw std::invalid_argument("sat: n_vars must be positive");
  for (const auto& clause : clauses) {
    std::vector<int> seen;
    for (int lit : clause) {
      if (lit == 0) throw std::invalid_argument("sat: zero literal");
      int v = std::abs(lit) - 1;
      if (v >= n_vars)
        throw std::invalid_argument("sat: literal references variable " +
                                    std::to_string(v) + " of " +
                                    std::to_string(n_vars));
      if (std::find(seen.begin(), seen.end(), v) != seen.end())
        throw std::invalid_argument("sat: repeated variable within a clause");
      seen.push_back(v);
    }
  }
}

SatInstance sample_random_ksat(int n, int m, int k, Rng& rng) {
  if (k > n)
    throw std::invalid_argument("sample_random_ksat: k=" + std::to_string(k) +
                                " exceeds n=" + std::to_string(n));
  if (n <= 0 || m < 0 || k <= 0)
    throw std::invalid_argument("sample_random_ksat: bad arguments");
  SatInstance inst;
  inst.n_vars = n;
  inst.clauses.reserve(static_cast<size_t>(m));
  for (int c = 0; c < m; ++c) {
    // k distinct variables by rejection, then uniform signs
    std::vector<int> vars;
    while (static_cast<int>(vars.size()) < k) {
      int v = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
      if (std::find(vars.begin(), vars.end(), v) == vars.end())
        vars.push_back(v);
    }
    std::sort(vars.begin(), vars.end());
    std::vector<int> clause;
    clause.reserve(static_cast<size_t>(k));
    for (int v : vars) {
      bool positive = rng.below(2) == 1;
      clause.push_back(positive ? v + 1 : -(v + 1));
    }
    inst.clauses.push_back(std::move(clause));
  }
  return inst;
}

int energy(const std::vector<uint8_t>& assignment, const SatInstance& instance) {
  if (static_cast<int>(assignment.size()) != instance.n_vars)
    throw std::invalid_argument("energy: assignment has " +
                                std::to_string(assignment.size()) +
                                " bits for " + std::to_string(instance.n_vars) +
                                " variables");
  int violated = 0;
  for (const auto& clause : instance.clauses) {
    bool satisfied = false;
    for (int lit : clause) {
      int v = std::abs(lit) - 1;
      bool value = assignment[static_cast<size_t>(v)] != 0;
      if ((lit > 0) == value) {
        satisfied = true;
        break;
      }
    }
    if (!satisfied) ++violated;
  }
  return violated;
}

void save_dimacs(const SatInstance& instance, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "p cnf " << instance.n_vars << " " << instance.clauses.size() << "\n";
  for (const auto& clause : instance.clauses) {
    for (int lit : clause) os << lit << " ";
    os << "0\n";
  }
}

SatInstance load_dimacs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  SatInstance inst;
  std::string line;
  bool header = false;
  size_t expected = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == 'c') continue;
    std::istringstream ls(line);
    if (line[0] == 'p') {
      std::string p, cnf;
      ls >> p >> cnf >> inst.n_vars >> expected;
      if (cnf != "cnf") throw std::runtime_error(path + ": not a cnf file");
      header = true;
      continue;
    }
    if (!header) throw std::runtime_error(path + ": clause before header");
    std::vector<int> clause;
    int lit;
    while (ls >> lit && lit != 0) clause.push_back(lit);
    inst.clauses.push_back(std::move(clause));
  }
  if (inst.clauses.size() != expected)
    throw std::runtime_error(path + ": clause count mismatch");
  inst.validate();
  return inst;
}

// ---------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------

std::vector<uint8_t> assignment_from_bits(uint32_t bits, int n) {
  std::vector<uint8_t> x(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    x[static_cast<size_t>(i)] = (bits >> (n - 1 - i)) & 1u;
  return x;
}

uint32_t bits_from_assignment(const std::vector<uint8_t>& x) {
  uint32_t bits = 0;
  for (uint8_t b : x) bits = (bits << 1) | (b ? 1u : 0u);
  return bits;
}

BoltzmannOracle::BoltzmannOracle(SatInstance instance, double temperature)
    : instance_(std::move(instance)), temperature_(temperature) {
  instance_.validate();
  if (temperature <= 0.0)
    throw std::invalid_argument("oracle: temperature must be positive");
  int n = instance_.n_vars;
  if (n > kMaxVars)
    throw std::invalid_argument(
        "oracle: brute-force enumeration is limited to " +
        std::to_string(kMaxVars) + " variables, got " + std::to_string(n));

  size_t count = size_t{1} << n;
  std::vector<double> logw(count);
  double max_logw = -std::numeric_limits<double>::infinity();
  std::vector<uint8_t> x(static_cast<size_t>(n), 0);
  for (size_t bits = 0; bits < count; ++bits) {
    for (int i = 0; i < n; ++i)
      x[static_cast<size_t>(i)] = (bits >> (n - 1 - i)) & 1u;
    double lw = -static_cast<double>(energy(x, instance_)) / temperature_;
    logw[bits] = lw;
    if (lw > max_logw) max_logw = lw;
  }
  // log-domain normalization
  double sum = 0.0;
  for (size_t bits = 0; bits < count; ++bits) sum += std::exp(logw[bits] - max_logw);
  log_z_ = max_logw + std::log(sum);

  joint_.resize(count);
  for (size_t bits = 0; bits < count; ++bits)
    joint_[bits] = std::exp(logw[bits] - log_z_);
  // compensated renormalization so the table sums to 1 at full precision
  double c = 0.0, total = 0.0;
  for (double p : joint_) {
    double y = p - c;
    double t = total + y;
    c = (t - total) - y;
    total = t;
  }
  double inv = 1.0 / total;
  for (double& p : joint_) p *= inv;

  // prefix marginal pyramid: level t holds p(x_0..x_{t-1})
  prefix_prob_.resize(static_cast<size_t>(n) + 1);
  prefix_prob_[static_cast<size_t>(n)] = joint_;
  for (int t = n - 1; t >= 0; --t) {
    const std::vector<double>& lower = prefix_prob_[static_cast<size_t>(t) + 1];
    std::vector<double>& level = prefix_prob_[static_cast<size_t>(t)];
    level.resize(size_t{1} << t);
    for (size_t p = 0; p < level.size(); ++p)
      level[p] = lower[2 * p] + lower[2 * p + 1];
  }
}

std::array<double, 2> BoltzmannOracle::conditional(uint32_t prefix_bits,
                                                   int t) const {
  int n = instance_.n_vars;
  if (t < 0 || t >= n)
    throw std::invalid_argument("conditional: position " + std::to_string(t) +
                                " out of range for n=" + std::to_string(n));
  if (t > 0 && prefix_bits >= (uint32_t{1} << t))
    throw std::invalid_argument("conditional: prefix wider than t bits");
  double denom = prefix_prob_[static_cast<size_t>(t)][prefix_bits];
  double p0 = prefix_prob_[static_cast<size_t>(t) + 1][2 * prefix_bits];
  double p1 = prefix_prob_[static_cast<size_t>(t) + 1][2 * prefix_bits + 1];
  return {p0 / denom, p1 / denom};
}

BoltzmannOracle build_oracle(const SatInstance& instance, double temperature) {
  return BoltzmannOracle(instance, temperature);
}

// ---------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------

Datasets make_sat_dataset(const BoltzmannOracle& oracle, int prompt_len,
                          uint64_t seed) {
  int n = oracle.instance().n_vars;
  if (prompt_len <= 0 || prompt_len >= n)
    throw std::invalid_argument("make_sat_dataset: prompt_len must lie in (0, n)");
  int n_groups = 1 << prompt_len;
  if (n_groups < 3)
    throw std::invalid_argument("make_sat_dataset: need at least 3 prompt groups");

  Datasets out;
  out.vocab = Vocab::for_symbols({"0", "1"});
  int id0 = out.vocab.id("0"), id1 = out.vocab.id("1");

  // groups shuffled, then sliced valid / test / train
  std::vector<int> groups(static_cast<size_t>(n_groups));
  for (int g = 0; g < n_groups; ++g) groups[static_cast<size_t>(g)] = g;
  Rng rng(derive_seed(seed, {tag("sat_split")}));
  rng.shuffle(groups);
  int n_valid = std::max(1, n_groups / 8);
  int n_test = std::max(1, n_groups / 8);

  auto split_of = [&](int group) {
    for (int i = 0; i < n_groups; ++i) {
      if (groups[static_cast<size_t>(i)] == group)
        return i < n_valid ? 1 : (i < n_valid + n_test ? 2 : 0);
    }
    throw std::logic_error("unreachable");
  };
  std::vector<int> group_split(static_cast<size_t>(n_groups));
  for (int g = 0; g < n_groups; ++g) group_split[static_cast<size_t>(g)] = split_of(g);

  int suffix_len = n - prompt_len;
  size_t count = size_t{1} << n;
  for (size_t bits = 0; bits < count; ++bits) {
    uint32_t b = static_cast<uint32_t>(bits);
    Example ex;
    ex.source.reserve(static_cast<size_t>(prompt_len));
    ex.target.reserve(static_cast<size_t>(suffix_len));
    for (int i = 0; i < n; ++i) {
      int bit = (b >> (n - 1 - i)) & 1;
      (i < prompt_len ? ex.source : ex.target).push_back(bit ? id1 : id0);
    }
    ex.soft_targets.reserve(static_cast<size_t>(suffix_len));
    for (int t = prompt_len; t < n; ++t) {
      uint32_t prefix = b >> (n - t);
      std::array<double, 2> c = oracle.conditional(prefix, t);
      std::vector<double> row(static_cast<size_t>(out.vocab.size()), 0.0);
      row[static_cast<size_t>(id0)] = c[0];
      row[static_cast<size_t>(id1)] = c[1];
      ex.soft_targets.push_back(std::move(row));
    }
    int group = static_cast<int>(b >> suffix_len);
    int split = group_split[static_cast<size_t>(group)];
    (split == 0 ? out.train : split == 1 ? out.valid : out.test)
        .examples.push_back(std::move(ex));
  }
  return out;
}

double soft_seq_loss(const Example& ex,
                     const std::vector<std::vector<double>>& model_dists) {
  if (!ex.has_soft_targets())
    throw std::invalid_argument("soft_seq_loss: example has no soft targets");
  if (model_dists.size() != ex.soft_targets.size())
    throw std::invalid_argument("soft_seq_loss: expected " +
                                std::to_string(ex.soft_targets.size()) +
                                " model distributions, got " +
                                std::to_string(model_dists.size()));
  double loss = 0.0;
  for (size_t t = 0; t < ex.soft_targets.size(); ++t) {
    const std::vector<double>& target = ex.soft_targets[t];
    const std::vector<double>& dist = model_dists[t];
    if (dist.size() != target.size())
      throw std::invalid_argument("soft_seq_loss: distribution width mismatch");
    for (size_t i = 0; i < target.size(); ++i) {
      if (target[i] > 0.0) loss -= target[i] * std::log(dist[i]);
    }
  }
  return loss;
}

}  // namespace latf
