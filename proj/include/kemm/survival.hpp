#pragma once

// Discrete-time hazard / survival mathematics and the survival statistics
// used for evaluation (Harrell's C, Kaplan-Meier, log-rank).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kemm::survival {

// Raised when a statistic has no defined value for the given cohort
// (no admissible pairs, zero events, ...). Never silently mapped to 0.
class UndefinedStatistic : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct SurvivalLabel {
  int event_bin = 0;
  int censorship = 0;  // 1 = censored (alive at last follow-up), 0 = death observed
  double raw_time = 0.0;

  bool uncensored() const { return censorship == 0; }
  friend bool operator==(const SurvivalLabel&, const SurvivalLabel&) = default;
};

inline void validate_label(const SurvivalLabel& label, int num_bins) {
  if (label.event_bin < 0 || label.event_bin >= num_bins)
    throw std::out_of_range("event_bin " + std::to_string(label.event_bin) +
                            " outside [0, " + std::to_string(num_bins) + ")");
  if (label.censorship != 0 && label.censorship != 1)
    throw std::invalid_argument("censorship must be 0 or 1");
  if (!(label.raw_time >= 0.0) || !std::isfinite(label.raw_time))
    throw std::invalid_argument("raw_time must be finite and nonnegative");
}

/// Per-bin hazards h(t) and the survival curve s(t) = prod_{j<=t} (1 - h(j)).
struct HazardCurve {
  std::vector<double> hazards;
  std::vector<double> survival;
};

inline constexpr double kLogClamp = 1e-7;

template <typename Scalar>
Scalar logistic(Scalar x) {
  // split on sign so exp never overflows
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
std::vector<Scalar> survival_from_hazard(std::span<const Scalar> hazards) {
  if (hazards.empty()) throw std::invalid_argument("survival_from_hazard: empty hazard vector");
  std::vector<Scalar> out(hazards.size());
  Scalar running = Scalar(1);
  for (std::size_t t = 0; t < hazards.size(); ++t) {
    const Scalar h = hazards[t];
    if (!(h >= Scalar(0) && h <= Scalar(1)))
      throw std::invalid_argument("survival_from_hazard: hazard outside [0,1] at bin " +
                                  std::to_string(t));
    running *= Scalar(1) - h;
    out[t] = running;
  }
  return out;
}

inline std::vector<double> survival_from_hazard(const std::vector<double>& hazards) {
  return survival_from_hazard<double>(std::span<const double>(hazards));
}

template <typename Scalar>
HazardCurve hazard_curve_from_logits(std::span<const Scalar> logits) {
  HazardCurve curve;
  curve.hazards.reserve(logits.size());
  for (Scalar u : logits) curve.hazards.push_back(static_cast<double>(logistic(u)));
  curve.survival = survival_from_hazard<double>(curve.hazards);
  return curve;
}

/// Negative log-likelihood of one patient under the discrete-time hazard
/// model, taking per-bin logits. Uses s(-1) = 1 and clamps log arguments at
/// kLogClamp. When `grad` is non-empty it receives d loss / d logits (the
/// clamp contributes zero derivative where active).
template <typename Scalar>
Scalar nll_surv_loss(std::span<const Scalar> logits, const SurvivalLabel& label,
                     std::span<Scalar> grad = {}) {
  const int num_bins = static_cast<int>(logits.size());
  if (num_bins == 0) throw std::invalid_argument("nll_surv_loss: no bins");
  validate_label(label, num_bins);
  if (!grad.empty() && grad.size() != logits.size())
    throw std::invalid_argument("nll_surv_loss: gradient buffer size mismatch");

  const int t = label.event_bin;
  const Scalar eps = Scalar(kLogClamp);
  std::vector<Scalar> hazard(num_bins);
  for (int j = 0; j < num_bins; ++j) hazard[j] = logistic(logits[j]);

  auto survival_through = [&](int upto) {
    Scalar s = Scalar(1);
    for (int j = 0; j <= upto; ++j) s *= Scalar(1) - hazard[j];
    return s;
  };

  if (!grad.empty()) std::fill(grad.begin(), grad.end(), Scalar(0));
  Scalar loss = Scalar(0);
  if (label.censorship == 1) {
    const Scalar s_t = survival_through(t);
    loss -= std::log(std::max(s_t, eps));
    if (!grad.empty() && s_t > eps)
      for (int j = 0; j <= t; ++j) grad[j] += hazard[j];  // -d log(1-h_j)/du_j = h_j
  } else {
    const Scalar s_prev = survival_through(t - 1);  // empty product at t = 0
    loss -= std::log(std::max(s_prev, eps));
    if (!grad.empty() && s_prev > eps)
      for (int j = 0; j < t; ++j) grad[j] += hazard[j];
    loss -= std::log(std::max(hazard[t], eps));
    if (!grad.empty() && hazard[t] > eps) grad[t] -= Scalar(1) - hazard[t];
  }
  return loss;
}

/// Batch form: sum of per-patient losses. All patients must share T.
inline double nll_surv_loss(const std::vector<std::vector<double>>& logits,
                            const std::vector<SurvivalLabel>& labels) {
  if (logits.empty()) throw std::invalid_argument("nll_surv_loss: empty batch");
  if (logits.size() != labels.size())
    throw std::invalid_argument("nll_surv_loss: logits/labels length mismatch");
  const std::size_t num_bins = logits.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != num_bins)
      throw std::invalid_argument("nll_surv_loss: bin count mismatch between patients");
    total += nll_surv_loss<double>(std::span<const double>(logits[i]), labels[i]);
  }
  return total;
}

/// Scalar death risk: minus the summed survival curve. Higher is riskier.
inline double risk_score(std::span<const double> survival) {
  return -std::accumulate(survival.begin(), survival.end(), 0.0);
}
inline double risk_score(const HazardCurve& curve) { return risk_score(curve.survival); }

namespace detail {

// Fenwick tree over risk ranks, counts only.
class RankCounter {
 public:
  explicit RankCounter(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // number of inserted ranks < rank
  long long below(std::size_t rank) const {
    long long s = 0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long long> tree_;
};

}  // namespace detail

/// Harrell's concordance index. A pair (i, j) is admissible when i is
/// uncensored and raw_time_i < raw_time_j; it is concordant when
/// risk_i > risk_j, and risk ties count one half.
///
/// Sweeps subjects by decreasing time and keeps a rank structure of the
/// strictly later subjects, so the cost is O(N log N).
inline double concordance_index(std::span<const double> risks,
                                std::span<const SurvivalLabel> labels) {
  const std::size_t n = risks.size();
  if (n != labels.size()) throw std::invalid_argument("concordance_index: length mismatch");
  for (double r : risks)
    if (!std::isfinite(r)) throw std::invalid_argument("concordance_index: non-finite risk");

  std::vector<double> sorted_risks(risks.begin(), risks.end());
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(
        std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) - sorted_risks.begin());
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return labels[a].raw_time > labels[b].raw_time;
  });

  detail::RankCounter later(sorted_risks.size());
  long long inserted = 0;
  double concordant = 0.0;
  long long admissible = 0;
  std::size_t k = 0;
  while (k < n) {
    std::size_t end = k;
    const double time = labels[order[k]].raw_time;
    while (end < n && labels[order[end]].raw_time == time) ++end;
    // every subject in [k, end) shares a time; compare against strictly later ones only
    for (std::size_t m = k; m < end; ++m) {
      const std::size_t i = order[m];
      if (!labels[i].uncensored()) continue;
      const std::size_t rank = rank_of(risks[i]);
      const long long lower = later.below(rank);
      const long long lower_or_equal = later.below(rank + 1);
      concordant += static_cast<double>(lower) + 0.5 * static_cast<double>(lower_or_equal - lower);
      admissible += inserted;
    }
    for (std::size_t m = k; m < end; ++m) {
      later.add(rank_of(risks[order[m]]));
      ++inserted;
    }
    k = end;
  }
  if (admissible == 0) throw UndefinedStatistic("concordance_index: no admissible pairs");
  return concordant / static_cast<double>(admissible);
}

struct KmStep {
  double time = 0.0;
  double survival = 1.0;
  int at_risk = 0;
  int events = 0;
};

/// Product-limit estimate over raw_time. The first step is (0, 1); one step
/// follows per distinct event time. Subjects censored at an event time are
/// counted in that time's risk set.
inline std::vector<KmStep> kaplan_meier(std::span<const SurvivalLabel> labels) {
  if (labels.empty()) throw std::invalid_argument("kaplan_meier: empty cohort");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return labels[a].raw_time < labels[b].raw_time; });

  std::vector<KmStep> steps{{0.0, 1.0, static_cast<int>(labels.size()), 0}};
  int at_risk = static_cast<int>(labels.size());
  double surv = 1.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double time = labels[order[k]].raw_time;
    int events = 0, leaving = 0;
    while (k < order.size() && labels[order[k]].raw_time == time) {
      events += labels[order[k]].uncensored() ? 1 : 0;
      ++leaving;
      ++k;
    }
    if (events > 0) {
      surv *= 1.0 - static_cast<double>(events) / static_cast<double>(at_risk);
      steps.push_back({time, surv, at_risk, events});
    }
    at_risk -= leaving;
  }
  return steps;
}

/// Value of a KM step function at time t (right-continuous).
inline double km_value_at(const std::vector<KmStep>& steps, double t) {
  double value = 1.0;
  for (const auto& s : steps) {
    if (s.time > t) break;
    value = s.survival;
  }
  return value;
}

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
  double variance = 0.0;
};

/// Chi-square(1) upper tail probability.
inline double chi_square1_sf(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

/// Two-group log-rank test with one degree of freedom.
inline LogRankResult log_rank_test(std::span<const SurvivalLabel> group_a,
                                   std::span<const SurvivalLabel> group_b) {
  if (group_a.empty() || group_b.empty())
    throw std::invalid_argument("log_rank_test: both groups must be nonempty");

  struct Entry {
    double time;
    bool event;
    bool in_a;
  };
  std::vector<Entry> all;
  all.reserve(group_a.size() + group_b.size());
  for (const auto& l : group_a) all.push_back({l.raw_time, l.uncensored(), true});
  for (const auto& l : group_b) all.push_back({l.raw_time, l.uncensored(), false});
  std::sort(all.begin(), all.end(), [](const Entry& x, const Entry& y) { return x.time < y.time; });

  double n_a = static_cast<double>(group_a.size());
  double n_b = static_cast<double>(group_b.size());
  LogRankResult r;
  std::size_t k = 0;
  while (k < all.size()) {
    const double time = all[k].time;
    double d_a = 0, d_b = 0, out_a = 0, out_b = 0;
    for (; k < all.size() && all[k].time == time; ++k) {
      double& events = all[k].in_a ? d_a : d_b;
      double& out = all[k].in_a ? out_a : out_b;
      if (all[k].event) events += 1;
      out += 1;
    }
    const double d = d_a + d_b;
    const double n = n_a + n_b;
    if (d > 0) {
      r.observed_a += d_a;
      r.expected_a += d * n_a / n;
      if (n > 1) r.variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1);
    }
    n_a -= out_a;
    n_b -= out_b;
  }
  if (r.variance <= 0.0)
    throw UndefinedStatistic("log_rank_test: no events (or zero variance) in either group");
  const double diff = r.observed_a - r.expected_a;
  r.statistic = diff * diff / r.variance;
  r.p_value = chi_square1_sf(r.statistic);
  return r;
}

/// Cut points over raw time splitting subjects into T bins.
struct BinScheme {
  std::vector<double> edges;

  int num_bins() const { return static_cast<int>(edges.size()) + 1; }
  int assign(double raw_time) const {
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), raw_time) - edges.begin());
  }
  friend bool operator==(const BinScheme&, const BinScheme&) = default;
};

/// Quantile bins over uncensored times. Edge k sits midway between the
/// floor(k*n/T)-th and next order statistic, so the uncensored subjects
/// fall into T bins whose counts differ by at most one.
inline BinScheme bin_times(std::span<const double> raw_times, std::span<const int> censorships,
                           int num_bins) {
  if (num_bins < 1) throw std::invalid_argument("bin_times: T must be >= 1");
  if (raw_times.size() != censorships.size())
    throw std::invalid_argument("bin_times: length mismatch");
  std::vector<double> uncensored;
  for (std::size_t i = 0; i < raw_times.size(); ++i)
    if (censorships[i] == 0) uncensored.push_back(raw_times[i]);
  std::sort(uncensored.begin(), uncensored.end());
  std::vector<double> unique_times = uncensored;
  unique_times.erase(std::unique(unique_times.begin(), unique_times.end()), unique_times.end());
  if (static_cast<int>(unique_times.size()) < num_bins)
    throw std::invalid_argument("bin_times: too few uncensored subjects (" +
                                std::to_string(unique_times.size()) + " distinct times for " +
                                std::to_string(num_bins) + " bins)");

  BinScheme scheme;
  const std::size_t n = uncensored.size();
  for (int k = 1; k < num_bins; ++k) {
    const std::size_t cut = static_cast<std::size_t>(k) * n / static_cast<std::size_t>(num_bins);
    const double edge = 0.5 * (uncensored[cut - 1] + uncensored[cut]);
    if (!scheme.edges.empty() && edge <= scheme.edges.back())
      throw std::invalid_argument("bin_times: tied event times collapse adjacent bins");
    scheme.edges.push_back(edge);
  }
  return scheme;
}

}  // namespace kemm::survival
