#pragma once

// Brute-force reference implementations used only by tests. These share no
// code with the library paths they validate: projections are checked by
// subset enumeration, matmuls by triple loops, Hessians and gradients by
// central differences of direct loss evaluations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "maskanneal/mat.hpp"
#include "maskanneal/pattern.hpp"

namespace maskanneal::oracle {

struct GroupProjectResult {
  std::vector<int> best_keep;                 // lexicographically first optimum
  std::vector<std::vector<int>> all_optima;   // every subset within 1e-12 of the best sum
  double best_sum = 0.0;
};

/// Enumerates all C(M,N) keep-sets of one group and returns those with the
/// maximal kept-score sum.
inline GroupProjectResult exhaustive_group_project(const std::vector<double>& scores, int n) {
  const int m = int(scores.size());
  GroupProjectResult res;
  std::vector<bool> select(std::size_t(m), false);
  std::fill(select.begin(), select.begin() + n, true);
  bool first = true;
  // std::prev_permutation over the selector enumerates combinations in
  // lexicographic order of the kept index sets
  do {
    std::vector<int> keep;
    double sum = 0.0;
    for (int i = 0; i < m; ++i)
      if (select[std::size_t(i)]) {
        keep.push_back(i);
        sum += scores[std::size_t(i)];
      }
    if (first || sum > res.best_sum + 1e-12) {
      res.best_sum = sum;
      res.best_keep = keep;
      res.all_optima = {keep};
      first = false;
    } else if (std::abs(sum - res.best_sum) <= 1e-12) {
      res.all_optima.push_back(keep);
    }
  } while (std::prev_permutation(select.begin(), select.end()));
  return res;
}

inline Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows(), b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

using FlatLoss = std::function<double(const std::vector<double>&)>;

/// Central-difference gradient of a direct loss evaluation.
inline std::vector<double> fd_gradient(const FlatLoss& loss, std::vector<double> w,
                                       double h = 1e-5) {
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double saved = w[i];
    w[i] = saved + h;
    const double lp = loss(w);
    w[i] = saved - h;
    const double lm = loss(w);
    w[i] = saved;
    g[i] = (lp - lm) / (2.0 * h);
  }
  return g;
}

/// Full Hessian by second-order central differences.
inline Mat fd_hessian(const FlatLoss& loss, std::vector<double> w, double h = 1e-4) {
  const std::size_t n = w.size();
  Mat hess(n, n);
  const double base = loss(w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double v;
      if (i == j) {
        const double wi = w[i];
        w[i] = wi + h;
        const double lp = loss(w);
        w[i] = wi - h;
        const double lm = loss(w);
        w[i] = wi;
        v = (lp - 2.0 * base + lm) / (h * h);
      } else {
        const double wi = w[i], wj = w[j];
        w[i] = wi + h; w[j] = wj + h; const double lpp = loss(w);
        w[j] = wj - h; const double lpm = loss(w);
        w[i] = wi - h; const double lmm = loss(w);
        w[j] = wj + h; const double lmp = loss(w);
        w[i] = wi; w[j] = wj;
        v = (lpp - lpm - lmp + lmm) / (4.0 * h * h);
      }
      hess(i, j) = v;
      hess(j, i) = v;
    }
  }
  return hess;
}

inline double reconstruction_error(const Mat& x, const Mat& w, const Mat& mask) {
  double err = 0.0;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    for (std::size_t d = 0; d < w.rows(); ++d) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c)
        dot += x(b, c) * (1.0 - mask(d, c)) * w(d, c);
      err += dot * dot;
    }
  }
  return err;
}

/// Global minimizer of ||X W^T - X (m.*W)^T||_F^2 over feasible masks, by
/// enumerating keep-set combinations row by row (rows are independent).
/// Throws when the per-row search space exceeds max_candidates.
inline Mat exhaustive_mask_search(const Mat& w, const Mat& x, const SparsityPattern& pattern,
                                  std::uint64_t max_candidates = 1000000) {
  pattern.check_shape(w.rows(), w.cols());
  require(pattern.kind() == SparsityPattern::Kind::NofM,
          "exhaustive_mask_search: NofM patterns only");
  const int m = pattern.m(), n = pattern.n();
  const std::size_t groups = w.cols() / std::size_t(m);

  std::vector<std::vector<int>> keep_sets;
  {
    std::vector<bool> select(std::size_t(m), false);
    std::fill(select.begin(), select.begin() + n, true);
    do {
      std::vector<int> keep;
      for (int i = 0; i < m; ++i)
        if (select[std::size_t(i)]) keep.push_back(i);
      keep_sets.push_back(keep);
    } while (std::prev_permutation(select.begin(), select.end()));
  }

  std::uint64_t candidates = 1;
  for (std::size_t g = 0; g < groups; ++g) {
    candidates *= keep_sets.size();
    require(candidates <= max_candidates, "exhaustive_mask_search: search space too large");
  }

  Mat best_mask(w.rows(), w.cols(), 0.0);
  std::vector<std::size_t> choice(groups, 0);
  for (std::size_t d = 0; d < w.rows(); ++d) {
    double best = 0.0;
    bool first = true;
    std::vector<std::size_t> best_choice;
    std::fill(choice.begin(), choice.end(), 0);
    for (;;) {
      // residual = X * (unkept part of row d)
      double err = 0.0;
      for (std::size_t b = 0; b < x.rows(); ++b) {
        double dot = 0.0;
        for (std::size_t g = 0; g < groups; ++g) {
          const auto& keep = keep_sets[choice[g]];
          for (int j = 0; j < m; ++j) {
            if (std::find(keep.begin(), keep.end(), j) == keep.end())
              dot += x(b, std::size_t(m) * g + std::size_t(j)) * w(d, std::size_t(m) * g + std::size_t(j));
          }
        }
        err += dot * dot;
      }
      if (first || err < best) {
        best = err;
        best_choice = choice;
        first = false;
      }
      std::size_t g = 0;
      while (g < groups && ++choice[g] == keep_sets.size()) choice[g++] = 0;
      if (g == groups) break;
    }
    for (std::size_t g = 0; g < groups; ++g)
      for (int j : keep_sets[best_choice[g]]) best_mask(d, std::size_t(m) * g + std::size_t(j)) = 1.0;
  }
  return best_mask;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * double(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

}  // namespace maskanneal::oracle
