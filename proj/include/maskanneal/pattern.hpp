#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maskanneal/mat.hpp"

namespace maskanneal {

/// Structured sparsity constraint over a DxC weight matrix.
///
/// NofM keeps exactly n survivors in every contiguous group of m entries
/// along the input (column) dimension. BlockHalf keeps exactly half of the
/// entries of every block_rows x block_cols tile.
class SparsityPattern {
 public:
  enum class Kind { NofM, BlockHalf };

  static SparsityPattern nofm(int n, int m) {
    require(n > 0 && m > 0 && n < m, "NofM pattern requires 0 < n < m");
    SparsityPattern p;
    p.kind_ = Kind::NofM;
    p.n_ = n;
    p.m_ = m;
    return p;
  }

  static SparsityPattern block_half(int block_rows, int block_cols) {
    require(block_rows > 0 && block_cols > 0, "block dims must be positive");
    require((block_rows * block_cols) % 2 == 0,
            "BlockHalf requires an even block element count");
    SparsityPattern p;
    p.kind_ = Kind::BlockHalf;
    p.block_rows_ = block_rows;
    p.block_cols_ = block_cols;
    return p;
  }

  Kind kind() const { return kind_; }
  int n() const { return n_; }
  int m() const { return m_; }
  int block_rows() const { return block_rows_; }
  int block_cols() const { return block_cols_; }

  int group_size() const { return kind_ == Kind::NofM ? m_ : block_rows_ * block_cols_; }
  int keep_count() const { return kind_ == Kind::NofM ? n_ : group_size() / 2; }

  bool shape_compatible(std::size_t rows, std::size_t cols) const {
    if (rows == 0 || cols == 0) return false;
    if (kind_ == Kind::NofM) return cols % std::size_t(m_) == 0;
    return rows % std::size_t(block_rows_) == 0 && cols % std::size_t(block_cols_) == 0;
  }

  void check_shape(std::size_t rows, std::size_t cols) const {
    if (!shape_compatible(rows, cols)) {
      std::ostringstream os;
      os << "shape " << rows << "x" << cols << " incompatible with pattern " << to_string();
      throw std::invalid_argument(os.str());
    }
  }

  std::string to_string() const {
    std::ostringstream os;
    if (kind_ == Kind::NofM)
      os << n_ << ":" << m_;
    else
      os << "block" << block_rows_ << "x" << block_cols_;
    return os.str();
  }

  /// Parses "2:4" or "block16x16".
  static SparsityPattern parse(const std::string& s) {
    if (s.rfind("block", 0) == 0) {
      auto x = s.find('x', 5);
      require(x != std::string::npos, "bad pattern string: " + s);
      return block_half(std::stoi(s.substr(5, x - 5)), std::stoi(s.substr(x + 1)));
    }
    auto colon = s.find(':');
    require(colon != std::string::npos, "bad pattern string: " + s);
    return nofm(std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1)));
  }

  bool operator==(const SparsityPattern& o) const {
    return kind_ == o.kind_ && n_ == o.n_ && m_ == o.m_ &&
           block_rows_ == o.block_rows_ && block_cols_ == o.block_cols_;
  }

 private:
  SparsityPattern() = default;
  Kind kind_ = Kind::NofM;
  int n_ = 2, m_ = 4;
  int block_rows_ = 0, block_cols_ = 0;
};

/// One group of the partition: its group-grid coordinate plus the ordered
/// list of member element coordinates (row, col).
struct GroupIndex {
  std::size_t grid_row = 0, grid_col = 0;
  std::vector<std::pair<std::size_t, std::size_t>> members;
};

/// Partition of all rows x cols coordinates into pattern groups, row-major
/// over the group grid. Every coordinate appears in exactly one group.
inline std::vector<GroupIndex> iter_groups(const SparsityPattern& p, std::size_t rows,
                                           std::size_t cols) {
  p.check_shape(rows, cols);
  std::vector<GroupIndex> out;
  if (p.kind() == SparsityPattern::Kind::NofM) {
    const std::size_t m = std::size_t(p.m());
    out.reserve(rows * (cols / m));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t gc = 0; gc < cols / m; ++gc) {
        GroupIndex g;
        g.grid_row = r;
        g.grid_col = gc;
        g.members.reserve(m);
        for (std::size_t k = 0; k < m; ++k) g.members.emplace_back(r, gc * m + k);
        out.push_back(std::move(g));
      }
    }
  } else {
    const std::size_t br = std::size_t(p.block_rows()), bc = std::size_t(p.block_cols());
    out.reserve((rows / br) * (cols / bc));
    for (std::size_t gr = 0; gr < rows / br; ++gr) {
      for (std::size_t gc = 0; gc < cols / bc; ++gc) {
        GroupIndex g;
        g.grid_row = gr;
        g.grid_col = gc;
        g.members.reserve(br * bc);
        for (std::size_t i = 0; i < br; ++i)
          for (std::size_t j = 0; j < bc; ++j)
            g.members.emplace_back(gr * br + i, gc * bc + j);
        out.push_back(std::move(g));
      }
    }
  }
  return out;
}

namespace detail {

// Marks the keep_count highest-scoring member indices of one group. Ties go
// to the lower flat coordinate so projections are reproducible.
inline void keep_top(const Mat& scores, const std::vector<std::pair<std::size_t, std::size_t>>& members,
                     int keep, Mat& mask) {
  thread_local std::vector<std::size_t> order;
  order.resize(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double sa = scores(members[a].first, members[a].second);
    double sb = scores(members[b].first, members[b].second);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  for (int k = 0; k < keep; ++k) {
    auto [r, c] = members[order[std::size_t(k)]];
    mask(r, c) = 1.0;
  }
}

}  // namespace detail

/// Projects a score matrix onto the feasible set: within each group the
/// keep_count largest scores become 1, the rest 0. Ties break toward the
/// lower coordinate index.
inline Mat project_structured(const Mat& scores, const SparsityPattern& p) {
  p.check_shape(scores.rows(), scores.cols());
  require(scores.all_finite(), "project_structured: non-finite score");
  Mat mask(scores.rows(), scores.cols(), 0.0);
  if (p.kind() == SparsityPattern::Kind::NofM) {
    const std::size_t m = std::size_t(p.m());
    const int keep = p.n();
    thread_local std::vector<std::size_t> order;
    order.resize(m);
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      for (std::size_t g = 0; g < scores.cols() / m; ++g) {
        const double* s = scores.data() + r * scores.cols() + g * m;
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (s[a] != s[b]) return s[a] > s[b];
          return a < b;
        });
        double* mk = mask.data() + r * mask.cols() + g * m;
        for (int k = 0; k < keep; ++k) mk[order[std::size_t(k)]] = 1.0;
      }
    }
  } else {
    for (const GroupIndex& g : iter_groups(p, scores.rows(), scores.cols()))
      detail::keep_top(scores, g.members, p.keep_count(), mask);
  }
  return mask;
}

/// Result of a feasibility check. When infeasible, carries the first
/// offending group in iteration order.
struct FeasibilityReport {
  bool ok = true;
  std::size_t group_ordinal = 0;
  std::size_t grid_row = 0, grid_col = 0;
  int found = 0, expected = 0;
  std::string message;
};

/// True iff every group keeps exactly keep_count entries. Mask entries must
/// be exactly 0 or 1.
inline FeasibilityReport check_feasible(const Mat& mask, const SparsityPattern& p) {
  FeasibilityReport rep;
  if (!p.shape_compatible(mask.rows(), mask.cols())) {
    rep.ok = false;
    rep.message = "shape incompatible with pattern " + p.to_string();
    return rep;
  }
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) {
      rep.ok = false;
      rep.message = "mask entry not binary";
      return rep;
    }
  }
  std::size_t ord = 0;
  for (const GroupIndex& g : iter_groups(p, mask.rows(), mask.cols())) {
    int count = 0;
    for (auto [r, c] : g.members) count += mask(r, c) == 1.0 ? 1 : 0;
    if (count != p.keep_count()) {
      rep.ok = false;
      rep.group_ordinal = ord;
      rep.grid_row = g.grid_row;
      rep.grid_col = g.grid_col;
      rep.found = count;
      rep.expected = p.keep_count();
      std::ostringstream os;
      os << "group (" << g.grid_row << "," << g.grid_col << ") keeps " << count
         << " entries, expected " << p.keep_count();
      rep.message = os.str();
      return rep;
    }
    ++ord;
  }
  return rep;
}

}  // namespace maskanneal
