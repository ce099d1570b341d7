#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "maskanneal/mat.hpp"
#include "maskanneal/rng.hpp"

namespace maskanneal {

/// Deterministic synthetic character corpus: an order-2 Markov source over a
/// small alphabet, with 4 candidate successors per state and random mixture
/// weights. Generated on the fly from a seed, so the repo ships no data
/// files. A held-out suffix is reserved for evaluation.
struct LmData {
  long alphabet = 32;
  std::vector<int> train_tokens;
  std::vector<int> heldout_tokens;

  static LmData make(long alphabet, std::size_t corpus_chars, std::size_t heldout_chars,
                     std::uint64_t seed) {
    require(alphabet >= 4, "markov source needs an alphabet of at least 4");
    require(corpus_chars > heldout_chars + 64, "corpus too small for the held-out split");
    LmData d;
    d.alphabet = alphabet;

    RngStream source_rng(seed, "corpus-source");
    const std::size_t states = std::size_t(alphabet) * std::size_t(alphabet);
    std::vector<std::array<int, 4>> options(states);
    std::vector<std::array<double, 4>> cum(states);
    for (std::size_t s = 0; s < states; ++s) {
      std::array<double, 4> w{};
      double total = 0.0;
      for (int k = 0; k < 4; ++k) {
        options[s][std::size_t(k)] = int(source_rng.uniform_index(std::uint64_t(alphabet)));
        w[std::size_t(k)] = 0.05 + source_rng.uniform01();
        total += w[std::size_t(k)];
      }
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        acc += w[std::size_t(k)] / total;
        cum[s][std::size_t(k)] = acc;
      }
      cum[s][3] = 1.0;
    }

    RngStream walk_rng(seed, "corpus-walk");
    std::vector<int> tokens;
    tokens.reserve(corpus_chars);
    int prev2 = 0, prev1 = 1;
    for (std::size_t i = 0; i < corpus_chars; ++i) {
      const std::size_t s = std::size_t(prev2) * std::size_t(alphabet) + std::size_t(prev1);
      const double u = walk_rng.uniform01();
      int next = options[s][3];
      for (int k = 0; k < 4; ++k)
        if (u <= cum[s][std::size_t(k)]) {
          next = options[s][std::size_t(k)];
          break;
        }
      tokens.push_back(next);
      prev2 = prev1;
      prev1 = next;
    }
    d.heldout_tokens.assign(tokens.end() - long(heldout_chars), tokens.end());
    d.train_tokens.assign(tokens.begin(), tokens.end() - long(heldout_chars));
    return d;
  }

  /// One batch of (seq_len+1)-token windows at random train offsets; the
  /// extra token supplies next-token targets.
  std::vector<std::vector<int>> sample_batch(RngStream& rng, std::size_t batch,
                                             std::size_t seq_len) const {
    std::vector<std::vector<int>> out(batch);
    const std::size_t span = seq_len + 1;
    require(train_tokens.size() > span, "train split shorter than one window");
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t start = rng.uniform_index(train_tokens.size() - span);
      out[b].assign(train_tokens.begin() + long(start), train_tokens.begin() + long(start + span));
    }
    return out;
  }
};

/// Linearly separable gaussian blobs: class means far apart relative to the
/// unit noise, in a 784-dimensional space.
struct ClassifyData {
  long dim = 784;
  long classes = 10;
  Mat means;  // [classes x dim]

  static ClassifyData make(long dim, long classes, double separation, std::uint64_t seed) {
    ClassifyData d;
    d.dim = dim;
    d.classes = classes;
    d.means = Mat(std::size_t(classes), std::size_t(dim));
    RngStream rng(seed, "classify-means");
    for (std::size_t c = 0; c < std::size_t(classes); ++c) {
      double norm = 0.0;
      for (std::size_t j = 0; j < std::size_t(dim); ++j) {
        d.means(c, j) = rng.normal();
        norm += d.means(c, j) * d.means(c, j);
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < std::size_t(dim); ++j) d.means(c, j) *= separation / norm;
    }
    return d;
  }

  void sample(RngStream& rng, std::size_t n, Mat& x, std::vector<int>& y) const {
    x = Mat(n, std::size_t(dim));
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = int(rng.uniform_index(std::uint64_t(classes)));
      y[i] = c;
      for (std::size_t j = 0; j < std::size_t(dim); ++j)
        x(i, j) = means(std::size_t(c), j) + rng.normal();
    }
  }
};

}  // namespace maskanneal
