#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "qembed/random.hpp"

namespace qembed {

/// A token sequence after absorbing-state corruption at timestep t. The mask
/// indicator is stored explicitly so a vocabulary that contains the sentinel
/// elsewhere fails loudly at corrupt time instead of silently aliasing.
struct CorruptedSequence {
  std::vector<int> original;
  std::vector<int> corrupted;
  std::vector<std::uint8_t> mask_positions;
  double t = 0.0;
  int mask_id = -1;
};

/// Per-position unnormalized log-probabilities, L rows of V entries.
struct LogitBlock {
  std::vector<std::vector<double>> rows;
};

/// Timestep draw t ~ U(0.001, 1), one per input sequence.
inline double sample_timestep(Rng& rng) {
  return uniform_real(rng, 0.001, 1.0);
}

/// Mask each position independently with probability t.
inline CorruptedSequence corrupt(const std::vector<int>& x0, double t, int mask_id,
                                 Rng& rng) {
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("corrupt: t must be in (0, 1]");
  for (int id : x0) {
    if (id == mask_id) {
      throw std::invalid_argument("corrupt: mask_id present in input (absorbing-state ambiguity)");
    }
  }
  CorruptedSequence out;
  out.original = x0;
  out.corrupted = x0;
  out.mask_positions.assign(x0.size(), 0);
  out.t = t;
  out.mask_id = mask_id;
  for (std::size_t l = 0; l < x0.size(); ++l) {
    if (uniform01(rng) < t) {
      out.mask_positions[l] = 1;
      out.corrupted[l] = mask_id;
    }
  }
  return out;
}

/// Per-sequence ELBO term: (1/t) * sum of cross entropies at masked positions.
/// The backbone keeps the autoregressive left shift, so the first position is
/// never predictable and the sum runs over positions 2..L only. A length-1
/// sequence therefore has no predictable positions and scores 0.
inline double elbo_loss(const LogitBlock& logits, const CorruptedSequence& seq) {
  if (seq.t <= 0.0) throw std::invalid_argument("elbo_loss: t must be positive");
  const std::size_t len = seq.original.size();
  if (logits.rows.size() != len) {
    throw std::invalid_argument("elbo_loss: logits rows must align with sequence positions");
  }
  if (len <= 1) return 0.0;

  double total = 0.0;
  for (std::size_t l = 1; l < len; ++l) {
    if (!seq.mask_positions[l]) continue;
    const auto& row = logits.rows[l];
    if (row.size() < 2) throw std::invalid_argument("elbo_loss: vocabulary must have V >= 2");
    const int target = seq.original[l];
    if (target < 0 || static_cast<std::size_t>(target) >= row.size()) {
      throw std::out_of_range("elbo_loss: token id out of vocabulary");
    }
    double mx = row.front();
    for (double z : row) mx = std::max(mx, z);
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - mx);
    total += (mx - row[target]) + std::log(sum);
  }
  return total / seq.t;
}

/// With probability p, cut a sequence to a uniformly chosen length in [1, L].
inline std::vector<std::vector<int>> random_truncate(
    const std::vector<std::vector<int>>& sequences, Rng& rng, double p) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("random_truncate: p out of [0, 1]");
  std::vector<std::vector<int>> out = sequences;
  for (auto& seq : out) {
    if (seq.empty()) continue;
    if (uniform01(rng) < p) {
      const std::size_t new_len = 1 + static_cast<std::size_t>(uniform_index(rng, seq.size()));
      seq.resize(new_len);
    }
  }
  return out;
}

}  // namespace qembed
