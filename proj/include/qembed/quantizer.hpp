#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/embedding.hpp"

namespace qembed {

/// Overlapping-window pooling mode. Windows of `window` tokens advance by
/// `window - overlap`; each chunk span is pooled from its intersection with
/// the window that covers it best (ties resolved toward the earlier window).
/// A window spanning the whole sequence reproduces plain chunk pooling.
struct WindowConfig {
  std::size_t window = 0;
  std::size_t overlap = 0;
};

namespace detail {

inline void require_finite(const RawEmbedding& raw, const char* op) {
  for (double v : raw.values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(op) + ": non-finite input entry");
    }
  }
}

inline RawEmbedding pool_rows(const TokenMatrix& tokens, std::size_t begin,
                              std::size_t end) {
  const std::size_t d = tokens.dim();
  RawEmbedding out;
  out.values.assign(d, 0.0);
  for (std::size_t l = begin; l < end; ++l) {
    const auto& row = tokens.rows[l];
    if (row.size() != d) throw std::invalid_argument("ragged token matrix");
    for (std::size_t j = 0; j < d; ++j) out.values[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(end - begin);
  for (double& v : out.values) v *= inv;
  return out;
}

}  // namespace detail

/// Mean over all L token vectors.
inline RawEmbedding mean_pool(const TokenMatrix& tokens) {
  if (tokens.rows.empty()) throw std::invalid_argument("empty sequence");
  return detail::pool_rows(tokens, 0, tokens.length());
}

/// One mean-pooled vector per chunk span, all taken from the same token
/// matrix (late chunking: the encoding is shared, only the pooling range
/// differs per chunk).
inline std::vector<RawEmbedding> chunk_pool(
    const TokenMatrix& tokens,
    const std::optional<WindowConfig>& windows = std::nullopt) {
  if (tokens.rows.empty()) throw std::invalid_argument("empty sequence");
  if (!tokens.spans || tokens.spans->empty()) {
    throw std::invalid_argument("chunk_pool: no spans present");
  }
  const std::size_t len = tokens.length();
  const auto& spans = *tokens.spans;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const Span& s = spans[k];
    if (s.begin >= s.end || s.end > len) {
      throw std::invalid_argument("invalid span " + std::to_string(k) + ": [" +
                                  std::to_string(s.begin) + ", " +
                                  std::to_string(s.end) + ") over " +
                                  std::to_string(len) + " tokens");
    }
  }

  std::vector<RawEmbedding> out;
  out.reserve(spans.size());
  if (!windows) {
    for (const Span& s : spans) out.push_back(detail::pool_rows(tokens, s.begin, s.end));
    return out;
  }

  const WindowConfig& w = *windows;
  if (w.window == 0) throw std::invalid_argument("window size must be positive");
  if (w.overlap >= w.window) throw std::invalid_argument("overlap must be smaller than window");
  const std::size_t stride = w.window - w.overlap;
  // Window starts: 0, stride, 2*stride, ... until the sequence is covered.
  std::vector<Span> wins;
  for (std::size_t start = 0;; start += stride) {
    const std::size_t end = std::min(start + w.window, len);
    wins.push_back(Span{start, end});
    if (end >= len) break;
  }
  for (const Span& s : spans) {
    std::size_t best = 0, best_cover = 0;
    for (std::size_t i = 0; i < wins.size(); ++i) {
      const std::size_t lo = std::max(s.begin, wins[i].begin);
      const std::size_t hi = std::min(s.end, wins[i].end);
      const std::size_t cover = hi > lo ? hi - lo : 0;
      if (cover > best_cover) {
        best_cover = cover;
        best = i;
      }
    }
    if (best_cover == 0) throw std::invalid_argument("span not covered by any window");
    const std::size_t lo = std::max(s.begin, wins[best].begin);
    const std::size_t hi = std::min(s.end, wins[best].end);
    out.push_back(detail::pool_rows(tokens, lo, hi));
  }
  return out;
}

/// floor(127 * tanh(x) + 1/2), entrywise. Round-half-up exactly as written;
/// the result always lies in {-127, ..., 127}.
inline QuantizedEmbedding quantize_int8(const RawEmbedding& raw) {
  detail::require_finite(raw, "quantize_int8");
  QuantizedEmbedding out;
  out.values.reserve(raw.values.size());
  for (double v : raw.values) {
    const double q = std::floor(127.0 * std::tanh(v) + 0.5);
    out.values.push_back(static_cast<std::int8_t>(q));
  }
  return out;
}

/// Sign quantization with bin(0) = +1.
inline BinaryEmbedding quantize_binary(const RawEmbedding& raw) {
  detail::require_finite(raw, "quantize_binary");
  BinaryEmbedding out;
  out.values.reserve(raw.values.size());
  for (double v : raw.values) out.values.push_back(v >= 0.0 ? 1 : -1);
  return out;
}

/// Straight-through backward rule for quantize_int8: rounding passes the
/// gradient through unchanged, the tanh is differentiated exactly.
inline std::vector<double> ste_backward(const RawEmbedding& raw,
                                        const std::vector<double>& upstream) {
  if (raw.values.size() != upstream.size()) {
    throw std::invalid_argument("ste_backward: length mismatch");
  }
  std::vector<double> out(raw.values.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double th = std::tanh(raw.values[j]);
    out[j] = upstream[j] * 127.0 * (1.0 - th * th);
  }
  return out;
}

/// Cosine of two INT8 embeddings. Dot product and squared norms accumulate
/// in 64-bit integers (exact up to d <= 2^23 at |entry| <= 127); a single
/// real division produces the result.
inline double similarity_int8(const QuantizedEmbedding& a,
                              const QuantizedEmbedding& b) {
  if (a.values.size() != b.values.size()) {
    throw std::invalid_argument("similarity_int8: dimension mismatch");
  }
  std::int64_t dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < a.values.size(); ++j) {
    const std::int64_t x = a.values[j], y = b.values[j];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) throw std::invalid_argument("undefined cosine");
  return static_cast<double>(dot) /
         std::sqrt(static_cast<double>(na) * static_cast<double>(nb));
}

inline std::size_t hamming_distance(const BinaryEmbedding& a,
                                    const BinaryEmbedding& b) {
  if (a.values.size() != b.values.size()) {
    throw std::invalid_argument("hamming_distance: length mismatch");
  }
  std::size_t h = 0;
  for (std::size_t j = 0; j < a.values.size(); ++j) h += a.values[j] != b.values[j];
  return h;
}

/// 1 - 2*hamming/d, which equals the cosine of +-1 vectors, so binary
/// rankings by this value and by Hamming distance coincide.
inline double similarity_binary(const BinaryEmbedding& a,
                                const BinaryEmbedding& b) {
  if (a.values.empty() || a.values.size() != b.values.size()) {
    throw std::invalid_argument("similarity_binary: length mismatch");
  }
  const double h = static_cast<double>(hamming_distance(a, b));
  return 1.0 - 2.0 * h / static_cast<double>(a.values.size());
}

}  // namespace qembed
