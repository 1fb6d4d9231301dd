#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace qembed {

/// Pre-quantization mean vector of dimension d. Entries are raw activations.
struct RawEmbedding {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
};

/// INT8 embedding; every entry lies in {-127, ..., 127}.
struct QuantizedEmbedding {
  std::vector<std::int8_t> values;

  std::size_t dim() const { return values.size(); }
};

/// Sign embedding; every entry is -1 or +1.
struct BinaryEmbedding {
  std::vector<std::int8_t> values;

  std::size_t dim() const { return values.size(); }
};

/// Half-open token index range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
};

/// L token vectors of dimension d, optionally carved into chunk spans.
/// Spans must be nonempty and lie within [0, L); they may overlap only in
/// windowed pooling mode.
struct TokenMatrix {
  std::vector<std::vector<double>> rows;
  std::optional<std::vector<Span>> spans;

  std::size_t length() const { return rows.size(); }
  std::size_t dim() const { return rows.empty() ? 0 : rows.front().size(); }
};

}  // namespace qembed
