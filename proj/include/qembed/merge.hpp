#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace qembed {

struct TensorLayout {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
  }
};

/// Flattened model parameters with the tensor table describing the layout.
struct ParamVector {
  std::vector<double> values;
  std::vector<TensorLayout> layout;
};

inline bool same_layout(const ParamVector& a, const ParamVector& b) {
  if (a.layout.size() != b.layout.size()) return false;
  for (std::size_t i = 0; i < a.layout.size(); ++i) {
    if (a.layout[i].name != b.layout[i].name) return false;
    if (a.layout[i].shape != b.layout[i].shape) return false;
  }
  return a.values.size() == b.values.size();
}

namespace detail {

inline void slerp_span(const double* a, const double* b, std::size_t n, double t,
                       double* out) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("slerp: zero-norm operand");
  const double cosom = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
  const double omega = std::acos(cosom);
  const double sinom = std::sin(omega);
  if (sinom < 1e-7) {
    // Nearly collinear operands: the great-circle arc degenerates, fall back
    // to linear interpolation.
    for (std::size_t i = 0; i < n; ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
    return;
  }
  const double wa = std::sin((1.0 - t) * omega) / sinom;
  const double wb = std::sin(t * omega) / sinom;
  for (std::size_t i = 0; i < n; ++i) out[i] = wa * a[i] + wb * b[i];
}

inline void check_operands(const ParamVector& a, const ParamVector& b, double t) {
  if (!same_layout(a, b)) throw std::invalid_argument("slerp: layout mismatch");
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("slerp: t must be in [0, 1]");
  std::size_t expect = 0;
  for (const auto& tl : a.layout) expect += tl.element_count();
  if (!a.layout.empty() && expect != a.values.size()) {
    throw std::invalid_argument("slerp: layout does not cover the value vector");
  }
}

}  // namespace detail

/// Spherical linear interpolation of the whole flattened parameter vector
/// (one angle for the entire model).
inline ParamVector slerp(const ParamVector& a, const ParamVector& b, double t) {
  detail::check_operands(a, b, t);
  ParamVector out;
  out.layout = a.layout;
  out.values.resize(a.values.size());
  detail::slerp_span(a.values.data(), b.values.data(), a.values.size(), t,
                     out.values.data());
  return out;
}

/// Slerp applied tensor by tensor, each with its own angle.
inline ParamVector slerp_per_tensor(const ParamVector& a, const ParamVector& b,
                                    double t) {
  detail::check_operands(a, b, t);
  if (a.layout.empty()) return slerp(a, b, t);
  ParamVector out;
  out.layout = a.layout;
  out.values.resize(a.values.size());
  std::size_t offset = 0;
  for (const auto& tl : a.layout) {
    const std::size_t n = tl.element_count();
    detail::slerp_span(a.values.data() + offset, b.values.data() + offset, n, t,
                       out.values.data() + offset);
    offset += n;
  }
  return out;
}

}  // namespace qembed
