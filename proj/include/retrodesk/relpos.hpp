#pragma once

#include <cmath>
#include <cstdint>

#include "retrodesk/graph.hpp"

namespace retrodesk {

// Integer distance between an attending row and an attended column.
//   kCca:  d(i, i') = i - i' + m - 1, the chunk and its neighbour are assumed
//          to start at the same position.
//   others: row - col (decoder/encoder self-attention, and the encoder
//          cross-attention where the retrieval token is the query).
enum class RelKind { kDecoderSelf, kEncoderSelf, kCca, kEncoderCross };

inline int64_t rel_distance(RelKind kind, int64_t row, int64_t col,
                            uint32_t m) {
  if (kind == RelKind::kCca) return row - col + static_cast<int64_t>(m) - 1;
  return row - col;
}

// Fixed sinusoidal features of the integer distance: B/2 frequencies spread
// geometrically from pi down to pi/d_max, a (sin, cos) pair each. Tying the
// lowest frequency to the attended distance range keeps every feature
// varying over the table, so no basis column degenerates to a constant.
template <typename S>
void fill_cos_basis(S* out, int64_t dist, uint32_t basis, int64_t d_max) {
  const uint32_t half = basis / 2;
  const double span = d_max < 1 ? 1.0 : static_cast<double>(d_max);
  for (uint32_t f = 0; f < half; ++f) {
    double t = half > 1 ? static_cast<double>(f) / (half - 1) : 0.0;
    double freq = 3.141592653589793 * std::pow(span, -t);
    double x = static_cast<double>(dist) * freq;
    out[2 * f] = static_cast<S>(std::sin(x));
    out[2 * f + 1] = static_cast<S>(std::cos(x));
  }
}

inline int64_t rel_distance_span(int64_t q_len, int64_t k_len, RelKind kind,
                                 uint32_t m) {
  int64_t d_max = 1;
  for (int64_t corner_i : {int64_t{0}, q_len - 1})
    for (int64_t corner_j : {int64_t{0}, k_len - 1})
      d_max = std::max(d_max,
                       std::abs(rel_distance(kind, corner_i, corner_j, m)));
  return d_max;
}

// Constant (no-grad) feature table of shape (q_len * k_len, basis). d_max
// fixes the frequency schedule; callers working on a prefix of a longer
// geometry must pass the full geometry's span so that the features of a
// given distance do not depend on the prefix length.
template <typename S>
Tensor<S> rel_basis_table(int64_t q_len, int64_t k_len, RelKind kind,
                          uint32_t m, uint32_t basis, int64_t d_max = -1) {
  Tensor<S> t = make_tensor<S>({q_len * k_len, basis});
  S* p = t.ptr();
  if (d_max < 0) d_max = rel_distance_span(q_len, k_len, kind, m);
  for (int64_t i = 0; i < q_len; ++i)
    for (int64_t j = 0; j < k_len; ++j)
      fill_cos_basis(p + (i * k_len + j) * basis,
                     rel_distance(kind, i, j, m), basis, d_max);
  return t;
}

// logits[i][i'] = w . cosbasis(distance(i, i')), as a (q_len, k_len) matrix.
// w has shape (basis, 1) and is the only differentiable input.
template <typename S>
Tensor<S> relative_logits(Graph<S>& g, int64_t q_len, int64_t k_len,
                          RelKind kind, uint32_t m, const Tensor<S>& w,
                          int64_t d_max = -1) {
  Tensor<S> basis = rel_basis_table<S>(q_len, k_len, kind, m,
                                       static_cast<uint32_t>(w.dims[0]),
                                       d_max);
  Tensor<S> flat = g.matmul(basis, w);  // (q_len * k_len, 1)
  return reshape(flat, {q_len, k_len});
}

}  // namespace retrodesk
