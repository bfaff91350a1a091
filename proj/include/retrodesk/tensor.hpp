#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "retrodesk/common.hpp"

namespace retrodesk {

// Dense row-major tensor of up to 4 dimensions. data and grad are shared
// buffers so views (reshape) alias their source. grad is allocated only for
// requires_grad tensors.
template <typename S>
struct Tensor {
  std::array<int64_t, 4> dims{1, 1, 1, 1};
  int ndim = 0;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;
  bool requires_grad = false;

  Tensor() = default;

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < ndim; ++i) n *= dims[i];
    return ndim == 0 ? 0 : n;
  }
  int64_t rows() const { return dims[0]; }
  int64_t cols() const {
    int64_t c = 1;
    for (int i = 1; i < ndim; ++i) c *= dims[i];
    return c;
  }
  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  S* gptr() { return grad->data(); }
  const S* gptr() const { return grad->data(); }
  S item() const {
    if (numel() != 1) throw std::invalid_argument("item(): not a scalar");
    return (*data)[0];
  }
  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<S>>(numel(), S(0));
  }
  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }
  bool defined() const { return static_cast<bool>(data); }
};

template <typename S>
Tensor<S> make_tensor(std::initializer_list<int64_t> shape,
                      bool requires_grad = false) {
  Tensor<S> t;
  t.ndim = static_cast<int>(shape.size());
  if (t.ndim < 1 || t.ndim > 4)
    throw std::invalid_argument("make_tensor: rank must be in [1, 4]");
  int i = 0;
  for (int64_t d : shape) t.dims[i++] = d;
  t.data = std::make_shared<std::vector<S>>(t.numel(), S(0));
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

template <typename S>
Tensor<S> make_tensor(std::initializer_list<int64_t> shape,
                      std::vector<S> values, bool requires_grad = false) {
  Tensor<S> t = make_tensor<S>(shape, requires_grad);
  if (static_cast<int64_t>(values.size()) != t.numel())
    throw std::invalid_argument("make_tensor: value count mismatch");
  *t.data = std::move(values);
  return t;
}

// Metadata-only view; shares data and grad.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, std::initializer_list<int64_t> shape) {
  Tensor<S> t = x;
  t.ndim = static_cast<int>(shape.size());
  int i = 0;
  int64_t n = 1;
  for (int64_t d : shape) {
    t.dims[i++] = d;
    n *= d;
  }
  for (; i < 4; ++i) t.dims[i] = 1;
  if (n != x.numel()) throw std::invalid_argument("reshape: numel mismatch");
  return t;
}

template <typename S>
void fill_gaussian(Tensor<S>& t, SplitMix64& rng, double stddev) {
  for (auto& v : *t.data) v = static_cast<S>(rng.next_gaussian() * stddev);
}

}  // namespace retrodesk
