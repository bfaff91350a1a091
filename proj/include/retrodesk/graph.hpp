#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "retrodesk/tensor.hpp"

namespace retrodesk {

// Reverse-mode tape over the closed op set the architecture needs. Ops are
// recorded in forward order and replayed backwards. Row-level parallelism
// inside an op writes disjoint slots, so results do not depend on the worker
// count; gradient accumulation happens on the single replay thread.
template <typename S>
class Graph {
 public:
  bool grad_enabled = true;

  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar");
    loss.ensure_grad();
    (*loss.grad)[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  size_t tape_size() const { return tape_.size(); }

  // ---- primitive ops ----

  // C = A @ B, or A @ B^T when trans_b. 2-D only.
  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b,
                   bool trans_b = false) {
    check2d(a, "matmul lhs");
    check2d(b, "matmul rhs");
    const int64_t M = a.dims[0], K = a.dims[1];
    const int64_t N = trans_b ? b.dims[0] : b.dims[1];
    const int64_t bK = trans_b ? b.dims[1] : b.dims[0];
    if (K != bK) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor<S> c = out({M, N}, a, b);
    const S* ap = a.ptr();
    const S* bp = b.ptr();
    S* cp = c.ptr();
    const int64_t mm_work = M * N * K;
    if (!trans_b) {
      parallel_for(M, [&](int64_t i) {
        S* crow = cp + i * N;
        const S* arow = ap + i * K;
        for (int64_t k = 0; k < K; ++k) {
          const S av = arow[k];
          const S* brow = bp + k * N;
          for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
      }, mm_work);
    } else {
      parallel_for(M, [&](int64_t i) {
        S* crow = cp + i * N;
        const S* arow = ap + i * K;
        for (int64_t j = 0; j < N; ++j) {
          const S* brow = bp + j * K;
          S acc = S(0);
          for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
          crow[j] = acc;
        }
      }, mm_work);
    }
    if (recording(c)) {
      Tensor<S> av = a, bv = b, cv = c;
      tape_.push_back([av, bv, cv, M, N, K, trans_b]() mutable {
        const int64_t mm_work = M * N * K;
        const S* gc = cv.gptr();
        if (av.requires_grad) {
          S* ga = av.gptr();
          const S* bp2 = bv.ptr();
          if (!trans_b) {
            parallel_for(M, [&](int64_t i) {
              S* garow = ga + i * K;
              const S* gcrow = gc + i * N;
              for (int64_t k = 0; k < K; ++k) {
                const S* brow = bp2 + k * N;
                S acc = S(0);
                for (int64_t j = 0; j < N; ++j) acc += gcrow[j] * brow[j];
                garow[k] += acc;
              }
            }, mm_work);
          } else {
            parallel_for(M, [&](int64_t i) {
              S* garow = ga + i * K;
              const S* gcrow = gc + i * N;
              for (int64_t j = 0; j < N; ++j) {
                const S gv = gcrow[j];
                const S* brow = bp2 + j * K;
                for (int64_t k = 0; k < K; ++k) garow[k] += gv * brow[k];
              }
            }, mm_work);
          }
        }
        if (bv.requires_grad) {
          S* gb = bv.gptr();
          const S* ap2 = av.ptr();
          if (!trans_b) {
            // dB[k,:] += sum_i A[i,k] * dC[i,:]
            parallel_for(K, [&](int64_t k) {
              S* gbrow = gb + k * N;
              for (int64_t i = 0; i < M; ++i) {
                const S avk = ap2[i * K + k];
                const S* gcrow = gc + i * N;
                for (int64_t j = 0; j < N; ++j) gbrow[j] += avk * gcrow[j];
              }
            }, mm_work);
          } else {
            // dB[j,:] += sum_i dC[i,j] * A[i,:]
            parallel_for(N, [&](int64_t j) {
              S* gbrow = gb + j * K;
              for (int64_t i = 0; i < M; ++i) {
                const S gv = gc[i * N + j];
                const S* arow = ap2 + i * K;
                for (int64_t k = 0; k < K; ++k) gbrow[k] += gv * arow[k];
              }
            }, mm_work);
          }
        }
      });
    }
    return c;
  }

  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.numel() != b.numel() || a.ndim != b.ndim)
      throw std::invalid_argument("add: shape mismatch");
    Tensor<S> c = outlike(a, a, b);
    const S* ap = a.ptr();
    const S* bp = b.ptr();
    S* cp = c.ptr();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) cp[i] = ap[i] + bp[i];
    if (recording(c)) {
      Tensor<S> av = a, bv = b, cv = c;
      tape_.push_back([av, bv, cv, n]() mutable {
        const S* gc = cv.gptr();
        if (av.requires_grad) {
          S* ga = av.gptr();
          for (int64_t i = 0; i < n; ++i) ga[i] += gc[i];
        }
        if (bv.requires_grad) {
          S* gb = bv.gptr();
          for (int64_t i = 0; i < n; ++i) gb[i] += gc[i];
        }
      });
    }
    return c;
  }

  Tensor<S> scale(const Tensor<S>& a, S s) {
    Tensor<S> c = outlike(a, a, a);
    const S* ap = a.ptr();
    S* cp = c.ptr();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) cp[i] = ap[i] * s;
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      tape_.push_back([av, cv, s, n]() mutable {
        if (!av.requires_grad) return;
        S* ga = av.gptr();
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += s * gc[i];
      });
    }
    return c;
  }

  // tanh-approximation GELU (smooth, finite-difference friendly).
  Tensor<S> gelu(const Tensor<S>& a) {
    Tensor<S> c = outlike(a, a, a);
    const S* ap = a.ptr();
    S* cp = c.ptr();
    const int64_t n = a.numel();
    constexpr S kAlpha = S(0.7978845608028654);  // sqrt(2/pi)
    constexpr S kBeta = S(0.044715);
    for (int64_t i = 0; i < n; ++i) {
      S x = ap[i];
      S u = kAlpha * (x + kBeta * x * x * x);
      cp[i] = S(0.5) * x * (S(1) + std::tanh(u));
    }
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      tape_.push_back([av, cv, n, kAlpha, kBeta]() mutable {
        if (!av.requires_grad) return;
        S* ga = av.gptr();
        const S* gc = cv.gptr();
        const S* ap2 = av.ptr();
        for (int64_t i = 0; i < n; ++i) {
          S x = ap2[i];
          S u = kAlpha * (x + kBeta * x * x * x);
          S t = std::tanh(u);
          S du = kAlpha * (S(1) + S(3) * kBeta * x * x);
          S d = S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
          ga[i] += gc[i] * d;
        }
      });
    }
    return c;
  }

  // Max-subtracted softmax over the last dimension of a 2-D tensor.
  Tensor<S> softmax_rows(const Tensor<S>& a) {
    check2d(a, "softmax_rows");
    const int64_t R = a.dims[0], C = a.dims[1];
    Tensor<S> c = out({R, C}, a, a);
    const S* ap = a.ptr();
    S* cp = c.ptr();
    parallel_for(R, [&](int64_t i) {
      const S* row = ap + i * C;
      S* orow = cp + i * C;
      S mx = row[0];
      for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (int64_t j = 0; j < C; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      S inv = S(1) / sum;
      for (int64_t j = 0; j < C; ++j) orow[j] *= inv;
    }, R * C * 16);
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      tape_.push_back([av, cv, R, C]() mutable {
        if (!av.requires_grad) return;
        S* ga = av.gptr();
        const S* gc = cv.gptr();
        const S* sp = cv.ptr();
        parallel_for(R, [&](int64_t i) {
          const S* srow = sp + i * C;
          const S* grow = gc + i * C;
          S dot = S(0);
          for (int64_t j = 0; j < C; ++j) dot += grow[j] * srow[j];
          S* garow = ga + i * C;
          for (int64_t j = 0; j < C; ++j)
            garow[j] += srow[j] * (grow[j] - dot);
        }, R * C * 8);
      });
    }
    return c;
  }

  // y = x / sqrt(mean(x^2) + eps) * gain, over the last dimension.
  Tensor<S> rmsnorm(const Tensor<S>& a, const Tensor<S>& gain,
                    S eps = S(1e-6)) {
    check2d(a, "rmsnorm");
    const int64_t R = a.dims[0], C = a.dims[1];
    if (gain.numel() != C)
      throw std::invalid_argument("rmsnorm: gain length mismatch");
    Tensor<S> c = out({R, C}, a, gain);
    auto inv_rms = std::make_shared<std::vector<S>>(R);
    const S* ap = a.ptr();
    const S* gp = gain.ptr();
    S* cp = c.ptr();
    S* ir = inv_rms->data();
    parallel_for(R, [&](int64_t i) {
      const S* row = ap + i * C;
      S ss = S(0);
      for (int64_t j = 0; j < C; ++j) ss += row[j] * row[j];
      S r = S(1) / std::sqrt(ss / C + eps);
      ir[i] = r;
      S* orow = cp + i * C;
      for (int64_t j = 0; j < C; ++j) orow[j] = row[j] * r * gp[j];
    }, R * C * 8);
    if (recording(c)) {
      Tensor<S> av = a, gv = gain, cv = c;
      tape_.push_back([av, gv, cv, inv_rms, R, C]() mutable {
        const S* gc = cv.gptr();
        const S* ap2 = av.ptr();
        const S* gp2 = gv.ptr();
        const S* ir2 = inv_rms->data();
        if (gv.requires_grad) {
          S* gg = gv.gptr();
          for (int64_t i = 0; i < R; ++i) {
            const S r = ir2[i];
            const S* row = ap2 + i * C;
            const S* grow = gc + i * C;
            for (int64_t j = 0; j < C; ++j) gg[j] += grow[j] * row[j] * r;
          }
        }
        if (av.requires_grad) {
          S* ga = av.gptr();
          parallel_for(R, [&](int64_t i) {
            const S r = ir2[i];
            const S* row = ap2 + i * C;
            const S* grow = gc + i * C;
            S dot = S(0);
            for (int64_t j = 0; j < C; ++j) dot += grow[j] * gp2[j] * row[j];
            const S coef = r * r * r / C * dot;
            S* garow = ga + i * C;
            for (int64_t j = 0; j < C; ++j)
              garow[j] += grow[j] * gp2[j] * r - row[j] * coef;
          }, R * C * 8);
        }
      });
    }
    return c;
  }

  // Row lookup: out[i,:] = table[ids[i],:].
  Tensor<S> embedding(const Tensor<S>& table, const std::vector<TokenId>& ids) {
    check2d(table, "embedding table");
    const int64_t V = table.dims[0], D = table.dims[1];
    const int64_t L = static_cast<int64_t>(ids.size());
    for (TokenId id : ids)
      if (id >= V) throw std::invalid_argument("embedding: token out of range");
    Tensor<S> c = out({L, D}, table, table);
    const S* tp = table.ptr();
    S* cp = c.ptr();
    for (int64_t i = 0; i < L; ++i)
      std::copy_n(tp + static_cast<int64_t>(ids[i]) * D, D, cp + i * D);
    if (recording(c)) {
      Tensor<S> tv = table, cv = c;
      auto ids_copy = std::make_shared<std::vector<TokenId>>(ids);
      tape_.push_back([tv, cv, ids_copy, D, L]() mutable {
        if (!tv.requires_grad) return;
        S* gt = tv.gptr();
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < L; ++i) {
          S* trow = gt + static_cast<int64_t>((*ids_copy)[i]) * D;
          const S* grow = gc + i * D;
          for (int64_t j = 0; j < D; ++j) trow[j] += grow[j];
        }
      });
    }
    return c;
  }

  // out[i,:] = x[idx[i],:], or zeros when idx[i] < 0.
  Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& idx) {
    check2d(x, "gather_rows");
    const int64_t R = x.dims[0], C = x.dims[1];
    const int64_t L = static_cast<int64_t>(idx.size());
    for (int64_t i : idx)
      if (i >= R) throw std::invalid_argument("gather_rows: index out of range");
    Tensor<S> c = out({L, C}, x, x);
    const S* xp = x.ptr();
    S* cp = c.ptr();
    for (int64_t i = 0; i < L; ++i)
      if (idx[i] >= 0) std::copy_n(xp + idx[i] * C, C, cp + i * C);
    if (recording(c)) {
      Tensor<S> xv = x, cv = c;
      auto idx_copy = std::make_shared<std::vector<int64_t>>(idx);
      tape_.push_back([xv, cv, idx_copy, C, L]() mutable {
        if (!xv.requires_grad) return;
        S* gx = xv.gptr();
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < L; ++i) {
          if ((*idx_copy)[i] < 0) continue;
          S* xrow = gx + (*idx_copy)[i] * C;
          const S* grow = gc + i * C;
          for (int64_t j = 0; j < C; ++j) xrow[j] += grow[j];
        }
      });
    }
    return c;
  }

  Tensor<S> slice_rows(const Tensor<S>& x, int64_t start, int64_t len) {
    check2d(x, "slice_rows");
    const int64_t C = x.dims[1];
    if (start < 0 || start + len > x.dims[0])
      throw std::invalid_argument("slice_rows: out of range");
    Tensor<S> c = out({len, C}, x, x);
    std::copy_n(x.ptr() + start * C, len * C, c.ptr());
    if (recording(c)) {
      Tensor<S> xv = x, cv = c;
      tape_.push_back([xv, cv, start, len, C]() mutable {
        if (!xv.requires_grad) return;
        S* gx = xv.gptr() + start * C;
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < len * C; ++i) gx[i] += gc[i];
      });
    }
    return c;
  }

  Tensor<S> slice_cols(const Tensor<S>& x, int64_t start, int64_t len) {
    check2d(x, "slice_cols");
    const int64_t R = x.dims[0], C = x.dims[1];
    if (start < 0 || start + len > C)
      throw std::invalid_argument("slice_cols: out of range");
    Tensor<S> c = out({R, len}, x, x);
    const S* xp = x.ptr();
    S* cp = c.ptr();
    for (int64_t i = 0; i < R; ++i)
      std::copy_n(xp + i * C + start, len, cp + i * len);
    if (recording(c)) {
      Tensor<S> xv = x, cv = c;
      tape_.push_back([xv, cv, start, len, R, C]() mutable {
        if (!xv.requires_grad) return;
        S* gx = xv.gptr();
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < R; ++i) {
          S* xrow = gx + i * C + start;
          const S* grow = gc + i * len;
          for (int64_t j = 0; j < len; ++j) xrow[j] += grow[j];
        }
      });
    }
    return c;
  }

  Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int64_t R = parts[0].dims[0];
    int64_t C = 0;
    bool needs = false;
    for (const auto& p : parts) {
      check2d(p, "concat_cols part");
      if (p.dims[0] != R)
        throw std::invalid_argument("concat_cols: row mismatch");
      C += p.dims[1];
      needs = needs || p.requires_grad;
    }
    Tensor<S> c = make_tensor<S>({R, C});
    c.requires_grad = grad_enabled && needs;
    if (c.requires_grad) c.ensure_grad();
    S* cp = c.ptr();
    int64_t off = 0;
    for (const auto& p : parts) {
      const int64_t pc = p.dims[1];
      const S* pp = p.ptr();
      for (int64_t i = 0; i < R; ++i)
        std::copy_n(pp + i * pc, pc, cp + i * C + off);
      off += pc;
    }
    if (recording(c)) {
      auto parts_copy = std::make_shared<std::vector<Tensor<S>>>(parts);
      Tensor<S> cv = c;
      tape_.push_back([parts_copy, cv, R, C]() mutable {
        const S* gc = cv.gptr();
        int64_t off2 = 0;
        for (auto& p : *parts_copy) {
          const int64_t pc = p.dims[1];
          if (p.requires_grad) {
            S* gp = p.gptr();
            for (int64_t i = 0; i < R; ++i) {
              const S* grow = gc + i * C + off2;
              S* prow = gp + i * pc;
              for (int64_t j = 0; j < pc; ++j) prow[j] += grow[j];
            }
          }
          off2 += pc;
        }
      });
    }
    return c;
  }

  Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int64_t C = parts[0].dims[1];
    int64_t R = 0;
    bool needs = false;
    for (const auto& p : parts) {
      check2d(p, "concat_rows part");
      if (p.dims[1] != C)
        throw std::invalid_argument("concat_rows: column mismatch");
      R += p.dims[0];
      needs = needs || p.requires_grad;
    }
    Tensor<S> c = make_tensor<S>({R, C});
    c.requires_grad = grad_enabled && needs;
    if (c.requires_grad) c.ensure_grad();
    S* cp = c.ptr();
    int64_t off = 0;
    for (const auto& p : parts) {
      std::copy_n(p.ptr(), p.numel(), cp + off);
      off += p.numel();
    }
    if (recording(c)) {
      auto parts_copy = std::make_shared<std::vector<Tensor<S>>>(parts);
      Tensor<S> cv = c;
      tape_.push_back([parts_copy, cv]() mutable {
        const S* gc = cv.gptr();
        int64_t off2 = 0;
        for (auto& p : *parts_copy) {
          if (p.requires_grad) {
            S* gp = p.gptr();
            const int64_t n = p.numel();
            for (int64_t i = 0; i < n; ++i) gp[i] += gc[off2 + i];
          }
          off2 += p.numel();
        }
      });
    }
    return c;
  }

  // Per-row negative log-likelihood from raw logits (log-sum-exp form).
  // Masked rows produce zero loss and zero gradient.
  Tensor<S> cross_entropy_rows(const Tensor<S>& logits,
                               const std::vector<TokenId>& targets,
                               const std::vector<char>& mask) {
    check2d(logits, "cross_entropy_rows");
    const int64_t R = logits.dims[0], V = logits.dims[1];
    if (static_cast<int64_t>(targets.size()) != R ||
        static_cast<int64_t>(mask.size()) != R)
      throw std::invalid_argument("cross_entropy_rows: length mismatch");
    Tensor<S> c = out({R}, logits, logits);
    auto lse = std::make_shared<std::vector<S>>(R, S(0));
    const S* lp = logits.ptr();
    S* cp = c.ptr();
    S* lsep = lse->data();
    parallel_for(R, [&](int64_t i) {
      if (!mask[i]) return;
      const S* row = lp + i * V;
      S mx = row[0];
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      S l = mx + std::log(sum);
      lsep[i] = l;
      cp[i] = l - row[targets[i]];
    }, R * V * 16);
    if (recording(c)) {
      Tensor<S> lv = logits, cv = c;
      auto tg = std::make_shared<std::vector<TokenId>>(targets);
      auto mk = std::make_shared<std::vector<char>>(mask);
      tape_.push_back([lv, cv, tg, mk, lse, R, V]() mutable {
        if (!lv.requires_grad) return;
        S* gl = lv.gptr();
        const S* gc = cv.gptr();
        const S* lp2 = lv.ptr();
        const S* lsep2 = lse->data();
        parallel_for(R, [&](int64_t i) {
          if (!(*mk)[i]) return;
          const S g = gc[i];
          if (g == S(0)) return;
          const S* row = lp2 + i * V;
          S* grow = gl + i * V;
          const S l = lsep2[i];
          for (int64_t j = 0; j < V; ++j) grow[j] += g * std::exp(row[j] - l);
          grow[(*tg)[i]] -= g;
        }, R * V * 16);
      });
    }
    return c;
  }

  Tensor<S> sum(const Tensor<S>& a) {
    Tensor<S> c = out({1}, a, a);
    const S* ap = a.ptr();
    S acc = S(0);
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += ap[i];
    (*c.data)[0] = acc;
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      tape_.push_back([av, cv, n]() mutable {
        if (!av.requires_grad) return;
        const S g = (*cv.grad)[0];
        S* ga = av.gptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
      });
    }
    return c;
  }

  // Mean over unmasked entries; zero-mask rows contribute nothing.
  Tensor<S> masked_mean(const Tensor<S>& a, const std::vector<char>& mask) {
    const int64_t n = a.numel();
    if (static_cast<int64_t>(mask.size()) != n)
      throw std::invalid_argument("masked_mean: mask length mismatch");
    int64_t count = 0;
    for (char m : mask) count += m ? 1 : 0;
    if (count == 0) throw std::invalid_argument("masked_mean: empty mask");
    Tensor<S> c = out({1}, a, a);
    const S* ap = a.ptr();
    S acc = S(0);
    for (int64_t i = 0; i < n; ++i)
      if (mask[i]) acc += ap[i];
    (*c.data)[0] = acc / static_cast<S>(count);
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      auto mk = std::make_shared<std::vector<char>>(mask);
      tape_.push_back([av, cv, mk, n, count]() mutable {
        if (!av.requires_grad) return;
        const S g = (*cv.grad)[0] / static_cast<S>(count);
        S* ga = av.gptr();
        for (int64_t i = 0; i < n; ++i)
          if ((*mk)[i]) ga[i] += g;
      });
    }
    return c;
  }

  Tensor<S> mul_elem(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.numel() != b.numel())
      throw std::invalid_argument("mul_elem: shape mismatch");
    Tensor<S> c = outlike(a, a, b);
    const S* ap = a.ptr();
    const S* bp = b.ptr();
    S* cp = c.ptr();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) cp[i] = ap[i] * bp[i];
    if (recording(c)) {
      Tensor<S> av = a, bv = b, cv = c;
      tape_.push_back([av, bv, cv, n]() mutable {
        const S* gc = cv.gptr();
        if (av.requires_grad) {
          S* ga = av.gptr();
          const S* bp2 = bv.ptr();
          for (int64_t i = 0; i < n; ++i) ga[i] += gc[i] * bp2[i];
        }
        if (bv.requires_grad) {
          S* gb = bv.gptr();
          const S* ap2 = av.ptr();
          for (int64_t i = 0; i < n; ++i) gb[i] += gc[i] * ap2[i];
        }
      });
    }
    return c;
  }

  // Fused block-diagonal multi-head attention.
  //   q:   (blocks*Tq, H*hd), block-major rows
  //   k,v: (blocks*Tk, H*hd)
  //   rel: (Tq*rel_cols, H) additive positional logits, shared across blocks;
  //        column j of the logits uses rel row (i*rel_cols + j % rel_cols),
  //        which tiles the table over merged neighbour blocks.
  //   mask: optional (Tq, Tk) additive constant, shared across blocks/heads.
  // Per block and head: softmax(q k^T * scale + rel + mask) v.
  // One op instead of a few hundred; the backward is hand-derived.
  Tensor<S> fused_attention(const Tensor<S>& q, const Tensor<S>& k,
                            const Tensor<S>& v, const Tensor<S>& rel,
                            const Tensor<S>* mask, int64_t blocks,
                            int64_t heads, S scale) {
    check2d(q, "fused_attention q");
    check2d(k, "fused_attention k");
    check2d(v, "fused_attention v");
    const int64_t tq = q.dims[0] / blocks;
    const int64_t tk = k.dims[0] / blocks;
    const int64_t hd = q.dims[1] / heads;
    if (q.dims[0] % blocks || k.dims[0] % blocks || q.dims[1] % heads ||
        k.dims[1] != q.dims[1] || v.dims[0] != k.dims[0] ||
        v.dims[1] != k.dims[1])
      throw std::invalid_argument("fused_attention: inconsistent shapes");
    const int64_t rel_cols = rel.dims[0] / tq;
    if (rel.dims[0] % tq || tk % rel_cols || rel.dims[1] != heads)
      throw std::invalid_argument("fused_attention: rel table mismatch");
    if (mask && (mask->dims[0] != tq || mask->dims[1] != tk))
      throw std::invalid_argument("fused_attention: mask shape mismatch");

    Tensor<S> out = make_tensor<S>({blocks * tq, heads * hd});
    out.requires_grad = grad_enabled &&
                        (q.requires_grad || k.requires_grad ||
                         v.requires_grad || rel.requires_grad);
    if (out.requires_grad) out.ensure_grad();
    auto weights =
        std::make_shared<std::vector<S>>(blocks * heads * tq * tk);

    const S* qp = q.ptr();
    const S* kp = k.ptr();
    const S* vp = v.ptr();
    const S* rp = rel.ptr();
    const S* mp = mask ? mask->ptr() : nullptr;
    S* op = out.ptr();
    S* wp = weights->data();
    const int64_t cols = heads * hd;

    parallel_for(blocks * heads, [&](int64_t bh) {
      const int64_t b = bh / heads;
      const int64_t h = bh % heads;
      const S* qb = qp + b * tq * cols + h * hd;
      const S* kb = kp + b * tk * cols + h * hd;
      const S* vb = vp + b * tk * cols + h * hd;
      S* wb = wp + bh * tq * tk;
      for (int64_t i = 0; i < tq; ++i) {
        S* wrow = wb + i * tk;
        const S* qrow = qb + i * cols;
        for (int64_t j = 0; j < tk; ++j) {
          const S* krow = kb + j * cols;
          S dot = S(0);
          for (int64_t a = 0; a < hd; ++a) dot += qrow[a] * krow[a];
          S logit = dot * scale + rp[(i * rel_cols + j % rel_cols) * heads + h];
          if (mp) logit += mp[i * tk + j];
          wrow[j] = logit;
        }
        S mx = wrow[0];
        for (int64_t j = 1; j < tk; ++j) mx = std::max(mx, wrow[j]);
        S sum = S(0);
        for (int64_t j = 0; j < tk; ++j) {
          wrow[j] = std::exp(wrow[j] - mx);
          sum += wrow[j];
        }
        const S inv = S(1) / sum;
        S* orow = op + (b * tq + i) * cols + h * hd;
        for (int64_t a = 0; a < hd; ++a) orow[a] = S(0);
        for (int64_t j = 0; j < tk; ++j) {
          wrow[j] *= inv;
          const S w = wrow[j];
          const S* vrow = vb + j * cols;
          for (int64_t a = 0; a < hd; ++a) orow[a] += w * vrow[a];
        }
      }
    }, blocks * heads * tq * tk * (hd + 8));

    if (recording(out)) {
      Tensor<S> qv = q, kv2 = k, vv = v, relv = rel, ov = out;
      tape_.push_back([qv, kv2, vv, relv, ov, weights, blocks, heads, tq, tk,
                       hd, rel_cols, scale]() mutable {
        const int64_t cols = heads * hd;
        const S* qp = qv.ptr();
        const S* kp = kv2.ptr();
        const S* vp = vv.ptr();
        const S* go = ov.gptr();
        const S* wp = weights->data();
        // dlogits kept per (block, head) for the serial rel reduction.
        std::vector<S> dlogits(blocks * heads * tq * tk);
        S* dlp = dlogits.data();

        parallel_for(blocks * heads, [&](int64_t bh) {
          const int64_t b = bh / heads;
          const int64_t h = bh % heads;
          const S* qb = qp + b * tq * cols + h * hd;
          const S* kb = kp + b * tk * cols + h * hd;
          const S* vb = vp + b * tk * cols + h * hd;
          const S* wb = wp + bh * tq * tk;
          S* dlb = dlp + bh * tq * tk;
          for (int64_t i = 0; i < tq; ++i) {
            const S* grow = go + (b * tq + i) * cols + h * hd;
            const S* wrow = wb + i * tk;
            S* dlrow = dlb + i * tk;
            // dW and the softmax Jacobian contraction.
            S dot = S(0);
            for (int64_t j = 0; j < tk; ++j) {
              const S* vrow = vb + j * cols;
              S dw = S(0);
              for (int64_t a = 0; a < hd; ++a) dw += grow[a] * vrow[a];
              dlrow[j] = dw;
              dot += dw * wrow[j];
            }
            for (int64_t j = 0; j < tk; ++j)
              dlrow[j] = wrow[j] * (dlrow[j] - dot);
            if (qv.requires_grad) {
              S* gq = qv.gptr() + (b * tq + i) * cols + h * hd;
              for (int64_t j = 0; j < tk; ++j) {
                const S dl = dlrow[j] * scale;
                const S* krow = kb + j * cols;
                for (int64_t a = 0; a < hd; ++a) gq[a] += dl * krow[a];
              }
            }
          }
          // dk, dv accumulate per attended row; still disjoint per (b, h).
          if (kv2.requires_grad || vv.requires_grad) {
            for (int64_t j = 0; j < tk; ++j) {
              S* gk = kv2.requires_grad
                          ? kv2.gptr() + (b * tk + j) * cols + h * hd
                          : nullptr;
              S* gv = vv.requires_grad
                          ? vv.gptr() + (b * tk + j) * cols + h * hd
                          : nullptr;
              for (int64_t i = 0; i < tq; ++i) {
                const S w = wb[i * tk + j];
                const S dl = dlb[i * tk + j] * scale;
                const S* qrow = qb + i * cols;
                const S* grow = go + (b * tq + i) * cols + h * hd;
                if (gk)
                  for (int64_t a = 0; a < hd; ++a) gk[a] += dl * qrow[a];
                if (gv)
                  for (int64_t a = 0; a < hd; ++a) gv[a] += w * grow[a];
              }
            }
          }
        }, blocks * heads * tq * tk * (3 * hd + 8));

        if (relv.requires_grad) {
          S* gr = relv.gptr();
          for (int64_t bh = 0; bh < blocks * heads; ++bh) {
            const int64_t h = bh % heads;
            const S* dlb = dlp + bh * tq * tk;
            for (int64_t i = 0; i < tq; ++i)
              for (int64_t j = 0; j < tk; ++j)
                gr[(i * rel_cols + j % rel_cols) * heads + h] +=
                    dlb[i * tk + j];
          }
        }
      });
    }
    return out;
  }

  // Inverted dropout. Identity at rate 0; the caller owns the rng stream so
  // training stays reproducible.
  Tensor<S> dropout(const Tensor<S>& a, double rate, SplitMix64& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    const int64_t n = a.numel();
    auto mask = std::make_shared<std::vector<S>>(n);
    const S keep_scale = S(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < n; ++i)
      (*mask)[i] = rng.next_double() < rate ? S(0) : keep_scale;
    Tensor<S> c = outlike(a, a, a);
    const S* ap = a.ptr();
    S* cp = c.ptr();
    for (int64_t i = 0; i < n; ++i) cp[i] = ap[i] * (*mask)[i];
    if (recording(c)) {
      Tensor<S> av = a, cv = c;
      tape_.push_back([av, cv, mask, n]() mutable {
        if (!av.requires_grad) return;
        S* ga = av.gptr();
        const S* gc = cv.gptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += gc[i] * (*mask)[i];
      });
    }
    return c;
  }

 private:
  std::vector<std::function<void()>> tape_;

  static void check2d(const Tensor<S>& t, const char* what) {
    if (t.ndim != 2)
      throw std::invalid_argument(std::string(what) + ": expected 2-D tensor");
  }
  bool recording(const Tensor<S>& result) const {
    return grad_enabled && result.requires_grad;
  }
  Tensor<S> out(std::initializer_list<int64_t> shape, const Tensor<S>& a,
                const Tensor<S>& b) {
    Tensor<S> c = make_tensor<S>(shape);
    c.requires_grad = grad_enabled && (a.requires_grad || b.requires_grad);
    if (c.requires_grad) c.ensure_grad();
    return c;
  }
  Tensor<S> outlike(const Tensor<S>& shape_src, const Tensor<S>& a,
                    const Tensor<S>& b) {
    Tensor<S> c;
    c.ndim = shape_src.ndim;
    c.dims = shape_src.dims;
    c.data = std::make_shared<std::vector<S>>(shape_src.numel(), S(0));
    c.requires_grad = grad_enabled && (a.requires_grad || b.requires_grad);
    if (c.requires_grad) c.ensure_grad();
    return c;
  }
};

// Compares reverse-mode gradients of a scalar-valued graph function against
// central finite differences. `f` must rebuild its graph from the given
// leaves on every call. With samples_per_tensor == 0 every entry is checked;
// otherwise a seeded sample of entries per tensor.
template <typename S, typename F>
double grad_check(F f, std::vector<Tensor<S>> leaves,
                  int samples_per_tensor = 0, uint64_t seed = 1,
                  S h = S(1e-5)) {
  for (auto& t : leaves) {
    t.ensure_grad();
    t.zero_grad();
  }
  Graph<S> g;
  Tensor<S> loss = f(g);
  if (loss.numel() != 1)
    throw std::invalid_argument("grad_check: f must return a scalar");
  g.backward(loss);
  std::vector<std::vector<S>> analytic;
  analytic.reserve(leaves.size());
  for (auto& t : leaves) analytic.push_back(*t.grad);

  auto eval = [&]() -> S {
    Graph<S> ng;
    ng.grad_enabled = false;
    return f(ng).item();
  };

  double max_rel = 0.0;
  SplitMix64 rng(seed);
  for (size_t ti = 0; ti < leaves.size(); ++ti) {
    auto& t = leaves[ti];
    const int64_t n = t.numel();
    std::vector<int64_t> picks;
    if (samples_per_tensor == 0 || samples_per_tensor >= n) {
      picks.resize(n);
      for (int64_t i = 0; i < n; ++i) picks[i] = i;
    } else {
      for (int s = 0; s < samples_per_tensor; ++s)
        picks.push_back(static_cast<int64_t>(rng.next_below(n)));
    }
    for (int64_t i : picks) {
      S saved = (*t.data)[i];
      (*t.data)[i] = saved + h;
      S up = eval();
      (*t.data)[i] = saved - h;
      S down = eval();
      (*t.data)[i] = saved;
      double numeric = (static_cast<double>(up) - down) / (2.0 * h);
      double a = analytic[ti][i];
      double rel = std::abs(a - numeric) /
                   (std::abs(a) + std::abs(numeric) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace retrodesk
