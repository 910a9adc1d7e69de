// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lum/mask.hpp"
#include "lum/tensor.hpp"

// Differentiable kernels. Every op records its backward closure on the
// tape. Reductions accumulate in double regardless of the storage type.

namespace lum::nn {

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
void require_2d(const Ref<T>& t, const char* who) {
  if (t->shape.size() != 2)
    throw std::invalid_argument(std::string(who) + ": expected 2-d tensor, got " + shape_str(t->shape));
}

template <typename T>
bool any_grad(std::initializer_list<Ref<T>> ts) {
  for (const auto& t : ts)
    if (t->requires_grad) return true;
  return false;
}

}  // namespace detail

// y[m,n] = a[m,k] @ b[k,n]
template <typename T>
Ref<T> matmul(TapeT<T>& tape, const Ref<T>& a, const Ref<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a->cols() != b->rows())
    throw std::invalid_argument("matmul: inner dimensions disagree: " + detail::shape_str(a->shape) +
                                " x " + detail::shape_str(b->shape));
  const int m = a->rows(), k = a->cols(), n = b->cols();
  auto y = tensor<T>({m, n});
  y->requires_grad = detail::any_grad<T>({a, b});
  std::vector<double> acc(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int p = 0; p < k; ++p) {
      const double av = static_cast<double>(a->v[static_cast<size_t>(i) * k + p]);
      const T* brow = &b->v[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
    }
    for (int j = 0; j < n; ++j) y->v[static_cast<size_t>(i) * n + j] = static_cast<T>(acc[static_cast<size_t>(j)]);
  }
  if (y->requires_grad) {
    tape.record([a, b, y, m, k, n]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (a->requires_grad) {
        a->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const T* gy = &y->g[static_cast<size_t>(i) * n];
            const T* brow = &b->v[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) s += static_cast<double>(gy[j]) * static_cast<double>(brow[j]);
            a->g[static_cast<size_t>(i) * k + p] += static_cast<T>(s);
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int i = 0; i < m; ++i)
              s += static_cast<double>(a->v[static_cast<size_t>(i) * k + p]) *
                   static_cast<double>(y->g[static_cast<size_t>(i) * n + j]);
            b->g[static_cast<size_t>(p) * n + j] += static_cast<T>(s);
          }
      }
    });
  }
  return y;
}

// y[m,n] = a[m,k] @ b[n,k]^T
template <typename T>
Ref<T> matmul_nt(TapeT<T>& tape, const Ref<T>& a, const Ref<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  if (a->cols() != b->cols())
    throw std::invalid_argument("matmul_nt: inner dimensions disagree: " + detail::shape_str(a->shape) +
                                " x " + detail::shape_str(b->shape) + "^T");
  const int m = a->rows(), k = a->cols(), n = b->rows();
  auto y = tensor<T>({m, n});
  y->requires_grad = detail::any_grad<T>({a, b});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      const T* ar = &a->v[static_cast<size_t>(i) * k];
      const T* br = &b->v[static_cast<size_t>(j) * k];
      for (int p = 0; p < k; ++p) s += static_cast<double>(ar[p]) * static_cast<double>(br[p]);
      y->v[static_cast<size_t>(i) * n + j] = static_cast<T>(s);
    }
  if (y->requires_grad) {
    tape.record([a, b, y, m, k, n]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (a->requires_grad) {
        a->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            for (int j = 0; j < n; ++j)
              s += static_cast<double>(y->g[static_cast<size_t>(i) * n + j]) *
                   static_cast<double>(b->v[static_cast<size_t>(j) * k + p]);
            a->g[static_cast<size_t>(i) * k + p] += static_cast<T>(s);
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int j = 0; j < n; ++j)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            for (int i = 0; i < m; ++i)
              s += static_cast<double>(y->g[static_cast<size_t>(i) * n + j]) *
                   static_cast<double>(a->v[static_cast<size_t>(i) * k + p]);
            b->g[static_cast<size_t>(j) * k + p] += static_cast<T>(s);
          }
      }
    });
  }
  return y;
}

// y = x @ w + b, with b broadcast over rows.
template <typename T>
Ref<T> linear(TapeT<T>& tape, const Ref<T>& x, const Ref<T>& w, const Ref<T>& b) {
  detail::require_2d(x, "linear");
  detail::require_2d(w, "linear");
  if (x->cols() != w->rows())
    throw std::invalid_argument("linear: input/weight shapes disagree: " + detail::shape_str(x->shape) +
                                " x " + detail::shape_str(w->shape));
  if (b->numel() != w->cols())
    throw std::invalid_argument("linear: bias shape " + detail::shape_str(b->shape) +
                                " does not match output width " + std::to_string(w->cols()));
  auto y = matmul(tape, x, w);
  const int m = y->rows(), n = y->cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y->v[static_cast<size_t>(i) * n + j] += b->v[static_cast<size_t>(j)];
  if (b->requires_grad) {
    y->requires_grad = true;
    tape.record([b, y, m, n]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      b->ensure_grad();
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += static_cast<double>(y->g[static_cast<size_t>(i) * n + j]);
        b->g[static_cast<size_t>(j)] += static_cast<T>(s);
      }
    });
  }
  return y;
}

template <typename T>
Ref<T> add(TapeT<T>& tape, const Ref<T>& a, const Ref<T>& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shapes differ: " + detail::shape_str(a->shape) + " vs " +
                                detail::shape_str(b->shape));
  auto y = tensor<T>(a->shape);
  y->requires_grad = detail::any_grad<T>({a, b});
  for (size_t i = 0; i < y->v.size(); ++i) y->v[i] = a->v[i] + b->v[i];
  if (y->requires_grad) {
    tape.record([a, b, y]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < y->g.size(); ++i) a->g[i] += y->g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < y->g.size(); ++i) b->g[i] += y->g[i];
      }
    });
  }
  return y;
}

template <typename T>
Ref<T> scale(TapeT<T>& tape, const Ref<T>& a, double s) {
  auto y = tensor<T>(a->shape);
  y->requires_grad = a->requires_grad;
  for (size_t i = 0; i < y->v.size(); ++i) y->v[i] = static_cast<T>(static_cast<double>(a->v[i]) * s);
  if (y->requires_grad) {
    tape.record([a, y, s]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      a->ensure_grad();
      for (size_t i = 0; i < y->g.size(); ++i) a->g[i] += static_cast<T>(static_cast<double>(y->g[i]) * s);
    });
  }
  return y;
}

// tanh-approximation GELU
template <typename T>
Ref<T> gelu(TapeT<T>& tape, const Ref<T>& x) {
  auto y = tensor<T>(x->shape);
  y->requires_grad = x->requires_grad;
  const double c0 = std::sqrt(2.0 / M_PI);
  for (size_t i = 0; i < x->v.size(); ++i) {
    const double xv = static_cast<double>(x->v[i]);
    const double u = c0 * (xv + 0.044715 * xv * xv * xv);
    y->v[i] = static_cast<T>(0.5 * xv * (1.0 + std::tanh(u)));
  }
  if (y->requires_grad) {
    tape.record([x, y, c0]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      x->ensure_grad();
      for (size_t i = 0; i < x->v.size(); ++i) {
        const double xv = static_cast<double>(x->v[i]);
        const double u = c0 * (xv + 0.044715 * xv * xv * xv);
        const double th = std::tanh(u);
        const double d = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * c0 * (1.0 + 3.0 * 0.044715 * xv * xv);
        x->g[i] += static_cast<T>(static_cast<double>(y->g[i]) * d);
      }
    });
  }
  return y;
}

// Row-wise layer normalization with affine parameters.
template <typename T>
Ref<T> layer_norm(TapeT<T>& tape, const Ref<T>& x, const Ref<T>& gain, const Ref<T>& bias,
                  double eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  const int m = x->rows(), d = x->cols();
  if (d == 0) throw std::invalid_argument("layer_norm: zero-size normalization axis");
  if (gain->numel() != d || bias->numel() != d)
    throw std::invalid_argument("layer_norm: affine parameter size does not match width " + std::to_string(d));
  auto y = tensor<T>({m, d});
  y->requires_grad = detail::any_grad<T>({x, gain, bias});
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * d);
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* row = &x->v[static_cast<size_t>(i) * d];
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(row[j]) - mean;
      var += c * c;
    }
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(i)] = rs;
    for (int j = 0; j < d; ++j) {
      const double xh = (static_cast<double>(row[j]) - mean) * rs;
      (*xhat)[static_cast<size_t>(i) * d + j] = xh;
      y->v[static_cast<size_t>(i) * d + j] =
          static_cast<T>(xh * static_cast<double>(gain->v[static_cast<size_t>(j)]) +
                         static_cast<double>(bias->v[static_cast<size_t>(j)]));
    }
  }
  if (y->requires_grad) {
    tape.record([x, gain, bias, y, xhat, rstd, m, d]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (gain->requires_grad) gain->ensure_grad();
      if (bias->requires_grad) bias->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T* gy = &y->g[static_cast<size_t>(i) * d];
        const double* xh = &(*xhat)[static_cast<size_t>(i) * d];
        if (gain->requires_grad || bias->requires_grad) {
          for (int j = 0; j < d; ++j) {
            if (gain->requires_grad) gain->g[static_cast<size_t>(j)] += static_cast<T>(static_cast<double>(gy[j]) * xh[j]);
            if (bias->requires_grad) bias->g[static_cast<size_t>(j)] += gy[j];
          }
        }
        if (x->requires_grad) {
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(gy[j]) * static_cast<double>(gain->v[static_cast<size_t>(j)]);
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          const double rs = (*rstd)[static_cast<size_t>(i)];
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(gy[j]) * static_cast<double>(gain->v[static_cast<size_t>(j)]);
            x->g[static_cast<size_t>(i) * d + j] +=
                static_cast<T>(rs * (dxh - sum_dxh / d - xh[j] * sum_dxh_xh / d));
          }
        }
      }
    });
  }
  return y;
}

// Row-wise softmax.
template <typename T>
Ref<T> softmax_rows(TapeT<T>& tape, const Ref<T>& x) {
  detail::require_2d(x, "softmax_rows");
  const int m = x->rows(), d = x->cols();
  if (d == 0) throw std::invalid_argument("softmax_rows: zero-size axis");
  auto y = tensor<T>({m, d});
  y->requires_grad = x->requires_grad;
  for (int i = 0; i < m; ++i) {
    const T* row = &x->v[static_cast<size_t>(i) * d];
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < d; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < d; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < d; ++j)
      y->v[static_cast<size_t>(i) * d + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / denom);
  }
  if (y->requires_grad) {
    tape.record([x, y, m, d]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      x->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T* yr = &y->v[static_cast<size_t>(i) * d];
        const T* gy = &y->g[static_cast<size_t>(i) * d];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * static_cast<double>(yr[j]);
        for (int j = 0; j < d; ++j)
          x->g[static_cast<size_t>(i) * d + j] +=
              static_cast<T>(static_cast<double>(yr[j]) * (static_cast<double>(gy[j]) - dot));
      }
    });
  }
  return y;
}

// Gathers table rows by id. id == -1 yields a zero row (absent field);
// any other out-of-range id is an error. Backward accumulates, so
// repeated ids sum their gradients.
template <typename T>
Ref<T> embedding_rows(TapeT<T>& tape, const Ref<T>& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding_rows");
  const int vocab = table->rows(), d = table->cols();
  const int n = static_cast<int>(ids.size());
  auto y = tensor<T>({std::max(n, 1), d});
  if (n == 0) throw std::invalid_argument("embedding_rows: empty id list");
  y->requires_grad = table->requires_grad;
  for (int i = 0; i < n; ++i) {
    const int id = ids[static_cast<size_t>(i)];
    if (id == -1) continue;  // absent -> zero row
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding_rows: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab) + (table->name.empty() ? "" : " (" + table->name + ")"));
    std::copy_n(&table->v[static_cast<size_t>(id) * d], d, &y->v[static_cast<size_t>(i) * d]);
  }
  if (y->requires_grad) {
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    tape.record([table, y, ids_copy, d]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      table->ensure_grad();
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        const int id = (*ids_copy)[i];
        if (id == -1) continue;
        for (int j = 0; j < d; ++j)
          table->g[static_cast<size_t>(id) * d + j] += y->g[i * static_cast<size_t>(d) + j];
      }
    });
  }
  return y;
}

// Mean-pools table rows per bag; offsets has n+1 entries delimiting the
// flat id list. An empty bag yields a zero row.
template <typename T>
Ref<T> embedding_bag_mean(TapeT<T>& tape, const Ref<T>& table, const std::vector<int>& flat_ids,
                          const std::vector<int>& offsets) {
  detail::require_2d(table, "embedding_bag_mean");
  if (offsets.size() < 2 || offsets.front() != 0 ||
      offsets.back() != static_cast<int>(flat_ids.size()))
    throw std::invalid_argument("embedding_bag_mean: bad offsets");
  const int vocab = table->rows(), d = table->cols();
  const int n = static_cast<int>(offsets.size()) - 1;
  auto y = tensor<T>({n, d});
  y->requires_grad = table->requires_grad;
  for (int i = 0; i < n; ++i) {
    const int lo = offsets[static_cast<size_t>(i)], hi = offsets[static_cast<size_t>(i) + 1];
    if (hi < lo) throw std::invalid_argument("embedding_bag_mean: offsets not monotone");
    if (hi == lo) continue;
    const double inv = 1.0 / (hi - lo);
    for (int p = lo; p < hi; ++p) {
      const int id = flat_ids[static_cast<size_t>(p)];
      if (id < 0 || id >= vocab)
        throw std::out_of_range("embedding_bag_mean: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab) + (table->name.empty() ? "" : " (" + table->name + ")"));
      for (int j = 0; j < d; ++j)
        y->v[static_cast<size_t>(i) * d + j] +=
            static_cast<T>(static_cast<double>(table->v[static_cast<size_t>(id) * d + j]) * inv);
    }
  }
  if (y->requires_grad) {
    auto ids_copy = std::make_shared<std::vector<int>>(flat_ids);
    auto off_copy = std::make_shared<std::vector<int>>(offsets);
    tape.record([table, y, ids_copy, off_copy, d, n]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      table->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const int lo = (*off_copy)[static_cast<size_t>(i)], hi = (*off_copy)[static_cast<size_t>(i) + 1];
        if (hi == lo) continue;
        const double inv = 1.0 / (hi - lo);
        for (int p = lo; p < hi; ++p) {
          const int id = (*ids_copy)[static_cast<size_t>(p)];
          for (int j = 0; j < d; ++j)
            table->g[static_cast<size_t>(id) * d + j] +=
                static_cast<T>(static_cast<double>(y->g[static_cast<size_t>(i) * d + j]) * inv);
        }
      }
    });
  }
  return y;
}

template <typename T>
Ref<T> concat_cols(TapeT<T>& tape, const std::vector<Ref<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = parts[0]->rows();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p->rows() != m) throw std::invalid_argument("concat_cols: row counts differ");
    total += p->cols();
    rg = rg || p->requires_grad;
  }
  auto y = tensor<T>({m, total});
  y->requires_grad = rg;
  int col = 0;
  for (const auto& p : parts) {
    const int d = p->cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(&p->v[static_cast<size_t>(i) * d], d, &y->v[static_cast<size_t>(i) * total + col]);
    col += d;
  }
  if (rg) {
    tape.record([parts, y, m, total]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      int c = 0;
      for (const auto& p : parts) {
        const int d = p->cols();
        if (p->requires_grad) {
          p->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j)
              p->g[static_cast<size_t>(i) * d + j] += y->g[static_cast<size_t>(i) * total + c + j];
        }
        c += d;
      }
    });
  }
  return y;
}

// Selects rows of x; repeats allowed (gradients accumulate).
template <typename T>
Ref<T> gather_rows(TapeT<T>& tape, const Ref<T>& x, const std::vector<int>& rows) {
  detail::require_2d(x, "gather_rows");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
  const int m = x->rows(), d = x->cols();
  auto y = tensor<T>({static_cast<int>(rows.size()), d});
  y->requires_grad = x->requires_grad;
  for (size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= m) throw std::out_of_range("gather_rows: row " + std::to_string(r) + " out of range");
    std::copy_n(&x->v[static_cast<size_t>(r) * d], d, &y->v[i * static_cast<size_t>(d)]);
  }
  if (y->requires_grad) {
    auto rows_copy = std::make_shared<std::vector<int>>(rows);
    tape.record([x, y, rows_copy, d]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      x->ensure_grad();
      for (size_t i = 0; i < rows_copy->size(); ++i) {
        const int r = (*rows_copy)[i];
        for (int j = 0; j < d; ++j)
          x->g[static_cast<size_t>(r) * d + j] += y->g[i * static_cast<size_t>(d) + j];
      }
    });
  }
  return y;
}

// Places src rows at distinct positions of an otherwise-zero [n_out, d]
// tensor.
template <typename T>
Ref<T> scatter_rows(TapeT<T>& tape, const Ref<T>& src, const std::vector<int>& rows, int n_out) {
  detail::require_2d(src, "scatter_rows");
  if (static_cast<int>(rows.size()) != src->rows())
    throw std::invalid_argument("scatter_rows: row list does not match source rows");
  const int d = src->cols();
  auto y = tensor<T>({n_out, d});
  y->requires_grad = src->requires_grad;
  std::vector<uint8_t> seen(static_cast<size_t>(n_out), 0);
  for (size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= n_out) throw std::out_of_range("scatter_rows: row " + std::to_string(r) + " out of range");
    if (seen[static_cast<size_t>(r)]) throw std::invalid_argument("scatter_rows: duplicate target row");
    seen[static_cast<size_t>(r)] = 1;
    std::copy_n(&src->v[i * static_cast<size_t>(d)], d, &y->v[static_cast<size_t>(r) * d]);
  }
  if (y->requires_grad) {
    auto rows_copy = std::make_shared<std::vector<int>>(rows);
    tape.record([src, y, rows_copy, d]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      src->ensure_grad();
      for (size_t i = 0; i < rows_copy->size(); ++i) {
        const int r = (*rows_copy)[i];
        for (int j = 0; j < d; ++j)
          src->g[i * static_cast<size_t>(d) + j] += y->g[static_cast<size_t>(r) * d + j];
      }
    });
  }
  return y;
}

template <typename T>
Ref<T> sum_all(TapeT<T>& tape, const Ref<T>& x) {
  auto y = tensor<T>({1});
  y->requires_grad = x->requires_grad;
  double s = 0.0;
  for (const T& xv : x->v) s += static_cast<double>(xv);
  y->v[0] = static_cast<T>(s);
  if (y->requires_grad) {
    tape.record([x, y]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      x->ensure_grad();
      for (size_t i = 0; i < x->g.size(); ++i) x->g[i] += y->g[0];
    });
  }
  return y;
}

// Multi-head attention under an explicit boolean mask.
//
// Disallowed pairs are never evaluated, which makes masked columns have
// exactly zero influence on the output. A row with no allowed columns is
// treated as padding and yields zeros; if `row_active` marks such a row
// as live, the mask is inconsistent and this throws.
// `weights_out`, when given, receives the post-softmax attention weights
// as num_heads dense [n, n] matrices.
template <typename T>
Ref<T> masked_attention(TapeT<T>& tape, const Ref<T>& q, const Ref<T>& k, const Ref<T>& v,
                        const AttentionMask& mask, int num_heads,
                        const std::vector<uint8_t>* row_active = nullptr,
                        std::vector<T>* weights_out = nullptr) {
  detail::require_2d(q, "masked_attention");
  if (q->shape != k->shape || q->shape != v->shape)
    throw std::invalid_argument("masked_attention: q/k/v shapes differ");
  const int n = q->rows(), dm = q->cols();
  if (num_heads <= 0 || dm % num_heads != 0)
    throw std::invalid_argument("masked_attention: model dim " + std::to_string(dm) +
                                " not divisible by " + std::to_string(num_heads) + " heads");
  if (mask.size != n) throw std::invalid_argument("masked_attention: mask size does not match sequence");
  if (row_active && static_cast<int>(row_active->size()) != n)
    throw std::invalid_argument("masked_attention: row_active size mismatch");
  const int dh = dm / num_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int r = 0; r < n; ++r) {
    if (row_active && (*row_active)[static_cast<size_t>(r)] && !mask.row_has_any(r))
      throw std::runtime_error("masked_attention: active row " + std::to_string(r) +
                               " has no allowed columns (mask bug)");
  }

  auto y = tensor<T>({n, dm});
  y->requires_grad = detail::any_grad<T>({q, k, v});
  // weights stored dense per head for the backward pass
  auto wts = std::make_shared<std::vector<T>>(static_cast<size_t>(num_heads) * n * n, T(0));

  std::vector<double> logits(static_cast<size_t>(n));
  for (int h = 0; h < num_heads; ++h) {
    const int off = h * dh;
    for (int r = 0; r < n; ++r) {
      const size_t mask_base = static_cast<size_t>(r) * n;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int c = 0; c < n; ++c) {
        if (!mask.allowed[mask_base + c]) continue;
        double s = 0.0;
        const T* qr = &q->v[static_cast<size_t>(r) * dm + off];
        const T* kc = &k->v[static_cast<size_t>(c) * dm + off];
        for (int j = 0; j < dh; ++j) s += static_cast<double>(qr[j]) * static_cast<double>(kc[j]);
        s *= sc;
        logits[static_cast<size_t>(c)] = s;
        mx = std::max(mx, s);
        any = true;
      }
      if (!any) continue;  // padding row, output stays zero
      double denom = 0.0;
      for (int c = 0; c < n; ++c)
        if (mask.allowed[mask_base + c]) denom += std::exp(logits[static_cast<size_t>(c)] - mx);
      T* wrow = &(*wts)[(static_cast<size_t>(h) * n + r) * n];
      for (int c = 0; c < n; ++c)
        if (mask.allowed[mask_base + c])
          wrow[c] = static_cast<T>(std::exp(logits[static_cast<size_t>(c)] - mx) / denom);
      for (int j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (int c = 0; c < n; ++c)
          if (mask.allowed[mask_base + c])
            acc += static_cast<double>(wrow[c]) * static_cast<double>(v->v[static_cast<size_t>(c) * dm + off + j]);
        y->v[static_cast<size_t>(r) * dm + off + j] = static_cast<T>(acc);
      }
    }
  }
  if (weights_out) *weights_out = *wts;

  if (y->requires_grad) {
    auto mask_copy = std::make_shared<AttentionMask>(mask);
    tape.record([q, k, v, y, wts, mask_copy, num_heads, dh, n, dm, sc]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (q->requires_grad) q->ensure_grad();
      if (k->requires_grad) k->ensure_grad();
      if (v->requires_grad) v->ensure_grad();
      std::vector<double> dsc(static_cast<size_t>(n));
      for (int h = 0; h < num_heads; ++h) {
        const int off = h * dh;
        for (int r = 0; r < n; ++r) {
          const size_t mask_base = static_cast<size_t>(r) * n;
          const T* wrow = &(*wts)[(static_cast<size_t>(h) * n + r) * n];
          const T* gy = &y->g[static_cast<size_t>(r) * dm + off];
          double srow = 0.0;
          bool any = false;
          for (int c = 0; c < n; ++c) {
            if (!mask_copy->allowed[mask_base + c]) continue;
            any = true;
            double dw = 0.0;
            for (int j = 0; j < dh; ++j)
              dw += static_cast<double>(gy[j]) * static_cast<double>(v->v[static_cast<size_t>(c) * dm + off + j]);
            dsc[static_cast<size_t>(c)] = dw;
            srow += dw * static_cast<double>(wrow[c]);
            if (v->requires_grad) {
              for (int j = 0; j < dh; ++j)
                v->g[static_cast<size_t>(c) * dm + off + j] +=
                    static_cast<T>(static_cast<double>(wrow[c]) * static_cast<double>(gy[j]));
            }
          }
          if (!any) continue;
          for (int c = 0; c < n; ++c) {
            if (!mask_copy->allowed[mask_base + c]) continue;
            const double ds = static_cast<double>(wrow[c]) * (dsc[static_cast<size_t>(c)] - srow) * sc;
            if (q->requires_grad)
              for (int j = 0; j < dh; ++j)
                q->g[static_cast<size_t>(r) * dm + off + j] +=
                    static_cast<T>(ds * static_cast<double>(k->v[static_cast<size_t>(c) * dm + off + j]));
            if (k->requires_grad)
              for (int j = 0; j < dh; ++j)
                k->g[static_cast<size_t>(c) * dm + off + j] +=
                    static_cast<T>(ds * static_cast<double>(q->v[static_cast<size_t>(r) * dm + off + j]));
          }
        }
      }
    });
  }
  return y;
}

namespace detail {

template <typename T>
double row_norm(const Ref<T>& t, int row) {
  const int d = t->cols();
  double s = 0.0;
  const T* p = &t->v[static_cast<size_t>(row) * d];
  for (int j = 0; j < d; ++j) s += static_cast<double>(p[j]) * static_cast<double>(p[j]);
  return std::sqrt(s);
}

template <typename T>
double row_dot(const Ref<T>& a, int ra, const Ref<T>& b, int rb) {
  const int d = a->cols();
  double s = 0.0;
  const T* pa = &a->v[static_cast<size_t>(ra) * d];
  const T* pb = &b->v[static_cast<size_t>(rb) * d];
  for (int j = 0; j < d; ++j) s += static_cast<double>(pa[j]) * static_cast<double>(pb[j]);
  return s;
}

// d cos(a,b)/da = b/(|a||b|) - cos * a/|a|^2, scaled by `coef`.
template <typename T>
void add_cosine_grad(const Ref<T>& a, int ra, const Ref<T>& b, int rb, double cosab, double na,
                     double nb, double coef) {
  if (!a->requires_grad) return;
  const int d = a->cols();
  T* ga = &a->g[static_cast<size_t>(ra) * d];
  const T* pa = &a->v[static_cast<size_t>(ra) * d];
  const T* pb = &b->v[static_cast<size_t>(rb) * d];
  const double inv = 1.0 / (na * nb);
  const double self = cosab / (na * na);
  for (int j = 0; j < d; ++j)
    ga[j] += static_cast<T>(coef * (static_cast<double>(pb[j]) * inv - self * static_cast<double>(pa[j])));
}

}  // namespace detail

// Contrastive loss over cosine similarities with temperature.
//
// queries[i] is scored against positives[i] and the negative rows
// negatives[neg_offsets[i] .. neg_offsets[i+1]). Returns the sum of the
// per-row terms: -log( exp(s+) / (exp(s+) + sum_k exp(s-_k)) ) with
// s = cos(.,.)/temperature. A row with no negatives contributes zero.
template <typename T>
Ref<T> info_nce(TapeT<T>& tape, const Ref<T>& queries, const Ref<T>& positives,
                const Ref<T>& negatives, const std::vector<int>& neg_offsets, double temperature) {
  detail::require_2d(queries, "info_nce");
  if (queries->shape != positives->shape)
    throw std::invalid_argument("info_nce: query/positive shapes differ");
  if (negatives->cols() != queries->cols())
    throw std::invalid_argument("info_nce: negative width differs");
  const int n = queries->rows();
  if (static_cast<int>(neg_offsets.size()) != n + 1 || neg_offsets.front() != 0 ||
      neg_offsets.back() != negatives->rows())
    throw std::invalid_argument("info_nce: bad negative offsets");
  if (temperature <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");

  struct RowState {
    double nq, np;                 // norms
    double cos_pos;
    std::vector<double> cos_neg;   // per negative
    std::vector<double> nn;        // negative norms
    std::vector<double> prob;      // softmax over {pos, negs}; prob[0] is pos
  };
  auto states = std::make_shared<std::vector<RowState>>(static_cast<size_t>(n));

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    RowState& st = (*states)[static_cast<size_t>(i)];
    st.nq = detail::row_norm(queries, i);
    st.np = detail::row_norm(positives, i);
    if (st.nq == 0.0 || st.np == 0.0)
      throw std::runtime_error("info_nce: zero-norm vector in cosine similarity (row " + std::to_string(i) + ")");
    st.cos_pos = detail::row_dot(queries, i, positives, i) / (st.nq * st.np);
    const int lo = neg_offsets[static_cast<size_t>(i)], hi = neg_offsets[static_cast<size_t>(i) + 1];
    for (int p = lo; p < hi; ++p) {
      const double nn = detail::row_norm(negatives, p);
      if (nn == 0.0)
        throw std::runtime_error("info_nce: zero-norm negative vector (row " + std::to_string(p) + ")");
      st.nn.push_back(nn);
      st.cos_neg.push_back(detail::row_dot(queries, i, negatives, p) / (st.nq * nn));
    }
    const double spos = st.cos_pos / temperature;
    double mx = spos;
    for (double c : st.cos_neg) mx = std::max(mx, c / temperature);
    double denom = std::exp(spos - mx);
    for (double c : st.cos_neg) denom += std::exp(c / temperature - mx);
    st.prob.push_back(std::exp(spos - mx) / denom);
    for (double c : st.cos_neg) st.prob.push_back(std::exp(c / temperature - mx) / denom);
    total += -(spos - mx) + std::log(denom);
  }

  auto y = tensor<T>({1});
  y->v[0] = static_cast<T>(total);
  y->requires_grad = detail::any_grad<T>({queries, positives, negatives});
  if (y->requires_grad) {
    auto offs = std::make_shared<std::vector<int>>(neg_offsets);
    tape.record([queries, positives, negatives, y, states, offs, n, temperature]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      if (queries->requires_grad) queries->ensure_grad();
      if (positives->requires_grad) positives->ensure_grad();
      if (negatives->requires_grad) negatives->ensure_grad();
      const double gy = static_cast<double>(y->g[0]);
      for (int i = 0; i < n; ++i) {
        const RowState& st = (*states)[static_cast<size_t>(i)];
        // d loss / d s_pos = prob[0] - 1 ; d loss / d s_neg_k = prob[k+1]
        const double dpos = gy * (st.prob[0] - 1.0) / temperature;
        detail::add_cosine_grad(queries, i, positives, i, st.cos_pos, st.nq, st.np, dpos);
        detail::add_cosine_grad(positives, i, queries, i, st.cos_pos, st.np, st.nq, dpos);
        const int lo = (*offs)[static_cast<size_t>(i)];
        for (size_t kk = 0; kk < st.cos_neg.size(); ++kk) {
          const double dneg = gy * st.prob[kk + 1] / temperature;
          const int nrow = lo + static_cast<int>(kk);
          detail::add_cosine_grad(queries, i, negatives, nrow, st.cos_neg[kk], st.nq, st.nn[kk], dneg);
          detail::add_cosine_grad(negatives, nrow, queries, i, st.cos_neg[kk], st.nn[kk], st.nq, dneg);
        }
      }
    });
  }
  return y;
}

// Mean binary cross-entropy from logits, computed via the stable
// softplus form.
template <typename T>
Ref<T> bce_with_logits(TapeT<T>& tape, const Ref<T>& logits, const std::vector<int>& labels) {
  if (logits->numel() != static_cast<int64_t>(labels.size()))
    throw std::invalid_argument("bce_with_logits: logit/label counts differ");
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("bce_with_logits: label outside {0,1}");
  const int n = static_cast<int>(labels.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = static_cast<double>(logits->v[static_cast<size_t>(i)]);
    const double sp = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += sp - static_cast<double>(labels[static_cast<size_t>(i)]) * z;
  }
  auto y = tensor<T>({1});
  y->v[0] = static_cast<T>(total / n);
  y->requires_grad = logits->requires_grad;
  if (y->requires_grad) {
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    tape.record([logits, y, labels_copy, n]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      logits->ensure_grad();
      const double gy = static_cast<double>(y->g[0]);
      for (int i = 0; i < n; ++i) {
        const double z = static_cast<double>(logits->v[static_cast<size_t>(i)]);
        const double sig = 1.0 / (1.0 + std::exp(-z));
        logits->g[static_cast<size_t>(i)] +=
            static_cast<T>(gy * (sig - (*labels_copy)[static_cast<size_t>(i)]) / n);
      }
    });
  }
  return y;
}

// Mean softmax cross-entropy of logits[i, :] against targets[i].
template <typename T>
Ref<T> softmax_cross_entropy(TapeT<T>& tape, const Ref<T>& logits, const std::vector<int>& targets) {
  detail::require_2d(logits, "softmax_cross_entropy");
  const int n = logits->rows(), c = logits->cols();
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: target count differs");
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * c);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= c) throw std::out_of_range("softmax_cross_entropy: target out of range");
    const T* row = &logits->v[static_cast<size_t>(i) * c];
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < c; ++j)
      (*probs)[static_cast<size_t>(i) * c + j] = std::exp(static_cast<double>(row[j]) - mx) / denom;
    total += -(static_cast<double>(row[t]) - mx - std::log(denom));
  }
  auto y = tensor<T>({1});
  y->v[0] = static_cast<T>(total / n);
  y->requires_grad = logits->requires_grad;
  if (y->requires_grad) {
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    tape.record([logits, y, probs, targets_copy, n, c]() {
      if (y->g.size() != y->v.size()) return;  // no downstream gradient
      logits->ensure_grad();
      const double gy = static_cast<double>(y->g[0]);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          double d = (*probs)[static_cast<size_t>(i) * c + j];
          if (j == (*targets_copy)[static_cast<size_t>(i)]) d -= 1.0;
          logits->g[static_cast<size_t>(i) * c + j] += static_cast<T>(gy * d / n);
        }
    });
  }
  return y;
}

}  // namespace lum::nn
