// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lum/rng.hpp"

namespace lum::nn {

// Dense row-major tensor with an optional gradient buffer. Values are
// float in the runtime instantiation; the double instantiation exists so
// the finite-difference checker runs at full precision through the exact
// same op code.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> v;
  std::vector<T> g;  // empty until touched by backward
  bool requires_grad = false;
  std::string name;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rows() const { return shape.size() == 2 ? shape[0] : throw std::logic_error("tensor is not 2-d"); }
  int cols() const { return shape.size() == 2 ? shape[1] : throw std::logic_error("tensor is not 2-d"); }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), T(0));
  }
  void zero_grad() { g.assign(v.size(), T(0)); }
};

template <typename T>
using Ref = std::shared_ptr<TensorT<T>>;

template <typename T>
Ref<T> tensor(std::vector<int> shape) {
  auto t = std::make_shared<TensorT<T>>();
  t->shape = std::move(shape);
  int64_t n = 1;
  for (int d : t->shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= d;
  }
  t->v.assign(static_cast<size_t>(n), T(0));
  return t;
}

template <typename T>
Ref<T> tensor(std::vector<int> shape, std::vector<T> values) {
  auto t = tensor<T>(std::move(shape));
  if (static_cast<int64_t>(values.size()) != t->numel())
    throw std::invalid_argument("tensor: value count does not match shape");
  t->v = std::move(values);
  return t;
}

template <typename T>
Ref<T> scalar_tensor(T value) {
  return tensor<T>({1}, {value});
}

// Records backward closures in execution order and replays them in
// reverse. Ops accumulate into input .g buffers; parameters keep their
// gradients after the tape is discarded.
template <typename T>
class TapeT {
 public:
  void record(std::function<void()> fn) { fns_.push_back(std::move(fn)); }

  void backward(const Ref<T>& loss) {
    if (loss->numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    loss->ensure_grad();
    loss->g[0] = T(1);
    for (auto it = fns_.rbegin(); it != fns_.rend(); ++it) (*it)();
  }

  size_t size() const { return fns_.size(); }

 private:
  std::vector<std::function<void()>> fns_;
};

// Named parameters in stable creation order plus per-parameter Adam
// moments. The step count is shared across all parameters.
template <typename T>
struct ParameterStoreT {
  struct AdamState {
    std::vector<T> m, u;
  };

  std::vector<std::string> order;
  std::map<std::string, Ref<T>> by_name;
  std::map<std::string, AdamState> adam;
  int64_t step = 0;

  Ref<T> create(const std::string& name, std::vector<int> shape) {
    if (by_name.count(name)) throw std::invalid_argument("parameter already exists: " + name);
    auto t = tensor<T>(std::move(shape));
    t->requires_grad = true;
    t->name = name;
    order.push_back(name);
    by_name[name] = t;
    return t;
  }

  Ref<T> create_normal(const std::string& name, std::vector<int> shape, lum::rng::Engine& eng, double stddev) {
    auto t = create(name, std::move(shape));
    for (auto& x : t->v) x = static_cast<T>(lum::rng::normal(eng) * stddev);
    return t;
  }

  Ref<T> create_ones(const std::string& name, std::vector<int> shape) {
    auto t = create(name, std::move(shape));
    for (auto& x : t->v) x = T(1);
    return t;
  }

  Ref<T> get(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
  }

  void zero_grads() {
    for (const auto& n : order) by_name.at(n)->zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& nm : order) n += by_name.at(nm)->numel();
    return n;
  }
};

// One Adam update over every parameter that has a gradient buffer.
// Parameters with no gradient this step still advance their bias
// correction (shared step count) but receive a zero update.
template <typename T>
void adam_step(ParameterStoreT<T>& ps, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  ps.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(ps.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(ps.step));
  for (const auto& name : ps.order) {
    auto& p = *ps.by_name.at(name);
    auto& st = ps.adam[name];
    if (st.m.size() != p.v.size()) {
      st.m.assign(p.v.size(), T(0));
      st.u.assign(p.v.size(), T(0));
    }
    const bool has_grad = p.g.size() == p.v.size();
    for (size_t i = 0; i < p.v.size(); ++i) {
      const double gi = has_grad ? static_cast<double>(p.g[i]) : 0.0;
      if (!std::isfinite(gi))
        throw std::runtime_error("adam_step: non-finite gradient in parameter " + name);
      const double m = beta1 * static_cast<double>(st.m[i]) + (1.0 - beta1) * gi;
      const double u = beta2 * static_cast<double>(st.u[i]) + (1.0 - beta2) * gi * gi;
      st.m[i] = static_cast<T>(m);
      st.u[i] = static_cast<T>(u);
      const double mhat = m / bc1;
      const double uhat = u / bc2;
      p.v[i] = static_cast<T>(static_cast<double>(p.v[i]) - lr * mhat / (std::sqrt(uhat) + eps));
    }
  }
}

// Central-difference verification of tape gradients.
// rel = |analytic - fd| / max(|analytic|, |fd|, floor); the floor keeps
// exact-zero pairs from dividing by zero.
template <typename T>
struct GradCheckReport {
  struct Entry {
    std::string param;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> per_param;
  double max_rel_err = 0.0;
  bool ok(double tol) const { return max_rel_err < tol; }
};

template <typename T>
GradCheckReport<T> grad_check(ParameterStoreT<T>& ps,
                              const std::function<Ref<T>(TapeT<T>&)>& loss_fn, double fd_step,
                              double floor = 1e-8) {
  ps.zero_grads();
  TapeT<T> tape;
  auto loss = loss_fn(tape);
  tape.backward(loss);

  std::map<std::string, std::vector<T>> analytic;
  for (const auto& name : ps.order) {
    auto& p = *ps.by_name.at(name);
    p.ensure_grad();
    analytic[name] = p.g;
  }

  auto eval = [&]() -> double {
    TapeT<T> t;
    return static_cast<double>(loss_fn(t)->v[0]);
  };

  GradCheckReport<T> report;
  for (const auto& name : ps.order) {
    auto& p = *ps.by_name.at(name);
    typename GradCheckReport<T>::Entry entry{name, 0.0};
    for (size_t i = 0; i < p.v.size(); ++i) {
      const T saved = p.v[i];
      p.v[i] = saved + static_cast<T>(fd_step);
      const double up = eval();
      p.v[i] = saved - static_cast<T>(fd_step);
      const double dn = eval();
      p.v[i] = saved;
      const double fd = (up - dn) / (2.0 * fd_step);
      const double an = static_cast<double>(analytic[name][i]);
      const double denom = std::max({std::fabs(an), std::fabs(fd), floor});
      entry.max_rel_err = std::max(entry.max_rel_err, std::fabs(an - fd) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using ParameterStore = ParameterStoreT<float>;
using TensorRef = Ref<float>;

}  // namespace lum::nn
