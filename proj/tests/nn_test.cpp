// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lum/checkpoint.hpp"
#include "lum/ops.hpp"
#include "lum/tensor.hpp"

using namespace lum;

namespace {

// Every op backward is verified against central differences at double
// precision -- the same templated kernels the float runtime uses.
using DT = nn::TapeT<double>;
using DRef = nn::Ref<double>;
using DStore = nn::ParameterStoreT<double>;

DRef randt(DStore& ps, const std::string& name, std::vector<int> shape, rng::Engine& eng,
           double sd = 0.5) {
  return ps.create_normal(name, std::move(shape), eng, sd);
}

AttentionMask causal_mask(int n) {
  AttentionMask m(n, AttentionMask::Mode::Training);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c <= r; ++c) m.set(r, c, true);
  return m;
}

// independent dense reference: explicit loops, no shared code with the op
void reference_attention(const std::vector<double>& q, const std::vector<double>& k,
                         const std::vector<double>& v, const AttentionMask& mask, int heads, int n,
                         int dm, std::vector<double>& out) {
  const int dh = dm / heads;
  out.assign(static_cast<size_t>(n) * dm, 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int r = 0; r < n; ++r) {
      std::vector<double> logits(static_cast<size_t>(n), -1e9);
      bool any = false;
      for (int c = 0; c < n; ++c) {
        if (!mask.at(r, c)) continue;
        any = true;
        double s = 0;
        for (int j = 0; j < dh; ++j)
          s += q[static_cast<size_t>(r) * dm + h * dh + j] * k[static_cast<size_t>(c) * dm + h * dh + j];
        logits[static_cast<size_t>(c)] = s / std::sqrt(static_cast<double>(dh));
      }
      if (!any) continue;
      double mx = -1e300;
      for (double l : logits) mx = std::max(mx, l);
      double denom = 0;
      for (double l : logits) denom += std::exp(l - mx);
      for (int c = 0; c < n; ++c) {
        const double w = std::exp(logits[static_cast<size_t>(c)] - mx) / denom;
        for (int j = 0; j < dh; ++j)
          out[static_cast<size_t>(r) * dm + h * dh + j] += w * v[static_cast<size_t>(c) * dm + h * dh + j];
      }
    }
  }
}

}  // namespace

TEST_CASE("linear: identity weights pass input through") {
  nn::Tape tape;
  auto x = nn::tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6});
  auto w = nn::tensor<float>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b = nn::tensor<float>({3});
  auto y = nn::linear(tape, x, w, b);
  for (size_t i = 0; i < x->v.size(); ++i) CHECK(y->v[i] == x->v[i]);
}

TEST_CASE("linear: 1x1 arithmetic") {
  nn::Tape tape;
  auto x = nn::tensor<float>({1, 1}, {2});
  auto w = nn::tensor<float>({1, 1}, {3});
  auto b = nn::tensor<float>({1}, {1});
  CHECK(nn::linear(tape, x, w, b)->v[0] == doctest::Approx(7.0f));
}

TEST_CASE("linear: shape mismatch names shapes") {
  nn::Tape tape;
  auto x = nn::tensor<float>({2, 3});
  auto w = nn::tensor<float>({4, 2});
  auto b = nn::tensor<float>({2});
  CHECK_THROWS_WITH_AS(nn::linear(tape, x, w, b),
                       doctest::Contains("[2, 3]"), std::invalid_argument);
}

TEST_CASE("linear: gradients match finite differences") {
  DStore ps;
  auto eng = rng::make_engine(7);
  auto x = randt(ps, "x", {3, 4}, eng);
  auto w = randt(ps, "w", {4, 2}, eng);
  auto b = randt(ps, "b", {2}, eng);
  auto report = nn::grad_check<double>(
      ps, [&](DT& t) { return nn::sum_all(t, nn::gelu(t, nn::linear(t, x, w, b))); }, 1e-3);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("layer_norm: constant vector maps to zeros pre-affine") {
  nn::Tape tape;
  auto x = nn::tensor<float>({1, 4}, {3, 3, 3, 3});
  auto g = nn::tensor<float>({4}, {1, 1, 1, 1});
  auto b = nn::tensor<float>({4});
  auto y = nn::layer_norm(tape, x, g, b);
  for (float v : y->v) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("softmax: uniform logits give uniform weights") {
  nn::Tape tape;
  auto x = nn::tensor<float>({1, 2}, {0, 0});
  auto y = nn::softmax_rows(tape, x);
  CHECK(y->v[0] == doctest::Approx(0.5f));
  CHECK(y->v[1] == doctest::Approx(0.5f));
}

TEST_CASE("embedding: repeated index accumulates gradient") {
  DStore ps;
  auto table = ps.create("table", {3, 2});
  for (size_t i = 0; i < table->v.size(); ++i) table->v[i] = 0.1 * static_cast<double>(i);
  DT tape;
  auto y = nn::embedding_rows(tape, table, {1, 1});
  auto loss = nn::sum_all(tape, y);
  tape.backward(loss);
  CHECK(table->g[2] == doctest::Approx(2.0));  // row 1 hit twice
  CHECK(table->g[0] == doctest::Approx(0.0));
}

TEST_CASE("embedding: out-of-vocabulary id is rejected") {
  nn::Tape tape;
  auto table = nn::tensor<float>({3, 2});
  CHECK_THROWS_AS(nn::embedding_rows(tape, table, {3}), std::out_of_range);
  auto y = nn::embedding_rows(tape, table, {-1});  // absent -> zero row
  CHECK(y->v[0] == 0.0f);
}

TEST_CASE("attention: single position returns its value row") {
  nn::Tape tape;
  auto q = nn::tensor<float>({1, 4}, {1, 2, 3, 4});
  auto k = nn::tensor<float>({1, 4}, {0, 1, 0, 1});
  auto v = nn::tensor<float>({1, 4}, {5, 6, 7, 8});
  auto y = nn::masked_attention(tape, q, k, v, causal_mask(1), 2);
  for (int j = 0; j < 4; ++j) CHECK(y->v[static_cast<size_t>(j)] == doctest::Approx(v->v[static_cast<size_t>(j)]));
}

TEST_CASE("attention: diagonal-only mask is the identity over v") {
  auto eng = rng::make_engine(3);
  const int n = 4, dm = 6;
  nn::Tape tape;
  auto mk = [&](const char* nm) {
    auto t = nn::tensor<float>({n, dm});
    for (auto& x : t->v) x = static_cast<float>(rng::normal(eng));
    t->name = nm;
    return t;
  };
  auto q = mk("q"), k = mk("k"), v = mk("v");
  AttentionMask mask(n, AttentionMask::Mode::Training);
  for (int r = 0; r < n; ++r) mask.set(r, r, true);
  auto y = nn::masked_attention(tape, q, k, v, mask, 3);
  for (size_t i = 0; i < v->v.size(); ++i) CHECK(y->v[i] == doctest::Approx(v->v[i]));
}

TEST_CASE("attention: matches an independent loop reference") {
  auto eng = rng::make_engine(11);
  const int n = 5, dm = 8, heads = 2;
  DT tape;
  auto mk = [&]() {
    auto t = nn::tensor<double>({n, dm});
    for (auto& x : t->v) x = rng::normal(eng);
    return t;
  };
  auto q = mk(), k = mk(), v = mk();
  auto mask = causal_mask(n);
  auto y = nn::masked_attention(tape, q, k, v, mask, heads);
  std::vector<double> want;
  reference_attention(q->v, k->v, v->v, mask, heads, n, dm, want);
  for (size_t i = 0; i < want.size(); ++i) CHECK(y->v[i] == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("attention: weights are a convex combination over allowed columns") {
  auto eng = rng::make_engine(5);
  const int n = 6, dm = 8, heads = 4;
  nn::Tape tape;
  auto mk = [&]() {
    auto t = nn::tensor<float>({n, dm});
    for (auto& x : t->v) x = static_cast<float>(rng::normal(eng));
    return t;
  };
  auto q = mk(), k = mk(), v = mk();
  auto mask = causal_mask(n);
  std::vector<float> weights;
  nn::masked_attention(tape, q, k, v, mask, heads, nullptr, &weights);
  for (int h = 0; h < heads; ++h)
    for (int r = 0; r < n; ++r) {
      double sum = 0;
      for (int c = 0; c < n; ++c) {
        const float w = weights[(static_cast<size_t>(h) * n + r) * n + c];
        CHECK(w >= 0.0f);
        if (!mask.at(r, c)) CHECK(w == 0.0f);
        sum += w;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("attention: masked columns have exactly zero influence") {
  auto eng = rng::make_engine(17);
  const int n = 5, dm = 4, heads = 2;
  auto mk = [&]() {
    auto t = nn::tensor<float>({n, dm});
    for (auto& x : t->v) x = static_cast<float>(rng::normal(eng));
    return t;
  };
  auto q = mk(), k = mk(), v = mk();
  auto mask = causal_mask(n);
  nn::Tape t1;
  auto y1 = nn::masked_attention(t1, q, k, v, mask, heads);
  // position 4 is masked out for row 1; perturbing v there must not move row 1
  v->v[4 * dm + 1] += 100.0f;
  k->v[4 * dm + 2] -= 50.0f;
  nn::Tape t2;
  auto y2 = nn::masked_attention(t2, q, k, v, mask, heads);
  for (int j = 0; j < dm; ++j) {
    CHECK(y1->v[1 * dm + j] == y2->v[1 * dm + j]);  // bitwise
    CHECK(y1->v[3 * dm + j] == y2->v[3 * dm + j]);
  }
}

TEST_CASE("attention: an active row with no allowed columns is a mask bug") {
  nn::Tape tape;
  auto q = nn::tensor<float>({2, 4});
  AttentionMask mask(2, AttentionMask::Mode::Training);
  mask.set(0, 0, true);
  std::vector<uint8_t> active{1, 1};
  CHECK_THROWS_WITH_AS(nn::masked_attention(tape, q, q, q, mask, 2, &active),
                       doctest::Contains("no allowed columns"), std::runtime_error);
  // all-padding rows are fine and produce zeros
  std::vector<uint8_t> padded{1, 0};
  auto y = nn::masked_attention(tape, q, q, q, mask, 2, &padded);
  CHECK(y->v[1 * 4 + 0] == 0.0f);
}

TEST_CASE("attention: gradients match finite differences") {
  DStore ps;
  auto eng = rng::make_engine(23);
  const int n = 4, dm = 6;
  auto q = randt(ps, "q", {n, dm}, eng);
  auto k = randt(ps, "k", {n, dm}, eng);
  auto v = randt(ps, "v", {n, dm}, eng);
  auto mask = causal_mask(n);
  auto report = nn::grad_check<double>(
      ps, [&](DT& t) { return nn::sum_all(t, nn::gelu(t, nn::masked_attention(t, q, k, v, mask, 2))); },
      1e-3);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  nn::ParameterStore ps;
  auto p = ps.create("p", {3});
  p->v = {1.0f, -2.0f, 0.5f};
  p->zero_grad();
  nn::adam_step(ps, 0.1);
  CHECK(p->v[0] == 1.0f);
  CHECK(p->v[1] == -2.0f);
  CHECK(ps.step == 1);
}

TEST_CASE("adam: first step moves by about the learning rate") {
  nn::ParameterStore ps;
  auto p = ps.create("p", {2});
  p->v = {1.0f, 1.0f};
  p->ensure_grad();
  p->g = {0.5f, -2.0f};
  nn::adam_step(ps, 1e-3);
  // bias-corrected first step is lr * g/|g| up to eps
  CHECK(std::fabs(1.0f - p->v[0]) == doctest::Approx(1e-3).epsilon(1e-3));
  CHECK(std::fabs(p->v[1] - 1.0f) == doctest::Approx(1e-3).epsilon(1e-3));
  CHECK(p->v[0] < 1.0f);
  CHECK(p->v[1] > 1.0f);
}

TEST_CASE("adam: identical calls from identical state agree bitwise") {
  auto run = []() {
    nn::ParameterStore ps;
    auto p = ps.create("p", {4});
    p->v = {0.1f, 0.2f, 0.3f, 0.4f};
    p->ensure_grad();
    p->g = {0.01f, -0.02f, 0.03f, -0.04f};
    for (int i = 0; i < 3; ++i) nn::adam_step(ps, 0.01);
    return p->v;
  };
  CHECK(run() == run());
}

TEST_CASE("adam: non-finite gradient names the parameter") {
  nn::ParameterStore ps;
  auto p = ps.create("embedding.bad", {1});
  p->ensure_grad();
  p->g[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(nn::adam_step(ps, 0.1), doctest::Contains("embedding.bad"),
                       std::runtime_error);
}

TEST_CASE("grad_check: quadratic is exact to tight tolerance") {
  DStore ps;
  auto eng = rng::make_engine(29);
  auto x = randt(ps, "x", {1, 5}, eng);
  auto report = nn::grad_check<double>(
      ps,
      [&](DT& t) {
        auto y = nn::matmul_nt(t, x, x);  // x.x^T = sum of squares
        return nn::sum_all(t, y);
      },
      1e-3);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: a corrupted backward is detected") {
  DStore ps;
  auto x = ps.create("x", {2});
  x->v = {0.3, -0.7};
  auto loss_fn = [&](DT& t) {
    auto y = nn::tensor<double>({1});
    y->v[0] = x->v[0] + x->v[1];
    y->requires_grad = true;
    // wrong on purpose: claims d loss/dx = 0.25 instead of 1
    t.record([&x, y]() {
      x->ensure_grad();
      for (auto& g : x->g) g += 0.25 * y->g[0];
    });
    return y;
  };
  auto report = nn::grad_check<double>(ps, loss_fn, 1e-3);
  CHECK(report.max_rel_err > 1e-3);
}

TEST_CASE("all op backwards pass randomized finite-difference checks over 20 seeds") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    auto eng = rng::make_engine(seed);
    DStore ps;
    const int n = 3 + static_cast<int>(seed % 3);
    const int d = 4 + static_cast<int>(seed % 2) * 2;
    auto a = randt(ps, "a", {n, d}, eng);
    auto b = randt(ps, "b", {d, n}, eng);
    auto c = randt(ps, "c", {n, d}, eng);
    auto gains = ps.create_ones("gains", {d});
    auto bias = randt(ps, "bias", {d}, eng, 0.1);
    auto table = randt(ps, "table", {5, d}, eng);
    auto q = randt(ps, "q", {n, d}, eng);
    auto k = randt(ps, "k", {n, d}, eng);
    auto v = randt(ps, "v", {n, d}, eng);
    auto pos = randt(ps, "pos", {n, d}, eng);
    auto negs = randt(ps, "negs", {2 * n, d}, eng);
    auto mask = causal_mask(n);
    std::vector<int> ids, bag_ids{0, 2, 2, 4};
    std::vector<int> bag_offsets{0, 2, 3, 4};
    while (static_cast<int>(bag_offsets.size()) < n + 1) bag_offsets.push_back(4);
    for (int i = 0; i < n; ++i) ids.push_back(i % 5);
    std::vector<int> gathers{0, 0, n - 1};
    std::vector<int> scatters;
    for (int i = 0; i < n; ++i) scatters.push_back(n - 1 - i);
    std::vector<int> labels, targets;
    for (int i = 0; i < n; ++i) {
      labels.push_back(i % 2);
      targets.push_back((i + 1) % n);
    }
    std::vector<int> neg_off;
    for (int i = 0; i <= n; ++i) neg_off.push_back(2 * i);

    auto loss_fn = [&](DT& t) -> DRef {
      auto ln = nn::layer_norm(t, a, gains, bias);
      auto mm = nn::matmul(t, ln, b);                       // [n, n]
      auto sm = nn::softmax_rows(t, mm);                    // [n, n]
      auto att = nn::masked_attention(t, q, k, v, mask, 2); // [n, d]
      auto emb = nn::embedding_rows(t, table, ids);
      auto bag = nn::embedding_bag_mean(t, table, bag_ids, bag_offsets);
      auto cat = nn::concat_cols<double>(t, {att, emb, bag});
      auto gathered = nn::gather_rows(t, cat, gathers);
      auto scattered = nn::scatter_rows(t, nn::gelu(t, c), scatters, n);
      auto nce = nn::info_nce(t, nn::add(t, att, scattered), pos, negs, neg_off, 0.3);
      std::vector<int> bce_labels(9);
      for (int i = 0; i < 9; ++i) bce_labels[static_cast<size_t>(i)] = i % 2;
      auto bce = nn::bce_with_logits(t, nn::matmul_nt(t, gathered, gathered), bce_labels);
      auto ce = nn::softmax_cross_entropy(t, mm, targets);
      auto total = nn::add(t, nce, bce);
      total = nn::add(t, total, ce);
      total = nn::add(t, total, nn::scale(t, nn::sum_all(t, nn::matmul(t, sm, c)), 0.01));
      return total;
    };
    auto report = nn::grad_check<double>(ps, loss_fn, 1e-3);
    INFO("seed ", seed, " max rel err ", report.max_rel_err);
    CHECK(report.max_rel_err < 1e-3);
  }
}

TEST_CASE("checkpoint: round-trip is bitwise and truncation is caught") {
  auto eng = rng::make_engine(31);
  nn::ParameterStore ps;
  ps.create_normal("w", {4, 3}, eng, 1.0);
  ps.create_normal("b", {3}, eng, 1.0);
  const auto dir = std::filesystem::temp_directory_path() / "lum_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "p.ckpt").string();
  nn::save_parameters(ps, "{\"k\":1}", path);

  std::string cfg;
  auto loaded = nn::load_parameters<float>(path, &cfg);
  CHECK(cfg == "{\"k\":1}");
  CHECK(loaded.get("w")->v == ps.get("w")->v);

  const auto bytes1 = nn::serialize_parameters(ps, "{\"k\":1}");
  const auto bytes2 = nn::serialize_parameters(loaded, cfg);
  CHECK(bytes1 == bytes2);

  // truncated file
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(bytes1.data(), static_cast<std::streamsize>(bytes1.size() / 2));
  os.close();
  CHECK_THROWS_WITH_AS(nn::load_parameters<float>(path, nullptr), doctest::Contains("truncated"),
                       std::runtime_error);

  // wrong magic
  std::ofstream os2(path, std::ios::binary | std::ios::trunc);
  os2 << "NOPE furthermore";
  os2.close();
  CHECK_THROWS_WITH_AS(nn::load_parameters<float>(path, nullptr), doctest::Contains("magic"),
                       std::runtime_error);
}
