#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <vector>

#include "core/rng.hpp"
#include "doctest.h"
#include "nn/nn.hpp"

using ssgan::Discriminator;
using ssgan::ErrCode;
using ssgan::Error;
using ssgan::Generator;
using ssgan::Mode;
using ssgan::NetConfig;
using ssgan::Nets;
using ssgan::Rng;
using ssgan::SpectralNormState;
using ssgan::Tape;
using ssgan::Tensor;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 3;
  cfg.base_width = 4;
  cfg.d = 6;
  cfg.blocks = 2;
  return cfg;
}

// Independent top-singular-value oracle: dense eigensolve of w^T w.
double top_singular_value(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = w[i * cols + j];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
  return std::sqrt(es.eigenvalues().maxCoeff());
}

template <typename S>
double estimated_sigma(const Tensor<S>& w, const Tensor<S>& wbar) {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < w.numel(); ++i)
    if (std::abs(w.data()[i]) > std::abs(w.data()[idx])) idx = i;
  return static_cast<double>(w.data()[idx]) / static_cast<double>(wbar.data()[idx]);
}

}  // namespace

TEST_CASE("power iteration recovers the singular values of a diagonal matrix") {
  auto w = Tensor<double>::from({2, 2}, {3.0, 0.0, 0.0, 1.0});
  Rng rng(3);
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(2, rng), 50};
  Tape<double> tape(false);
  auto wbar = spectral_normalize(tape, w, state, true);
  CHECK(wbar.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(wbar.data()[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(std::abs(wbar.data()[1]) < 1e-12);
  CHECK(estimated_sigma(w, wbar) == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("an orthogonal matrix is a fixed point of spectral normalization") {
  const double c = std::cos(0.7), s = std::sin(0.7);
  auto w = Tensor<double>::from({2, 2}, {c, -s, s, c});
  Rng rng(4);
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(2, rng), 50};
  Tape<double> tape(false);
  auto wbar = spectral_normalize(tape, w, state, true);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(wbar.data()[i] == doctest::Approx(w.data()[i]).epsilon(1e-9));
}

TEST_CASE("estimated sigma matches a dense eigensolve oracle") {
  Rng rng(5);
  auto w = Tensor<double>::zeros({32, 48});
  for (auto& v : w.values()) v = rng.gaussian();
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(32, rng), 50};
  Tape<double> tape(false);
  auto wbar = spectral_normalize(tape, w, state, true);
  const double ref = top_singular_value(w.values(), 32, 48);
  CHECK(std::abs(estimated_sigma(w, wbar) - ref) / ref < 1e-3);
}

TEST_CASE("u persists and stays unit-norm; eval mode leaves it untouched") {
  Rng rng(6);
  auto w = Tensor<double>::zeros({5, 7});
  for (auto& v : w.values()) v = rng.gaussian();
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(5, rng), 1};
  const auto u0 = state.u;

  Tape<double> tape(false);
  spectral_normalize(tape, w, state, false);
  CHECK(state.u == u0);

  spectral_normalize(tape, w, state, true);
  CHECK(state.u != u0);
  double sq = 0;
  for (double e : state.u) sq += e * e;
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a zero weight matrix is rejected") {
  auto w = Tensor<double>::zeros({3, 3});
  Rng rng(7);
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(3, rng), 1};
  Tape<double> tape(false);
  try {
    spectral_normalize(tape, w, state, true);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::numeric);
  }
}

TEST_CASE("normalized conv weights have top singular value near one after warm-up") {
  Rng rng(8);
  auto w = Tensor<double>::zeros({8, 4, 4, 4});
  for (auto& v : w.values()) v = 5.0 * rng.gaussian();
  // Boost one output channel so the spectrum has a clear gap; one-step power
  // iteration converges geometrically in that gap, so six calls are plenty.
  for (std::size_t i = 0; i < 64; ++i) w.data()[i] *= 5.0;
  SpectralNormState<double> state{ssgan::detail::random_unit<double>(8, rng), 1};
  Tape<double> tape(false);
  Tensor<double> wbar;
  for (int i = 0; i < 6; ++i) wbar = spectral_normalize(tape, w, state, true);
  CHECK(top_singular_value(wbar.values(), 8, 64) <= 1.0 + 1e-2);
  CHECK(top_singular_value(wbar.values(), 8, 64) >= 1.0 - 1e-2);
}

TEST_CASE("spectral normalization is differentiable through its weight") {
  Rng rng(9);
  auto w = Tensor<double>::zeros({3, 4});
  for (auto& v : w.values()) v = rng.gaussian();
  w.set_requires_grad(true);
  // The tape treats u and v as constants, so the analytic gradient only
  // matches finite differences once u sits at the power-iteration fixed
  // point; converge it first.
  SpectralNormState<double> frozen{ssgan::detail::random_unit<double>(3, rng), 2000};
  {
    Tape<double> warm(false);
    spectral_normalize(warm, w, frozen, true);
  }
  frozen.iters = 1;
  auto f = [&](Tape<double>& t) {
    SpectralNormState<double> state = frozen;  // keep f pure across evaluations
    auto wbar = spectral_normalize(t, w, state, false);
    return t.mean_all(t.square(wbar));
  };
  CHECK(ssgan::grad_check<double>(f, {w}) < 1e-4);
}

TEST_CASE("generator emits tanh-bounded images of the configured size") {
  auto cfg = tiny_config();
  Rng rng(10);
  Generator<float> g(cfg, rng);
  auto z = Tensor<float>::zeros({2, cfg.d});
  Rng zr(11);
  for (auto& v : z.values()) v = static_cast<float>(zr.gaussian());

  Tape<float> tape(false);
  auto x = g.forward(tape, z, Mode::eval);
  REQUIRE(x.shape() == std::vector<std::size_t>{2, 3, 16, 16});
  for (float v : x.values()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  auto x2 = g.forward(tape, z, Mode::eval);
  CHECK(std::memcmp(x.data(), x2.data(), x.numel() * sizeof(float)) == 0);
}

TEST_CASE("modulated generator passes a finite-difference check") {
  NetConfig cfg = tiny_config();
  cfg.base_width = 2;
  cfg.d = 4;
  cfg.g_modulation = true;
  Rng rng(12);
  Generator<double> g(cfg, rng);
  // Give the zero-initialized modulation maps something to differentiate.
  Rng mr(13);
  for (auto& blk : g.blocks)
    for (auto* t : {&blk.mod_w, &blk.mod_b})
      for (auto& v : t->values()) v = 0.1 * mr.gaussian();

  auto z = Tensor<double>::zeros({2, cfg.d});
  for (auto& v : z.values()) v = mr.gaussian();

  std::vector<std::pair<std::string, Tensor<double>>> params;
  g.collect(params);
  std::vector<Tensor<double>> check;
  for (auto& [name, t] : params) {
    t.set_requires_grad(true);
    check.push_back(t);
  }
  auto f = [&](Tape<double>& t) { return t.mean_all(t.square(g.forward(t, z, Mode::train))); };
  CHECK(ssgan::grad_check<double>(f, check) < 1e-4);
}

TEST_CASE("discriminator heads share the trunk but not their weights") {
  auto cfg = tiny_config();
  Rng rng(14);
  Discriminator<float> d(cfg, rng);

  auto x = Tensor<float>::zeros({4, 3, 16, 16});
  Rng xr(15);
  for (auto& v : x.values()) v = static_cast<float>(xr.uniform(-1, 1));
  // Duplicate sample 0 into sample 3.
  std::copy_n(x.data(), 3 * 16 * 16, x.data() + 3 * 3 * 16 * 16);

  Tape<float> tape(false);
  auto out = d.forward(tape, x, Mode::eval);
  REQUIRE(out.score.shape() == std::vector<std::size_t>{4});
  REQUIRE(out.encoding.shape() == std::vector<std::size_t>{4, cfg.d});
  CHECK(out.score.data()[0] == out.score.data()[3]);
  CHECK(std::memcmp(out.encoding.data(), out.encoding.data() + 3 * cfg.d,
                    cfg.d * sizeof(float)) == 0);

  // Perturbing one head never leaks into the other.
  auto base = d.forward(tape, x, Mode::eval);
  d.rf_w.data()[0] += 0.5f;
  auto bumped_rf = d.forward(tape, x, Mode::eval);
  CHECK(std::memcmp(base.encoding.data(), bumped_rf.encoding.data(),
                    base.encoding.numel() * sizeof(float)) == 0);
  CHECK(base.score.data()[0] != bumped_rf.score.data()[0]);
  d.enc_w.data()[0] += 0.5f;
  auto bumped_enc = d.forward(tape, x, Mode::eval);
  CHECK(std::memcmp(bumped_rf.score.data(), bumped_enc.score.data(), 4 * sizeof(float)) == 0);
}

TEST_CASE("discriminator trunk gradients pass a finite-difference check") {
  NetConfig cfg = tiny_config();
  cfg.base_width = 2;
  cfg.d = 4;
  Rng rng(16);
  Discriminator<double> d(cfg, rng);
  auto x = Tensor<double>::zeros({2, 3, 16, 16});
  Rng xr(17);
  for (auto& v : x.values()) v = xr.uniform(-1, 1);

  std::vector<std::pair<std::string, Tensor<double>>> params;
  d.collect(params);
  std::vector<Tensor<double>> check;
  for (auto& [name, t] : params) {
    t.set_requires_grad(true);
    check.push_back(t);
  }
  // Converge every block's u first: away from the power-iteration fixed
  // point the constant-u tape gradient disagrees with finite differences.
  for (auto& blk : d.blocks) blk.sn.iters = 2000;
  {
    Tape<double> warm(false);
    d.forward(warm, x, Mode::train);
  }
  for (auto& blk : d.blocks) blk.sn.iters = 1;
  const auto frozen_u = d.blocks[0].sn.u;
  auto f = [&](Tape<double>& t) {
    auto out = d.forward(t, x, Mode::eval);  // eval keeps the u estimates fixed
    return t.add(t.sum_all(out.score), t.sum_all(out.encoding));
  };
  CHECK(ssgan::grad_check<double>(f, check) < 1e-4);
  CHECK(d.blocks[0].sn.u == frozen_u);
}

TEST_CASE("initialization is seed-reproducible with the documented scales") {
  NetConfig cfg;  // default 64x64 config
  Nets<float> a(cfg, 77), b(cfg, 77), c(cfg, 78);
  CHECK(a.g.blocks.size() == 4);
  CHECK(a.d.blocks.size() == 4);

  std::vector<std::pair<std::string, Tensor<float>>> pa, pb, pc;
  a.g.collect(pa);
  a.d.collect(pa);
  b.g.collect(pb);
  b.d.collect(pb);
  c.g.collect(pc);
  c.d.collect(pc);
  CHECK(ssgan::param_count(pa) == 6'667'076u);

  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].second.values() == pb[i].second.values());
    if (pa[i].second.values() != pc[i].second.values()) any_diff = true;
  }
  CHECK(any_diff);

  // Empirical std within 20% of sqrt(2/fan_in) for the larger weights.
  for (auto& [name, t] : pa) {
    if (t.rank() < 2 || t.numel() < 4096) continue;
    std::size_t fan_in = t.dim(1);
    for (std::size_t i = 2; i < t.rank(); ++i) fan_in *= t.dim(i);
    double sq = 0;
    for (float v : t.values()) sq += static_cast<double>(v) * v;
    const double std_measured = std::sqrt(sq / t.numel());
    const double std_expected = std::sqrt(2.0 / fan_in);
    CHECK(std::abs(std_measured - std_expected) / std_expected < 0.2);
  }
}

TEST_CASE("a cloned discriminator is isolated from the live one") {
  auto cfg = tiny_config();
  Rng rng(18);
  Discriminator<float> d(cfg, rng);
  auto frozen = d.clone();

  auto x = Tensor<float>::zeros({2, 3, 16, 16});
  Rng xr(19);
  for (auto& v : x.values()) v = static_cast<float>(xr.uniform(-1, 1));

  Tape<float> tape(false);
  auto before = frozen.forward(tape, x, Mode::eval);
  auto live_before = d.forward(tape, x, Mode::eval);
  CHECK(before.encoding.values() == live_before.encoding.values());
  CHECK(before.score.values() == live_before.score.values());

  for (auto& v : d.blocks[0].w.values()) v += 0.25f;
  d.enc_b.data()[0] += 1.0f;
  auto after = frozen.forward(tape, x, Mode::eval);
  CHECK(after.encoding.values() == before.encoding.values());
  CHECK(after.score.values() == before.score.values());
  auto live_after = d.forward(tape, x, Mode::eval);
  CHECK(live_after.encoding.values() != before.encoding.values());
}

TEST_CASE("network configs are validated") {
  NetConfig cfg;
  cfg.image_size = 48;  // not a power of two
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = NetConfig{};
  cfg.image_size = 32;
  cfg.blocks = 4;  // 32 / 16 = 2 < 4
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = NetConfig{};
  cfg.channels = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
