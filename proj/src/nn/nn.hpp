#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "core/error.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace ssgan {

struct NetConfig {
  std::size_t image_size = 64;
  std::size_t channels = 3;
  std::size_t base_width = 64;
  std::size_t d = 128;
  double leaky_slope = 0.1;
  std::size_t blocks = 4;
  bool g_modulation = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;
  std::size_t sn_iters = 1;

  void validate() const {
    require(image_size >= 16 && (image_size & (image_size - 1)) == 0, ErrCode::config,
            "net: image_size must be a power of two >= 16, got " + std::to_string(image_size));
    require(channels == 1 || channels == 3, ErrCode::config,
            "net: channels must be 1 or 3, got " + std::to_string(channels));
    require(d >= 1 && base_width >= 1, ErrCode::config, "net: d and base_width must be >= 1");
    require(blocks >= 1, ErrCode::config, "net: blocks must be >= 1");
    require((image_size >> blocks) >= 4, ErrCode::config,
            "net: image_size / 2^blocks must be >= 4; got " + std::to_string(image_size) + " / 2^" +
                std::to_string(blocks));
    require(sn_iters >= 1, ErrCode::config, "net: sn_iters must be >= 1");
  }

  // Deepest feature map: trunk_width() channels at s0() x s0() pixels.
  std::size_t trunk_width() const { return base_width << (blocks - 1); }
  std::size_t s0() const { return image_size >> blocks; }
};

/// Persistent left-singular-vector estimate for one spectrally normalized
/// weight, plus the number of power iterations to run per use.
template <typename S>
struct SpectralNormState {
  std::vector<S> u;
  std::size_t iters = 1;
};

/// Divides w (reshaped to [dim0, rest]) by its estimated top singular value
/// sigma = u^T W v after `state.iters` power iterations, recorded on the tape
/// with u and v as constants. The advanced u is written back only when
/// update_u is set, so a frozen copy of the state runs the identical
/// computation (and yields a bit-identical result) without drifting.
///
/// Because u and v enter the tape as constants, the recorded gradient agrees
/// with finite differences only once u sits at the power-iteration fixed
/// point; converge the state before finite-difference checks.
template <typename S>
Tensor<S> spectral_normalize(Tape<S>& tape, const Tensor<S>& w, SpectralNormState<S>& state,
                             bool update_u) {
  require(w.rank() >= 2, ErrCode::shape_mismatch, "spectral_normalize: rank must be >= 2");
  require(state.iters >= 1, ErrCode::invalid_argument, "spectral_normalize: iters must be >= 1");
  const std::size_t f = w.dim(0), r = w.numel() / w.dim(0);
  require(state.u.size() == f, ErrCode::shape_mismatch,
          "spectral_normalize: u length " + std::to_string(state.u.size()) + " for " +
              std::to_string(f) + " rows");
  const S* wd = w.data();

  auto normalize = [](std::vector<S>& v) {
    S sq = 0;
    for (S e : v) sq += e * e;
    const S n = std::sqrt(sq);
    require(n > S(1e-30), ErrCode::numeric, "spectral_normalize: zero weight matrix");
    for (S& e : v) e /= n;
    return n;
  };
  auto wt_u = [&](const std::vector<S>& u) {
    std::vector<S> v(r, S(0));
    for (std::size_t i = 0; i < f; ++i) {
      const S ui = u[i];
      const S* row = wd + i * r;
      for (std::size_t j = 0; j < r; ++j) v[j] += ui * row[j];
    }
    return v;
  };
  auto w_v = [&](const std::vector<S>& v) {
    std::vector<S> u(f);
    for (std::size_t i = 0; i < f; ++i) {
      const S* row = wd + i * r;
      S s = 0;
      for (std::size_t j = 0; j < r; ++j) s += row[j] * v[j];
      u[i] = s;
    }
    return u;
  };

  std::vector<S> u = state.u;
  std::vector<S> v;
  for (std::size_t t = 0; t < state.iters; ++t) {
    v = wt_u(u);
    normalize(v);
    u = w_v(v);
    normalize(u);
  }

  auto ut = Tensor<S>::from({1, f}, u);
  auto vt = Tensor<S>::from({r, 1}, v);
  auto wmat = tape.reshape(w, {f, r});
  auto sigma = tape.matmul(tape.matmul(ut, wmat), vt);  // sigma = u^T W v > 0 by construction
  auto wbar = tape.reshape(tape.div(wmat, sigma), w.shape());

  if (update_u) state.u = std::move(u);
  return wbar;
}

template <typename S>
struct DiscOut {
  Tensor<S> score;     // [B]
  Tensor<S> encoding;  // [B, d]
};

namespace detail {

// He-style normal init: std = sqrt(2 / fan_in) where fan_in is dim(1) times
// the receptive-field size for 4-D weights, dim(1) for matrices.
template <typename S>
Tensor<S> he_normal(std::vector<std::size_t> shape, Rng& rng) {
  std::size_t fan_in = shape.at(1);
  for (std::size_t i = 2; i < shape.size(); ++i) fan_in *= shape[i];
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(std * rng.gaussian());
  return t;
}

template <typename S>
std::vector<S> random_unit(std::size_t n, Rng& rng) {
  std::vector<S> v(n);
  double sq = 0;
  for (auto& e : v) {
    const double g = rng.gaussian();
    e = static_cast<S>(g);
    sq += g * g;
  }
  const S norm = static_cast<S>(std::sqrt(sq));
  for (auto& e : v) e /= norm;
  return v;
}

}  // namespace detail

/// Transposed-conv generator: linear stem from z to the deepest feature map,
/// then `blocks` upsampling stages (deconv k4 s2 p1 -> batch norm -> relu),
/// then a k3 conv head squashed by tanh. With g_modulation on, each stage's
/// batch-norm affine is predicted per sample from z by a one-hidden-layer map.
template <typename S>
class Generator {
public:
  struct Block {
    Tensor<S> w;  // [in_ch, out_ch, 4, 4]
    Tensor<S> b;
    Tensor<S> gamma, beta;  // plain batch-norm affine (unused when modulated)
    Tensor<S> mod_w, mod_b;  // modulation head -> [2*out_ch] (zero-init: identity affine)
    BatchNormState<S> bn;
  };

  Generator(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t cmax = cfg.trunk_width(), s0 = cfg.s0();
    fc_w = detail::he_normal<S>({cmax * s0 * s0, cfg.d}, rng);
    fc_b = Tensor<S>::zeros({cmax * s0 * s0});
    if (cfg.g_modulation) {
      mod_hidden_w = detail::he_normal<S>({cfg.d, cfg.d}, rng);
      mod_hidden_b = Tensor<S>::zeros({cfg.d});
    }
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      Block blk;
      const std::size_t cin = std::max<std::size_t>(1, cmax >> i);
      const std::size_t cout = std::max<std::size_t>(1, cmax >> (i + 1));
      blk.w = detail::he_normal<S>({cin, cout, 4, 4}, rng);
      blk.b = Tensor<S>::zeros({cout});
      blk.gamma = Tensor<S>::full({cout}, S(1));
      blk.beta = Tensor<S>::zeros({cout});
      if (cfg.g_modulation) {
        blk.mod_w = Tensor<S>::zeros({2 * cout, cfg.d});
        blk.mod_b = Tensor<S>::zeros({2 * cout});
      }
      blk.bn.momentum = static_cast<S>(cfg.bn_momentum);
      blk.bn.init(cout);
      blocks.push_back(std::move(blk));
    }
    const std::size_t cfin = std::max<std::size_t>(1, cmax >> cfg.blocks);
    out_w = detail::he_normal<S>({cfg.channels, cfin, 3, 3}, rng);
    out_b = Tensor<S>::zeros({cfg.channels});
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& z, Mode mode) {
    require(z.rank() == 2 && z.dim(1) == cfg_.d, ErrCode::shape_mismatch,
            "generator: latent batch must be [B," + std::to_string(cfg_.d) + "]");
    const std::size_t batch = z.dim(0);
    const std::size_t cmax = cfg_.trunk_width(), s0 = cfg_.s0();

    auto h = tape.add_rowvec(tape.matmul_nt(z, fc_w), fc_b);
    h = tape.reshape(h, {batch, cmax, s0, s0});

    Tensor<S> hidden;
    if (cfg_.g_modulation)
      hidden = tape.relu(tape.add_rowvec(tape.matmul_nt(z, mod_hidden_w), mod_hidden_b));

    for (auto& blk : blocks) {
      const std::size_t cout = blk.b.dim(0);
      h = tape.add_channel_bias(tape.conv2d_transpose(h, blk.w, 2, 1), blk.b);
      if (cfg_.g_modulation) {
        auto mm = tape.add_rowvec(tape.matmul_nt(hidden, blk.mod_w), blk.mod_b);  // [B, 2*cout]
        auto gm = tape.add_scalar(tape.slice_cols(mm, 0, cout), 1.0);
        auto bm = tape.slice_cols(mm, cout, cout);
        h = tape.channel_affine(tape.channel_norm(h, cfg_.bn_eps, mode, blk.bn), gm, bm);
      } else {
        h = tape.batch_norm(h, blk.gamma, blk.beta, cfg_.bn_eps, mode, blk.bn);
      }
      h = tape.relu(h);
    }
    return tape.tanh(tape.add_channel_bias(tape.conv2d(h, out_w, 1, 1), out_b));
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>>>& params) {
    params.emplace_back("g.fc.w", fc_w);
    params.emplace_back("g.fc.b", fc_b);
    if (cfg_.g_modulation) {
      params.emplace_back("g.mod.hidden.w", mod_hidden_w);
      params.emplace_back("g.mod.hidden.b", mod_hidden_b);
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "g.block" + std::to_string(i);
      params.emplace_back(p + ".w", blocks[i].w);
      params.emplace_back(p + ".b", blocks[i].b);
      if (cfg_.g_modulation) {
        params.emplace_back(p + ".mod.w", blocks[i].mod_w);
        params.emplace_back(p + ".mod.b", blocks[i].mod_b);
      } else {
        params.emplace_back(p + ".bn.gamma", blocks[i].gamma);
        params.emplace_back(p + ".bn.beta", blocks[i].beta);
      }
    }
    params.emplace_back("g.out.w", out_w);
    params.emplace_back("g.out.b", out_b);
  }

  // Non-trainable state: batch-norm running statistics.
  void collect_buffers(std::vector<std::pair<std::string, std::vector<S>*>>& bufs) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "g.block" + std::to_string(i);
      bufs.emplace_back(p + ".bn.running_mean", &blocks[i].bn.running_mean);
      bufs.emplace_back(p + ".bn.running_var", &blocks[i].bn.running_var);
    }
  }

  void set_requires_grad(bool b) {
    std::vector<std::pair<std::string, Tensor<S>>> ps;
    collect(ps);
    for (auto& [name, t] : ps) t.set_requires_grad(b);
  }

  const NetConfig& config() const { return cfg_; }

  Tensor<S> fc_w, fc_b;
  Tensor<S> mod_hidden_w, mod_hidden_b;
  std::vector<Block> blocks;
  Tensor<S> out_w, out_b;

private:
  NetConfig cfg_;
};

/// Spectral-norm conv trunk (k4 s2 p1, leaky relu) feeding two linear heads
/// off a global-sum-pooled feature: a real/fake score and a d-length encoding.
template <typename S>
class Discriminator {
public:
  struct Block {
    Tensor<S> w;  // [out_ch, in_ch, 4, 4]
    Tensor<S> b;
    SpectralNormState<S> sn;
  };

  Discriminator(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      Block blk;
      const std::size_t cin = i == 0 ? cfg.channels : cfg.base_width << (i - 1);
      const std::size_t cout = cfg.base_width << i;
      blk.w = detail::he_normal<S>({cout, cin, 4, 4}, rng);
      blk.b = Tensor<S>::zeros({cout});
      blk.sn.u = detail::random_unit<S>(cout, rng);
      blk.sn.iters = cfg.sn_iters;
      blocks.push_back(std::move(blk));
    }
    const std::size_t cmax = cfg.trunk_width();
    rf_w = detail::he_normal<S>({1, cmax}, rng);
    rf_b = Tensor<S>::zeros({1});
    enc_w = detail::he_normal<S>({cfg.d, cmax}, rng);
    enc_b = Tensor<S>::zeros({cfg.d});
  }

  DiscOut<S> forward(Tape<S>& tape, const Tensor<S>& x, Mode mode) {
    require(x.rank() == 4 && x.dim(1) == cfg_.channels && x.dim(2) == cfg_.image_size &&
                x.dim(3) == cfg_.image_size,
            ErrCode::shape_mismatch,
            "discriminator: input must be [B," + std::to_string(cfg_.channels) + "," +
                std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "]");
    auto h = x;
    for (auto& blk : blocks) {
      auto wbar = spectral_normalize(tape, blk.w, blk.sn, mode == Mode::train);
      h = tape.leaky_relu(tape.add_channel_bias(tape.conv2d(h, wbar, 2, 1), blk.b),
                          cfg_.leaky_slope);
    }
    auto pooled = tape.reduce_sum(h, {2, 3});  // [B, trunk_width]
    DiscOut<S> out;
    out.score = tape.reshape(tape.add_rowvec(tape.matmul_nt(pooled, rf_w), rf_b), {x.dim(0)});
    out.encoding = tape.add_rowvec(tape.matmul_nt(pooled, enc_w), enc_b);
    return out;
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>>>& params) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "d.block" + std::to_string(i);
      params.emplace_back(p + ".w", blocks[i].w);
      params.emplace_back(p + ".b", blocks[i].b);
    }
    params.emplace_back("d.rf.w", rf_w);
    params.emplace_back("d.rf.b", rf_b);
    params.emplace_back("d.enc.w", enc_w);
    params.emplace_back("d.enc.b", enc_b);
  }

  void collect_buffers(std::vector<std::pair<std::string, std::vector<S>*>>& bufs) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      bufs.emplace_back("d.block" + std::to_string(i) + ".sn.u", &blocks[i].sn.u);
  }

  // Trainables excluding the real/fake head (the stage-2 trainable set).
  void collect_stage2(std::vector<std::pair<std::string, Tensor<S>>>& params) {
    collect(params);
    std::erase_if(params, [](const auto& kv) { return kv.first.rfind("d.rf.", 0) == 0; });
  }

  void set_requires_grad(bool b) {
    std::vector<std::pair<std::string, Tensor<S>>> ps;
    collect(ps);
    for (auto& [name, t] : ps) t.set_requires_grad(b);
  }

  /// Deep copy: shares nothing with this network.
  Discriminator clone() const {
    Discriminator out(*this);
    out.blocks.clear();
    for (const auto& blk : blocks) {
      Block c;
      c.w = blk.w.clone();
      c.b = blk.b.clone();
      c.sn = blk.sn;
      out.blocks.push_back(std::move(c));
    }
    out.rf_w = rf_w.clone();
    out.rf_b = rf_b.clone();
    out.enc_w = enc_w.clone();
    out.enc_b = enc_b.clone();
    return out;
  }

  const NetConfig& config() const { return cfg_; }

  std::vector<Block> blocks;
  Tensor<S> rf_w, rf_b, enc_w, enc_b;

private:
  NetConfig cfg_;
};

/// Generator and discriminator initialized from one seed; construction order
/// (G first, then D) is part of the reproducibility contract.
template <typename S>
struct Nets {
  Generator<S> g;
  Discriminator<S> d;

  Nets(const NetConfig& cfg, std::uint64_t seed) : Nets(cfg, Rng(seed)) {}
  Nets(const NetConfig& cfg, Rng&& rng) : Nets(cfg, rng) {}
  // Consumes draws from the caller's stream, so whatever is sampled next
  // continues where initialization left off.
  Nets(const NetConfig& cfg, Rng& rng) : g(cfg, rng), d(cfg, rng) {}
};

template <typename S>
std::size_t param_count(std::vector<std::pair<std::string, Tensor<S>>> params) {
  std::size_t n = 0;
  for (auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace ssgan
