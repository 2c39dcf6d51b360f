#pragma once
// Two-stage training loop. Stage 1 alternates one generator update against
// t_inner discriminator updates of the hinge objective, optionally with a
// latent-reconstruction term on fakes and (single-stage variants) a masking
// triplet term. Stage 2 freezes the stage-1 discriminator and refines a live
// copy with the masking triplet loss plus a deviation penalty against the
// frozen encodings. Presets name the loss compositions; one RNG stream
// drives initialization and both stages so runs are reproducible and
// resumable from checkpoints.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "core/error.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"
#include "data/dataset.hpp"
#include "data/masking.hpp"
#include "json.hpp"
#include "nn/nn.hpp"
#include "nn/objectives.hpp"
#include "train/checkpoint.hpp"
#include "train/optim.hpp"

namespace ssgan {

// ---------------------------------------------------------------------------
// Latent prior

enum class PriorKind { uniform, bernoulli, gaussian };

struct LatentPrior {
  PriorKind kind = PriorKind::uniform;
  std::size_t d = 128;
};

/// Draws a [batch, d] code batch: uniform on [-1,1], +/-1 coin flips, or
/// standard normal entries.
template <typename S>
Tensor<S> sample_latent(const LatentPrior& prior, std::size_t batch, Rng& rng) {
  require(batch >= 1 && prior.d >= 1, ErrCode::invalid_argument,
          "sample_latent: batch and d must be >= 1");
  auto z = Tensor<S>::zeros({batch, prior.d});
  S* p = z.data();
  for (std::size_t i = 0; i < z.numel(); ++i) {
    switch (prior.kind) {
      case PriorKind::uniform: p[i] = static_cast<S>(rng.uniform(-1.0, 1.0)); break;
      case PriorKind::bernoulli: p[i] = static_cast<S>(rng.bernoulli_pm1()); break;
      case PriorKind::gaussian: p[i] = static_cast<S>(rng.gaussian()); break;
    }
  }
  return z;
}

// ---------------------------------------------------------------------------
// Presets

/// Named training compositions. T trains the discriminator with the masking
/// triplet loss alone. Gc/Gd are plain hinge GANs with a continuous
/// (uniform) or discrete (+/-1) prior; the M/B suffix adds the matching
/// reconstruction term (MSE for continuous codes, BCE for discrete ones);
/// a T1 suffix folds the triplet term into stage 1, a T2 suffix appends the
/// separate triplet stage.
enum class Preset {
  T,
  Gc,
  Gd,
  GcM,
  GdB,
  GcT1,
  GdT1,
  GcMT1,
  GdBT1,
  GcT2,
  GdT2,
  GcMT2,
  GdBT2,
};

namespace detail {
inline const std::pair<const char*, Preset> kPresetTable[] = {
    {"T", Preset::T},         {"Gc", Preset::Gc},       {"Gd", Preset::Gd},
    {"GcM", Preset::GcM},     {"GdB", Preset::GdB},     {"GcT1", Preset::GcT1},
    {"GdT1", Preset::GdT1},   {"GcMT1", Preset::GcMT1}, {"GdBT1", Preset::GdBT1},
    {"GcT2", Preset::GcT2},   {"GdT2", Preset::GdT2},   {"GcMT2", Preset::GcMT2},
    {"GdBT2", Preset::GdBT2},
};
}  // namespace detail

inline const char* preset_name(Preset p) {
  for (const auto& [name, v] : detail::kPresetTable)
    if (v == p) return name;
  raise(ErrCode::internal, "preset_name: unknown preset value");
}

inline Preset preset_from_name(const std::string& s) {
  for (const auto& [name, v] : detail::kPresetTable)
    if (s == name) return v;
  std::string valid;
  for (const auto& [name, v] : detail::kPresetTable) {
    if (!valid.empty()) valid += ", ";
    valid += name;
  }
  raise(ErrCode::config, "unknown preset \"" + s + "\"; valid presets: " + valid);
}

inline bool preset_has_gan(Preset p) { return p != Preset::T; }

inline bool preset_two_stage(Preset p) {
  return p == Preset::GcT2 || p == Preset::GdT2 || p == Preset::GcMT2 || p == Preset::GdBT2;
}

// ---------------------------------------------------------------------------
// Hyperparameters

struct HyperParams {
  std::uint64_t t1 = 50000;  // stage-1 iterations (the only stage for T / *T1)
  std::uint64_t t2 = 10000;  // stage-2 iterations (two-stage presets only)
  std::size_t t_inner = 3;   // discriminator updates per stage-1 iteration
  double lr = 5e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_stage1 = 128;
  std::size_t batch_stage2 = 32;  // anchors per triplet update
  std::uint64_t seed = 0;
  LatentPrior prior;
  LossConfig losses;

  void validate() const {
    require(t_inner >= 1, ErrCode::config, "hp: t_inner must be >= 1");
    require(lr > 0, ErrCode::config, "hp: lr must be positive");
    require(batch_stage1 >= 2, ErrCode::config,
            "hp: batch_stage1 must be >= 2 (generator batch norm needs a batch)");
    require(batch_stage2 >= 1, ErrCode::config, "hp: batch_stage2 must be >= 1");
    require(prior.d >= 1, ErrCode::config, "hp: prior.d must be >= 1");
    losses.validate();
    // Reconstruction must match the prior: cross-entropy needs +/-1 codes,
    // squared error needs a continuous code.
    if (losses.recon == LossConfig::Recon::bce)
      require(prior.kind == PriorKind::bernoulli, ErrCode::config,
              "hp: BCE reconstruction requires the bernoulli prior");
    if (losses.recon == LossConfig::Recon::mse)
      require(prior.kind != PriorKind::bernoulli, ErrCode::config,
              "hp: MSE reconstruction requires a continuous (uniform/gaussian) prior");
  }
};

struct MaskSettings {
  std::size_t patch_size = 16;
  NegativeMode negative_mode = NegativeMode::all_non_corner;
  bool global_mean = false;
};

/// Rewrites the prior kind and loss composition to match the preset. The
/// weights (beta/gamma/lambda/rho) and every other field are left alone.
inline void apply_preset(Preset p, HyperParams& hp) {
  switch (p) {
    case Preset::T:
      hp.losses.recon = LossConfig::Recon::none;
      hp.losses.triplet = LossConfig::Triplet::none;
      return;
    case Preset::Gc:
    case Preset::GcM:
    case Preset::GcT1:
    case Preset::GcMT1:
    case Preset::GcT2:
    case Preset::GcMT2:
      hp.prior.kind = PriorKind::uniform;
      break;
    case Preset::Gd:
    case Preset::GdB:
    case Preset::GdT1:
    case Preset::GdBT1:
    case Preset::GdT2:
    case Preset::GdBT2:
      hp.prior.kind = PriorKind::bernoulli;
      break;
  }
  switch (p) {
    case Preset::GcM:
    case Preset::GcMT1:
    case Preset::GcMT2:
      hp.losses.recon = LossConfig::Recon::mse;
      break;
    case Preset::GdB:
    case Preset::GdBT1:
    case Preset::GdBT2:
      hp.losses.recon = LossConfig::Recon::bce;
      break;
    default:
      hp.losses.recon = LossConfig::Recon::none;
      break;
  }
  switch (p) {
    case Preset::GcT1:
    case Preset::GdT1:
    case Preset::GcMT1:
    case Preset::GdBT1:
      hp.losses.triplet = LossConfig::Triplet::single_stage;
      break;
    case Preset::GcT2:
    case Preset::GdT2:
    case Preset::GcMT2:
    case Preset::GdBT2:
      hp.losses.triplet = LossConfig::Triplet::two_stage;
      break;
    default:
      hp.losses.triplet = LossConfig::Triplet::none;
      break;
  }
}

/// Small-footprint settings: 32x32 images, a 3-block trunk, short schedules.
/// A full run fits in minutes on one CPU core.
inline void desk_profile(NetConfig& net, HyperParams& hp, MaskSettings& mask) {
  net.image_size = 32;
  net.base_width = 32;
  net.blocks = 3;
  hp.t1 = 3000;
  hp.t2 = 1000;
  hp.batch_stage1 = 64;
  hp.batch_stage2 = 32;
  mask.patch_size = 8;
}

/// Full-scale settings matching the defaults: 64x64 images, 4 blocks,
/// 50000/10000 iterations.
inline void paper_profile(NetConfig& net, HyperParams& hp, MaskSettings& mask) {
  net = NetConfig{};
  HyperParams fresh;
  fresh.seed = hp.seed;
  hp = fresh;
  mask = MaskSettings{};
}

// ---------------------------------------------------------------------------
// Training state

/// Supplies a [n, C, H, W] batch of real images; the trainer passes its own
/// RNG stream so batch selection is part of the reproducible trajectory.
template <typename S>
using BatchProvider = std::function<Tensor<S>(std::size_t n, Rng& rng)>;

/// Draws i.i.d. training rows from a loaded dataset. The dataset must
/// outlive the provider.
template <typename S = float>
BatchProvider<S> dataset_provider(const Dataset& ds) {
  require(!ds.train_rows.empty(), ErrCode::invalid_argument,
          "dataset_provider: dataset has no training rows");
  return [&ds](std::size_t n, Rng& rng) {
    require(n >= 1, ErrCode::invalid_argument, "dataset_provider: batch must be >= 1");
    const Tensor<float>& first = ds.images[ds.train_rows[0]];
    auto out = Tensor<S>::zeros({n, first.dim(0), first.dim(1), first.dim(2)});
    const std::size_t sz = first.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& img = ds.images[ds.train_rows[rng.index(ds.train_rows.size())]];
      for (std::size_t k = 0; k < sz; ++k) out.data()[i * sz + k] = static_cast<S>(img.data()[k]);
    }
    return out;
  };
}

/// One row of a [N, ...] batch as its own [...] tensor (a copy).
template <typename S>
Tensor<S> image_row(const Tensor<S>& batch, std::size_t i) {
  require(batch.rank() >= 2 && i < batch.dim(0), ErrCode::invalid_argument,
          "image_row: index out of range");
  std::vector<std::size_t> shape(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t sz = batch.numel() / batch.dim(0);
  std::vector<S> v(batch.data() + i * sz, batch.data() + (i + 1) * sz);
  return Tensor<S>::from(std::move(shape), std::move(v));
}

/// [Na + Nb, ...] tensor holding a's rows then b's rows (plain values).
template <typename S>
Tensor<S> concat_batch(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() == b.rank() && a.rank() >= 2, ErrCode::shape_mismatch,
          "concat_batch: rank mismatch");
  for (std::size_t i = 1; i < a.rank(); ++i)
    require(a.dim(i) == b.dim(i), ErrCode::shape_mismatch, "concat_batch: trailing dims differ");
  std::vector<std::size_t> shape = a.shape();
  shape[0] = a.dim(0) + b.dim(0);
  auto out = Tensor<S>::zeros(std::move(shape));
  std::memcpy(out.data(), a.data(), a.numel() * sizeof(S));
  std::memcpy(out.data() + a.numel(), b.data(), b.numel() * sizeof(S));
  return out;
}

/// What one training iteration reported. Stage-1 rows carry the generator's
/// adversarial loss from its single update and discriminator-side terms
/// averaged over the t_inner updates; total is the discriminator objective.
/// Stage-2 rows carry the triplet term, the unweighted deviation
/// regularizer, and total = triplet + lambda * reg.
struct LossReport {
  double g_adv = 0;
  double d_adv = 0;
  double recon = 0;
  double triplet = 0;
  double reg = 0;
  double total = 0;
};

/// Everything a run owns: nets, one optimizer per network, the frozen
/// stage-1 discriminator once stage 2 begins, the RNG stream, and progress
/// counters. Construction validates the configs and spends the seed on
/// initialization, so training continues the same stream.
template <typename S>
struct TrainState {
  NetConfig net;
  HyperParams hp;
  MaskSettings mask;
  Preset preset;

  Rng rng;
  MaskGrid grid;
  Nets<S> nets;
  Adam<S> opt_g;
  Adam<S> opt_d;
  std::optional<Discriminator<S>> frozen;

  std::uint64_t t1_done = 0;
  std::uint64_t t2_done = 0;
  std::uint64_t g_updates = 0;
  std::uint64_t d_updates = 0;

  TrainState(const NetConfig& net_cfg, const HyperParams& hp_cfg, const MaskSettings& mask_cfg,
             Preset preset_cfg)
      : net(net_cfg),
        hp(hp_cfg),
        mask(mask_cfg),
        preset(preset_cfg),
        rng(checked_seed(net_cfg, hp_cfg)),
        grid(make_grid(net_cfg.image_size, mask_cfg.patch_size, mask_cfg.negative_mode)),
        nets(net_cfg, rng),
        opt_g(params_of_g(nets.g), hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps),
        opt_d(params_of_d(nets.d), hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps) {
    nets.g.set_requires_grad(true);
    nets.d.set_requires_grad(true);
  }

  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;

private:
  static std::uint64_t checked_seed(const NetConfig& n, const HyperParams& h) {
    n.validate();
    h.validate();
    require(h.prior.d == n.d, ErrCode::config,
            "prior dimension " + std::to_string(h.prior.d) + " must equal net.d " +
                std::to_string(n.d));
    return h.seed;
  }
  static std::vector<std::pair<std::string, Tensor<S>>> params_of_g(Generator<S>& g) {
    std::vector<std::pair<std::string, Tensor<S>>> p;
    g.collect(p);
    return p;
  }
  static std::vector<std::pair<std::string, Tensor<S>>> params_of_d(Discriminator<S>& d) {
    std::vector<std::pair<std::string, Tensor<S>>> p;
    d.collect(p);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Iterations

namespace detail {

/// Shared triplet plumbing: builds the masked variants for an anchor batch,
/// runs the discriminator on anchors and on all variants in one batch, and
/// folds the per-anchor hardest-pair triplet losses into their mean.
/// Row layout of the masked batch: positives grouped by anchor first
/// ([a0 p0..p3, a1 p0..p3, ...]), then negatives grouped by anchor.
template <typename S>
struct TripletForward {
  DiscOut<S> anchor_out;
  Tensor<S> loss;
};

template <typename S>
TripletForward<S> triplet_forward(TrainState<S>& state, Tape<S>& tape, const Tensor<S>& anchors) {
  const MaskGrid& grid = state.grid;
  const std::size_t a = anchors.dim(0);
  const std::size_t np = grid.corner_cells.size();
  const std::size_t nn = grid.negative_cells.size();
  require(nn >= 1, ErrCode::config,
          "triplet training needs at least one negative cell; the mask grid has none");
  const std::size_t chw = anchors.numel() / a;

  auto masked = Tensor<S>::zeros(
      {a * (np + nn), anchors.dim(1), anchors.dim(2), anchors.dim(3)});
  for (std::size_t i = 0; i < a; ++i) {
    auto trip = build_triplets(image_row(anchors, i), grid, state.mask.global_mean);
    for (std::size_t p = 0; p < np; ++p)
      std::memcpy(masked.data() + (i * np + p) * chw, trip.positives[p].data(), chw * sizeof(S));
    for (std::size_t n = 0; n < nn; ++n)
      std::memcpy(masked.data() + (a * np + i * nn + n) * chw, trip.negatives[n].data(),
                  chw * sizeof(S));
  }

  TripletForward<S> out;
  out.anchor_out = state.nets.d.forward(tape, anchors, Mode::train);
  auto masked_out = state.nets.d.forward(tape, masked, Mode::train);

  // All anchor/variant distances in one batched pass; owner[r] names the
  // anchor of masked row r. The per-row reshape then folds the hardest
  // positive (max) and easiest negative (min) for every anchor at once,
  // with ties resolved toward the lower index as in the pairwise ops.
  std::vector<std::size_t> owner(a * (np + nn));
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t p = 0; p < np; ++p) owner[i * np + p] = i;
    for (std::size_t n = 0; n < nn; ++n) owner[a * np + i * nn + n] = i;
  }
  auto dist =
      cosine_distance_pairs(tape, out.anchor_out.encoding, masked_out.encoding, std::move(owner));
  auto dpos = tape.row_max(tape.reshape(tape.slice_rows(dist, 0, a * np), {a, np}));
  auto dneg = tape.row_min(tape.reshape(tape.slice_rows(dist, a * np, a * nn), {a, nn}));
  auto hinge =
      tape.max_with_scalar(tape.add_scalar(tape.sub(dpos, dneg), state.hp.losses.rho), 0.0);
  out.loss = tape.mean_all(hinge);
  return out;
}

}  // namespace detail

/// One adversarial iteration: a generator update, then t_inner discriminator
/// updates on fresh codes and fresh real batches. RNG consumption order per
/// iteration: [G codes], then per inner update [D codes, real rows, and for
/// single-stage triplet variants the anchor rows].
template <typename S>
LossReport stage1_iteration(TrainState<S>& state, const BatchProvider<S>& data) {
  require(preset_has_gan(state.preset), ErrCode::invalid_argument,
          "stage1_iteration: preset " + std::string(preset_name(state.preset)) +
              " has no adversarial stage");
  const HyperParams& hp = state.hp;
  LossReport rep;

  {
    // Generator update; the discriminator participates with frozen weights.
    auto z = sample_latent<S>(hp.prior, hp.batch_stage1, state.rng);
    Tape<S> tape;
    state.nets.d.set_requires_grad(false);
    auto fake = state.nets.g.forward(tape, z, Mode::train);
    auto out = state.nets.d.forward(tape, fake, Mode::train);
    auto adv = adv_loss_g(tape, out.score);
    Tensor<S> recon;
    if (hp.losses.recon == LossConfig::Recon::mse) recon = recon_mse(tape, out.encoding, z);
    if (hp.losses.recon == LossConfig::Recon::bce) recon = recon_bce(tape, out.encoding, z);
    auto total = total_stage1_g(tape, adv, recon, hp.losses);
    tape.backward(total);
    state.nets.d.set_requires_grad(true);
    state.opt_g.step();
    ++state.g_updates;
    rep.g_adv = static_cast<double>(adv.item());
  }

  for (std::size_t tau = 0; tau < hp.t_inner; ++tau) {
    auto z = sample_latent<S>(hp.prior, hp.batch_stage1, state.rng);
    Tensor<S> fake;
    {
      // Detached sampling: no graph back into the generator (its batch-norm
      // statistics still advance, as in train-mode sampling).
      Tape<S> fwd(false);
      fake = state.nets.g.forward(fwd, z, Mode::train);
    }
    auto real = data(hp.batch_stage1, state.rng);
    auto both = concat_batch(real, fake);

    Tape<S> tape;
    auto out = state.nets.d.forward(tape, both, Mode::train);
    const std::size_t b = hp.batch_stage1;
    auto real_scores = tape.slice_rows(out.score, 0, b);
    auto fake_scores = tape.slice_rows(out.score, b, b);
    auto adv = adv_loss_d(tape, real_scores, fake_scores);
    Tensor<S> recon;
    if (hp.losses.recon != LossConfig::Recon::none) {
      auto fake_codes = tape.slice_rows(out.encoding, b, b);
      recon = hp.losses.recon == LossConfig::Recon::mse ? recon_mse(tape, fake_codes, z)
                                                        : recon_bce(tape, fake_codes, z);
    }
    Tensor<S> trip;
    if (hp.losses.triplet == LossConfig::Triplet::single_stage) {
      auto anchors = data(hp.batch_stage2, state.rng);
      trip = detail::triplet_forward(state, tape, anchors).loss;
    }
    auto total = total_stage1_d(tape, adv, recon, trip, hp.losses);
    tape.backward(total);
    state.opt_d.step();
    ++state.d_updates;

    rep.d_adv += static_cast<double>(adv.item());
    if (recon.defined()) rep.recon += static_cast<double>(recon.item());
    if (trip.defined()) rep.triplet += static_cast<double>(trip.item());
  }
  const double inner = static_cast<double>(hp.t_inner);
  rep.d_adv /= inner;
  rep.recon /= inner;
  rep.triplet /= inner;
  rep.total = rep.d_adv + hp.losses.gamma * rep.recon;
  if (hp.losses.triplet == LossConfig::Triplet::single_stage)
    rep.total += hp.losses.gamma * rep.triplet;
  return rep;
}

/// One refinement iteration against the frozen stage-1 discriminator:
/// triplet loss on an anchor batch plus lambda times the mean squared
/// deviation of the live anchor encodings from the frozen ones. Only the
/// trunk and encoding head receive gradients; the real/fake head and the
/// generator are untouched.
template <typename S>
LossReport stage2_iteration(TrainState<S>& state, const BatchProvider<S>& data) {
  require(state.frozen.has_value(), ErrCode::invalid_argument,
          "stage2_iteration: no frozen stage-1 discriminator (stage 1 not finished?)");
  auto anchors = data(state.hp.batch_stage2, state.rng);

  Tensor<S> frozen_codes;
  {
    Tape<S> fwd(false);
    frozen_codes = state.frozen->forward(fwd, anchors, Mode::eval).encoding;
  }

  Tape<S> tape;
  state.nets.d.rf_w.set_requires_grad(false);
  state.nets.d.rf_b.set_requires_grad(false);
  auto fwd = detail::triplet_forward(state, tape, anchors);
  auto reg = stage2_regularizer(tape, fwd.anchor_out.encoding, frozen_codes);
  auto total = total_stage2_d(tape, fwd.loss, reg, state.hp.losses);
  tape.backward(total);
  state.nets.d.rf_w.set_requires_grad(true);
  state.nets.d.rf_b.set_requires_grad(true);
  state.opt_d.step();
  ++state.d_updates;

  LossReport rep;
  rep.triplet = static_cast<double>(fwd.loss.item());
  rep.reg = static_cast<double>(reg.item());
  rep.total = rep.triplet + state.hp.losses.lambda * rep.reg;
  return rep;
}

/// One iteration of the triplet-only preset: no adversary, no frozen copy,
/// just the masking triplet loss on an anchor batch.
template <typename S>
LossReport triplet_only_iteration(TrainState<S>& state, const BatchProvider<S>& data) {
  auto anchors = data(state.hp.batch_stage2, state.rng);
  Tape<S> tape;
  state.nets.d.rf_w.set_requires_grad(false);
  state.nets.d.rf_b.set_requires_grad(false);
  auto fwd = detail::triplet_forward(state, tape, anchors);
  tape.backward(fwd.loss);
  state.nets.d.rf_w.set_requires_grad(true);
  state.nets.d.rf_b.set_requires_grad(true);
  state.opt_d.step();
  ++state.d_updates;

  LossReport rep;
  rep.triplet = static_cast<double>(fwd.loss.item());
  rep.total = rep.triplet;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoint conversion

namespace detail {

template <typename S>
const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>)
    return "f32";
  else
    return "f64";
}

template <typename S>
TensorBlob blob_from(const std::string& name, const std::vector<std::size_t>& shape, const S* data,
                     std::size_t numel) {
  TensorBlob b;
  b.name = name;
  b.shape.assign(shape.begin(), shape.end());
  b.dtype = dtype_name<S>();
  b.bytes.resize(numel * sizeof(S));
  std::memcpy(b.bytes.data(), data, b.bytes.size());
  return b;
}

inline nlohmann::json net_to_json(const NetConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},
          {"base_width", c.base_width}, {"d", c.d},
          {"leaky_slope", c.leaky_slope}, {"blocks", c.blocks},
          {"g_modulation", c.g_modulation}, {"bn_eps", c.bn_eps},
          {"bn_momentum", c.bn_momentum}, {"sn_iters", c.sn_iters}};
}

template <typename T>
T jget(const nlohmann::json& j, const char* key) {
  require(j.is_object() && j.contains(key), ErrCode::corrupt,
          std::string("metadata: missing key \"") + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    raise(ErrCode::corrupt, std::string("metadata: bad value for \"") + key + "\"");
  }
}

inline NetConfig net_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.image_size = jget<std::size_t>(j, "image_size");
  c.channels = jget<std::size_t>(j, "channels");
  c.base_width = jget<std::size_t>(j, "base_width");
  c.d = jget<std::size_t>(j, "d");
  c.leaky_slope = jget<double>(j, "leaky_slope");
  c.blocks = jget<std::size_t>(j, "blocks");
  c.g_modulation = jget<bool>(j, "g_modulation");
  c.bn_eps = jget<double>(j, "bn_eps");
  c.bn_momentum = jget<double>(j, "bn_momentum");
  c.sn_iters = jget<std::size_t>(j, "sn_iters");
  return c;
}

inline const char* prior_kind_name(PriorKind k) {
  switch (k) {
    case PriorKind::uniform: return "uniform";
    case PriorKind::bernoulli: return "bernoulli";
    case PriorKind::gaussian: return "gaussian";
  }
  raise(ErrCode::internal, "prior_kind_name: unknown kind");
}

inline PriorKind prior_kind_from_name(const std::string& s) {
  if (s == "uniform") return PriorKind::uniform;
  if (s == "bernoulli") return PriorKind::bernoulli;
  if (s == "gaussian") return PriorKind::gaussian;
  raise(ErrCode::config, "unknown prior \"" + s + "\"; valid: uniform, bernoulli, gaussian");
}

inline const char* recon_name(LossConfig::Recon r) {
  switch (r) {
    case LossConfig::Recon::none: return "none";
    case LossConfig::Recon::mse: return "mse";
    case LossConfig::Recon::bce: return "bce";
  }
  raise(ErrCode::internal, "recon_name: unknown value");
}

inline LossConfig::Recon recon_from_name(const std::string& s) {
  if (s == "none") return LossConfig::Recon::none;
  if (s == "mse") return LossConfig::Recon::mse;
  if (s == "bce") return LossConfig::Recon::bce;
  raise(ErrCode::config, "unknown reconstruction \"" + s + "\"; valid: none, mse, bce");
}

inline const char* triplet_mode_name(LossConfig::Triplet t) {
  switch (t) {
    case LossConfig::Triplet::none: return "none";
    case LossConfig::Triplet::single_stage: return "single_stage";
    case LossConfig::Triplet::two_stage: return "two_stage";
  }
  raise(ErrCode::internal, "triplet_mode_name: unknown value");
}

inline LossConfig::Triplet triplet_mode_from_name(const std::string& s) {
  if (s == "none") return LossConfig::Triplet::none;
  if (s == "single_stage") return LossConfig::Triplet::single_stage;
  if (s == "two_stage") return LossConfig::Triplet::two_stage;
  raise(ErrCode::config,
        "unknown triplet mode \"" + s + "\"; valid: none, single_stage, two_stage");
}

inline const char* negative_mode_name(NegativeMode m) {
  switch (m) {
    case NegativeMode::all_non_corner: return "all_non_corner";
    case NegativeMode::center_only: return "center_only";
  }
  raise(ErrCode::internal, "negative_mode_name: unknown value");
}

inline NegativeMode negative_mode_from_name(const std::string& s) {
  if (s == "all_non_corner") return NegativeMode::all_non_corner;
  if (s == "center_only") return NegativeMode::center_only;
  raise(ErrCode::config,
        "unknown negative mode \"" + s + "\"; valid: all_non_corner, center_only");
}

inline nlohmann::json hp_to_json(const HyperParams& h) {
  return {{"t1", h.t1},
          {"t2", h.t2},
          {"t_inner", h.t_inner},
          {"lr", h.lr},
          {"adam_beta1", h.adam_beta1},
          {"adam_beta2", h.adam_beta2},
          {"adam_eps", h.adam_eps},
          {"batch_stage1", h.batch_stage1},
          {"batch_stage2", h.batch_stage2},
          {"seed", h.seed},
          {"prior", {{"kind", prior_kind_name(h.prior.kind)}, {"d", h.prior.d}}},
          {"losses",
           {{"beta", h.losses.beta},
            {"gamma", h.losses.gamma},
            {"lambda", h.losses.lambda},
            {"rho", h.losses.rho},
            {"recon", recon_name(h.losses.recon)},
            {"triplet", triplet_mode_name(h.losses.triplet)}}}};
}

inline HyperParams hp_from_json(const nlohmann::json& j) {
  HyperParams h;
  h.t1 = jget<std::uint64_t>(j, "t1");
  h.t2 = jget<std::uint64_t>(j, "t2");
  h.t_inner = jget<std::size_t>(j, "t_inner");
  h.lr = jget<double>(j, "lr");
  h.adam_beta1 = jget<double>(j, "adam_beta1");
  h.adam_beta2 = jget<double>(j, "adam_beta2");
  h.adam_eps = jget<double>(j, "adam_eps");
  h.batch_stage1 = jget<std::size_t>(j, "batch_stage1");
  h.batch_stage2 = jget<std::size_t>(j, "batch_stage2");
  h.seed = jget<std::uint64_t>(j, "seed");
  const auto prior = jget<nlohmann::json>(j, "prior");
  h.prior.kind = prior_kind_from_name(jget<std::string>(prior, "kind"));
  h.prior.d = jget<std::size_t>(prior, "d");
  const auto losses = jget<nlohmann::json>(j, "losses");
  h.losses.beta = jget<double>(losses, "beta");
  h.losses.gamma = jget<double>(losses, "gamma");
  h.losses.lambda = jget<double>(losses, "lambda");
  h.losses.rho = jget<double>(losses, "rho");
  h.losses.recon = recon_from_name(jget<std::string>(losses, "recon"));
  h.losses.triplet = triplet_mode_from_name(jget<std::string>(losses, "triplet"));
  return h;
}

inline nlohmann::json mask_to_json(const MaskSettings& m) {
  return {{"patch_size", m.patch_size},
          {"negative_mode", negative_mode_name(m.negative_mode)},
          {"global_mean", m.global_mean}};
}

inline MaskSettings mask_from_json(const nlohmann::json& j) {
  MaskSettings m;
  m.patch_size = jget<std::size_t>(j, "patch_size");
  m.negative_mode = negative_mode_from_name(jget<std::string>(j, "negative_mode"));
  m.global_mean = jget<bool>(j, "global_mean");
  return m;
}

}  // namespace detail

/// Serializes the full training state: parameters and buffers of both nets
/// (the generator is omitted for the triplet-only preset, which never trains
/// one), optimizer moments and per-parameter step counts, the frozen
/// discriminator when stage 2 has begun, the RNG stream, and all counters.
template <typename S>
CheckpointData to_checkpoint(TrainState<S>& state) {
  CheckpointData out;
  const bool has_g = preset_has_gan(state.preset);

  nlohmann::json adam_g = nlohmann::json::object();
  nlohmann::json adam_d = nlohmann::json::object();
  for (const auto& s : state.opt_g.slots()) adam_g[s.name] = s.steps;
  for (const auto& s : state.opt_d.slots()) adam_d[s.name] = s.steps;
  out.metadata = {{"format", "ssgan-train"},
                  {"dtype", detail::dtype_name<S>()},
                  {"net", detail::net_to_json(state.net)},
                  {"hp", detail::hp_to_json(state.hp)},
                  {"mask", detail::mask_to_json(state.mask)},
                  {"preset", preset_name(state.preset)},
                  {"counters",
                   {{"t1_done", state.t1_done},
                    {"t2_done", state.t2_done},
                    {"g_updates", state.g_updates},
                    {"d_updates", state.d_updates}}},
                  {"rng", state.rng.state()},
                  {"adam", {{"g", adam_g}, {"d", adam_d}}},
                  {"has_generator", has_g},
                  {"has_frozen", state.frozen.has_value()}};

  auto push_params = [&out](std::vector<std::pair<std::string, Tensor<S>>> params,
                            const std::string& prefix) {
    for (auto& [name, t] : params)
      out.tensors.push_back(detail::blob_from(prefix + name, t.shape(), t.data(), t.numel()));
  };
  auto push_buffers = [&out](std::vector<std::pair<std::string, std::vector<S>*>> bufs,
                             const std::string& prefix) {
    for (auto& [name, v] : bufs)
      out.tensors.push_back(detail::blob_from(prefix + name, {v->size()}, v->data(), v->size()));
  };

  if (has_g) {
    std::vector<std::pair<std::string, Tensor<S>>> gp;
    state.nets.g.collect(gp);
    push_params(gp, "");
    std::vector<std::pair<std::string, std::vector<S>*>> gb;
    state.nets.g.collect_buffers(gb);
    push_buffers(gb, "");
  }
  {
    std::vector<std::pair<std::string, Tensor<S>>> dp;
    state.nets.d.collect(dp);
    push_params(dp, "");
    std::vector<std::pair<std::string, std::vector<S>*>> db;
    state.nets.d.collect_buffers(db);
    push_buffers(db, "");
  }
  if (has_g)
    for (auto& s : state.opt_g.slots()) {
      out.tensors.push_back(
          detail::blob_from("adam.g.m." + s.name, {s.m.size()}, s.m.data(), s.m.size()));
      out.tensors.push_back(
          detail::blob_from("adam.g.v." + s.name, {s.v.size()}, s.v.data(), s.v.size()));
    }
  for (auto& s : state.opt_d.slots()) {
    out.tensors.push_back(
        detail::blob_from("adam.d.m." + s.name, {s.m.size()}, s.m.data(), s.m.size()));
    out.tensors.push_back(
        detail::blob_from("adam.d.v." + s.name, {s.v.size()}, s.v.data(), s.v.size()));
  }
  if (state.frozen) {
    std::vector<std::pair<std::string, Tensor<S>>> fp;
    state.frozen->collect(fp);
    push_params(fp, "frozen.");
    std::vector<std::pair<std::string, std::vector<S>*>> fb;
    state.frozen->collect_buffers(fb);
    push_buffers(fb, "frozen.");
  }
  return out;
}

/// Reconstructs a TrainState from a checkpoint. Every tensor the state
/// expects must be present with the right dtype and shape, and the file may
/// not carry extras; counters and the RNG stream are restored so continuing
/// reproduces the uninterrupted run exactly.
template <typename S>
TrainState<S> from_checkpoint(const CheckpointData& data) {
  const auto& meta = data.metadata;
  require(detail::jget<std::string>(meta, "format") == "ssgan-train", ErrCode::unsupported,
          "checkpoint: not a training snapshot (format mismatch)");
  const std::string dtype = detail::jget<std::string>(meta, "dtype");
  require(dtype == detail::dtype_name<S>(), ErrCode::unsupported,
          "checkpoint dtype is " + dtype + "; this build expects " + detail::dtype_name<S>());

  const NetConfig net = detail::net_from_json(detail::jget<nlohmann::json>(meta, "net"));
  const HyperParams hp = detail::hp_from_json(detail::jget<nlohmann::json>(meta, "hp"));
  const MaskSettings mask = detail::mask_from_json(detail::jget<nlohmann::json>(meta, "mask"));
  const Preset preset = preset_from_name(detail::jget<std::string>(meta, "preset"));
  TrainState<S> state(net, hp, mask, preset);

  std::unordered_map<std::string, const TensorBlob*> index;
  for (const auto& b : data.tensors)
    require(index.emplace(b.name, &b).second, ErrCode::corrupt,
            "checkpoint: duplicate tensor \"" + b.name + "\"");
  std::unordered_set<std::string> consumed;

  auto take = [&](const std::string& name, S* dst, std::size_t numel,
                  const std::vector<std::size_t>& shape) {
    auto it = index.find(name);
    require(it != index.end(), ErrCode::corrupt, "checkpoint: missing tensor \"" + name + "\"");
    const TensorBlob& b = *it->second;
    require(b.dtype == detail::dtype_name<S>(), ErrCode::corrupt,
            "checkpoint: tensor \"" + name + "\" has dtype " + b.dtype);
    require(b.shape.size() == shape.size(), ErrCode::corrupt,
            "checkpoint: tensor \"" + name + "\" has the wrong rank");
    for (std::size_t i = 0; i < shape.size(); ++i)
      require(b.shape[i] == shape[i], ErrCode::corrupt,
              "checkpoint: tensor \"" + name + "\" has the wrong shape");
    std::memcpy(dst, b.bytes.data(), numel * sizeof(S));
    consumed.insert(name);
  };
  auto take_params = [&](std::vector<std::pair<std::string, Tensor<S>>> params,
                         const std::string& prefix) {
    for (auto& [name, t] : params) take(prefix + name, t.data(), t.numel(), t.shape());
  };
  auto take_buffers = [&](std::vector<std::pair<std::string, std::vector<S>*>> bufs,
                          const std::string& prefix) {
    for (auto& [name, v] : bufs) take(prefix + name, v->data(), v->size(), {v->size()});
  };

  const bool has_g = detail::jget<bool>(meta, "has_generator");
  require(has_g == preset_has_gan(preset), ErrCode::corrupt,
          "checkpoint: generator presence does not match the preset");
  if (has_g) {
    std::vector<std::pair<std::string, Tensor<S>>> gp;
    state.nets.g.collect(gp);
    take_params(gp, "");
    std::vector<std::pair<std::string, std::vector<S>*>> gb;
    state.nets.g.collect_buffers(gb);
    take_buffers(gb, "");
  }
  {
    std::vector<std::pair<std::string, Tensor<S>>> dp;
    state.nets.d.collect(dp);
    take_params(dp, "");
    std::vector<std::pair<std::string, std::vector<S>*>> db;
    state.nets.d.collect_buffers(db);
    take_buffers(db, "");
  }

  const auto adam = detail::jget<nlohmann::json>(meta, "adam");
  const auto adam_g = detail::jget<nlohmann::json>(adam, "g");
  const auto adam_d = detail::jget<nlohmann::json>(adam, "d");
  if (has_g)
    for (auto& s : state.opt_g.slots()) {
      take("adam.g.m." + s.name, s.m.data(), s.m.size(), {s.m.size()});
      take("adam.g.v." + s.name, s.v.data(), s.v.size(), {s.v.size()});
      s.steps = detail::jget<std::uint64_t>(adam_g, s.name.c_str());
    }
  for (auto& s : state.opt_d.slots()) {
    take("adam.d.m." + s.name, s.m.data(), s.m.size(), {s.m.size()});
    take("adam.d.v." + s.name, s.v.data(), s.v.size(), {s.v.size()});
    s.steps = detail::jget<std::uint64_t>(adam_d, s.name.c_str());
  }

  if (detail::jget<bool>(meta, "has_frozen")) {
    state.frozen = state.nets.d.clone();
    std::vector<std::pair<std::string, Tensor<S>>> fp;
    state.frozen->collect(fp);
    take_params(fp, "frozen.");
    std::vector<std::pair<std::string, std::vector<S>*>> fb;
    state.frozen->collect_buffers(fb);
    take_buffers(fb, "frozen.");
  }

  for (const auto& b : data.tensors)
    require(consumed.count(b.name) != 0, ErrCode::corrupt,
            "checkpoint: unexpected tensor \"" + b.name + "\"");

  const auto counters = detail::jget<nlohmann::json>(meta, "counters");
  state.t1_done = detail::jget<std::uint64_t>(counters, "t1_done");
  state.t2_done = detail::jget<std::uint64_t>(counters, "t2_done");
  state.g_updates = detail::jget<std::uint64_t>(counters, "g_updates");
  state.d_updates = detail::jget<std::uint64_t>(counters, "d_updates");
  state.rng.set_state(detail::jget<std::string>(meta, "rng"));
  return state;
}

// ---------------------------------------------------------------------------
// Run loop

inline constexpr const char* kLossCsvHeader =
    "iter,stage,loss_g_adv,loss_d_adv,loss_recon,loss_triplet,loss_reg,total";
inline constexpr const char* kCheckpointFile = "checkpoint.ssgf";
inline constexpr const char* kStage1CheckpointFile = "checkpoint_stage1.ssgf";
inline constexpr const char* kLossCsvFile = "losses.csv";

struct RunOptions {
  std::string out_dir;
  std::string resume_from;            // checkpoint path; empty = fresh start
  std::uint64_t checkpoint_every = 0; // extra periodic saves; 0 = boundaries only
  std::function<void(std::uint64_t iter, int stage, const LossReport&)> on_iter;
};

inline std::string format_loss_row(std::uint64_t iter, int stage, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%llu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<unsigned long long>(iter), stage, r.g_adv, r.d_adv, r.recon,
                r.triplet, r.reg, r.total);
  return buf;
}

/// Runs (or resumes) a full training schedule, appending one CSV row per
/// iteration and snapshotting at the stage boundary and at the end. Returns
/// the final checkpoint path. When resuming, the stored configuration must
/// match the caller's except for the iteration targets t1/t2, which may be
/// extended.
template <typename S>
std::string run_training(const NetConfig& net, HyperParams hp, const MaskSettings& mask,
                         Preset preset, const BatchProvider<S>& data, const RunOptions& opt) {
  require(!opt.out_dir.empty(), ErrCode::invalid_argument, "run_training: out_dir is required");
  apply_preset(preset, hp);

  std::optional<TrainState<S>> held;
  if (!opt.resume_from.empty()) {
    held = from_checkpoint<S>(load_checkpoint_file(opt.resume_from));
    // Same run, possibly a longer horizon: everything but t1/t2 must match.
    auto strip = [](nlohmann::json j) {
      j.erase("t1");
      j.erase("t2");
      return j;
    };
    require(held->preset == preset, ErrCode::config,
            "resume: checkpoint preset " + std::string(preset_name(held->preset)) +
                " does not match requested " + preset_name(preset));
    require(detail::net_to_json(held->net) == detail::net_to_json(net), ErrCode::config,
            "resume: network configuration does not match the checkpoint");
    require(strip(detail::hp_to_json(held->hp)) == strip(detail::hp_to_json(hp)), ErrCode::config,
            "resume: hyperparameters do not match the checkpoint");
    require(detail::mask_to_json(held->mask) == detail::mask_to_json(mask), ErrCode::config,
            "resume: mask settings do not match the checkpoint");
    held->hp.t1 = hp.t1;
    held->hp.t2 = hp.t2;
    require(held->t1_done <= hp.t1 && held->t2_done <= hp.t2, ErrCode::config,
            "resume: checkpoint is already past the requested iteration counts");
    // Once the frozen snapshot exists, stage 1 is sealed; extending it would
    // train against a stale snapshot.
    if (held->frozen)
      require(held->t1_done >= hp.t1, ErrCode::config,
              "resume: cannot extend stage 1 after stage 2 has begun");
  } else {
    held.emplace(net, hp, mask, preset);
  }
  TrainState<S>& state = *held;

  std::filesystem::create_directories(opt.out_dir);
  const std::string csv_path = opt.out_dir + "/" + kLossCsvFile;
  const bool fresh_csv = !std::filesystem::exists(csv_path) || opt.resume_from.empty();
  std::ofstream csv(csv_path, fresh_csv ? std::ios::trunc : std::ios::app);
  require(csv.good(), ErrCode::io, "run_training: cannot open " + csv_path);
  if (fresh_csv) csv << kLossCsvHeader << "\n";

  const std::string final_path = opt.out_dir + "/" + kCheckpointFile;
  auto save = [&state](const std::string& path) {
    save_checkpoint_file(path, to_checkpoint(state));
  };
  auto emit = [&](std::uint64_t iter, int stage, const LossReport& rep) {
    csv << format_loss_row(iter, stage, rep) << "\n";
    csv.flush();
    require(csv.good(), ErrCode::io, "run_training: write failed on " + csv_path);
    if (opt.on_iter) opt.on_iter(iter, stage, rep);
    if (opt.checkpoint_every != 0 && iter % opt.checkpoint_every == 0) save(final_path);
  };

  if (preset == Preset::T) {
    for (std::uint64_t t = state.t1_done + 1; t <= state.hp.t1; ++t) {
      auto rep = triplet_only_iteration(state, data);
      state.t1_done = t;
      emit(t, 1, rep);
    }
  } else {
    for (std::uint64_t t = state.t1_done + 1; t <= state.hp.t1; ++t) {
      auto rep = stage1_iteration(state, data);
      state.t1_done = t;
      emit(t, 1, rep);
    }
    if (preset_two_stage(preset) && state.hp.t2 > 0) {
      if (!state.frozen) {
        // End-of-stage-1 snapshot, reusable as a stage-1-only model.
        save(opt.out_dir + "/" + kStage1CheckpointFile);
        state.frozen = state.nets.d.clone();
      }
      for (std::uint64_t t = state.t2_done + 1; t <= state.hp.t2; ++t) {
        auto rep = stage2_iteration(state, data);
        state.t2_done = t;
        emit(state.hp.t1 + t, 2, rep);
      }
    }
  }

  save(final_path);
  return final_path;
}

}  // namespace ssgan
