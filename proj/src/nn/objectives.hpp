#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "core/error.hpp"
#include "core/tensor.hpp"

namespace ssgan {

struct LossConfig {
  enum class Recon { none, mse, bce };
  enum class Triplet { none, single_stage, two_stage };

  double beta = 1.0;    // generator reconstruction weight
  double gamma = 1.0;   // discriminator reconstruction / single-stage triplet weight
  double lambda = 0.2;  // stage-2 deviation-regularizer weight
  double rho = 0.5;     // triplet margin
  Recon recon = Recon::none;
  Triplet triplet = Triplet::none;

  void validate() const {
    require(rho >= 0, ErrCode::config, "loss: rho must be >= 0");
    require(beta >= 0 && gamma >= 0 && lambda >= 0, ErrCode::config,
            "loss: beta, gamma, lambda must be >= 0");
  }
};

/// Hinge discriminator loss: mean(max(0, 1 - real)) + mean(max(0, 1 + fake)).
template <typename S>
Tensor<S> adv_loss_d(Tape<S>& tape, const Tensor<S>& real_scores, const Tensor<S>& fake_scores) {
  require(real_scores.numel() >= 1 && fake_scores.numel() >= 1, ErrCode::invalid_argument,
          "adv_loss_d: empty score batch");
  auto real_part = tape.mean_all(tape.max_with_scalar(tape.add_scalar(tape.neg(real_scores), 1.0), 0.0));
  auto fake_part = tape.mean_all(tape.max_with_scalar(tape.add_scalar(fake_scores, 1.0), 0.0));
  return tape.add(real_part, fake_part);
}

/// Hinge generator loss: -mean(fake).
template <typename S>
Tensor<S> adv_loss_g(Tape<S>& tape, const Tensor<S>& fake_scores) {
  require(fake_scores.numel() >= 1, ErrCode::invalid_argument, "adv_loss_g: empty score batch");
  return tape.neg(tape.mean_all(fake_scores));
}

/// Mean over the batch of the squared L2 reconstruction error per sample.
template <typename S>
Tensor<S> recon_mse(Tape<S>& tape, const Tensor<S>& z_hat, const Tensor<S>& z_prime) {
  require(z_hat.rank() == 2 && z_hat.shape() == z_prime.shape(), ErrCode::shape_mismatch,
          "recon_mse: expects matching [B,d] inputs");
  auto sq = tape.square(tape.sub(z_hat, z_prime));
  return tape.mean_all(tape.reduce_sum(sq, {1}));
}

/// Binary cross-entropy against a +/-1 code, averaged over coordinates and
/// the batch. Uses the logit-stable identity
///   -[t log s(x) + (1-t) log(1 - s(x))] = softplus(x) - t*x,  t = (1+z')/2.
template <typename S>
Tensor<S> recon_bce(Tape<S>& tape, const Tensor<S>& z_hat, const Tensor<S>& z_prime) {
  require(z_hat.rank() == 2 && z_hat.shape() == z_prime.shape(), ErrCode::shape_mismatch,
          "recon_bce: expects matching [B,d] inputs");
  auto targets = Tensor<S>::zeros(z_prime.shape());
  for (std::size_t i = 0; i < z_prime.numel(); ++i) {
    const S v = z_prime.data()[i];
    require(std::abs(std::abs(v) - S(1)) <= S(1e-6), ErrCode::invalid_argument,
            "recon_bce: code entries must be -1 or +1, got " + std::to_string(v));
    targets.data()[i] = (S(1) + v) / S(2);
  }
  auto per_entry = tape.sub(tape.softplus(z_hat), tape.mul(z_hat, targets));
  return tape.mean_all(tape.reduce_mean(per_entry, {1}));
}

/// Plain-value cosine distance 1 - a.b/(|a||b|), for evaluation-side code.
template <typename S>
double cosine_distance(std::span<const S> a, std::span<const S> b) {
  require(a.size() == b.size() && !a.empty(), ErrCode::shape_mismatch,
          "cosine_distance: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  require(na > 1e-12 && nb > 1e-12, ErrCode::invalid_argument,
          "cosine_distance: (near-)zero vector");
  return 1.0 - dot / (na * nb);
}

/// Cosine distances between one anchor row [1,d] and each row of others
/// [P,d], on tape: returns [P].
template <typename S>
Tensor<S> cosine_distance_rows(Tape<S>& tape, const Tensor<S>& anchor, const Tensor<S>& others) {
  require(anchor.rank() == 2 && anchor.dim(0) == 1, ErrCode::shape_mismatch,
          "cosine_distance_rows: anchor must be [1,d]");
  require(others.rank() == 2 && others.dim(1) == anchor.dim(1), ErrCode::shape_mismatch,
          "cosine_distance_rows: row length mismatch");
  const std::size_t p = others.dim(0);
  // Norm preconditions, checked on raw values before any division hits the tape.
  auto norm_ok = [](const S* v, std::size_t n) {
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) sq += static_cast<double>(v[i]) * v[i];
    return std::sqrt(sq) > 1e-12;
  };
  require(norm_ok(anchor.data(), anchor.dim(1)), ErrCode::invalid_argument,
          "cosine_distance_rows: (near-)zero anchor");
  for (std::size_t i = 0; i < p; ++i)
    require(norm_ok(others.data() + i * others.dim(1), others.dim(1)), ErrCode::invalid_argument,
            "cosine_distance_rows: (near-)zero row " + std::to_string(i));

  auto dots = tape.reshape(tape.matmul_nt(anchor, others), {p});
  auto anorm = tape.sqrt(tape.sum_all(tape.square(anchor)));               // scalar
  auto onorm = tape.sqrt(tape.reduce_sum(tape.square(others), {1}));       // [P]
  auto sim = tape.div(dots, tape.mul(onorm, anorm));
  return tape.add_scalar(tape.neg(sim), 1.0);
}

/// Cosine distances for R (anchor, other) row pairs at once: pair r couples
/// anchors[owner[r]] with others[r]. Same distances as one
/// cosine_distance_rows call per anchor, but in a fixed handful of tape ops
/// instead of a per-anchor subgraph.
template <typename S>
Tensor<S> cosine_distance_pairs(Tape<S>& tape, const Tensor<S>& anchors, const Tensor<S>& others,
                                std::vector<std::size_t> owner) {
  require(anchors.rank() == 2 && others.rank() == 2 && others.dim(1) == anchors.dim(1),
          ErrCode::shape_mismatch, "cosine_distance_pairs: row length mismatch");
  require(owner.size() == others.dim(0), ErrCode::shape_mismatch,
          "cosine_distance_pairs: one owner index per row expected");
  const std::size_t d = anchors.dim(1);
  auto norm_ok = [](const S* v, std::size_t n) {
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) sq += static_cast<double>(v[i]) * v[i];
    return std::sqrt(sq) > 1e-12;
  };
  for (std::size_t i = 0; i < anchors.dim(0); ++i)
    require(norm_ok(anchors.data() + i * d, d), ErrCode::invalid_argument,
            "cosine_distance_pairs: (near-)zero anchor " + std::to_string(i));
  for (std::size_t i = 0; i < others.dim(0); ++i)
    require(norm_ok(others.data() + i * d, d), ErrCode::invalid_argument,
            "cosine_distance_pairs: (near-)zero row " + std::to_string(i));

  auto dots = tape.reduce_sum(tape.mul(tape.gather_rows(anchors, owner), others), {1});
  auto anorm = tape.gather_rows(tape.sqrt(tape.reduce_sum(tape.square(anchors), {1})),
                                std::move(owner));
  auto onorm = tape.sqrt(tape.reduce_sum(tape.square(others), {1}));
  auto sim = tape.div(dots, tape.mul(onorm, anorm));
  return tape.add_scalar(tape.neg(sim), 1.0);
}

/// Hardest-pair triplet hinge for one anchor:
///   max(0, max_i D(z, zp_i) - min_j D(z, zn_j) + rho), D = cosine distance.
template <typename S>
Tensor<S> triplet_loss(Tape<S>& tape, const Tensor<S>& anchor, const Tensor<S>& positives,
                       const Tensor<S>& negatives, double rho) {
  require(positives.rank() == 2 && positives.dim(0) >= 1, ErrCode::invalid_argument,
          "triplet_loss: empty positive set");
  require(negatives.rank() == 2 && negatives.dim(0) >= 1, ErrCode::invalid_argument,
          "triplet_loss: empty negative set");
  auto a = anchor.rank() == 1 ? tape.reshape(anchor, {1, anchor.dim(0)}) : anchor;
  auto dpos = cosine_distance_rows(tape, a, positives);
  auto dneg = cosine_distance_rows(tape, a, negatives);

  auto fold = [&tape](const Tensor<S>& v, bool want_max) {
    auto acc = tape.slice_rows(v, 0, 1);
    for (std::size_t i = 1; i < v.dim(0); ++i) {
      auto e = tape.slice_rows(v, i, 1);
      acc = want_max ? tape.max2(acc, e) : tape.min2(acc, e);
    }
    return acc;
  };
  auto hardest = tape.add_scalar(tape.sub(fold(dpos, true), fold(dneg, false)), rho);
  return tape.reshape(tape.max_with_scalar(hardest, 0.0), {});
}

/// Mean over the batch of ||live - frozen||^2 per sample (weight applied by
/// the caller). The frozen side is expected to carry no gradient.
template <typename S>
Tensor<S> stage2_regularizer(Tape<S>& tape, const Tensor<S>& enc_live,
                             const Tensor<S>& enc_frozen) {
  require(enc_live.rank() == 2 && enc_live.shape() == enc_frozen.shape(), ErrCode::shape_mismatch,
          "stage2_regularizer: expects matching [B,d] inputs");
  auto sq = tape.square(tape.sub(enc_live, enc_frozen));
  return tape.mean_all(tape.reduce_sum(sq, {1}));
}

/// adv + beta * recon (recon omitted when the config says none).
template <typename S>
Tensor<S> total_stage1_g(Tape<S>& tape, const Tensor<S>& adv, const Tensor<S>& recon,
                         const LossConfig& cfg) {
  if (cfg.recon == LossConfig::Recon::none) return adv;
  require(recon.defined(), ErrCode::invalid_argument,
          "total_stage1_g: reconstruction term required by config but missing");
  return tape.add(adv, tape.scale(recon, cfg.beta));
}

/// adv + gamma * recon (+ gamma * triplet for the single-stage composition).
template <typename S>
Tensor<S> total_stage1_d(Tape<S>& tape, const Tensor<S>& adv, const Tensor<S>& recon,
                         const Tensor<S>& triplet, const LossConfig& cfg) {
  auto total = adv;
  if (cfg.recon != LossConfig::Recon::none) {
    require(recon.defined(), ErrCode::invalid_argument,
            "total_stage1_d: reconstruction term required by config but missing");
    total = tape.add(total, tape.scale(recon, cfg.gamma));
  }
  if (cfg.triplet == LossConfig::Triplet::single_stage) {
    require(triplet.defined(), ErrCode::invalid_argument,
            "total_stage1_d: triplet term required by config but missing");
    total = tape.add(total, tape.scale(triplet, cfg.gamma));
  }
  return total;
}

/// triplet + lambda * regularizer.
template <typename S>
Tensor<S> total_stage2_d(Tape<S>& tape, const Tensor<S>& triplet, const Tensor<S>& reg,
                         const LossConfig& cfg) {
  require(triplet.defined() && reg.defined(), ErrCode::invalid_argument,
          "total_stage2_d: both terms are required");
  return tape.add(triplet, tape.scale(reg, cfg.lambda));
}

}  // namespace ssgan
