#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "train/trainer.hpp"

using ssgan::BatchProvider;
using ssgan::ErrCode;
using ssgan::Error;
using ssgan::HyperParams;
using ssgan::LatentPrior;
using ssgan::LossConfig;
using ssgan::LossReport;
using ssgan::MaskSettings;
using ssgan::NetConfig;
using ssgan::Preset;
using ssgan::PriorKind;
using ssgan::Rng;
using ssgan::Tensor;
using ssgan::TrainState;

namespace {

struct TempDir {
  explicit TempDir(const std::string& name)
      : path((std::filesystem::temp_directory_path() / name).string()) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return path + "/" + name; }
  std::string path;
};

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

// Small enough that a full two-stage run takes well under a second.
NetConfig tiny_net() {
  NetConfig n;
  n.image_size = 16;
  n.base_width = 4;
  n.d = 8;
  n.blocks = 2;
  return n;
}

HyperParams tiny_hp(std::uint64_t seed = 7) {
  HyperParams h;
  h.t_inner = 2;
  h.batch_stage1 = 4;
  h.batch_stage2 = 2;
  h.seed = seed;
  h.prior.d = 8;
  return h;
}

MaskSettings tiny_mask() {
  MaskSettings m;
  m.patch_size = 4;  // 4x4 grid: 4 corner positives, 12 negatives
  return m;
}

// A fixed pool of random images; batch selection still comes from the
// trainer's stream, so runs stay reproducible.
template <typename S>
BatchProvider<S> pool_provider(std::size_t image_size, std::size_t channels = 3,
                               std::size_t pool_size = 8, std::uint64_t seed = 999) {
  auto pool = std::make_shared<std::vector<Tensor<S>>>();
  Rng rng(seed);
  for (std::size_t i = 0; i < pool_size; ++i) {
    auto t = Tensor<S>::zeros({channels, image_size, image_size});
    for (std::size_t k = 0; k < t.numel(); ++k)
      t.data()[k] = static_cast<S>(rng.uniform(-1.0, 1.0));
    pool->push_back(std::move(t));
  }
  return [pool](std::size_t n, Rng& r) {
    const auto& first = (*pool)[0];
    auto out = Tensor<S>::zeros({n, first.dim(0), first.dim(1), first.dim(2)});
    const std::size_t sz = first.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& img = (*pool)[r.index(pool->size())];
      std::memcpy(out.data() + i * sz, img.data(), sz * sizeof(S));
    }
    return out;
  };
}

template <typename S>
std::vector<std::vector<S>> values_of(std::vector<std::pair<std::string, Tensor<S>>> params) {
  std::vector<std::vector<S>> out;
  for (auto& [name, t] : params) out.push_back(t.values());
  return out;
}

template <typename S>
std::vector<std::vector<S>> g_values(TrainState<S>& st) {
  std::vector<std::pair<std::string, Tensor<S>>> p;
  st.nets.g.collect(p);
  return values_of(std::move(p));
}

template <typename S>
std::vector<std::vector<S>> d_values(TrainState<S>& st) {
  std::vector<std::pair<std::string, Tensor<S>>> p;
  st.nets.d.collect(p);
  return values_of(std::move(p));
}

template <typename S>
double distance_to_frozen(TrainState<S>& st) {
  std::vector<std::pair<std::string, Tensor<S>>> live, froz;
  st.nets.d.collect(live);
  st.frozen->collect(froz);
  REQUIRE(live.size() == froz.size());
  double sq = 0;
  for (std::size_t i = 0; i < live.size(); ++i) {
    REQUIRE(live[i].second.numel() == froz[i].second.numel());
    for (std::size_t k = 0; k < live[i].second.numel(); ++k) {
      const double d = static_cast<double>(live[i].second.data()[k]) -
                       static_cast<double>(froz[i].second.data()[k]);
      sq += d * d;
    }
  }
  return sq;
}

}  // namespace

TEST_CASE("latent samples follow the requested prior and stream") {
  Rng rng(3);
  LatentPrior uni{PriorKind::uniform, 6};
  auto z = ssgan::sample_latent<double>(uni, 5, rng);
  CHECK(z.shape() == std::vector<std::size_t>{5, 6});
  for (std::size_t i = 0; i < z.numel(); ++i) {
    CHECK(z.data()[i] >= -1.0);
    CHECK(z.data()[i] <= 1.0);
  }

  LatentPrior coin{PriorKind::bernoulli, 16};
  auto b = ssgan::sample_latent<float>(coin, 8, rng);
  bool saw_pos = false, saw_neg = false;
  for (std::size_t i = 0; i < b.numel(); ++i) {
    CHECK(std::abs(b.data()[i]) == 1.0f);
    (b.data()[i] > 0 ? saw_pos : saw_neg) = true;
  }
  CHECK(saw_pos);
  CHECK(saw_neg);

  LatentPrior gauss{PriorKind::gaussian, 64};
  Rng r1(11), r2(11);
  auto g1 = ssgan::sample_latent<double>(gauss, 32, r1);
  auto g2 = ssgan::sample_latent<double>(gauss, 32, r2);
  CHECK(g1.values() == g2.values());  // same seed, same draw
  auto g3 = ssgan::sample_latent<double>(gauss, 32, r1);
  CHECK(g1.values() != g3.values());  // the stream advanced
  double mean = 0;
  for (std::size_t i = 0; i < g1.numel(); ++i) mean += g1.data()[i];
  mean /= static_cast<double>(g1.numel());
  CHECK(std::abs(mean) < 0.1);

  CHECK_THROWS_AS(ssgan::sample_latent<float>(uni, 0, rng), Error);
}

TEST_CASE("preset names round-trip and unknown names are rejected") {
  const Preset all[] = {Preset::T,     Preset::Gc,    Preset::Gd,    Preset::GcM,
                        Preset::GdB,   Preset::GcT1,  Preset::GdT1,  Preset::GcMT1,
                        Preset::GdBT1, Preset::GcT2,  Preset::GdT2,  Preset::GcMT2,
                        Preset::GdBT2};
  for (Preset p : all) CHECK(ssgan::preset_from_name(ssgan::preset_name(p)) == p);

  try {
    ssgan::preset_from_name("GdBT3");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
    CHECK(std::string(e.what()).find("GdBT2") != std::string::npos);  // lists valid names
  }
}

TEST_CASE("presets expand to the documented loss compositions") {
  auto expand = [](Preset p) {
    HyperParams h = tiny_hp();
    h.losses.beta = 0.25;  // custom weights must survive expansion
    ssgan::apply_preset(p, h);
    return h;
  };

  auto gc = expand(Preset::Gc);
  CHECK(gc.prior.kind == PriorKind::uniform);
  CHECK(gc.losses.recon == LossConfig::Recon::none);
  CHECK(gc.losses.triplet == LossConfig::Triplet::none);
  CHECK(gc.losses.beta == 0.25);

  auto gdb = expand(Preset::GdB);
  CHECK(gdb.prior.kind == PriorKind::bernoulli);
  CHECK(gdb.losses.recon == LossConfig::Recon::bce);
  CHECK(gdb.losses.triplet == LossConfig::Triplet::none);

  auto gcmt1 = expand(Preset::GcMT1);
  CHECK(gcmt1.prior.kind == PriorKind::uniform);
  CHECK(gcmt1.losses.recon == LossConfig::Recon::mse);
  CHECK(gcmt1.losses.triplet == LossConfig::Triplet::single_stage);

  auto gdt2 = expand(Preset::GdT2);
  CHECK(gdt2.prior.kind == PriorKind::bernoulli);
  CHECK(gdt2.losses.recon == LossConfig::Recon::none);
  CHECK(gdt2.losses.triplet == LossConfig::Triplet::two_stage);

  auto t = expand(Preset::T);
  CHECK(t.losses.recon == LossConfig::Recon::none);
  CHECK(t.losses.triplet == LossConfig::Triplet::none);

  CHECK(ssgan::preset_has_gan(Preset::Gc));
  CHECK(!ssgan::preset_has_gan(Preset::T));
  CHECK(ssgan::preset_two_stage(Preset::GdBT2));
  CHECK(!ssgan::preset_two_stage(Preset::GdBT1));
  CHECK(!ssgan::preset_two_stage(Preset::T));
}

TEST_CASE("hyperparameter validation enforces prior and reconstruction pairing") {
  HyperParams h = tiny_hp();
  h.losses.recon = LossConfig::Recon::bce;
  h.prior.kind = PriorKind::uniform;
  try {
    h.validate();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
  }
  h.prior.kind = PriorKind::bernoulli;
  CHECK_NOTHROW(h.validate());

  h.losses.recon = LossConfig::Recon::mse;
  try {
    h.validate();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
  }
  h.prior.kind = PriorKind::gaussian;
  CHECK_NOTHROW(h.validate());

  h = tiny_hp();
  h.batch_stage1 = 1;
  CHECK_THROWS_AS(h.validate(), Error);
  h = tiny_hp();
  h.t_inner = 0;
  CHECK_THROWS_AS(h.validate(), Error);
}

TEST_CASE("identical seeds build identical training states") {
  TrainState<float> a(tiny_net(), tiny_hp(5), tiny_mask(), Preset::Gc);
  TrainState<float> b(tiny_net(), tiny_hp(5), tiny_mask(), Preset::Gc);
  TrainState<float> c(tiny_net(), tiny_hp(6), tiny_mask(), Preset::Gc);
  CHECK(g_values(a) == g_values(b));
  CHECK(d_values(a) == d_values(b));
  CHECK(g_values(a) != g_values(c));
  CHECK(a.rng.state() == b.rng.state());

  HyperParams bad = tiny_hp();
  bad.prior.d = 9;  // net.d is 8
  try {
    TrainState<float> s(tiny_net(), bad, tiny_mask(), Preset::Gc);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
  }
}

TEST_CASE("a stage-1 iteration updates both networks and reports the objective") {
  HyperParams hp = tiny_hp();
  ssgan::apply_preset(Preset::Gc, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::Gc);
  auto data = pool_provider<float>(16);

  const auto g_before = g_values(st);
  const auto d_before = d_values(st);
  const LossReport rep = stage1_iteration(st, data);

  CHECK(st.g_updates == 1);
  CHECK(st.d_updates == 2);  // t_inner
  CHECK(st.t1_done == 0);    // the run loop owns the counter
  CHECK(g_values(st) != g_before);
  CHECK(d_values(st) != d_before);
  CHECK(std::isfinite(rep.g_adv));
  CHECK(std::isfinite(rep.d_adv));
  CHECK(rep.recon == 0.0);    // no reconstruction term in Gc
  CHECK(rep.triplet == 0.0);  // no triplet term either
  CHECK(rep.total == rep.d_adv);

  // The triplet-only preset has no adversarial stage to run.
  TrainState<float> tonly(tiny_net(), tiny_hp(), tiny_mask(), Preset::T);
  CHECK_THROWS_AS(stage1_iteration(tonly, data), Error);
}

TEST_CASE("single-stage compositions report reconstruction and triplet terms") {
  HyperParams hp = tiny_hp();
  hp.losses.gamma = 0.7;
  ssgan::apply_preset(Preset::GdBT1, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::GdBT1);
  auto data = pool_provider<float>(16);

  const LossReport rep = stage1_iteration(st, data);
  CHECK(rep.recon > 0.0);    // BCE is strictly positive
  CHECK(rep.triplet >= 0.0);
  CHECK(rep.reg == 0.0);
  CHECK(rep.total ==
        doctest::Approx(rep.d_adv + 0.7 * rep.recon + 0.7 * rep.triplet).epsilon(1e-12));
}

TEST_CASE("the first stage-2 update matches the frozen encodings exactly") {
  HyperParams hp = tiny_hp();
  ssgan::apply_preset(Preset::GcT2, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::GcT2);
  auto data = pool_provider<float>(16);

  stage1_iteration(st, data);
  stage1_iteration(st, data);
  st.frozen = st.nets.d.clone();

  const auto g_before = g_values(st);
  const auto rf_w_before = st.nets.d.rf_w.values();
  const auto rf_b_before = st.nets.d.rf_b.values();

  // Identical weights and spectral-norm state mean the live net must
  // reproduce the frozen encodings bit for bit, so the deviation penalty of
  // the very first refinement update is exactly zero.
  const LossReport first = stage2_iteration(st, data);
  CHECK(first.reg == 0.0);
  CHECK(first.total == first.triplet);
  CHECK(std::isfinite(first.triplet));

  const LossReport second = stage2_iteration(st, data);
  CHECK(second.reg > 0.0);

  // Refinement touches the trunk and encoding head only.
  CHECK(g_values(st) == g_before);
  CHECK(st.nets.d.rf_w.values() == rf_w_before);
  CHECK(st.nets.d.rf_b.values() == rf_b_before);
  CHECK(st.nets.d.rf_w.requires_grad());  // restored after the update

  // Without a frozen snapshot stage 2 cannot run.
  TrainState<float> cold(tiny_net(), hp, tiny_mask(), Preset::GcT2);
  CHECK_THROWS_AS(stage2_iteration(cold, data), Error);
}

TEST_CASE("a large deviation weight keeps stage 2 near the frozen snapshot") {
  auto run = [](double lambda) {
    HyperParams hp = tiny_hp();
    ssgan::apply_preset(Preset::GcT2, hp);
    hp.losses.lambda = lambda;
    TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::GcT2);
    auto data = pool_provider<float>(16);
    stage1_iteration(st, data);
    st.frozen = st.nets.d.clone();
    for (int i = 0; i < 4; ++i) stage2_iteration(st, data);
    return distance_to_frozen(st);
  };
  const double loose = run(0.0);
  const double tight = run(1e4);
  CHECK(loose > 0.0);
  CHECK(tight > 0.0);
  CHECK(tight < loose);
}

TEST_CASE("the triplet-only preset never touches the generator") {
  TempDir dir("ssgan_trainer_t_only");
  HyperParams hp = tiny_hp();
  hp.t1 = 3;
  ssgan::apply_preset(Preset::T, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::T);
  auto data = pool_provider<float>(16);

  const auto g_before = g_values(st);
  const LossReport rep = triplet_only_iteration(st, data);
  CHECK(st.g_updates == 0);
  CHECK(st.d_updates == 1);
  CHECK(g_values(st) == g_before);
  CHECK(rep.total == rep.triplet);
  CHECK(rep.g_adv == 0.0);
  CHECK(rep.d_adv == 0.0);

  // Through the run loop: the checkpoint carries no generator tensors.
  ssgan::RunOptions opt;
  opt.out_dir = dir.path;
  const auto path = ssgan::run_training<float>(tiny_net(), hp, tiny_mask(), Preset::T, data, opt);
  const auto data_back = ssgan::load_checkpoint_file(path);
  CHECK(data_back.metadata.at("has_generator") == false);
  for (const auto& t : data_back.tensors) {
    CHECK(t.name.rfind("g.", 0) != 0);
    CHECK(t.name.rfind("adam.g.", 0) != 0);
  }
  auto st2 = ssgan::from_checkpoint<float>(data_back);
  CHECK(st2.t1_done == 3);
  CHECK(st2.g_updates == 0);
  CHECK(st2.d_updates == 3);
}

TEST_CASE("run_training writes the loss log and a final checkpoint") {
  TempDir dir("ssgan_trainer_run");
  HyperParams hp = tiny_hp();
  hp.t1 = 3;
  auto data = pool_provider<float>(16);

  std::vector<std::uint64_t> seen;
  ssgan::RunOptions opt;
  opt.out_dir = dir.path;
  opt.on_iter = [&seen](std::uint64_t iter, int stage, const LossReport&) {
    CHECK(stage == 1);
    seen.push_back(iter);
  };
  const auto path = ssgan::run_training<float>(tiny_net(), hp, tiny_mask(), Preset::Gc, data, opt);
  CHECK(path == dir.path + "/checkpoint.ssgf");
  CHECK(seen == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(!std::filesystem::exists(dir.file("checkpoint_stage1.ssgf")));  // not two-stage

  const auto lines = read_lines(dir.file("losses.csv"));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == ssgan::kLossCsvHeader);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv(lines[i]);
    REQUIRE(f.size() == 8);
    CHECK(f[0] == std::to_string(i));
    CHECK(f[1] == "1");
    CHECK(std::isfinite(std::stod(f[7])));
  }

  auto st = ssgan::from_checkpoint<float>(ssgan::load_checkpoint_file(path));
  CHECK(st.t1_done == 3);
  CHECK(st.t2_done == 0);
  CHECK(st.g_updates == 3);
  CHECK(st.d_updates == 6);
  CHECK(!st.frozen.has_value());
}

TEST_CASE("two-stage runs snapshot the stage boundary") {
  TempDir dir("ssgan_trainer_two_stage");
  HyperParams hp = tiny_hp();
  hp.t1 = 2;
  hp.t2 = 2;
  auto data = pool_provider<float>(16);
  ssgan::RunOptions opt;
  opt.out_dir = dir.path;
  const auto path =
      ssgan::run_training<float>(tiny_net(), hp, tiny_mask(), Preset::GcT2, data, opt);

  const auto boundary =
      ssgan::from_checkpoint<float>(ssgan::load_checkpoint_file(dir.file("checkpoint_stage1.ssgf")));
  CHECK(boundary.t1_done == 2);
  CHECK(boundary.t2_done == 0);
  CHECK(!boundary.frozen.has_value());

  auto final_st = ssgan::from_checkpoint<float>(ssgan::load_checkpoint_file(path));
  CHECK(final_st.t1_done == 2);
  CHECK(final_st.t2_done == 2);
  CHECK(final_st.frozen.has_value());
  CHECK(final_st.d_updates == 2 * 2 + 2);  // t_inner per stage-1 iter, then one per stage-2 iter

  const auto lines = read_lines(dir.file("losses.csv"));
  REQUIRE(lines.size() == 5);
  CHECK(split_csv(lines[1])[1] == "1");
  CHECK(split_csv(lines[2])[1] == "1");
  CHECK(split_csv(lines[3])[1] == "2");
  CHECK(split_csv(lines[4])[1] == "2");
  // Global iteration numbers keep counting across the boundary.
  CHECK(split_csv(lines[3])[0] == "3");
  CHECK(split_csv(lines[4])[0] == "4");
}

TEST_CASE("resuming reproduces the uninterrupted run row for row") {
  TempDir dir_a("ssgan_resume_a");
  TempDir dir_b("ssgan_resume_b");
  TempDir dir_c("ssgan_resume_c");
  const auto net = tiny_net();
  const auto mask = tiny_mask();
  auto data = pool_provider<float>(16);

  HyperParams hp = tiny_hp(21);
  hp.t1 = 3;
  hp.t2 = 2;

  // One uninterrupted run.
  ssgan::RunOptions opt_a;
  opt_a.out_dir = dir_a.path;
  ssgan::run_training<float>(net, hp, mask, Preset::GcMT2, data, opt_a);
  const auto rows_a = read_lines(dir_a.file("losses.csv"));
  REQUIRE(rows_a.size() == 6);

  // The same schedule split in two: stage 1 only, then resume into stage 2.
  HyperParams hp_b = hp;
  hp_b.t2 = 0;
  ssgan::RunOptions opt_b;
  opt_b.out_dir = dir_b.path;
  const auto mid = ssgan::run_training<float>(net, hp_b, mask, Preset::GcMT2, data, opt_b);
  const auto rows_b = read_lines(dir_b.file("losses.csv"));
  REQUIRE(rows_b.size() == 4);
  for (std::size_t i = 0; i < rows_b.size(); ++i) CHECK(rows_b[i] == rows_a[i]);

  ssgan::RunOptions opt_c;
  opt_c.out_dir = dir_c.path;
  opt_c.resume_from = mid;
  ssgan::run_training<float>(net, hp, mask, Preset::GcMT2, data, opt_c);
  const auto rows_c = read_lines(dir_c.file("losses.csv"));
  REQUIRE(rows_c.size() == 3);  // header + the two stage-2 rows
  CHECK(rows_c[0] == rows_a[0]);
  CHECK(rows_c[1] == rows_a[4]);
  CHECK(rows_c[2] == rows_a[5]);

  // The reconstruction column is active for this preset.
  CHECK(std::stod(split_csv(rows_a[1])[4]) > 0.0);

  // Resuming with a different configuration is refused.
  ssgan::RunOptions opt_bad;
  opt_bad.out_dir = dir_c.path;
  opt_bad.resume_from = mid;
  HyperParams hp_bad = hp;
  hp_bad.lr = 1e-3;
  try {
    ssgan::run_training<float>(net, hp_bad, mask, Preset::GcMT2, data, opt_bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
  }
  try {
    ssgan::run_training<float>(net, hp, mask, Preset::GcT2, data, opt_bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::config);
  }
}

TEST_CASE("checkpoints round-trip byte for byte") {
  TempDir dir("ssgan_ckpt_train_roundtrip");
  HyperParams hp = tiny_hp();
  hp.t1 = 2;
  hp.t2 = 1;
  auto data = pool_provider<float>(16);
  ssgan::RunOptions opt;
  opt.out_dir = dir.path;
  const auto path =
      ssgan::run_training<float>(tiny_net(), hp, tiny_mask(), Preset::GdBT2, data, opt);

  auto st = ssgan::from_checkpoint<float>(ssgan::load_checkpoint_file(path));
  const auto again = dir.file("again.ssgf");
  ssgan::save_checkpoint_file(again, ssgan::to_checkpoint(st));
  CHECK(file_bytes(path) == file_bytes(again));
}

TEST_CASE("damaged training checkpoints are rejected by category") {
  HyperParams hp = tiny_hp();
  ssgan::apply_preset(Preset::Gc, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::Gc);

  auto data = ssgan::to_checkpoint(st);

  auto missing = data;
  missing.tensors.pop_back();
  try {
    ssgan::from_checkpoint<float>(missing);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::corrupt);
    CHECK(std::string(e.what()).find("missing tensor") != std::string::npos);
  }

  auto extra = data;
  ssgan::TensorBlob bogus;
  bogus.name = "mystery";
  bogus.dtype = "f32";
  bogus.shape = {1};
  bogus.bytes = {0, 0, 0, 0};
  extra.tensors.push_back(bogus);
  try {
    ssgan::from_checkpoint<float>(extra);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::corrupt);
    CHECK(std::string(e.what()).find("unexpected tensor") != std::string::npos);
  }

  try {
    ssgan::from_checkpoint<double>(data);  // dtype mismatch
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::unsupported);
  }

  auto not_training = data;
  not_training.metadata["format"] = "something-else";
  try {
    ssgan::from_checkpoint<float>(not_training);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::unsupported);
  }

  auto bad_shape = data;
  bad_shape.tensors[0].shape = {1};
  bad_shape.tensors[0].bytes = {0, 0, 0, 0};
  try {
    ssgan::from_checkpoint<float>(bad_shape);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::corrupt);
  }
}

TEST_CASE("training surfaces provider geometry errors") {
  HyperParams hp = tiny_hp();
  ssgan::apply_preset(Preset::Gc, hp);
  TrainState<float> st(tiny_net(), hp, tiny_mask(), Preset::Gc);
  BatchProvider<float> bad = [](std::size_t n, Rng&) {
    return Tensor<float>::zeros({n, 3, 8, 8});  // wrong image size
  };
  try {
    stage1_iteration(st, bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::shape_mismatch);
  }
}

TEST_CASE("dataset batches come from the training split with values in range") {
  TempDir dir("ssgan_trainer_dataset");
  ssgan::SyntheticSpec spec;
  spec.n_train_classes = 2;
  spec.n_test_classes = 2;
  spec.per_class = 3;
  spec.image_size = 16;
  spec.seed = 4;
  ssgan::gen_synthetic(dir.path, spec);
  const auto ds = ssgan::load_dataset(dir.path, 16, 3);

  auto provider = ssgan::dataset_provider<float>(ds);
  Rng r1(5), r2(5);
  auto b1 = provider(3, r1);
  auto b2 = provider(3, r2);
  CHECK(b1.shape() == std::vector<std::size_t>{3, 3, 16, 16});
  CHECK(b1.values() == b2.values());
  for (std::size_t i = 0; i < b1.numel(); ++i) {
    CHECK(b1.data()[i] >= -1.0f);
    CHECK(b1.data()[i] <= 1.0f);
  }

  // Batches must be drawn from training rows only: every drawn image matches
  // one of the training images byte for byte.
  const std::size_t sz = ds.images[ds.train_rows[0]].numel();
  for (std::size_t i = 0; i < 3; ++i) {
    bool found = false;
    for (const std::size_t row : ds.train_rows) {
      if (std::memcmp(b1.data() + i * sz, ds.images[row].data(), sz * sizeof(float)) == 0) {
        found = true;
        break;
      }
    }
    CHECK(found);
  }
}
