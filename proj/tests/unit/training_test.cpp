#include <catch2/catch_amalgamated.hpp>

#include "unblur/glyphs.hpp"
#include "unblur/training.hpp"
#include "support/test_util.hpp"

using namespace unblur;

namespace {

TrainConfig tiny_config(AblationPreset preset = AblationPreset::full) {
  TrainConfig cfg;
  cfg.net.image_channels = 3;
  cfg.net.base_width = 4;
  cfg.net.latent_dim = 2;
  cfg.net.disc_scales = 2;
  cfg.net.crop_size = 16;
  cfg.batch_size = 2;
  cfg.d_steps_per_g = 2;
  cfg.ablation_preset = preset;
  cfg.master_seed = 5;
  return cfg;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> tiny_batch(const TrainConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  return {testutil::random_tensor<T>(
              {cfg.batch_size, 3, cfg.net.crop_size, cfg.net.crop_size}, rng),
          testutil::random_tensor<T>(
              {cfg.batch_size, 3, cfg.net.crop_size, cfg.net.crop_size}, rng)};
}

template <typename T>
bool params_equal(const ModelState<T>& a, const ModelState<T>& b) {
  for (const auto& [name, t] : a.params.map()) {
    const Tensor<T>& u = b.params.get(name);
    for (int64_t i = 0; i < t.numel(); ++i)
      if (t[i] != u[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("learning-rate schedule: flat phase then two-decade decay") {
  TrainConfig cfg;  // 40 + 40 epochs, lr0 = 2e-4
  REQUIRE(lr_at(0, cfg) == 2e-4);
  REQUIRE(lr_at(39, cfg) == 2e-4);
  REQUIRE(lr_at(79, cfg) == Catch::Approx(2e-6).epsilon(1e-9));
  double prev = lr_at(0, cfg);
  for (int e = 1; e < 80; ++e) {
    const double lr = lr_at(e, cfg);
    REQUIRE(lr <= prev);
    prev = lr;
  }
  REQUIRE_THROWS_AS(lr_at(-1, cfg), ParamError);
  REQUIRE_THROWS_AS(lr_at(80, cfg), ParamError);
}

TEST_CASE("translation bundle carries every field at matching shapes") {
  const auto cfg = tiny_config();
  auto m = init_model<float>(cfg.net, 1, cfg.use_blur_code());
  const auto [b, s] = tiny_batch<float>(cfg, 10);
  Rng rng(11);
  const auto n1 = detail::make_noise<float>(rng, cfg.batch_size, 2);
  const auto n2 = detail::make_noise<float>(rng, cfg.batch_size, 2);
  const auto t = forward_backward_translate(m, b, s, n1, n2, cfg);
  REQUIRE(t.s_b.shape() == b.shape());
  REQUIRE(t.b_s.shape() == b.shape());
  REQUIRE(t.b_hat.shape() == b.shape());
  REQUIRE(t.s_hat.shape() == b.shape());
  REQUIRE(t.post_b.mu.shape() == std::vector<int>{cfg.batch_size, 2});
  REQUIRE(t.post_bs.mu.shape() == std::vector<int>{cfg.batch_size, 2});
  REQUIRE(t.code_forward.z.same_shape(n1));
  REQUIRE(t.code_backward.z.same_shape(n2));

  // deterministic for fixed inputs
  const auto t2 = forward_backward_translate(m, b, s, n1, n2, cfg);
  REQUIRE(mean_abs_diff(t.s_b, t2.s_b) == 0.0);
  REQUIRE(mean_abs_diff(t.b_hat, t2.b_hat) == 0.0);
}

TEST_CASE("deblur_only variant drops the blurring branch outputs") {
  const auto cfg = tiny_config(AblationPreset::deblur_only);
  auto m = init_model<float>(cfg.net, 2, cfg.use_blur_code());
  const auto [b, s] = tiny_batch<float>(cfg, 12);
  const auto t =
      forward_backward_translate(m, b, s, Tensor<float>(), Tensor<float>(), cfg);
  REQUIRE(t.s_b.shape() == b.shape());
  REQUIRE(t.b_s.empty());
  REQUIRE(t.b_hat.empty());
  REQUIRE(t.s_hat.empty());
  REQUIRE(t.post_b.mu.empty());
}

TEST_CASE("generator gradients of the full objective match finite differences") {
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 1;
  auto m = init_model<double>(cfg.net, 3, cfg.use_blur_code());
  const auto [b, s] = tiny_batch<double>(cfg, 13);
  Rng rng(14);
  const auto n1 = detail::make_noise<double>(rng, 1, 2);
  const auto n2 = detail::make_noise<double>(rng, 1, 2);
  SurrogateExtractor<double> extractor(21, 3, 1, 4);

  nn::ParamStore<double> grads;
  detail::generator_pass(m, cfg, &extractor, b, s, n1, n2, grads);

  auto loss = [&] {
    nn::ParamStore<double> scratch;
    return static_cast<double>(
        detail::generator_pass(m, cfg, &extractor, b, s, n1, n2, scratch).total);
  };

  Rng pick(15);
  const auto names = m.generator_side_params();
  double worst = 0;
  std::string worst_name;
  for (int probe = 0; probe < 40; ++probe) {
    const auto& name = names[static_cast<size_t>(
        pick.uniform_int(static_cast<int>(names.size())))];
    if (!grads.has(name)) continue;
    Tensor<double>& theta = m.params.get(name);
    const int64_t i = pick.uniform_int(static_cast<int>(theta.numel()));
    const double numeric = testutil::central_diff(loss, theta[i], 1e-5);
    const double analytic = grads.get(name)[i];
    const double err = std::abs(analytic - numeric) /
                       std::max({1e-4, std::abs(analytic), std::abs(numeric)});
    if (err > worst) {
      worst = err;
      worst_name = name + "[" + std::to_string(i) + "]";
    }
  }
  INFO("worst: " << worst_name);
  REQUIRE(worst < 5e-3);
}

TEST_CASE("generator gradients also check out without the blur code") {
  TrainConfig cfg = tiny_config(AblationPreset::add_blurring_branch);
  cfg.batch_size = 1;
  auto m = init_model<double>(cfg.net, 4, cfg.use_blur_code());
  const auto [b, s] = tiny_batch<double>(cfg, 16);

  nn::ParamStore<double> grads;
  detail::generator_pass<double>(m, cfg, nullptr, b, s, Tensor<double>(),
                         Tensor<double>(), grads);
  auto loss = [&] {
    nn::ParamStore<double> scratch;
    return static_cast<double>(detail::generator_pass<double>(m, cfg, nullptr, b, s,
                                                      Tensor<double>(),
                                                      Tensor<double>(), scratch)
                                   .total);
  };
  Rng pick(17);
  const auto names = m.generator_side_params();
  for (int probe = 0; probe < 25; ++probe) {
    const auto& name = names[static_cast<size_t>(
        pick.uniform_int(static_cast<int>(names.size())))];
    if (!grads.has(name)) continue;
    Tensor<double>& theta = m.params.get(name);
    const int64_t i = pick.uniform_int(static_cast<int>(theta.numel()));
    const double numeric = testutil::central_diff(loss, theta[i], 1e-5);
    const double analytic = grads.get(name)[i];
    REQUIRE(std::abs(analytic - numeric) /
                std::max({1e-4, std::abs(analytic), std::abs(numeric)}) <
            5e-3);
  }
}

TEST_CASE("discriminator gradients match finite differences") {
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 1;
  auto m = init_model<double>(cfg.net, 5, cfg.use_blur_code());
  const auto [b, s] = tiny_batch<double>(cfg, 18);
  Rng rng(19);
  const auto noise = detail::make_noise<double>(rng, 1, 2);

  nn::ParamStore<double> grads;
  detail::discriminator_pass(m, cfg, b, s, noise, grads);
  auto loss = [&] {
    nn::ParamStore<double> scratch;
    return static_cast<double>(
        detail::discriminator_pass(m, cfg, b, s, noise, scratch));
  };
  Rng pick(20);
  const auto names = m.discriminator_side_params();
  for (int probe = 0; probe < 25; ++probe) {
    const auto& name = names[static_cast<size_t>(
        pick.uniform_int(static_cast<int>(names.size())))];
    if (!grads.has(name)) continue;
    Tensor<double>& theta = m.params.get(name);
    const int64_t i = pick.uniform_int(static_cast<int>(theta.numel()));
    const double numeric = testutil::central_diff(loss, theta[i], 1e-5);
    const double analytic = grads.get(name)[i];
    REQUIRE(std::abs(analytic - numeric) /
                std::max({1e-4, std::abs(analytic), std::abs(numeric)}) <
            5e-3);
  }
}

TEST_CASE("train_step keeps the shared tie bitwise intact") {
  const auto cfg = tiny_config();
  auto m = init_model<float>(cfg.net, 6, cfg.use_blur_code());
  TrainerState<float> trainer;
  SurrogateExtractor<float> extractor(7, 3, 1, 4);
  const auto [b, s] = tiny_batch<float>(cfg, 21);
  for (int step = 0; step < 5; ++step)
    train_step(m, b, s, trainer, cfg, &extractor, 2e-4,
               derive_seed(100, "step", step));
  // the shared block is single storage; both name sets resolve to it
  for (const auto& name : m.shared_param_names()) {
    REQUIRE(m.params.map().count(name) == 1);
    REQUIRE(m.params.get(name).all_finite());
  }
  // and the optimizer touched it exactly once per step (gradients from
  // both encoders accumulate into one tensor)
  REQUIRE(trainer.gen.m.has(m.shared_param_names().front()));
}

TEST_CASE("zero learning rate leaves the model unchanged") {
  const auto cfg = tiny_config();
  auto m = init_model<float>(cfg.net, 7, cfg.use_blur_code());
  const auto before = init_model<float>(cfg.net, 7, cfg.use_blur_code());
  TrainerState<float> trainer;
  SurrogateExtractor<float> extractor(7, 3, 1, 4);
  const auto [b, s] = tiny_batch<float>(cfg, 22);
  train_step(m, b, s, trainer, cfg, &extractor, 0.0, 0);
  REQUIRE(params_equal(m, before));
}

TEST_CASE("train_step is deterministic for a fixed seed") {
  const auto cfg = tiny_config();
  const auto [b, s] = tiny_batch<float>(cfg, 23);
  SurrogateExtractor<float> extractor(7, 3, 1, 4);

  auto run = [&] {
    auto m = init_model<float>(cfg.net, 8, cfg.use_blur_code());
    TrainerState<float> trainer;
    return train_step(m, b, s, trainer, cfg, &extractor, 2e-4, 31337);
  };
  const auto l1 = run();
  const auto l2 = run();
  REQUIRE(l1.kl == l2.kl);
  REQUIRE(l1.adv_ds == l2.adv_ds);
  REQUIRE(l1.adv_db == l2.adv_db);
  REQUIRE(l1.cycle == l2.cycle);
  REQUIRE(l1.perceptual == l2.perceptual);
  REQUIRE(l1.total == l2.total);
}

TEST_CASE("non-finite losses abort with the offending term named") {
  const auto cfg = tiny_config();
  auto m = init_model<float>(cfg.net, 9, cfg.use_blur_code());
  m.params.get("gen_s.res1.conv1.w")[0] =
      std::numeric_limits<float>::quiet_NaN();
  TrainerState<float> trainer;
  SurrogateExtractor<float> extractor(7, 3, 1, 4);
  const auto [b, s] = tiny_batch<float>(cfg, 24);
  REQUIRE_THROWS_AS(train_step(m, b, s, trainer, cfg, &extractor, 2e-4, 0),
                    NumericError);
}

TEST_CASE("deblur is shape-preserving and deterministic") {
  const auto cfg = tiny_config();
  const auto m = init_model<float>(cfg.net, 10, cfg.use_blur_code());
  Rng rng(25);
  const auto img = testutil::random_tensor<float>({3, 16, 16}, rng);
  const auto out1 = deblur(m, img);
  const auto out2 = deblur(m, img);
  REQUIRE(out1.shape() == img.shape());
  REQUIRE(mean_abs_diff(out1, out2) == 0.0);
}

TEST_CASE("a one-epoch run emits a checkpoint and a metrics log") {
  const auto dir = testutil::temp_dir("train_one_epoch");
  const auto sharp_manifest = make_glyph_corpus(dir / "sharp", 8, 16, 60, 3);
  BlurredSetOptions opts;
  opts.trajectory.seed = 61;
  opts.trajectory.max_len = 3;
  opts.kernel_size = 9;
  const Manifest blurred =
      build_blurred_set(read_manifest(sharp_manifest), dir / "blurred", opts);
  write_manifest(dir / "blurred" / "manifest.tsv", blurred);

  TrainConfig cfg = tiny_config();
  cfg.epochs_flat = 1;
  cfg.epochs_decay = 0;
  cfg.iters_per_epoch = 2;
  const auto outcome = train<float>(cfg, sharp_manifest,
                                    dir / "blurred" / "manifest.tsv", dir / "run");
  REQUIRE(std::filesystem::exists(outcome.final_checkpoint));
  REQUIRE(std::filesystem::exists(dir / "run" / "metrics.tsv"));
  REQUIRE(std::filesystem::exists(dir / "run" / "config_echo.txt"));
  REQUIRE(outcome.epochs_run == 1);

  std::ifstream log(dir / "run" / "metrics.tsv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  REQUIRE(lines == 2);

  // resume with a different config must be rejected
  TrainConfig other = cfg;
  other.weights.lambda_cc = 5;
  REQUIRE_THROWS_AS(train<float>(other, sharp_manifest,
                                 dir / "blurred" / "manifest.tsv", dir / "run2",
                                 outcome.final_checkpoint),
                    DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty manifests are rejected") {
  const auto dir = testutil::temp_dir("train_empty");
  Manifest empty;
  empty.base_dir = dir;
  write_manifest(dir / "empty.tsv", empty);
  TrainConfig cfg = tiny_config();
  REQUIRE_THROWS_AS(
      train<float>(cfg, dir / "empty.tsv", dir / "empty.tsv", dir / "run"),
      DataError);
  std::filesystem::remove_all(dir);
}
