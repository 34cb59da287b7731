#include <catch2/catch_amalgamated.hpp>

#include "unblur/checkpoint.hpp"
#include "unblur/training.hpp"
#include "support/test_util.hpp"

using namespace unblur;

TEST_CASE("containers round-trip tensors and metadata") {
  const auto dir = testutil::temp_dir("container");
  Container c;
  c.meta["epoch"] = 7;
  c.meta["note"] = "x";
  Rng rng(1);
  c.tensors.emplace("a.w", testutil::random_tensor<float>({2, 3, 4}, rng));
  c.tensors.emplace("b", testutil::random_tensor<float>({5}, rng));
  write_container(dir / "c.ckpt", c);

  const Container back = read_container(dir / "c.ckpt");
  REQUIRE(back.meta["epoch"] == 7);
  REQUIRE(back.tensors.size() == 2);
  REQUIRE(back.tensors.at("a.w").shape() == std::vector<int>{2, 3, 4});
  for (int64_t i = 0; i < 5; ++i)
    REQUIRE(back.tensors.at("b")[i] == c.tensors.at("b")[i]);

  // corrupt magic
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << "NOTACKPT garbage";
  }
  REQUIRE_THROWS_AS(read_container(dir / "bad.ckpt"), DataError);
  REQUIRE_THROWS_AS(read_container(dir / "missing.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train checkpoints restore the exact model and optimizer state") {
  const auto dir = testutil::temp_dir("train_ckpt");
  TrainConfig cfg;
  cfg.net.base_width = 4;
  cfg.net.latent_dim = 2;
  cfg.net.crop_size = 16;
  cfg.batch_size = 2;
  cfg.master_seed = 99;

  auto model = init_model<float>(cfg.net, cfg.master_seed, cfg.use_blur_code());
  TrainerState<float> trainer;
  SurrogateExtractor<float> extractor(7, 3, 1, 4);
  Rng rng(2);
  const auto b = testutil::random_tensor<float>({2, 3, 16, 16}, rng);
  const auto s = testutil::random_tensor<float>({2, 3, 16, 16}, rng);
  for (int i = 0; i < 3; ++i)
    train_step(model, b, s, trainer, cfg, &extractor, 2e-4, 1000 + i);

  save_train_checkpoint(dir / "e3.ckpt", model, trainer, cfg, 3);
  const auto loaded = load_train_checkpoint<float>(dir / "e3.ckpt");
  REQUIRE(loaded.epoch == 3);
  REQUIRE(config_hash(loaded.cfg) == config_hash(cfg));
  for (const auto& [name, t] : model.params.map()) {
    const auto& u = loaded.model.params.get(name);
    for (int64_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == u[i]);
  }
  REQUIRE(loaded.trainer.gen.t == trainer.gen.t);
  REQUIRE(loaded.trainer.disc.t == trainer.disc.t);
  for (const auto& [name, t] : trainer.gen.m.map()) {
    const auto& u = loaded.trainer.gen.m.get(name);
    for (int64_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == u[i]);
  }
  for (const auto& [name, t] : trainer.disc.v.map()) {
    const auto& u = loaded.trainer.disc.v.get(name);
    for (int64_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == u[i]);
  }

  // shared parameters are stored once under the canonical name
  const Container raw = read_container(dir / "e3.ckpt");
  for (const auto& name : model.shared_param_names()) {
    REQUIRE(raw.tensors.count("model." + name) == 1);
    REQUIRE(raw.tensors.count("model.enc_cb." + name) == 0);
    REQUIRE(raw.tensors.count("model.enc_cs." + name) == 0);
  }

  // and the tie survives the round trip: identical storage through both
  // encoder views
  const auto shared = loaded.model.shared_param_names();
  const auto names_b = loaded.model.enc_content_blurred.param_names();
  const auto names_s = loaded.model.enc_content_sharp.param_names();
  for (const auto& n : shared) {
    REQUIRE(std::count(names_b.begin(), names_b.end(), n) == 1);
    REQUIRE(std::count(names_s.begin(), names_s.end(), n) == 1);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("file-backed feature extractors load from containers") {
  const auto dir = testutil::temp_dir("extractor");
  // export a tiny random conv stack
  Container c;
  Rng rng(3);
  c.tensors.emplace("conv1_1.w", testutil::random_tensor<float>({4, 3, 3, 3}, rng, -0.2, 0.2));
  c.tensors.emplace("conv1_1.b", testutil::random_tensor<float>({4}, rng, -0.1, 0.1));
  c.tensors.emplace("conv2_1.w", testutil::random_tensor<float>({6, 4, 3, 3}, rng, -0.2, 0.2));
  c.tensors.emplace("conv2_1.b", testutil::random_tensor<float>({6}, rng, -0.1, 0.1));
  c.meta["extractor"] = {
      {"input_channels", 3},
      {"layers",
       {{{"type", "conv"}, {"name", "conv1_1"}, {"stride", 1}, {"pad", 1}},
        {{"type", "relu"}},
        {{"type", "maxpool"}},
        {{"type", "conv"}, {"name", "conv2_1"}, {"stride", 1}, {"pad", 1}},
        {{"type", "relu"}}}}};
  write_container(dir / "vgg_prefix.ckpt", c);

  FileFeatureExtractor<float> extractor(dir / "vgg_prefix.ckpt");
  Rng rng2(4);
  const auto img = testutil::random_tensor<float>({3, 16, 16}, rng2);
  const auto feat = extractor.features(img);
  REQUIRE(feat.shape() == std::vector<int>{6, 8, 8});
  REQUIRE(feat.all_finite());

  // identical inputs produce identical features (pure function of file)
  FileFeatureExtractor<float> again(dir / "vgg_prefix.ckpt");
  REQUIRE(mean_abs_diff(feat, again.features(img)) == 0.0);

  REQUIRE_THROWS_AS(FileFeatureExtractor<float>(dir / "nope.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}
