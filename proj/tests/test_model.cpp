#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tmmnn/checkpoint.hpp"
#include "tmmnn/model.hpp"

using namespace tmmnn;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.input_extents = {1, 8, 8};
  cfg.hidden_widths = {8};
  cfg.num_classes = 3;
  cfg.seed = 99;
  return cfg;
}

SplitDataset desk_data(std::uint64_t seed = 2024) {
  SyntheticSpec spec;  // 4 classes, 8x8, 250/class
  return generate_synthetic(spec, seed);
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(Real) * size_t(a.size())) == 0;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("init_model layer shapes and parameter count") {
  auto model = init_model(small_config());
  REQUIRE(model.num_layers() == 2);
  CHECK(model.weights()[0].rows() == 64);
  CHECK(model.weights()[0].cols() == 8);
  CHECK(model.weights()[1].rows() == 8);
  CHECK(model.weights()[1].cols() == 4);  // C+1 outputs
  CHECK(model.parameter_count() == 556);  // 64*8 + 8 + 8*4 + 4
}

TEST_CASE("init_model is seed-deterministic with zero biases") {
  auto a = init_model(small_config());
  auto b = init_model(small_config());
  for (int l = 0; l < a.num_layers(); ++l) {
    CHECK(bitwise_equal(a.weights()[size_t(l)], b.weights()[size_t(l)]));
    CHECK(a.biases()[size_t(l)].isZero(0));
  }
  auto cfg2 = small_config();
  cfg2.seed = 100;
  auto c = init_model(cfg2);
  CHECK_FALSE(bitwise_equal(a.weights()[0], c.weights()[0]));
}

TEST_CASE("invalid config rejected") {
  auto cfg = small_config();
  cfg.num_classes = 1;
  CHECK_THROWS_AS((void)init_model(cfg), ConfigError);
  cfg = small_config();
  cfg.hidden_widths.clear();
  CHECK_THROWS_AS((void)init_model(cfg), ConfigError);
  cfg = small_config();
  cfg.input_extents = {1, 0, 8};
  CHECK_THROWS_AS((void)init_model(cfg), ConfigError);
}

TEST_CASE("logits shape, batching and composition") {
  auto model = init_model(small_config());
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni{0.0, 1.0};
  Mat batch(3, 64);
  for (Index i = 0; i < batch.size(); ++i) batch.data()[i] = Real(uni(rng));

  Mat z = model.logits(batch);
  CHECK(z.cols() == 4);

  // single row inside a batch matches the row alone
  Mat single = model.logits(Mat(batch.row(1)));
  CHECK(bitwise_equal(single, Mat(z.row(1))));

  // logits == final affine applied to penultimate features, exactly
  Mat h = model.penultimate_features(batch);
  CHECK(h.cols() == 8);
  Mat z2 = h * model.weights().back();
  z2.rowwise() += model.biases().back().row(0);
  CHECK(bitwise_equal(z, z2));

  // and matches a manual composition through the autodiff primitives
  TapeModel tm = lift(model, {});
  Tape tape;
  auto zt = tm.logits_on(tape, make_leaf<Real>(batch));
  CHECK(bitwise_equal(z, zt->value));

  Mat bad(1, 63);
  bad.setZero();
  CHECK_THROWS_AS((void)model.logits(bad), DimensionError);
}

TEST_CASE("predict_proba rows normalize and saturate") {
  auto model = init_model(small_config());
  Mat x = Mat::Constant(2, 64, 0.5f);
  Mat p = model.predict_proba(x);
  for (Index i = 0; i < p.rows(); ++i)
    CHECK(std::abs(double(p.row(i).sum()) - 1.0) < 1e-6);

  Mat logits = Mat::Zero(1, 4);
  logits(0, 3) = 30.0f;
  Mat sp = softmax_rows(logits);
  CHECK(double(sp(0, 3)) > 1.0 - 1e-9);

  // exp-normalize oracle on random logits
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni{-3.0, 3.0};
  Mat rl(1, 4);
  for (Index j = 0; j < 4; ++j) rl(0, j) = Real(uni(rng));
  Mat got = softmax_rows(rl);
  double denom = 0.0;
  for (Index j = 0; j < 4; ++j) denom += std::exp(double(rl(0, j)));
  for (Index j = 0; j < 4; ++j)
    CHECK(std::abs(double(got(0, j)) - std::exp(double(rl(0, j))) / denom) < 1e-6);
}

TEST_CASE("training on the synthetic set reaches high accuracy") {
  auto data = desk_data();
  ModelConfig cfg;
  cfg.input_extents = {1, 8, 8};
  cfg.num_classes = data.train.num_classes;
  cfg.seed = 7;
  auto model = init_model(cfg);

  // 0 epochs leaves the model untouched
  auto before = model.weights()[0];
  auto hist0 = train_classifier(model, data.train, 0, 1e-3f, 64, 3);
  CHECK(hist0.epoch_losses.empty());
  CHECK(bitwise_equal(before, model.weights()[0]));

  auto hist = train_classifier(model, data.train, 30, 1e-3f, 64, 3);
  REQUIRE(hist.epoch_losses.size() == 30);
  CHECK(hist.epoch_losses.back() < hist.epoch_losses.front());
  CHECK(model.accuracy(data.train) >= 0.95);

  // pretraining leaves the dummy class starved of probability mass
  Mat p = model.predict_proba(data.train.samples);
  CHECK(double(p.col(cfg.dummy_index()).mean()) < 0.05);

  // dummy labels are rejected
  Dataset bad = data.train;
  bad.labels[0] = cfg.dummy_index();
  bad.num_classes = cfg.dummy_index() + 1;  // sneak past label validation
  CHECK_THROWS_AS((void)train_classifier(model, bad, 1, 1e-3f, 64, 3), DataError);
}

TEST_CASE("estimate_fisher is non-negative and matches the loop oracle") {
  auto data = desk_data();
  ModelConfig cfg;
  cfg.num_classes = data.train.num_classes;
  cfg.seed = 11;
  auto model = init_model(cfg);
  train_classifier(model, data.train, 3, 1e-3f, 64, 5);

  auto fisher = estimate_fisher(model, data.train, 3, 42);
  CHECK(fisher.samples == 3);
  for (const auto& w : fisher.weights) CHECK(w.minCoeff() >= 0.0f);
  for (const auto& b : fisher.biases) CHECK(b.minCoeff() >= 0.0f);

  // independent oracle: replicate the sampling and average squared grads
  std::vector<Index> order(size_t(data.train.size()));
  std::iota(order.begin(), order.end(), Index(0));
  auto rng = make_rng(42, {0xF154ULL});
  std::shuffle(order.begin(), order.end(), rng);

  Mat acc = Mat::Zero(model.weights().back().rows(), model.weights().back().cols());
  for (Index s = 0; s < 3; ++s) {
    const Index i = order[size_t(s)];
    TapeModel tm =
        lift(model, {0, model.final_layer()});  // grads on final layer suffice
    Tape tape;
    auto loss = softmax_cross_entropy(
        tape, tm.logits_on(tape, make_leaf<Real>(data.train.samples.row(i))),
        {data.train.labels[size_t(i)]});
    tape.backward(loss);
    auto g = tm.weights[size_t(model.final_layer())];
    g->ensure_grad();
    acc += g->grad.cwiseProduct(g->grad);
  }
  acc /= 3.0f;
  CHECK((acc - fisher.weights.back()).cwiseAbs().maxCoeff() < 1e-9f);

  CHECK_THROWS_AS((void)estimate_fisher(model, data.train, 0, 1), ContractError);
}

TEST_CASE("fisher of an unreachable parameter block is zero") {
  // With a dead input column (all-zero pixels feed weights that never see
  // gradient) the corresponding Fisher entries stay exactly zero.
  ModelConfig cfg = small_config();
  auto model = init_model(cfg);
  Dataset tiny;
  tiny.samples = Mat::Zero(2, 64);
  tiny.samples(0, 0) = 1.0f;  // only pixel 0 carries signal
  tiny.samples(1, 0) = 0.5f;
  tiny.labels = {0, 1};
  tiny.extents = {1, 8, 8};
  tiny.num_classes = 3;
  auto fisher = estimate_fisher(model, tiny, 2, 9);
  // rows of W0 for pixels 1..63 receive zero gradient
  CHECK(fisher.weights[0].bottomRows(63).isZero(0));
  CHECK(fisher.weights[0].row(0).maxCoeff() > 0.0f);
}

TEST_CASE("checkpoint round-trip is bitwise") {
  auto model = init_model(small_config());
  const auto path = temp_path("tmmnn_test_ckpt.tmmn");
  save_checkpoint(model, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.config() == model.config());
  for (int l = 0; l < model.num_layers(); ++l) {
    CHECK(bitwise_equal(loaded.weights()[size_t(l)], model.weights()[size_t(l)]));
    CHECK(bitwise_equal(loaded.biases()[size_t(l)], model.biases()[size_t(l)]));
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects corruption") {
  auto model = init_model(small_config());
  const auto path = temp_path("tmmnn_test_ckpt_bad.tmmn");
  save_checkpoint(model, path);

  // corrupt magic
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), FormatError);

  // version mismatch
  save_checkpoint(model, path);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    const char v[2] = {9, 0};
    f.write(v, 2);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), FormatError);

  // truncated payload
  save_checkpoint(model, path);
  {
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full - 64);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header offsets tile the payload exactly") {
  auto model = init_model(small_config());
  const auto path = temp_path("tmmnn_test_ckpt_hdr.tmmn");
  save_checkpoint(model, path);

  std::ifstream f(path, std::ios::binary);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= std::uint64_t(std::uint8_t(buf[6 + size_t(i)])) << (8 * i);
  auto header = nlohmann::json::parse(buf.substr(14, hlen));
  std::uint64_t total = 0;
  for (const auto& rec : header["layers"]) {
    CHECK(rec["byte_offset"].get<std::uint64_t>() == total);
    total += rec["byte_len"].get<std::uint64_t>();
  }
  CHECK(total == buf.size() - 14 - hlen);
  std::filesystem::remove(path);
}
