#include "tmmnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tmmnn/optim.hpp"

namespace tmmnn {

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (hidden_widths.empty())
    throw ConfigError("model: hidden_widths must be non-empty");
  for (int w : hidden_widths)
    if (w < 1) throw ConfigError("model: hidden width must be positive");
  for (int e : input_extents)
    if (e < 1) throw ConfigError("model: input extents must be positive");
}

Classifier::Classifier(ModelConfig cfg, std::vector<Mat> weights,
                       std::vector<Mat> biases)
    : cfg_(std::move(cfg)), weights_(std::move(weights)),
      biases_(std::move(biases)) {
  cfg_.validate();
  if (weights_.size() != biases_.size() ||
      weights_.size() != cfg_.hidden_widths.size() + 1)
    throw DimensionError("classifier: layer count mismatch");
  Index in = cfg_.input_dim();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Index out = l < cfg_.hidden_widths.size()
                          ? Index(cfg_.hidden_widths[l])
                          : Index(cfg_.output_dim());
    if (weights_[l].rows() != in || weights_[l].cols() != out ||
        biases_[l].rows() != 1 || biases_[l].cols() != out)
      throw DimensionError("classifier: layer " + std::to_string(l) +
                           " shapes do not chain");
    in = out;
  }
}

void Classifier::check_input(const Mat& batch) const {
  if (batch.cols() != cfg_.input_dim())
    throw DimensionError("classifier: input width " +
                         std::to_string(batch.cols()) + ", expected " +
                         std::to_string(cfg_.input_dim()));
}

void Classifier::set_input_stats(const Mat& mu, const Mat& sigma) {
  if (mu.rows() != 1 || mu.cols() != cfg_.input_dim() || sigma.rows() != 1 ||
      sigma.cols() != cfg_.input_dim())
    throw DimensionError("classifier: input stats must be 1 x input_dim");
  mu_ = mu;
  inv_sigma_ = sigma.cwiseMax(Real(1e-3)).cwiseInverse();
}

void Classifier::set_input_stats_inv(Mat mu, Mat inv_sigma) {
  if (mu.rows() != 1 || mu.cols() != cfg_.input_dim() || inv_sigma.rows() != 1 ||
      inv_sigma.cols() != cfg_.input_dim())
    throw DimensionError("classifier: input stats must be 1 x input_dim");
  mu_ = std::move(mu);
  inv_sigma_ = std::move(inv_sigma);
}

std::pair<Mat, Mat> pixel_stats(const Dataset& data) {
  if (data.size() == 0) throw DataError("pixel_stats: empty dataset");
  Mat mu(1, data.dim()), sigma(1, data.dim());
  for (Index j = 0; j < data.dim(); ++j) {
    const double m = data.samples.col(j).cast<double>().mean();
    const double var =
        (data.samples.col(j).cast<double>().array() - m).square().sum() /
        double(data.size());
    mu(0, j) = Real(m);
    sigma(0, j) = Real(std::sqrt(var));
  }
  return {mu, sigma};
}

Mat Classifier::penultimate_features(const Mat& batch) const {
  check_input(batch);
  Mat h = batch;
  if (cfg_.normalize_input && mu_.size() > 0) {
    h.rowwise() -= mu_.row(0);
    for (Index i = 0; i < h.rows(); ++i)
      h.row(i) = h.row(i).cwiseProduct(inv_sigma_.row(0));
  }
  for (std::size_t l = 0; l + 1 < weights_.size(); ++l) {
    Mat z = h * weights_[l];
    z.rowwise() += biases_[l].row(0);
    h = z.cwiseMax(Real(0));
  }
  return h;
}

Mat Classifier::logits(const Mat& batch) const {
  Mat h = penultimate_features(batch);
  Mat z = h * weights_.back();
  z.rowwise() += biases_.back().row(0);
  return z;
}

Mat softmax_rows(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Real m = logits.row(i).maxCoeff();
    Eigen::Array<Real, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
    p.row(i) = (e / Real(e.template cast<double>().sum())).matrix();
  }
  return p;
}

Mat Classifier::predict_proba(const Mat& batch) const {
  return softmax_rows(logits(batch));
}

double Classifier::accuracy(const Dataset& data) const {
  const Mat z = logits(data.samples);
  Index hits = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    Index arg = 0;
    z.row(i).maxCoeff(&arg);
    if (int(arg) == data.labels[size_t(i)]) ++hits;
  }
  return data.size() == 0 ? 0.0 : double(hits) / double(data.size());
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights_) n += std::size_t(w.size());
  for (const auto& b : biases_) n += std::size_t(b.size());
  return n;
}

Classifier init_model(const ModelConfig& config) {
  config.validate();
  std::vector<Mat> ws, bs;
  Index in = config.input_dim();
  const int layers = int(config.hidden_widths.size()) + 1;
  for (int l = 0; l < layers; ++l) {
    const Index out = l < int(config.hidden_widths.size())
                          ? Index(config.hidden_widths[size_t(l)])
                          : Index(config.output_dim());
    const Real limit = std::sqrt(Real(6) / Real(in));  // He-style uniform
    auto rng = make_rng(config.seed, {0x1A7EULL, std::uint64_t(l)});
    std::uniform_real_distribution<double> uni{-double(limit), double(limit)};
    Mat w(in, out);
    for (Index i = 0; i < in; ++i)
      for (Index j = 0; j < out; ++j) w(i, j) = Real(uni(rng));
    ws.push_back(std::move(w));
    bs.push_back(Mat::Zero(1, out));
    in = out;
  }
  return Classifier(config, std::move(ws), std::move(bs));
}

TapeModel lift(const Classifier& model, const std::vector<int>& trainable) {
  for (int l : trainable)
    if (l < 0 || l >= model.num_layers())
      throw ConfigError("lift: trainable layer " + std::to_string(l) +
                        " out of range");
  auto is_trainable = [&](int l) {
    return std::find(trainable.begin(), trainable.end(), l) != trainable.end();
  };
  TapeModel tm;
  tm.cfg = model.config();
  if (model.config().normalize_input && model.input_mu().size() > 0) {
    tm.neg_mu = make_leaf<Real>(Mat(-model.input_mu()));
    tm.inv_sigma = make_leaf<Real>(model.input_inv_sigma());
  }
  for (int l = 0; l < model.num_layers(); ++l) {
    tm.weights.push_back(
        make_leaf<Real>(model.weights()[size_t(l)], is_trainable(l)));
    tm.biases.push_back(
        make_leaf<Real>(model.biases()[size_t(l)], is_trainable(l)));
  }
  return tm;
}

TensorPtr TapeModel::penultimate_on(Tape& tape, const TensorPtr& batch) const {
  TensorPtr h = batch;
  if (cfg.normalize_input && neg_mu)
    h = mul_row(tape, add_row(tape, h, neg_mu), inv_sigma);
  for (std::size_t l = 0; l + 1 < weights.size(); ++l)
    h = relu(tape, add_row(tape, matmul(tape, h, weights[l]), biases[l]));
  return h;
}

TensorPtr TapeModel::logits_on(Tape& tape, const TensorPtr& batch) const {
  auto h = penultimate_on(tape, batch);
  return add_row(tape, matmul(tape, h, weights.back()), biases.back());
}

std::vector<TensorPtr> TapeModel::trainable_params() const {
  std::vector<TensorPtr> p;
  for (const auto& w : weights)
    if (w->requires_grad) p.push_back(w);
  for (const auto& b : biases)
    if (b->requires_grad) p.push_back(b);
  return p;
}

void TapeModel::store_back(Classifier& model) const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    model.mutable_weights()[l] = weights[l]->value;
    model.mutable_biases()[l] = biases[l]->value;
  }
}

TrainResult train_classifier(Classifier& model, const Dataset& data, int epochs,
                             Real lr, int batch_size, std::uint64_t seed) {
  data.validate();
  if (data.size() == 0) throw DataError("train: empty dataset");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  for (int y : data.labels)
    if (y == model.config().dummy_index())
      throw DataError("train: label equals dummy index " + std::to_string(y));

  TrainResult result;
  if (epochs <= 0) return result;

  std::vector<int> all_layers(size_t(model.num_layers()));
  std::iota(all_layers.begin(), all_layers.end(), 0);
  TapeModel tm = lift(model, all_layers);
  auto params = tm.trainable_params();
  auto adam = AdamState::for_params(params, lr);
  auto rng = make_rng(seed, {0x7124ULL});

  std::vector<Index> order(size_t(data.size()));
  std::iota(order.begin(), order.end(), Index(0));

  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (Index start = 0; start < data.size(); start += batch_size) {
      const Index b = std::min(Index(batch_size), data.size() - start);
      Mat x(b, data.dim());
      std::vector<int> y(static_cast<std::size_t>(b));
      for (Index i = 0; i < b; ++i) {
        x.row(i) = data.samples.row(order[size_t(start + i)]);
        y[size_t(i)] = data.labels[size_t(order[size_t(start + i)])];
      }
      Tape tape;
      for (auto& p : params) p->zero_grad();
      auto loss = softmax_cross_entropy(tape, tm.logits_on(tape, make_leaf<Real>(x)), y);
      tape.backward(loss);
      adam_step(params, adam);
      epoch_loss += double(loss->value(0, 0)) * double(b);
    }
    result.epoch_losses.push_back(epoch_loss / double(data.size()));
  }
  tm.store_back(model);
  return result;
}

FisherDiag estimate_fisher(const Classifier& model, const Dataset& data,
                           int n_samples, std::uint64_t seed) {
  data.validate();
  if (data.size() == 0) throw DataError("fisher: empty dataset");
  if (n_samples < 1) throw ContractError("fisher: n_samples must be >= 1");
  const Index n = std::min(Index(n_samples), data.size());

  std::vector<Index> order(size_t(data.size()));
  std::iota(order.begin(), order.end(), Index(0));
  auto rng = make_rng(seed, {0xF154ULL});
  std::shuffle(order.begin(), order.end(), rng);

  FisherDiag fisher;
  for (const auto& w : model.weights())
    fisher.weights.push_back(Mat::Zero(w.rows(), w.cols()));
  for (const auto& b : model.biases())
    fisher.biases.push_back(Mat::Zero(b.rows(), b.cols()));

  std::vector<int> all_layers(size_t(model.num_layers()));
  std::iota(all_layers.begin(), all_layers.end(), 0);
  TapeModel tm = lift(model, all_layers);
  auto params = tm.trainable_params();

  for (Index s = 0; s < n; ++s) {
    const Index i = order[size_t(s)];
    Tape tape;
    for (auto& p : params) p->zero_grad();
    auto loss = softmax_cross_entropy(
        tape, tm.logits_on(tape, make_leaf<Real>(data.samples.row(i))),
        {data.labels[size_t(i)]});
    tape.backward(loss);
    for (std::size_t l = 0; l < fisher.weights.size(); ++l) {
      tm.weights[l]->ensure_grad();
      tm.biases[l]->ensure_grad();
      fisher.weights[l] += tm.weights[l]->grad.cwiseProduct(tm.weights[l]->grad);
      fisher.biases[l] += tm.biases[l]->grad.cwiseProduct(tm.biases[l]->grad);
    }
  }
  for (auto& w : fisher.weights) w /= Real(n);
  for (auto& b : fisher.biases) b /= Real(n);
  fisher.samples = int(n);
  return fisher;
}

}  // namespace tmmnn
