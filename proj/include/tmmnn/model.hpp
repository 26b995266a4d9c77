#pragma once

#include <array>
#include <string>
#include <vector>

#include "tmmnn/data.hpp"
#include "tmmnn/tensor.hpp"

namespace tmmnn {

// Dense classifier f: R^d -> R^(C+1). Output index C is reserved for the
// dummy class c_neigh: it exists from pretraining but never appears as a
// training target there, so its logit starts suppressed.
struct ModelConfig {
  std::array<int, 3> input_extents{1, 8, 8};  // channels, height, width
  std::vector<int> hidden_widths{128, 64};
  int num_classes = 4;
  // Normalize inputs by fixed per-pixel train-set statistics before the
  // first affine layer; the desk stand-in for the normalization layers of
  // full-scale backbones (population statistics, not per-sample).
  bool normalize_input = false;
  std::uint64_t seed = 1;

  int input_dim() const {
    return input_extents[0] * input_extents[1] * input_extents[2];
  }
  int dummy_index() const { return num_classes; }
  int output_dim() const { return num_classes + 1; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

class Classifier {
 public:
  Classifier() = default;
  Classifier(ModelConfig cfg, std::vector<Mat> weights, std::vector<Mat> biases);

  const ModelConfig& config() const { return cfg_; }
  int num_layers() const { return int(weights_.size()); }
  int final_layer() const { return num_layers() - 1; }
  const std::vector<Mat>& weights() const { return weights_; }
  const std::vector<Mat>& biases() const { return biases_; }
  std::vector<Mat>& mutable_weights() { return weights_; }
  std::vector<Mat>& mutable_biases() { return biases_; }

  // Fixes the per-pixel normalization constants (used when the config asks
  // for input normalization; identity until set). sigma entries are floored
  // at 1e-3.
  void set_input_stats(const Mat& mu, const Mat& sigma);
  // Deserialization path: assigns the stored representation verbatim.
  void set_input_stats_inv(Mat mu, Mat inv_sigma);
  const Mat& input_mu() const { return mu_; }
  const Mat& input_inv_sigma() const { return inv_sigma_; }

  // Plain Eigen forward passes (no tape); logits is exactly the final affine
  // applied to penultimate_features.
  Mat logits(const Mat& batch) const;
  Mat predict_proba(const Mat& batch) const;
  Mat penultimate_features(const Mat& batch) const;

  double accuracy(const Dataset& data) const;
  std::size_t parameter_count() const;

 private:
  void check_input(const Mat& batch) const;
  ModelConfig cfg_;
  std::vector<Mat> weights_;  // layer l: in x out
  std::vector<Mat> biases_;   // layer l: 1 x out
  Mat mu_;                    // 1 x d, zero until set
  Mat inv_sigma_;             // 1 x d, one until set
};

Classifier init_model(const ModelConfig& config);

// Row-wise softmax with max-subtraction; shared by predict_proba and the
// retrieval scorers.
Mat softmax_rows(const Mat& logits);

// Per-pixel mean and std over a dataset's samples (std floored at 1e-3).
std::pair<Mat, Mat> pixel_stats(const Dataset& data);

// Classifier parameters lifted onto autodiff leaves. Layers listed in
// `trainable` get requires_grad; the rest participate as constants.
struct TapeModel {
  ModelConfig cfg;
  std::vector<TensorPtr> weights;
  std::vector<TensorPtr> biases;
  TensorPtr neg_mu;      // 1 x d constants when the model normalizes input
  TensorPtr inv_sigma;

  TensorPtr penultimate_on(Tape& tape, const TensorPtr& batch) const;
  TensorPtr logits_on(Tape& tape, const TensorPtr& batch) const;
  std::vector<TensorPtr> trainable_params() const;
  void store_back(Classifier& model) const;
};

TapeModel lift(const Classifier& model, const std::vector<int>& trainable);

struct TrainResult {
  std::vector<double> epoch_losses;
};

// Pretraining: full (C+1)-way cross-entropy over shuffled minibatches with
// Adam. Labels must stay below the dummy index.
TrainResult train_classifier(Classifier& model, const Dataset& data, int epochs,
                             Real lr, int batch_size, std::uint64_t seed);

// Diagonal empirical Fisher: mean over sampled (x,y) of the squared gradient
// of -log p(y|x). Uses the dataset label, the standard EWC simplification.
struct FisherDiag {
  std::vector<Mat> weights;
  std::vector<Mat> biases;
  int samples = 0;
};

FisherDiag estimate_fisher(const Classifier& model, const Dataset& data,
                           int n_samples, std::uint64_t seed);

}  // namespace tmmnn
