#pragma once

// Small 3D classifiers: a stack of conv levels (conv 3x3x3 -> ReLU -> max-pool -> batch norm)
// followed by either a three-layer perceptron head or a two-head self-attention block feeding
// the same perceptron.
//
// Activations are stored per sample as (channels x voxels) matrices, voxels in the shared
// x-fastest order. The ReLU output of the last conv level is the map GradCAM explains.

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "xai3d/random.hpp"
#include "xai3d/volume.hpp"

namespace xai3d {

inline constexpr int kClassCount = 2;
inline constexpr double kBatchNormEpsilon = 1e-5;

enum class HeadKind { mlp, mhl };
enum class Backbone { two_level, full_cnn };

struct ConvLevel {
  int filters = 8;
  int kernel = 3;
  int pool = 2;
  bool batchnorm = true;
};

struct NetworkSpec {
  Dims input{16, 16, 16};
  std::vector<ConvLevel> levels;
  HeadKind head = HeadKind::mlp;
  Backbone backbone = Backbone::full_cnn;
  std::array<int, 2> mlp_hidden{256, 256};  // two hidden layers + the 2-way output layer
  std::array<double, 2> dropout{0.3, 0.3};
  int key_dim = 8;

  /// Five-level CNN with 64/128/256/256/256 filters times `scale`; `n_levels` truncates the
  /// stack for small inputs. Hidden width defaults to w*h of the input.
  static NetworkSpec simple_cnn(Dims input, double scale = 0.125, int n_levels = 5);
  /// simple-3D-MHL: the simple CNN backbone with the attention head.
  static NetworkSpec simple_mhl(Dims input, double scale = 0.125, int n_levels = 5, int key_dim = 8);
  /// 2CNN-3D-MHL: two conv levels (64, 128 times `scale`) with the attention head.
  static NetworkSpec two_level_mhl(Dims input, double scale = 0.125, int key_dim = 8);

  void validate() const;

  /// Spatial dims entering level `i` (i == levels.size() gives the backbone output dims).
  Dims level_input_dims(std::size_t i) const;
  int mlp_input_size() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
};

/// ZCA whitening fit on a training set, applied to inputs before the first conv level.
struct ZcaWhitener {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;   // voxels x k, orthonormal columns
  Eigen::VectorXd scales;  // (lambda_k + epsilon)^-1/2
  double epsilon = 1e-2;

  static ZcaWhitener fit(const std::vector<Volume3D>& samples, double epsilon);
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
};

struct ConvParams {
  Eigen::MatrixXd weight;  // out x (in * k^3)
  Eigen::MatrixXd bias;    // out x 1
};

struct BatchNormParams {
  Eigen::MatrixXd gamma, beta;                // C x 1
  Eigen::MatrixXd running_mean, running_var;  // C x 1, not trained
};

struct DenseParams {
  Eigen::MatrixXd weight;  // out x in
  Eigen::MatrixXd bias;    // out x 1
};

struct AttentionParams {
  std::array<Eigen::MatrixXd, 2> query, key, value;  // per head, C x d_k
};

/// Declarative spec plus learned parameters. The same type doubles as a gradient accumulator.
class Model {
 public:
  Model() = default;
  explicit Model(NetworkSpec spec);

  /// He-style random initialization.
  static Model initialized(const NetworkSpec& spec, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }

  std::vector<ConvParams> conv;
  std::vector<BatchNormParams> norm;
  AttentionParams attention;
  std::array<DenseParams, 3> dense;
  std::optional<ZcaWhitener> whitener;

  /// Trainable blocks, in a fixed order.
  std::vector<Eigen::MatrixXd*> parameters();
  std::vector<const Eigen::MatrixXd*> parameters() const;
  /// Trainable blocks followed by batch-norm running statistics.
  std::vector<const Eigen::MatrixXd*> tensors() const;
  std::vector<Eigen::MatrixXd*> tensors();

  Model zeros_like() const;
  void set_zero();

 private:
  NetworkSpec spec_;
};

struct PassOptions {
  bool training = false;      // batch statistics + dropout
  Rng* dropout_rng = nullptr; // required when training with dropout
};

/// Everything a backward pass needs, for one batch.
struct ForwardCache {
  struct Level {
    Dims in_dims, out_dims;
    std::vector<Eigen::MatrixXd> cols;    // im2col per sample
    std::vector<Eigen::MatrixXd> act;     // ReLU(conv) per sample, C x S_in
    std::vector<std::vector<int>> argmax; // pooled element -> flat index into act
    std::vector<Eigen::MatrixXd> normed;  // x-hat per sample (batch norm)
    Eigen::VectorXd inv_std;
    Eigen::VectorXd batch_mean, batch_var;  // training mode only
  };
  struct AttentionHead {
    Eigen::MatrixXd q, k, v, probs;
  };
  bool training = false;
  std::vector<Level> levels;
  std::vector<Eigen::MatrixXd> backbone_out;              // C x S per sample
  std::vector<std::array<AttentionHead, 2>> heads;        // per sample (mhl only)
  std::array<Eigen::MatrixXd, 3> dense_in;                // inputs to each dense layer, features x B
  std::array<Eigen::MatrixXd, 2> hidden_pre;              // pre-ReLU hidden activations
  std::array<Eigen::MatrixXd, 2> dropout_mask;            // empty when dropout inactive
  Eigen::MatrixXd scores;                                 // 2 x B
};

/// Batched forward pass. `inputs` must match the spec's input dims.
Eigen::MatrixXd forward_batch(const Model& model, const std::vector<const Volume3D*>& inputs,
                              const PassOptions& options, ForwardCache* cache);

/// Gradients of sum_b <upstream(:,b), scores(:,b)>. Parameter gradients accumulate into `grads`
/// when non-null; the gradient w.r.t. the last conv level's ReLU output is returned per sample
/// when `activation_grads` is non-null.
void backward_batch(const Model& model, const ForwardCache& cache, const Eigen::MatrixXd& upstream,
                    Model* grads, std::vector<Eigen::MatrixXd>* activation_grads);

struct ForwardResult {
  Eigen::Vector2d scores;
  Eigen::Vector2d probabilities;
  Eigen::MatrixXd last_activation;  // A^n: filters x voxels of the last conv level
  Dims activation_dims;
};

/// Folds the batch statistics of a training-mode cache into the running statistics.
void update_running_stats(Model& model, const ForwardCache& cache, double momentum = 0.9);

/// Inference-mode forward of one input.
ForwardResult forward(const Model& model, const Volume3D& x);

/// Raw class scores only (inference mode).
Eigen::Vector2d class_scores(const Model& model, const Volume3D& x);

Eigen::Vector2d softmax(const Eigen::Vector2d& scores);

/// dy^c / dA^n for the last conv level, one row per feature map n.
Eigen::MatrixXd grad_wrt_activation(const Model& model, const Volume3D& x, int class_index);

/// Re-runs everything downstream of the last conv level's ReLU output (inference mode).
Eigen::Vector2d scores_from_last_activation(const Model& model, const Eigen::MatrixXd& activation);

/// softmax(Q K^T / sqrt(d_k)) V
Eigen::MatrixXd attention_head(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                               int key_dim);

/// Row-wise softmax.
Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits);

/// Two-head self-attention over backbone tokens (S x C), concatenated to S x 2*d_k.
Eigen::MatrixXd multi_head_attention(const AttentionParams& params, const Eigen::MatrixXd& tokens, int key_dim);

/// Class scores of an mhl model.
Eigen::Vector2d mhl_forward(const Model& model, const Volume3D& x);

/// Checkpoint: binary tensor blob at `path` plus a JSON spec sidecar (<path>.json).
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace xai3d
