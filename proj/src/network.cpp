#include "xai3d/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace xai3d {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

namespace {

int scaled(int filters, double scale) { return std::max(1, int(std::lround(filters * scale))); }

Dims pooled_dims(Dims in, int pool) {
  auto p = [pool](int n) { return std::max(1, n / pool); };
  return {p(in.w), p(in.h), p(in.d)};
}

}  // namespace

NetworkSpec NetworkSpec::simple_cnn(Dims input, double scale, int n_levels) {
  require(n_levels >= 1 && n_levels <= 5, ErrorKind::invalid_argument, "simple_cnn: 1..5 levels");
  static constexpr int kFilters[5] = {64, 128, 256, 256, 256};
  NetworkSpec spec;
  spec.input = input;
  for (int i = 0; i < n_levels; ++i) spec.levels.push_back(ConvLevel{scaled(kFilters[i], scale), 3, 2, true});
  spec.head = HeadKind::mlp;
  spec.backbone = Backbone::full_cnn;
  spec.mlp_hidden = {input.w * input.h, input.w * input.h};
  return spec;
}

NetworkSpec NetworkSpec::simple_mhl(Dims input, double scale, int n_levels, int key_dim) {
  NetworkSpec spec = simple_cnn(input, scale, n_levels);
  spec.head = HeadKind::mhl;
  spec.key_dim = key_dim;
  return spec;
}

NetworkSpec NetworkSpec::two_level_mhl(Dims input, double scale, int key_dim) {
  NetworkSpec spec = simple_cnn(input, scale, 2);
  spec.head = HeadKind::mhl;
  spec.backbone = Backbone::two_level;
  spec.key_dim = key_dim;
  return spec;
}

void NetworkSpec::validate() const {
  require(input.valid(), ErrorKind::config, "network: invalid input dims");
  require(!levels.empty(), ErrorKind::config, "network: at least one conv level required");
  for (const auto& level : levels) {
    require(level.filters >= 1, ErrorKind::config, "network: filter count must be positive");
    require(level.kernel >= 1 && level.kernel % 2 == 1, ErrorKind::config, "network: kernel size must be odd");
    require(level.pool >= 1, ErrorKind::config, "network: pool size must be positive");
  }
  require(mlp_hidden[0] >= 1 && mlp_hidden[1] >= 1, ErrorKind::config, "network: hidden widths must be positive");
  for (double p : dropout) require(p >= 0.0 && p < 1.0, ErrorKind::config, "network: dropout rate in [0, 1)");
  if (head == HeadKind::mhl) require(key_dim >= 1, ErrorKind::config, "network: key_dim must be positive");
}

Dims NetworkSpec::level_input_dims(std::size_t i) const {
  Dims d = input;
  for (std::size_t l = 0; l < i && l < levels.size(); ++l) d = pooled_dims(d, levels[l].pool);
  return d;
}

int NetworkSpec::mlp_input_size() const {
  const Dims out = level_input_dims(levels.size());
  if (head == HeadKind::mhl) return int(out.size()) * 2 * key_dim;
  return int(out.size()) * levels.back().filters;
}

json NetworkSpec::to_json() const {
  json j;
  j["input"] = {input.w, input.h, input.d};
  j["levels"] = json::array();
  for (const auto& l : levels) {
    j["levels"].push_back({{"filters", l.filters}, {"kernel", l.kernel}, {"pool", l.pool}, {"batchnorm", l.batchnorm}});
  }
  j["head"] = head == HeadKind::mlp ? "mlp" : "mhl";
  j["backbone"] = backbone == Backbone::two_level ? "two_level" : "full_cnn";
  j["mlp_hidden"] = {mlp_hidden[0], mlp_hidden[1]};
  j["dropout"] = {dropout[0], dropout[1]};
  j["key_dim"] = key_dim;
  return j;
}

NetworkSpec NetworkSpec::from_json(const json& j) {
  NetworkSpec spec;
  try {
    spec.input = Dims{j.at("input")[0].get<int>(), j.at("input")[1].get<int>(), j.at("input")[2].get<int>()};
    for (const auto& l : j.at("levels")) {
      spec.levels.push_back(ConvLevel{l.at("filters").get<int>(), l.value("kernel", 3), l.value("pool", 2),
                                      l.value("batchnorm", true)});
    }
    const std::string head = j.value("head", "mlp");
    require(head == "mlp" || head == "mhl", ErrorKind::config, "network: head must be mlp or mhl");
    spec.head = head == "mlp" ? HeadKind::mlp : HeadKind::mhl;
    spec.backbone = j.value("backbone", "full_cnn") == "two_level" ? Backbone::two_level : Backbone::full_cnn;
    spec.mlp_hidden = {j.at("mlp_hidden")[0].get<int>(), j.at("mlp_hidden")[1].get<int>()};
    spec.dropout = {j.at("dropout")[0].get<double>(), j.at("dropout")[1].get<double>()};
    spec.key_dim = j.value("key_dim", 8);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("network spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// ZCA
// ---------------------------------------------------------------------------

ZcaWhitener ZcaWhitener::fit(const std::vector<Volume3D>& samples, double epsilon) {
  require(samples.size() >= 2, ErrorKind::invalid_argument, "zca: need at least two samples");
  require(epsilon > 0.0, ErrorKind::invalid_argument, "zca: epsilon must be positive");
  const auto n = Eigen::Index(samples.size());
  const Eigen::Index v = samples.front().size();
  MatrixXd data(v, n);
  for (Eigen::Index i = 0; i < n; ++i) data.col(i) = samples[std::size_t(i)].voxels().matrix();
  ZcaWhitener z;
  z.epsilon = epsilon;
  z.mean = data.rowwise().mean();
  data.colwise() -= z.mean;
  // Covariance eigenpairs through the n x n Gram matrix.
  const MatrixXd gram = (data.transpose() * data) / double(n);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram);
  std::vector<Eigen::Index> keep;
  const double tol = 1e-10 * std::max(1.0, eig.eigenvalues().maxCoeff());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (eig.eigenvalues()[i] > tol) keep.push_back(i);
  }
  z.basis.resize(v, Eigen::Index(keep.size()));
  z.scales.resize(Eigen::Index(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    const double lambda = eig.eigenvalues()[keep[c]];
    VectorXd u = data * eig.eigenvectors().col(keep[c]);
    u /= u.norm();
    z.basis.col(Eigen::Index(c)) = u;
    z.scales[Eigen::Index(c)] = 1.0 / std::sqrt(lambda + epsilon);
  }
  return z;
}

Eigen::VectorXd ZcaWhitener::apply(const Eigen::VectorXd& x) const {
  const VectorXd centered = x - mean;
  const VectorXd proj = basis.transpose() * centered;
  const double rest = 1.0 / std::sqrt(epsilon);
  return rest * (centered - basis * proj) + basis * scales.cwiseProduct(proj);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  int in_channels = 1;
  for (const auto& level : spec_.levels) {
    const int k3 = level.kernel * level.kernel * level.kernel;
    conv.push_back(ConvParams{MatrixXd::Zero(level.filters, in_channels * k3), MatrixXd::Zero(level.filters, 1)});
    norm.push_back(BatchNormParams{MatrixXd::Ones(level.filters, 1), MatrixXd::Zero(level.filters, 1),
                                   MatrixXd::Zero(level.filters, 1), MatrixXd::Ones(level.filters, 1)});
    in_channels = level.filters;
  }
  if (spec_.head == HeadKind::mhl) {
    for (int h = 0; h < 2; ++h) {
      attention.query[h] = MatrixXd::Zero(in_channels, spec_.key_dim);
      attention.key[h] = MatrixXd::Zero(in_channels, spec_.key_dim);
      attention.value[h] = MatrixXd::Zero(in_channels, spec_.key_dim);
    }
  }
  const int widths[4] = {spec_.mlp_input_size(), spec_.mlp_hidden[0], spec_.mlp_hidden[1], kClassCount};
  for (int l = 0; l < 3; ++l) {
    dense[l] = DenseParams{MatrixXd::Zero(widths[l + 1], widths[l]), MatrixXd::Zero(widths[l + 1], 1)};
  }
}

Model Model::initialized(const NetworkSpec& spec, std::uint64_t seed) {
  Model m(spec);
  Rng rng(derive_seed(seed, "init"));
  auto fill = [&rng](MatrixXd& w, double stddev) {
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * normal01(rng);
  };
  for (auto& c : m.conv) fill(c.weight, std::sqrt(2.0 / double(c.weight.cols())));
  if (spec.head == HeadKind::mhl) {
    for (int h = 0; h < 2; ++h) {
      for (MatrixXd* w : {&m.attention.query[h], &m.attention.key[h], &m.attention.value[h]}) {
        fill(*w, std::sqrt(2.0 / double(w->rows() + w->cols())));
      }
    }
  }
  fill(m.dense[0].weight, std::sqrt(2.0 / double(m.dense[0].weight.cols())));
  fill(m.dense[1].weight, std::sqrt(2.0 / double(m.dense[1].weight.cols())));
  fill(m.dense[2].weight, std::sqrt(2.0 / double(m.dense[2].weight.rows() + m.dense[2].weight.cols())));
  return m;
}

std::vector<Eigen::MatrixXd*> Model::parameters() {
  std::vector<MatrixXd*> out;
  for (std::size_t l = 0; l < conv.size(); ++l) {
    out.push_back(&conv[l].weight);
    out.push_back(&conv[l].bias);
    if (spec_.levels[l].batchnorm) {
      out.push_back(&norm[l].gamma);
      out.push_back(&norm[l].beta);
    }
  }
  if (spec_.head == HeadKind::mhl) {
    for (int h = 0; h < 2; ++h) {
      out.push_back(&attention.query[h]);
      out.push_back(&attention.key[h]);
      out.push_back(&attention.value[h]);
    }
  }
  for (auto& d : dense) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  return out;
}

std::vector<const Eigen::MatrixXd*> Model::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Eigen::MatrixXd*> Model::tensors() {
  auto out = parameters();
  for (std::size_t l = 0; l < norm.size(); ++l) {
    if (!spec_.levels[l].batchnorm) continue;
    out.push_back(&norm[l].running_mean);
    out.push_back(&norm[l].running_var);
  }
  return out;
}

std::vector<const Eigen::MatrixXd*> Model::tensors() const {
  auto mut = const_cast<Model*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

Model Model::zeros_like() const {
  Model z = *this;
  z.whitener.reset();
  z.set_zero();
  return z;
}

void Model::set_zero() {
  for (MatrixXd* t : tensors()) t->setZero();
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace {

// Columns are output voxels; rows are (channel, kz, ky, kx) taps. Same padding.
MatrixXd im2col(const MatrixXd& in, const Dims& dims, int kernel) {
  const int pad = kernel / 2;
  const int k3 = kernel * kernel * kernel;
  const auto channels = in.rows();
  MatrixXd cols = MatrixXd::Zero(channels * k3, dims.size());
  for (int z = 0; z < dims.d; ++z) {
    for (int y = 0; y < dims.h; ++y) {
      for (int x = 0; x < dims.w; ++x) {
        const Eigen::Index s = linear_index(dims, x, y, z);
        double* col = cols.col(s).data();
        for (int kz = 0; kz < kernel; ++kz) {
          const int sz = z + kz - pad;
          if (sz < 0 || sz >= dims.d) continue;
          for (int ky = 0; ky < kernel; ++ky) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= dims.h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int sx = x + kx - pad;
              if (sx < 0 || sx >= dims.w) continue;
              const Eigen::Index src = linear_index(dims, sx, sy, sz);
              const int tap = (kz * kernel + ky) * kernel + kx;
              for (Eigen::Index c = 0; c < channels; ++c) col[c * k3 + tap] = in(c, src);
            }
          }
        }
      }
    }
  }
  return cols;
}

MatrixXd col2im(const MatrixXd& cols, const Dims& dims, int kernel, Eigen::Index channels) {
  const int pad = kernel / 2;
  const int k3 = kernel * kernel * kernel;
  MatrixXd out = MatrixXd::Zero(channels, dims.size());
  for (int z = 0; z < dims.d; ++z) {
    for (int y = 0; y < dims.h; ++y) {
      for (int x = 0; x < dims.w; ++x) {
        const Eigen::Index s = linear_index(dims, x, y, z);
        const double* col = cols.col(s).data();
        for (int kz = 0; kz < kernel; ++kz) {
          const int sz = z + kz - pad;
          if (sz < 0 || sz >= dims.d) continue;
          for (int ky = 0; ky < kernel; ++ky) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= dims.h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int sx = x + kx - pad;
              if (sx < 0 || sx >= dims.w) continue;
              const Eigen::Index src = linear_index(dims, sx, sy, sz);
              const int tap = (kz * kernel + ky) * kernel + kx;
              for (Eigen::Index c = 0; c < channels; ++c) out(c, src) += col[c * k3 + tap];
            }
          }
        }
      }
    }
  }
  return out;
}

MatrixXd max_pool(const MatrixXd& in, const Dims& in_dims, int pool, std::vector<int>* argmax) {
  const Dims out_dims = pooled_dims(in_dims, pool);
  MatrixXd out(in.rows(), out_dims.size());
  if (argmax) argmax->assign(std::size_t(out.size()), 0);
  for (int oz = 0; oz < out_dims.d; ++oz) {
    const int z0 = oz * pool, z1 = std::min(z0 + pool, in_dims.d);
    for (int oy = 0; oy < out_dims.h; ++oy) {
      const int y0 = oy * pool, y1 = std::min(y0 + pool, in_dims.h);
      for (int ox = 0; ox < out_dims.w; ++ox) {
        const int x0 = ox * pool, x1 = std::min(x0 + pool, in_dims.w);
        const Eigen::Index o = linear_index(out_dims, ox, oy, oz);
        for (Eigen::Index c = 0; c < in.rows(); ++c) {
          double best = -std::numeric_limits<double>::infinity();
          Eigen::Index best_index = 0;
          for (int z = z0; z < z1; ++z)
            for (int y = y0; y < y1; ++y)
              for (int x = x0; x < x1; ++x) {
                const Eigen::Index s = linear_index(in_dims, x, y, z);
                if (in(c, s) > best) {
                  best = in(c, s);
                  best_index = s;
                }
              }
          out(c, o) = best;
          if (argmax) (*argmax)[std::size_t(o * in.rows() + c)] = int(c + in.rows() * best_index);
        }
      }
    }
  }
  return out;
}

MatrixXd max_pool_backward(const MatrixXd& grad_out, const std::vector<int>& argmax, Eigen::Index rows,
                           Eigen::Index in_size) {
  MatrixXd grad_in = MatrixXd::Zero(rows, in_size);
  for (Eigen::Index i = 0; i < grad_out.size(); ++i) grad_in.data()[argmax[std::size_t(i)]] += grad_out.data()[i];
  return grad_in;
}

Eigen::ArrayXd inference_inv_std(const BatchNormParams& bn) {
  return (bn.running_var.array() + kBatchNormEpsilon).rsqrt().col(0);
}

// Output of the pooling + normalization stage of one level, inference mode.
MatrixXd pool_and_normalize(const Model& model, std::size_t level, const MatrixXd& act, const Dims& in_dims) {
  const auto& spec = model.spec().levels[level];
  MatrixXd pooled = max_pool(act, in_dims, spec.pool, nullptr);
  if (!spec.batchnorm) return pooled;
  const auto& bn = model.norm[level];
  const Eigen::ArrayXd scale = bn.gamma.array().col(0) * inference_inv_std(bn);
  const Eigen::ArrayXd shift = bn.beta.array().col(0) - bn.running_mean.array().col(0) * scale;
  return ((pooled.array().colwise() * scale).colwise() + shift).matrix();
}

MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }

MatrixXd input_matrix(const Model& model, const Volume3D& x) {
  require(x.dims() == model.spec().input, ErrorKind::dimension_mismatch,
          "network input dims " + to_string(x.dims()) + " do not match spec " + to_string(model.spec().input));
  if (model.whitener) return model.whitener->apply(x.voxels().matrix()).transpose();
  return x.voxels().matrix().transpose();
}

// Flattened head input for one sample (column-major flatten).
VectorXd head_features(const Model& model, const MatrixXd& backbone_out,
                       std::array<ForwardCache::AttentionHead, 2>* heads) {
  if (model.spec().head == HeadKind::mlp) return Eigen::Map<const VectorXd>(backbone_out.data(), backbone_out.size());
  const MatrixXd tokens = backbone_out.transpose();  // S x C
  const int dk = model.spec().key_dim;
  MatrixXd concat(tokens.rows(), 2 * dk);
  for (int h = 0; h < 2; ++h) {
    MatrixXd q = tokens * model.attention.query[h];
    MatrixXd k = tokens * model.attention.key[h];
    MatrixXd v = tokens * model.attention.value[h];
    MatrixXd probs = row_softmax(q * k.transpose() / std::sqrt(double(dk)));
    concat.middleCols(h * dk, dk) = probs * v;
    if (heads) (*heads)[std::size_t(h)] = {std::move(q), std::move(k), std::move(v), std::move(probs)};
  }
  return Eigen::Map<const VectorXd>(concat.data(), concat.size());
}

MatrixXd dense_head(const Model& model, MatrixXd features, const PassOptions& options, ForwardCache* cache) {
  for (int l = 0; l < 3; ++l) {
    if (cache) cache->dense_in[l] = features;
    MatrixXd out = (model.dense[l].weight * features).colwise() + model.dense[l].bias.col(0);
    if (l == 2) return out;
    if (cache) cache->hidden_pre[l] = out;
    out = relu(out);
    const double p = model.spec().dropout[l];
    if (options.training && p > 0.0) {
      require(options.dropout_rng != nullptr, ErrorKind::invalid_argument, "training pass needs a dropout rng");
      MatrixXd mask(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = uniform01(*options.dropout_rng) < p ? 0.0 : 1.0 / (1.0 - p);
      }
      out = out.cwiseProduct(mask);
      if (cache) cache->dropout_mask[l] = std::move(mask);
    } else if (cache) {
      cache->dropout_mask[l].resize(0, 0);
    }
    features = std::move(out);
  }
  return features;
}

}  // namespace

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
  MatrixXd out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Eigen::MatrixXd attention_head(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                               int key_dim) {
  require(key_dim >= 1, ErrorKind::invalid_argument, "attention: key_dim must be positive");
  require(q.cols() == k.cols(), ErrorKind::dimension_mismatch, "attention: query/key widths differ");
  require(k.rows() == v.rows(), ErrorKind::dimension_mismatch, "attention: key/value counts differ");
  return row_softmax(q * k.transpose() / std::sqrt(double(key_dim))) * v;
}

Eigen::MatrixXd multi_head_attention(const AttentionParams& params, const Eigen::MatrixXd& tokens, int key_dim) {
  MatrixXd concat(tokens.rows(), 2 * key_dim);
  for (int h = 0; h < 2; ++h) {
    require(params.query[h].rows() == tokens.cols(), ErrorKind::dimension_mismatch,
            "attention: projection rows do not match token width");
    concat.middleCols(h * key_dim, key_dim) =
        attention_head(tokens * params.query[h], tokens * params.key[h], tokens * params.value[h], key_dim);
  }
  return concat;
}

Eigen::Vector2d softmax(const Eigen::Vector2d& scores) {
  const double m = scores.maxCoeff();
  Eigen::Vector2d e = (scores.array() - m).exp();
  return e / e.sum();
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

Eigen::MatrixXd forward_batch(const Model& model, const std::vector<const Volume3D*>& inputs,
                              const PassOptions& options, ForwardCache* cache) {
  require(!inputs.empty(), ErrorKind::invalid_argument, "forward: empty batch");
  const auto& spec = model.spec();
  const std::size_t batch = inputs.size();

  std::vector<MatrixXd> current(batch);
  for (std::size_t b = 0; b < batch; ++b) current[b] = input_matrix(model, *inputs[b]);

  if (cache) {
    cache->levels.assign(spec.levels.size(), {});
    cache->heads.clear();
    cache->training = options.training;
  }
  Dims dims = spec.input;
  for (std::size_t l = 0; l < spec.levels.size(); ++l) {
    const auto& level = spec.levels[l];
    const Dims out_dims = pooled_dims(dims, level.pool);
    ForwardCache::Level* lc = cache ? &cache->levels[l] : nullptr;
    if (lc) {
      lc->in_dims = dims;
      lc->out_dims = out_dims;
      lc->cols.resize(batch);
      lc->act.resize(batch);
      lc->argmax.resize(batch);
      lc->normed.resize(batch);
    }
    std::vector<MatrixXd> pooled(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      MatrixXd cols = im2col(current[b], dims, level.kernel);
      MatrixXd act = relu((model.conv[l].weight * cols).colwise() + model.conv[l].bias.col(0));
      pooled[b] = max_pool(act, dims, level.pool, lc ? &lc->argmax[b] : nullptr);
      if (lc) {
        lc->cols[b] = std::move(cols);
        lc->act[b] = std::move(act);
      }
    }
    if (level.batchnorm) {
      const auto& bn = model.norm[l];
      Eigen::ArrayXd mean, inv_std;
      if (options.training) {
        const double count = double(batch) * double(out_dims.size());
        Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(level.filters);
        Eigen::ArrayXd sq = Eigen::ArrayXd::Zero(level.filters);
        for (const auto& p : pooled) sum += p.rowwise().sum().array();
        mean = sum / count;
        for (const auto& p : pooled) sq += (p.array().colwise() - mean).square().rowwise().sum();
        const Eigen::ArrayXd var = sq / count;
        inv_std = (var + kBatchNormEpsilon).rsqrt();
        if (lc) {
          lc->batch_mean = mean.matrix();
          lc->batch_var = var.matrix();
        }
      } else {
        mean = bn.running_mean.array().col(0);
        inv_std = inference_inv_std(bn);
      }
      for (std::size_t b = 0; b < batch; ++b) {
        MatrixXd normed = ((pooled[b].array().colwise() - mean).colwise() * inv_std).matrix();
        current[b] = ((normed.array().colwise() * bn.gamma.array().col(0)).colwise() + bn.beta.array().col(0)).matrix();
        if (lc) lc->normed[b] = std::move(normed);
      }
      if (lc) lc->inv_std = inv_std.matrix();
    } else {
      current = std::move(pooled);
    }
    dims = out_dims;
  }

  MatrixXd features(spec.mlp_input_size(), Eigen::Index(batch));
  if (cache && spec.head == HeadKind::mhl) cache->heads.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    features.col(Eigen::Index(b)) =
        head_features(model, current[b], cache && spec.head == HeadKind::mhl ? &cache->heads[b] : nullptr);
  }
  if (cache) cache->backbone_out = current;
  MatrixXd scores = dense_head(model, std::move(features), options, cache);
  if (cache) cache->scores = scores;
  return scores;
}

void backward_batch(const Model& model, const ForwardCache& cache, const Eigen::MatrixXd& upstream, Model* grads,
                    std::vector<Eigen::MatrixXd>* activation_grads) {
  const auto& spec = model.spec();
  const auto batch = std::size_t(upstream.cols());

  // Dense head.
  MatrixXd grad = upstream;
  for (int l = 2; l >= 0; --l) {
    if (grads) {
      grads->dense[l].weight.noalias() += grad * cache.dense_in[l].transpose();
      grads->dense[l].bias += grad.rowwise().sum();
    }
    grad = model.dense[l].weight.transpose() * grad;
    if (l > 0) {
      const int h = l - 1;
      if (cache.dropout_mask[h].size() > 0) grad = grad.cwiseProduct(cache.dropout_mask[h]);
      grad = grad.cwiseProduct((cache.hidden_pre[h].array() > 0.0).cast<double>().matrix());
    }
  }

  // Head features -> backbone output.
  std::vector<MatrixXd> current(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const MatrixXd& out = cache.backbone_out[b];
    if (spec.head == HeadKind::mlp) {
      current[b] = Eigen::Map<const MatrixXd>(grad.col(Eigen::Index(b)).data(), out.rows(), out.cols());
      continue;
    }
    const int dk = spec.key_dim;
    const double inv_sqrt = 1.0 / std::sqrt(double(dk));
    const MatrixXd tokens = out.transpose();
    const Eigen::Map<const MatrixXd> dconcat(grad.col(Eigen::Index(b)).data(), tokens.rows(), 2 * dk);
    MatrixXd dtokens = MatrixXd::Zero(tokens.rows(), tokens.cols());
    for (int h = 0; h < 2; ++h) {
      const auto& head = cache.heads[b][std::size_t(h)];
      const MatrixXd dh = dconcat.middleCols(h * dk, dk);
      const MatrixXd dv = head.probs.transpose() * dh;
      const MatrixXd dprobs = dh * head.v.transpose();
      const Eigen::VectorXd row_dot = (dprobs.cwiseProduct(head.probs)).rowwise().sum();
      const MatrixXd dlogits = head.probs.cwiseProduct(dprobs.colwise() - row_dot) * inv_sqrt;
      const MatrixXd dq = dlogits * head.k;
      const MatrixXd dk_ = dlogits.transpose() * head.q;
      if (grads) {
        grads->attention.query[h].noalias() += tokens.transpose() * dq;
        grads->attention.key[h].noalias() += tokens.transpose() * dk_;
        grads->attention.value[h].noalias() += tokens.transpose() * dv;
      }
      dtokens.noalias() += dq * model.attention.query[h].transpose();
      dtokens.noalias() += dk_ * model.attention.key[h].transpose();
      dtokens.noalias() += dv * model.attention.value[h].transpose();
    }
    current[b] = dtokens.transpose();
  }

  if (activation_grads) activation_grads->assign(batch, MatrixXd());

  for (std::size_t li = spec.levels.size(); li-- > 0;) {
    const auto& level = spec.levels[li];
    const auto& lc = cache.levels[li];
    // Batch norm.
    if (level.batchnorm) {
      const auto& bn = model.norm[li];
      const Eigen::ArrayXd gamma = bn.gamma.array().col(0);
      const Eigen::ArrayXd inv_std = lc.inv_std.array();
      Eigen::ArrayXd dgamma = Eigen::ArrayXd::Zero(level.filters);
      Eigen::ArrayXd dbeta = Eigen::ArrayXd::Zero(level.filters);
      for (std::size_t b = 0; b < batch; ++b) {
        dgamma += (current[b].array() * lc.normed[b].array()).rowwise().sum();
        dbeta += current[b].array().rowwise().sum();
      }
      if (grads) {
        grads->norm[li].gamma += dgamma.matrix();
        grads->norm[li].beta += dbeta.matrix();
      }
      const bool training_stats = cache.training;
      const double count = double(batch) * double(lc.out_dims.size());
      for (std::size_t b = 0; b < batch; ++b) {
        Eigen::ArrayXXd dxhat = current[b].array().colwise() * gamma;
        if (training_stats) {
          // dx = inv_std / N * (N dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
          const Eigen::ArrayXd sum_dxhat = dbeta * gamma;
          const Eigen::ArrayXd sum_dxhat_xhat = dgamma * gamma;
          const Eigen::ArrayXXd correction = lc.normed[b].array().colwise() * (sum_dxhat_xhat / count);
          dxhat = (dxhat - correction).colwise() - sum_dxhat / count;
        }
        current[b] = (dxhat.colwise() * inv_std).matrix();
      }
    }
    // Pool, ReLU, conv.
    for (std::size_t b = 0; b < batch; ++b) {
      MatrixXd dact = max_pool_backward(current[b], lc.argmax[b], level.filters, lc.in_dims.size());
      if (activation_grads && li + 1 == spec.levels.size()) (*activation_grads)[b] = dact;
      const MatrixXd dz = dact.cwiseProduct((lc.act[b].array() > 0.0).cast<double>().matrix());
      if (grads) {
        grads->conv[li].weight.noalias() += dz * lc.cols[b].transpose();
        grads->conv[li].bias += dz.rowwise().sum();
      }
      if (li > 0) {
        const MatrixXd dcols = model.conv[li].weight.transpose() * dz;
        current[b] = col2im(dcols, lc.in_dims, level.kernel, spec.levels[li - 1].filters);
      }
    }
  }
}

void update_running_stats(Model& model, const ForwardCache& cache, double momentum) {
  require(cache.training, ErrorKind::invalid_argument, "update_running_stats: cache was not recorded in training mode");
  for (std::size_t l = 0; l < model.norm.size(); ++l) {
    if (!model.spec().levels[l].batchnorm) continue;
    auto& bn = model.norm[l];
    bn.running_mean = momentum * bn.running_mean + (1.0 - momentum) * cache.levels[l].batch_mean;
    bn.running_var = momentum * bn.running_var + (1.0 - momentum) * cache.levels[l].batch_var;
  }
}

ForwardResult forward(const Model& model, const Volume3D& x) {
  ForwardCache cache;
  const MatrixXd scores = forward_batch(model, {&x}, PassOptions{}, &cache);
  ForwardResult r;
  r.scores = scores.col(0);
  r.probabilities = softmax(r.scores);
  r.last_activation = cache.levels.back().act[0];
  r.activation_dims = cache.levels.back().in_dims;
  return r;
}

Eigen::Vector2d class_scores(const Model& model, const Volume3D& x) {
  return forward_batch(model, {&x}, PassOptions{}, nullptr).col(0);
}

Eigen::MatrixXd grad_wrt_activation(const Model& model, const Volume3D& x, int class_index) {
  require(class_index >= 0 && class_index < kClassCount, ErrorKind::invalid_argument,
          "grad_wrt_activation: class index out of range");
  ForwardCache cache;
  forward_batch(model, {&x}, PassOptions{}, &cache);
  MatrixXd upstream = MatrixXd::Zero(kClassCount, 1);
  upstream(class_index, 0) = 1.0;
  std::vector<MatrixXd> act_grads;
  backward_batch(model, cache, upstream, nullptr, &act_grads);
  return act_grads[0];
}

Eigen::Vector2d scores_from_last_activation(const Model& model, const Eigen::MatrixXd& activation) {
  const auto& spec = model.spec();
  const std::size_t last = spec.levels.size() - 1;
  const Dims dims = spec.level_input_dims(last);
  require(activation.rows() == spec.levels[last].filters && activation.cols() == dims.size(),
          ErrorKind::dimension_mismatch, "scores_from_last_activation: activation shape mismatch");
  const MatrixXd out = pool_and_normalize(model, last, activation, dims);
  MatrixXd features(spec.mlp_input_size(), 1);
  features.col(0) = head_features(model, out, nullptr);
  return dense_head(model, std::move(features), PassOptions{}, nullptr).col(0);
}

Eigen::Vector2d mhl_forward(const Model& model, const Volume3D& x) {
  require(model.spec().head == HeadKind::mhl, ErrorKind::invalid_argument, "mhl_forward: model head is not mhl");
  return class_scores(model, x);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'X', 'N', 'E', 'T'};
constexpr std::uint32_t kModelVersion = 1;

void write_pod(std::ostream& out, const auto& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T read_pod(std::istream& in, const std::string& origin) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  require(bool(in), ErrorKind::io, origin + ": truncated checkpoint");
  return value;
}

void write_matrix(std::ostream& out, const MatrixXd& m) {
  write_pod(out, std::uint64_t(m.rows()));
  write_pod(out, std::uint64_t(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()), std::streamsize(sizeof(double) * std::size_t(m.size())));
}

MatrixXd read_matrix(std::istream& in, const std::string& origin) {
  const auto rows = read_pod<std::uint64_t>(in, origin);
  const auto cols = read_pod<std::uint64_t>(in, origin);
  require(rows < (1u << 28) && cols < (1u << 28), ErrorKind::io, origin + ": implausible tensor shape");
  MatrixXd m{Eigen::Index(rows), Eigen::Index(cols)};
  in.read(reinterpret_cast<char*>(m.data()), std::streamsize(sizeof(double) * std::size_t(m.size())));
  require(bool(in), ErrorKind::io, origin + ": truncated checkpoint tensor");
  return m;
}

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorKind::io, "cannot write " + path.string());
  out.write(kModelMagic, 4);
  write_pod(out, kModelVersion);
  const auto tensors = model.tensors();
  write_pod(out, std::uint64_t(tensors.size()));
  for (const MatrixXd* t : tensors) write_matrix(out, *t);
  write_pod(out, std::uint8_t(model.whitener ? 1 : 0));
  if (model.whitener) {
    write_pod(out, model.whitener->epsilon);
    write_matrix(out, model.whitener->mean);
    write_matrix(out, model.whitener->basis);
    write_matrix(out, model.whitener->scales);
  }
  require(bool(out), ErrorKind::io, "short write to " + path.string());

  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ofstream js(sidecar, std::ios::trunc);
  require(bool(js), ErrorKind::io, "cannot write " + sidecar.string());
  json j;
  j["format"] = "xnet";
  j["version"] = kModelVersion;
  j["spec"] = model.spec().to_json();
  j["zca"] = bool(model.whitener);
  js << j.dump(2) << "\n";
}

Model load_model(const std::filesystem::path& path) {
  const std::string origin = path.string();
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ifstream js(sidecar);
  require(bool(js), ErrorKind::io, "missing checkpoint sidecar " + sidecar.string());
  json j;
  try {
    j = json::parse(js);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, sidecar.string() + ": " + e.what());
  }
  Model model(NetworkSpec::from_json(j.at("spec")));

  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot open " + origin);
  char magic[4];
  in.read(magic, 4);
  require(bool(in) && std::memcmp(magic, kModelMagic, 4) == 0, ErrorKind::io, origin + ": bad checkpoint magic");
  require(read_pod<std::uint32_t>(in, origin) == kModelVersion, ErrorKind::io, origin + ": unsupported version");
  auto tensors = model.tensors();
  require(read_pod<std::uint64_t>(in, origin) == tensors.size(), ErrorKind::io,
          origin + ": tensor count does not match spec");
  for (MatrixXd* t : tensors) {
    MatrixXd m = read_matrix(in, origin);
    require(m.rows() == t->rows() && m.cols() == t->cols(), ErrorKind::io, origin + ": tensor shape mismatch");
    *t = std::move(m);
  }
  if (read_pod<std::uint8_t>(in, origin)) {
    ZcaWhitener z;
    z.epsilon = read_pod<double>(in, origin);
    z.mean = read_matrix(in, origin);
    z.basis = read_matrix(in, origin);
    z.scales = read_matrix(in, origin);
    model.whitener = std::move(z);
  }
  return model;
}

}  // namespace xai3d
