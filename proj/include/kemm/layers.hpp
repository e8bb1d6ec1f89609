#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "kemm/autodiff.hpp"
#include "kemm/container.hpp"
#include "kemm/random.hpp"

namespace kemm::nn {

/// Owns every trainable tensor of a model. Parameter addresses are stable
/// for the lifetime of the set, so modules keep raw pointers into it.
template <typename Scalar>
class ParameterSet {
 public:
  using Param = Parameter<Scalar>;

  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Param& create(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                ParamGroup group = ParamGroup::other) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Matrix<Scalar>::Zero(rows, cols);
    p->grad = Matrix<Scalar>::Zero(rows, cols);
    p->group = group;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Param* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Param& at(const std::string& name) {
    if (Param* p = find(name)) return *p;
    throw std::out_of_range("no parameter named " + name);
  }

  std::vector<Param*> all() const {
    std::vector<Param*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::size_t size() const { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Rounds every value to binary32, the checkpoint precision.
  void round_to_float() {
    for (auto& p : params_)
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] = static_cast<Scalar>(static_cast<float>(p->value.data()[i]));
  }

  std::vector<io::NamedTensor> to_tensors() const {
    std::vector<io::NamedTensor> out;
    for (const auto& p : params_) {
      io::NamedTensor t;
      t.name = p->name;
      t.dims = {static_cast<std::uint32_t>(p->value.rows()), static_cast<std::uint32_t>(p->value.cols())};
      t.data.resize(static_cast<std::size_t>(p->value.size()));
      for (Eigen::Index i = 0; i < p->value.size(); ++i) t.data[i] = static_cast<float>(p->value.data()[i]);
      out.push_back(std::move(t));
    }
    return out;
  }

  /// Every parameter must be present with a matching shape; extra tensors
  /// are an error too.
  void load_tensors(const std::vector<io::NamedTensor>& tensors) {
    if (tensors.size() != params_.size())
      throw io::FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                            std::to_string(params_.size()));
    for (const auto& t : tensors) {
      Param* p = find(t.name);
      if (!p) throw io::FormatError("checkpoint tensor " + t.name + " is not a model parameter");
      if (t.dims.size() != 2 || t.dims[0] != p->value.rows() || t.dims[1] != p->value.cols())
        throw io::FormatError("checkpoint tensor " + t.name + " has the wrong shape");
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<Scalar>(t.data[i]);
    }
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename Scalar>
void init_fan_in_uniform(Parameter<Scalar>& p, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.cols()));
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
}

template <typename Scalar>
struct Linear {
  Parameter<Scalar>* weight = nullptr;  // out x in
  Parameter<Scalar>* bias = nullptr;    // 1 x out, may be null

  static Linear create(ParameterSet<Scalar>& ps, const std::string& name, int in, int out, Rng& rng,
                       ParamGroup group = ParamGroup::other, bool with_bias = true) {
    Linear l;
    l.weight = &ps.create(name + ".weight", out, in, group);
    init_fan_in_uniform(*l.weight, rng);
    if (with_bias) l.bias = &ps.create(name + ".bias", 1, out, group);
    return l;
  }

  int in_features() const { return static_cast<int>(weight->value.cols()); }
  int out_features() const { return static_cast<int>(weight->value.rows()); }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const {
    if (bias) return affine(x, t.param(*weight), t.param(*bias));
    return matmul_nt(x, t.param(*weight));
  }

  void zero() {
    weight->value.setZero();
    if (bias) bias->value.setZero();
  }
};

/// Two affine layers with a GELU between.
template <typename Scalar>
struct Mlp {
  Linear<Scalar> first;
  Linear<Scalar> second;

  static Mlp create(ParameterSet<Scalar>& ps, const std::string& name, int in, int hidden, int out, Rng& rng,
                    ParamGroup group = ParamGroup::other) {
    return {Linear<Scalar>::create(ps, name + ".0", in, hidden, rng, group),
            Linear<Scalar>::create(ps, name + ".1", hidden, out, rng, group)};
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const { return second(t, gelu(first(t, x))); }
};

template <typename Scalar>
struct LayerNorm {
  Parameter<Scalar>* gamma = nullptr;
  Parameter<Scalar>* beta = nullptr;
  Scalar eps = Scalar(1e-5);

  /// width 0 creates a single shared affine pair.
  static LayerNorm create(ParameterSet<Scalar>& ps, const std::string& name, int width) {
    LayerNorm n;
    const int w = width > 0 ? width : 1;
    n.gamma = &ps.create(name + ".gamma", 1, w);
    n.gamma->value.setOnes();
    n.beta = &ps.create(name + ".beta", 1, w);
    return n;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const {
    return layer_norm_rows(x, t.param(*gamma), t.param(*beta), eps);
  }
};

/// Scaled dot-product attention of queries over keys/values, split into
/// heads along the feature axis. Inputs are already projected.
template <typename Scalar>
std::vector<Var<Scalar>> attention_heads(Var<Scalar> q, Var<Scalar> k, int heads) {
  const Eigen::Index width = q.cols();
  if (heads < 1 || width % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const Eigen::Index dh = width / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<Var<Scalar>> out;
  for (int h = 0; h < heads; ++h) {
    if (heads == 1) {
      out.push_back(softmax_rows(scale(matmul_nt(q, k), inv_sqrt)));
    } else {
      out.push_back(softmax_rows(scale(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), inv_sqrt)));
    }
  }
  return out;
}

template <typename Scalar>
Var<Scalar> combine_heads(const std::vector<Var<Scalar>>& weights, Var<Scalar> v) {
  const int heads = static_cast<int>(weights.size());
  if (heads == 1) return matmul(weights.front(), v);
  const Eigen::Index dh = v.cols() / heads;
  std::vector<Var<Scalar>> parts;
  for (int h = 0; h < heads; ++h) parts.push_back(matmul(weights[h], slice_cols(v, h * dh, dh)));
  return concat_cols(parts);
}

template <typename Scalar>
struct MultiHeadSelfAttention {
  Linear<Scalar> query, key, value, output;
  int heads = 1;

  static MultiHeadSelfAttention create(ParameterSet<Scalar>& ps, const std::string& name, int width, int heads,
                                       Rng& rng) {
    if (heads < 1 || width % heads != 0)
      throw std::invalid_argument(name + ": width " + std::to_string(width) + " not divisible by heads");
    MultiHeadSelfAttention a;
    a.query = Linear<Scalar>::create(ps, name + ".query", width, width, rng);
    a.key = Linear<Scalar>::create(ps, name + ".key", width, width, rng);
    a.value = Linear<Scalar>::create(ps, name + ".value", width, width, rng);
    a.output = Linear<Scalar>::create(ps, name + ".output", width, width, rng);
    a.heads = heads;
    return a;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const {
    auto w = attention_heads(query(t, x), key(t, x), heads);
    return output(t, combine_heads(w, value(t, x)));
  }
};

/// Pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x)).
template <typename Scalar>
struct TransformerLayer {
  LayerNorm<Scalar> norm1, norm2;
  MultiHeadSelfAttention<Scalar> attention;
  Mlp<Scalar> feed_forward;

  static TransformerLayer create(ParameterSet<Scalar>& ps, const std::string& name, int width, int heads,
                                 int ff_mult, Rng& rng) {
    TransformerLayer l;
    l.norm1 = LayerNorm<Scalar>::create(ps, name + ".norm1", width);
    l.attention = MultiHeadSelfAttention<Scalar>::create(ps, name + ".attn", width, heads, rng);
    l.norm2 = LayerNorm<Scalar>::create(ps, name + ".norm2", width);
    l.feed_forward = Mlp<Scalar>::create(ps, name + ".ffn", width, width * ff_mult, width, rng);
    return l;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const {
    x = add(x, attention(t, norm1(t, x)));
    return add(x, feed_forward(t, norm2(t, x)));
  }

  /// Zeroes both residual branches' output projections; the layer becomes
  /// the identity map.
  void make_identity() {
    attention.output.zero();
    feed_forward.second.zero();
  }
};

template <typename Scalar>
struct TransformerEncoder {
  std::vector<TransformerLayer<Scalar>> layers;

  static TransformerEncoder create(ParameterSet<Scalar>& ps, const std::string& name, int depth, int width,
                                   int heads, int ff_mult, Rng& rng) {
    TransformerEncoder e;
    for (int i = 0; i < depth; ++i)
      e.layers.push_back(
          TransformerLayer<Scalar>::create(ps, name + ".layer" + std::to_string(i), width, heads, ff_mult, rng));
    return e;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> x) const {
    for (const auto& l : layers) x = l(t, x);
    return x;
  }

  void make_identity() {
    for (auto& l : layers) l.make_identity();
  }
};

/// Sinusoidal position table, rows x width.
template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(Eigen::Index rows, Eigen::Index width) {
  Matrix<Scalar> pe(rows, width);
  for (Eigen::Index pos = 0; pos < rows; ++pos)
    for (Eigen::Index i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

}  // namespace kemm::nn
