#pragma once

#include <deque>
#include <string>
#include <vector>

#include "stmixer/autograd.hpp"
#include "stmixer/rng.hpp"

namespace stmx {

// A named trainable leaf. The gradient lives in the leaf node and always has
// the dims of the value.
class Parameter {
 public:
  Parameter(std::string name, Tensor init);

  const std::string& name() const { return name_; }
  const Var& var() const { return var_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& value() { return var_.mutable_value(); }
  const Tensor& grad() const { return var_.grad(); }
  Tensor& grad() { return var_.mutable_grad(); }
  void zero_grad();

 private:
  std::string name_;
  Var var_;
};

// Owns every parameter of a model; addresses stay stable as it grows.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

 private:
  std::deque<Parameter> params_;
};

struct Linear {
  Parameter* weight = nullptr;  // [in, out]
  Parameter* bias = nullptr;    // [out]

  // Uniform(+-1/sqrt(in)) for both weight and bias.
  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  static Linear zeros(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out);

  std::size_t in_features() const { return weight->value().dim(0); }
  std::size_t out_features() const { return weight->value().dim(1); }
  Var operator()(const Var& x) const { return linear(x, weight->var(), bias->var()); }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  double eps = 1e-5;

  static LayerNorm create(ParameterStore& store, const std::string& name, std::size_t dim, double eps = 1e-5);
  Var operator()(const Var& x) const { return layer_norm(x, gain->var(), bias->var(), eps); }
};

// Two linear layers with a ReLU between them.
struct FFN {
  Linear hidden;
  Linear output;

  static FFN create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden_dim,
                    std::size_t out, Rng& rng, bool zero_output = false);
  Var operator()(const Var& x) const { return output(relu(hidden(x))); }
};

struct AttentionParams {
  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 8;

  static AttentionParams create(ParameterStore& store, const std::string& name, std::size_t dim,
                                std::size_t heads, Rng& rng);
};

// Scaled dot-product attention with per-head projections and an output
// projection. Inputs are [Nq, D] / [Nk, D] or batched [B, Nq, D] / [B, Nk, D].
Var multi_head_attention(const Var& q, const Var& k, const Var& v, const AttentionParams& params);

}  // namespace stmx
