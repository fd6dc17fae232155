#include "stmixer/nn.hpp"

#include <algorithm>
#include <cmath>

namespace stmx {

Parameter::Parameter(std::string name, Tensor init) : name_(std::move(name)), var_(std::move(init), true) {}

void Parameter::zero_grad() { var_.mutable_grad().fill(0.0); }

Parameter& ParameterStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  return params_.emplace_back(name, std::move(init));
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name() == name) return p;
  throw ConfigError("unknown parameter: " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name() == name) return p;
  throw ConfigError("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name() == name; });
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = &store.add(name + ".weight", rng.uniform_tensor({in, out}, -bound, bound));
  l.bias = &store.add(name + ".bias", rng.uniform_tensor({out}, -bound, bound));
  return l;
}

Linear Linear::zeros(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out) {
  Linear l;
  l.weight = &store.add(name + ".weight", Tensor({in, out}));
  l.bias = &store.add(name + ".bias", Tensor({out}));
  return l;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, std::size_t dim, double eps) {
  LayerNorm ln;
  ln.gain = &store.add(name + ".gain", Tensor::full({dim}, 1.0));
  ln.bias = &store.add(name + ".bias", Tensor({dim}));
  ln.eps = eps;
  return ln;
}

FFN FFN::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden_dim,
                std::size_t out, Rng& rng, bool zero_output) {
  FFN f;
  f.hidden = Linear::create(store, name + ".fc1", in, hidden_dim, rng);
  f.output = zero_output ? Linear::zeros(store, name + ".fc2", hidden_dim, out)
                         : Linear::create(store, name + ".fc2", hidden_dim, out, rng);
  return f;
}

AttentionParams AttentionParams::create(ParameterStore& store, const std::string& name, std::size_t dim,
                                        std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  AttentionParams p;
  p.q_proj = Linear::create(store, name + ".q", dim, dim, rng);
  p.k_proj = Linear::create(store, name + ".k", dim, dim, rng);
  p.v_proj = Linear::create(store, name + ".v", dim, dim, rng);
  p.out_proj = Linear::create(store, name + ".o", dim, dim, rng);
  p.heads = heads;
  return p;
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, const AttentionParams& params) {
  const bool batched = q.dims().size() == 3;
  if (!batched && q.dims().size() != 2) throw ShapeError("attention query must be rank 2 or 3");
  const Var qb = batched ? q : reshape(q, {1, q.dim(0), q.dim(1)});
  const Var kb = batched ? k : reshape(k, {1, k.dim(0), k.dim(1)});
  const Var vb = batched ? v : reshape(v, {1, v.dim(0), v.dim(1)});
  const std::size_t batch = qb.dim(0), nq = qb.dim(1), dim = qb.dim(2);
  const std::size_t nk = kb.dim(1);
  if (kb.dims() != vb.dims() || kb.dim(0) != batch || kb.dim(2) != dim) {
    throw ShapeError("attention key/value dims " + shape_str(k.dims()) + " / " + shape_str(v.dims()));
  }
  const std::size_t heads = params.heads;
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t dh = dim / heads;

  auto split = [&](const Var& x, std::size_t n) {
    // [B, n, H, dh] -> [B, H, n, dh] -> [B*H, n, dh]
    return reshape(permute(reshape(x, {batch, n, heads, dh}), {0, 2, 1, 3}), {batch * heads, n, dh});
  };
  const Var qh = split(params.q_proj(qb), nq);
  const Var kh = split(params.k_proj(kb), nk);
  const Var vh = split(params.v_proj(vb), nk);
  const Var weights = softmax(scale(bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(dh))));
  const Var ctx = bmm(weights, vh);
  const Var merged = reshape(permute(reshape(ctx, {batch, heads, nq, dh}), {0, 2, 1, 3}), {batch, nq, dim});
  const Var out = params.out_proj(merged);
  return batched ? out : reshape(out, {nq, dim});
}

}  // namespace stmx
