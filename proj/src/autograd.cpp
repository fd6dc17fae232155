#include "stmixer/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace stmx {

namespace {

thread_local bool g_grad_enabled = true;

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
}

std::size_t prod(const Shape& dims, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= dims[i];
  return p;
}

template <typename F>
Var unary(const Var& x, F&& f, std::function<void(Node&)> backward) {
  Tensor out(x.dims());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  return make_op(std::move(out), {x}, std::move(backward));
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.dims() != value.dims()) grad = Tensor(value.dims());
  return grad;
}

Var::Var() : node_(std::make_shared<Node>()) {}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->grad_buffer();
}

double Var::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on " + shape_str(node_->value.dims()));
  return node_->value[0];
}

void Var::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() without seed on non-scalar " + shape_str(dims()));
  backward(Tensor::full(dims(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  if (seed.dims() != dims()) throw ShapeError("backward seed " + shape_str(seed.dims()) + " vs " + shape_str(dims()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Intermediate gradients start from zero on every pass; leaves accumulate.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor(n->value.dims());
  }
  Tensor& root = node_->grad_buffer();
  for (std::size_t i = 0; i < root.size(); ++i) root[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by op with output " + shape_str(value.dims()));
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!any) return out;
  Node& n = *out.node();
  n.requires_grad = true;
  n.parents.reserve(inputs.size());
  for (auto& in : inputs) n.parents.push_back(in.node());
  n.backward_fn = std::move(backward);
  return out;
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var sigmoid(const Var& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Var log_clamped(const Var& x, double floor) {
  return unary(x, [floor](double v) { return std::log(std::max(v, floor)); }, [floor](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > floor) g[i] += self.grad[i] / p.value[i];
    }
  });
}

Var abs(const Var& x) {
  return unary(x, [](double v) { return std::abs(v); }, [](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.value[i];
      g[i] += self.grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * self.grad[i];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const std::size_t d = bias.size();
  if (x.dims().empty() || x.dims().back() != d) {
    throw ShapeError("add_bias: " + shape_str(x.dims()) + " with bias " + shape_str(bias.dims()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % d];
  return make_op(std::move(out), {x, bias}, [d](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    }
  });
}

Var matmul(const Var& x, const Var& w) {
  if (w.dims().size() != 2 || x.dims().empty() || x.dims().back() != w.dim(0)) {
    throw ShapeError("matmul: " + shape_str(x.dims()) + " x " + shape_str(w.dims()));
  }
  const std::size_t k_dim = w.dim(0);
  const std::size_t m_dim = w.dim(1);
  const std::size_t rows = x.size() / k_dim;
  Shape out_dims = x.dims();
  out_dims.back() = m_dim;
  Tensor out(out_dims);
  const auto xv = x.value().data();
  const auto wv = w.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = o.data() + r * m_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double a = xv[r * k_dim + k];
      if (a == 0.0) continue;
      const double* wrow = wv.data() + k * m_dim;
      for (std::size_t m = 0; m < m_dim; ++m) orow[m] += a * wrow[m];
    }
  }
  return make_op(std::move(out), {x, w}, [rows, k_dim, m_dim](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const auto gy = self.grad.data();
    if (px.requires_grad) {
      auto gx = px.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = gy.data() + r * m_dim;
        for (std::size_t k = 0; k < k_dim; ++k) {
          const double* wrow = pw.value.data().data() + k * m_dim;
          double acc = 0.0;
          for (std::size_t m = 0; m < m_dim; ++m) acc += grow[m] * wrow[m];
          gx[r * k_dim + k] += acc;
        }
      }
    }
    if (pw.requires_grad) {
      auto gw = pw.grad_buffer().data();
      const auto xv = px.value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = gy.data() + r * m_dim;
        for (std::size_t k = 0; k < k_dim; ++k) {
          const double a = xv[r * k_dim + k];
          if (a == 0.0) continue;
          double* gwrow = gw.data() + k * m_dim;
          for (std::size_t m = 0; m < m_dim; ++m) gwrow[m] += a * grow[m];
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_bias(matmul(x, w), b); }

Var bmm(const Var& a, const Var& b, bool transpose_b) {
  if (a.dims().size() != 3 || b.dims().size() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  }
  const std::size_t batch = a.dim(0), m_dim = a.dim(1), k_dim = a.dim(2);
  const std::size_t n_dim = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k_dim) {
    throw ShapeError("bmm inner mismatch: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  }
  // Element (k, n) of the right operand for batch bi.
  auto b_index = [=](std::size_t bi, std::size_t k, std::size_t n) {
    return transpose_b ? (bi * n_dim + n) * k_dim + k : (bi * k_dim + k) * n_dim + n;
  };
  Tensor out({batch, m_dim, n_dim});
  const auto av = a.value().data();
  const auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t m = 0; m < m_dim; ++m) {
      double* orow = o.data() + (bi * m_dim + m) * n_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const double x = av[(bi * m_dim + m) * k_dim + k];
        if (x == 0.0) continue;
        for (std::size_t n = 0; n < n_dim; ++n) orow[n] += x * bv[b_index(bi, k, n)];
      }
    }
  }
  return make_op(std::move(out), {a, b}, [=](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto gy = self.grad.data();
    const auto av2 = pa.value.data();
    const auto bv2 = pb.value.data();
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer().data();
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t m = 0; m < m_dim; ++m) {
          const double* grow = gy.data() + (bi * m_dim + m) * n_dim;
          for (std::size_t k = 0; k < k_dim; ++k) {
            double acc = 0.0;
            for (std::size_t n = 0; n < n_dim; ++n) acc += grow[n] * bv2[b_index(bi, k, n)];
            ga[(bi * m_dim + m) * k_dim + k] += acc;
          }
        }
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t m = 0; m < m_dim; ++m) {
          const double* grow = gy.data() + (bi * m_dim + m) * n_dim;
          for (std::size_t k = 0; k < k_dim; ++k) {
            const double x = av2[(bi * m_dim + m) * k_dim + k];
            if (x == 0.0) continue;
            for (std::size_t n = 0; n < n_dim; ++n) gb[b_index(bi, k, n)] += x * grow[n];
          }
        }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = gain.size();
  if (x.dims().empty() || x.dims().back() != d || bias.size() != d) {
    throw ShapeError("layer_norm: " + shape_str(x.dims()) + " with gain " + shape_str(gain.dims()));
  }
  const std::size_t rows = x.size() / d;
  Tensor out(x.dims());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * inv;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return make_op(std::move(out), {x, gain, bias}, [=](Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto gy = self.grad.data();
    const auto gv2 = pg.value.data();
    if (px.requires_grad) {
      auto gx = px.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_g = 0.0, mean_gh = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double gh = gy[r * d + i] * gv2[i];
          mean_g += gh;
          mean_gh += gh * (*xhat)[r * d + i];
        }
        mean_g /= static_cast<double>(d);
        mean_gh /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
          const double gh = gy[r * d + i] * gv2[i];
          gx[r * d + i] += (*inv_std)[r] * (gh - mean_g - (*xhat)[r * d + i] * mean_gh);
        }
      }
    }
    if (pg.requires_grad) {
      auto gg = pg.grad_buffer().data();
      for (std::size_t j = 0; j < gy.size(); ++j) gg[j % d] += gy[j] * (*xhat)[j];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      for (std::size_t j = 0; j < gy.size(); ++j) gb[j % d] += gy[j];
    }
  });
}

Var softmax(const Var& x) {
  if (x.dims().empty() || x.dims().back() == 0) throw ShapeError("softmax over empty axis");
  const std::size_t d = x.dims().back();
  const std::size_t rows = x.size() / d;
  Tensor out(x.dims());
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      out[r * d + i] = std::exp(row[i] - mx);
      total += out[r * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] /= total;
  }
  return make_op(std::move(out), {x}, [rows, d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * self.value[r * d + i];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += self.value[r * d + i] * (self.grad[r * d + i] - dot);
    }
  });
}

Var reshape(const Var& x, Shape dims) {
  Tensor out = x.value().reshaped(std::move(dims));
  return make_op(std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var permute(const Var& x, const std::vector<std::size_t>& axes) {
  const Shape& in_dims = x.dims();
  const std::size_t rank = in_dims.size();
  if (axes.size() != rank) throw ShapeError("permute: axes rank mismatch for " + shape_str(in_dims));
  std::vector<bool> seen(rank, false);
  Shape out_dims(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || seen[axes[i]]) throw ShapeError("permute: invalid axes");
    seen[axes[i]] = true;
    out_dims[i] = in_dims[axes[i]];
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_dims[i];

  // src[j] is the input offset feeding output element j.
  auto src = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t j = 0; j < src->size(); ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += counter[i] * in_strides[axes[i]];
    (*src)[j] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++counter[i] < out_dims[i]) break;
      counter[i] = 0;
    }
  }
  Tensor out(out_dims);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = x.value()[(*src)[j]];
  return make_op(std::move(out), {x}, [src](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < src->size(); ++j) g[(*src)[j]] += self.grad[j];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Shape& first = parts[0].dims();
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  Shape out_dims = first;
  out_dims[axis] = 0;
  for (const auto& p : parts) {
    const Shape& d = p.dims();
    if (d.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i != axis && d[i] != first[i]) throw ShapeError("concat: " + shape_str(d) + " vs " + shape_str(first));
    }
    out_dims[axis] += d[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  const std::size_t out_row = out_dims[axis] * inner;
  Tensor out(out_dims);
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dims()[axis] * inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.value().data().data() + o * w, w, out.data().data() + o * out_row + col);
    }
    col += w;
  }
  return make_op(std::move(out), parts, [outer, out_row, widths](Node& self) {
    std::size_t c = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      const std::size_t w = widths[k];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += self.grad[o * out_row + c + i];
      }
      c += w;
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  if (axis >= x.dims().size() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.dims()));
  }
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return index_select(x, axis, idx);
}

Var index_select(const Var& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  const Shape& in_dims = x.dims();
  if (axis >= in_dims.size()) throw ShapeError("index_select axis out of range");
  for (std::size_t i : indices) {
    if (i >= in_dims[axis]) throw ShapeError("index_select index out of range for " + shape_str(in_dims));
  }
  const std::size_t outer = prod(in_dims, 0, axis);
  const std::size_t inner = prod(in_dims, axis + 1, in_dims.size());
  const std::size_t n_in = in_dims[axis];
  const std::size_t n_out = indices.size();
  Shape out_dims = in_dims;
  out_dims[axis] = n_out;
  Tensor out(out_dims);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n_out; ++j)
      std::copy_n(x.value().data().data() + (o * n_in + indices[j]) * inner, inner,
                  out.data().data() + (o * n_out + j) * inner);
  return make_op(std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n_out; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          g[(o * n_in + indices[j]) * inner + i] += self.grad[(o * n_out + j) * inner + i];
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const Shape& in_dims = x.dims();
  if (axis >= in_dims.size() || in_dims[axis] == 0) throw ShapeError("mean_axis on " + shape_str(in_dims));
  const std::size_t outer = prod(in_dims, 0, axis);
  const std::size_t inner = prod(in_dims, axis + 1, in_dims.size());
  const std::size_t n = in_dims[axis];
  Shape out_dims;
  for (std::size_t i = 0; i < in_dims.size(); ++i)
    if (i != axis) out_dims.push_back(in_dims[i]);
  if (out_dims.empty()) out_dims.push_back(1);
  Tensor out(out_dims);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x.value()[(o * n + k) * inner + i] * inv;
  return make_op(std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
  });
}

Var repeat_new_axis(const Var& x, std::size_t axis, std::size_t n) {
  const Shape& in_dims = x.dims();
  if (axis > in_dims.size()) throw ShapeError("repeat_new_axis axis out of range");
  const std::size_t outer = prod(in_dims, 0, axis);
  const std::size_t inner = prod(in_dims, axis, in_dims.size());
  Shape out_dims = in_dims;
  out_dims.insert(out_dims.begin() + static_cast<std::ptrdiff_t>(axis), n);
  Tensor out(out_dims);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(x.value().data().data() + o * inner, inner, out.data().data() + (o * n + k) * inner);
  return make_op(std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += self.grad[(o * n + k) * inner + i];
  });
}

Var gather(const Var& x, Shape out_dims, std::vector<std::size_t> source) {
  if (shape_numel(out_dims) != source.size()) throw ShapeError("gather: index count does not match " + shape_str(out_dims));
  Tensor out(std::move(out_dims));
  for (std::size_t j = 0; j < source.size(); ++j) {
    if (source[j] >= x.size()) throw ShapeError("gather: source offset out of range");
    out[j] = x.value()[source[j]];
  }
  auto src = std::make_shared<std::vector<std::size_t>>(std::move(source));
  return make_op(std::move(out), {x}, [src](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < src->size(); ++j) g[(*src)[j]] += self.grad[j];
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return make_op(Tensor::scalar(total), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var sum_of(const std::vector<Var>& terms) {
  if (terms.empty()) return constant(Tensor::scalar(0.0));
  double total = 0.0;
  for (const auto& t : terms) total += t.item();
  return make_op(Tensor::scalar(total), terms, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->grad_buffer()[0] += self.grad[0];
    }
  });
}

}  // namespace stmx
