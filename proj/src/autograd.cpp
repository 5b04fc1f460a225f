#include "captionforge/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

namespace {

// c[m, n] += a[m, k] * b[k, n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m, n] += a[m, k] * b[n, k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m, n] += a[k, m]^T * b[k, n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Graph& graph_of(Var a) {
  if (!a.graph) throw std::logic_error("operation on a detached Var");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw std::logic_error("operands belong to different graphs");
  return graph_of(a);
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

// ---- Var / Graph ----------------------------------------------------------

const Tensor& Var::value() const { return graph->value(*this); }
bool Var::requires_grad() const { return graph->requires_grad(*this); }

Var Graph::make(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::param(const Tensor& external, bool requires_grad) {
  Node n;
  n.external = &external;
  n.requires_grad = requires_grad;
  return make(std::move(n));
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.allow_inf = !requires_grad && !all_finite(value);
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  n.op = requires_grad ? "input" : "constant";
  return make(std::move(n));
}

Var Graph::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
                const char* op_name) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(backward), op_name);
}

Var Graph::push(Tensor value, std::span<const Var> inputs, BackwardFn backward,
                const char* op_name) {
  Node n;
  n.owned = std::move(value);
  n.op = op_name;
  for (const Var& in : inputs) {
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    n.allow_inf = n.allow_inf || nodes_[in.id].allow_inf;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return make(std::move(n));
}

const Tensor& Graph::value(Var v) const { return nodes_[v.id].value(); }

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(n.value().shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw std::logic_error("backward: loss belongs to another graph");
  if (value(loss).size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_string(value(loss).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // A rule only writes to earlier nodes, so this buffer can be lent out.
    Tensor g = std::move(n.grad);
    n.backward(*this, g);
    nodes_[i].grad = std::move(g);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value().shape(), 0.0);
  return n.grad;
}

std::size_t Graph::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Tensor& t = nodes_[i].value();
    for (double v : t.values()) {
      if (std::isnan(v) || (std::isinf(v) && !nodes_[i].allow_inf)) return i;
    }
  }
  return nodes_.size();
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() != 2 || sa.back() != sb[0]) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(sa) + " · " +
                     shape_string(sb));
  }
  const std::size_t k = sb[0];
  const std::size_t n = sb[1];
  const std::size_t m = a.value().size() / k;
  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor out(out_shape, 0.0);
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return g.push(
      std::move(out), {a, b},
      [a, b, m, k, n](Graph& gr, const Tensor& dc) {
        if (a.requires_grad()) gemm_nt(dc.data(), b.value().data(), gr.grad_buffer(a).data(), m, n, k);
        if (b.requires_grad()) gemm_tn(a.value().data(), dc.data(), gr.grad_buffer(b).data(), k, m, n);
      },
      "matmul");
}

Var bmm(Var a, Var b, bool transpose_b) {
  Graph& g = graph_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] &&
                  sa[2] == (transpose_b ? sb[2] : sb[1]);
  if (!ok) {
    throw ShapeError("bmm: incompatible operands " + shape_string(sa) + " · " + shape_string(sb) +
                     (transpose_b ? "ᵀ" : ""));
  }
  const std::size_t batch = sa[0], m = sa[1], k = sa[2];
  const std::size_t n = transpose_b ? sb[1] : sb[2];
  Tensor out({batch, m, n}, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    const double* ap = a.value().data() + i * m * k;
    const double* bp = b.value().data() + i * k * n;
    double* cp = out.data() + i * m * n;
    if (transpose_b) {
      gemm_nt(ap, bp, cp, m, k, n);
    } else {
      gemm_nn(ap, bp, cp, m, k, n);
    }
  }
  return g.push(
      std::move(out), {a, b},
      [a, b, batch, m, k, n, transpose_b](Graph& gr, const Tensor& dc) {
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        double* da = need_a ? gr.grad_buffer(a).data() : nullptr;
        double* db = need_b ? gr.grad_buffer(b).data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          const double* ap = a.value().data() + i * m * k;
          const double* bp = b.value().data() + i * k * n;
          const double* dcp = dc.data() + i * m * n;
          if (transpose_b) {
            // c = a bᵀ: da = dc b, db = dcᵀ a
            if (need_a) gemm_nn(dcp, bp, da + i * m * k, m, n, k);
            if (need_b) gemm_tn(dcp, ap, db + i * k * n, n, m, k);
          } else {
            if (need_a) gemm_nt(dcp, bp, da + i * m * k, m, n, k);
            if (need_b) gemm_tn(ap, dcp, db + i * k * n, k, m, n);
          }
        }
      },
      "bmm");
}

Var transpose(Var x) {
  Graph& g = graph_of(x);
  if (x.shape().size() != 2) throw ShapeError("transpose: rank-2 input required, got " + shape_string(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
  return g.push(
      std::move(out), {x},
      [x, r, c](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j * r + i];
      },
      "transpose");
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  return g.push(
      std::move(out), {x},
      [x](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      },
      "reshape");
}

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("add", a, b);
  Tensor out = a.value();
  add_into(out, b.value());
  return g.push(
      std::move(out), {a, b},
      [a, b](Graph& gr, const Tensor& dy) {
        if (a.requires_grad()) add_into(gr.grad_buffer(a), dy);
        if (b.requires_grad()) add_into(gr.grad_buffer(b), dy);
      },
      "add");
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return g.push(
      std::move(out), {a, b},
      [a, b](Graph& gr, const Tensor& dy) {
        if (a.requires_grad()) add_into(gr.grad_buffer(a), dy);
        if (b.requires_grad()) {
          Tensor& db = gr.grad_buffer(b);
          for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return g.push(
      std::move(out), {a, b},
      [a, b](Graph& gr, const Tensor& dy) {
        if (a.requires_grad()) {
          Tensor& da = gr.grad_buffer(a);
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * b.value()[i];
        }
        if (b.requires_grad()) {
          Tensor& db = gr.grad_buffer(b);
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * a.value()[i];
        }
      },
      "mul");
}

Var add_trailing(Var x, Var b) {
  Graph& g = graph_of(x, b);
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sx.size() && std::equal(sb.rbegin(), sb.rend(), sx.rbegin());
  if (!suffix) {
    throw ShapeError("add_trailing: " + shape_string(sb) + " is not a suffix of " + shape_string(sx));
  }
  const std::size_t inner = b.value().size();
  const std::size_t outer = x.value().size() / inner;
  Tensor out = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += b.value()[i];
  return g.push(
      std::move(out), {x, b},
      [x, b, inner, outer](Graph& gr, const Tensor& dy) {
        if (x.requires_grad()) add_into(gr.grad_buffer(x), dy);
        if (b.requires_grad()) {
          Tensor& db = gr.grad_buffer(b);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) db[i] += dy[o * inner + i];
        }
      },
      "add_trailing");
}

Var mul_rows(Var x, Var w) {
  Graph& g = graph_of(x, w);
  const Shape& sx = x.shape();
  Shape expected(sx.begin(), sx.end() - 1);
  if (expected.empty()) expected = {1};
  if (w.value().size() != shape_size(expected) || sx.size() < 2) {
    throw ShapeError("mul_rows: weights " + shape_string(w.shape()) + " do not match rows of " +
                     shape_string(sx));
  }
  const std::size_t d = sx.back();
  const std::size_t rows = x.value().size() / d;
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= w.value()[r];
  return g.push(
      std::move(out), {x, w},
      [x, w, d, rows](Graph& gr, const Tensor& dy) {
        if (x.requires_grad()) {
          Tensor& dx = gr.grad_buffer(x);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += dy[r * d + j] * w.value()[r];
        }
        if (w.requires_grad()) {
          Tensor& dw = gr.grad_buffer(w);
          for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += dy[r * d + j] * x.value()[r * d + j];
            dw[r] += acc;
          }
        }
      },
      "mul_rows");
}

Var scale(Var x, double factor) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return g.push(
      std::move(out), {x},
      [x, factor](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
      },
      "scale");
}

Var add_scalar(Var x, double shift) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v += shift;
  return g.push(
      std::move(out), {x}, [x](Graph& gr, const Tensor& dy) { add_into(gr.grad_buffer(x), dy); },
      "add_scalar");
}

Var relu(Var x) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return g.push(
      std::move(out), {x},
      [x](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (x.value()[i] > 0.0) dx[i] += dy[i];
      },
      "relu");
}

namespace {
double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var x) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v = logistic(v);
  Tensor saved = out;
  return g.push(
      std::move(out), {x},
      [x, s = std::move(saved)](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * s[i] * (1.0 - s[i]);
      },
      "sigmoid");
}

// ---- reductions -------------------------------------------------------------

Var sum(Var x) {
  Graph& g = graph_of(x);
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return g.push(
      Tensor::scalar(total), {x},
      [x](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[0];
      },
      "sum");
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_rows(Var x) {
  Graph& g = graph_of(x);
  if (x.shape().size() != 2) throw ShapeError("sum_rows: rank-2 input required, got " + shape_string(x.shape()));
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor out({d}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[i * d + j];
  return g.push(
      std::move(out), {x},
      [x, n, d](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += dy[j];
      },
      "sum_rows");
}

// ---- normalisation ----------------------------------------------------------

Var softmax_lastdim(Var x) {
  Graph& g = graph_of(x);
  const std::size_t d = x.value().last_dim();
  const std::size_t rows = x.value().size() / d;
  Tensor out(x.shape(), 0.0);
  const double* in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in + r * d;
    double* yr = out.data() + r * d;
    const double peak = *std::max_element(xr, xr + d);
    if (peak == -std::numeric_limits<double>::infinity()) continue;  // fully masked
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - peak);
      z += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  Tensor saved = out;
  Var y = g.push(
      std::move(out), {x},
      [x, saved = std::move(saved), d, rows](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = saved.data() + r * d;
          const double* gr_ = dy.data() + r * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += gr_[j] * yr[j];
          for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += yr[j] * (gr_[j] - dot);
        }
      },
      "softmax");
  return y;
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  const std::size_t d = x.value().last_dim();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                     shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  const std::size_t rows = x.value().size() / d;
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv;
      out[r * d + j] = gain.value()[j] * xhat[r * d + j] + bias.value()[j];
    }
  }
  return g.push(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& gr, const Tensor& dy) {
        if (gain.requires_grad()) {
          Tensor& dg = gr.grad_buffer(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * xhat[r * d + j];
        }
        if (bias.requires_grad()) {
          Tensor& db = gr.grad_buffer(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
        }
        if (x.requires_grad()) {
          Tensor& dx = gr.grad_buffer(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = dy[r * d + j] * gain.value()[j];
              mean_g += gh;
              mean_gx += gh * xhat[r * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = dy[r * d + j] * gain.value()[j];
              dx[r * d + j] += inv_std[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
            }
          }
        }
      },
      "layer_norm");
}

// ---- indexing / layout ------------------------------------------------------

Var embedding(Var table, std::vector<std::size_t> ids, Shape out_shape) {
  Graph& g = graph_of(table);
  if (table.shape().size() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_string(table.shape()));
  if (shape_size(out_shape) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for shape " + shape_string(out_shape));
  }
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  for (auto id : ids) {
    if (id >= vocab) {
      throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                      std::to_string(vocab));
    }
  }
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.value().data() + ids[i] * d, d, out.data() + i * d);
  return g.push(
      std::move(out), {table},
      [table, ids = std::move(ids), d](Graph& gr, const Tensor& dy) {
        Tensor& dt = gr.grad_buffer(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) dt[ids[i] * d + j] += dy[i * d + j];
      },
      "embedding");
}

Var split_heads(Var x, std::size_t heads) {
  Graph& g = graph_of(x);
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_string(s) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = s[0], t = s[1], dk = s[2] / heads;
  Tensor out({batch * heads, t, dk});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(x.value().data() + (b * t + i) * s[2] + h * dk, dk,
                    out.data() + ((b * heads + h) * t + i) * dk);
  return g.push(
      std::move(out), {x},
      [x, batch, heads, t, dk](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        const std::size_t width = heads * dk;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < t; ++i)
              for (std::size_t j = 0; j < dk; ++j)
                dx[(b * t + i) * width + h * dk + j] += dy[((b * heads + h) * t + i) * dk + j];
      },
      "split_heads");
}

Var merge_heads(Var x, std::size_t heads) {
  Graph& g = graph_of(x);
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[0] % heads != 0) {
    throw ShapeError("merge_heads: cannot merge " + shape_string(s) + " over " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = s[0] / heads, t = s[1], dk = s[2];
  const std::size_t width = heads * dk;
  Tensor out({batch, t, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(x.value().data() + ((b * heads + h) * t + i) * dk, dk,
                    out.data() + (b * t + i) * width + h * dk);
  return g.push(
      std::move(out), {x},
      [x, batch, heads, t, dk, width](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < t; ++i)
              for (std::size_t j = 0; j < dk; ++j)
                dx[((b * heads + h) * t + i) * dk + j] += dy[(b * t + i) * width + h * dk + j];
      },
      "merge_heads");
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  Graph& g = graph_of(parts[0]);
  const Shape& part_shape = parts[0].shape();
  const std::size_t n = parts[0].value().size();
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), part_shape.begin(), part_shape.end());
  Tensor out(out_shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].graph != &g) throw std::logic_error("stack: operands belong to different graphs");
    if (parts[i].shape() != part_shape) {
      throw ShapeError("stack: part " + std::to_string(i) + " has shape " +
                       shape_string(parts[i].shape()) + ", expected " + shape_string(part_shape));
    }
    std::copy_n(parts[i].value().data(), n, out.data() + i * n);
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.push(
      std::move(out), parts,
      [inputs, n](Graph& gr, const Tensor& dy) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          if (!inputs[i].requires_grad()) continue;
          Tensor& dp = gr.grad_buffer(inputs[i]);
          for (std::size_t j = 0; j < n; ++j) dp[j] += dy[i * n + j];
        }
      },
      "stack");
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  Graph& g = graph_of(x);
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep;
  return mul(x, g.constant(std::move(mask)));
}

// ---- losses -----------------------------------------------------------------

Var cross_entropy_masked(Var logits, std::span<const std::size_t> targets, std::size_t pad_id) {
  Graph& g = graph_of(logits);
  const std::size_t v = logits.value().last_dim();
  const std::size_t rows = logits.value().size() / v;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == pad_id) continue;
    if (t >= v) {
      throw DataError("cross_entropy_masked: target id " + std::to_string(t) +
                      " outside vocabulary of size " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw DataError("cross_entropy_masked: degenerate batch, every position is padding");

  Tensor probs(logits.shape(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const double* lr = logits.value().data() + r * v;
    const double peak = *std::max_element(lr, lr + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(lr[j] - peak);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += std::log(z) + peak - lr[targets[r]];
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<std::size_t> saved_targets(targets.begin(), targets.end());
  return g.push(
      Tensor::scalar(total * inv_count), {logits},
      [logits, probs = std::move(probs), t = std::move(saved_targets), pad_id, v, rows,
       inv_count](Graph& gr, const Tensor& dy) {
        Tensor& dl = gr.grad_buffer(logits);
        const double s = dy[0] * inv_count;
        for (std::size_t r = 0; r < rows; ++r) {
          if (t[r] == pad_id) continue;
          for (std::size_t j = 0; j < v; ++j) dl[r * v + j] += s * probs[r * v + j];
          dl[r * v + t[r]] -= s;
        }
      },
      "cross_entropy");
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  Graph& g = graph_of(logits);
  if (targets.size() != logits.value().size()) {
    throw ShapeError("bce_with_logits: targets " + shape_string(targets.shape()) + " vs logits " +
                     shape_string(logits.shape()));
  }
  const std::size_t n = targets.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.value()[i];
    total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return g.push(
      Tensor::scalar(total * inv_n), {logits},
      [logits, targets, inv_n](Graph& gr, const Tensor& dy) {
        Tensor& dl = gr.grad_buffer(logits);
        for (std::size_t i = 0; i < dl.size(); ++i)
          dl[i] += dy[0] * inv_n * (logistic(logits.value()[i]) - targets[i]);
      },
      "bce_with_logits");
}

}  // namespace captionforge
