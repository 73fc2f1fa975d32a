#include "latf/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "latf/kernels.hpp"

namespace latf {

using detail::Node;
namespace k = kernels;

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n), value);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values,
                         bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("from_data: " + shape_str(shape) +
                                " does not hold " +
                                std::to_string(values.size()) + " values");
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::make_shared<std::vector<double>>(std::move(values));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::share(std::vector<int> shape,
                     std::shared_ptr<std::vector<double>> data,
                     bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (!data || n != static_cast<int64_t>(data->size()))
    throw std::invalid_argument("share: storage does not match " +
                                shape_str(shape));
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::move(data);
  t.node_->requires_grad = requires_grad;
  return t;
}

double Tensor::value() const {
  if (numel() != 1) throw std::logic_error("value(): tensor is not a scalar");
  return (*node_->data)[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::logic_error("grad(): no gradient has been accumulated");
  return node_->grad;
}

void Tensor::backward(double seed) const {
  if (numel() != 1)
    throw std::logic_error("backward(): output is not a scalar");
  if (!node_->requires_grad) return;

  // iterative post-order over grad-requiring ancestry
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------

namespace {

Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(values));
  bool rg = false;
  for (const Tensor& t : inputs) rg = rg || t.requires_grad();
  out.node_->requires_grad = rg;
  if (rg) {
    for (const Tensor& t : inputs) {
      if (t.requires_grad()) out.node_->parents.push_back(t.node_);
    }
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// rows/cols of a 1-D or 2-D tensor, treating 1-D as a single row
void row_view(const Tensor& t, int* rows, int* cols) {
  if (t.ndim() == 1) {
    *rows = 1;
    *cols = t.dim(0);
  } else if (t.ndim() == 2) {
    *rows = t.dim(0);
    *cols = t.dim(1);
  } else {
    throw std::invalid_argument("expected a 1-D or 2-D tensor, got " +
                                shape_str(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------
// basic arithmetic
// ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  int m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < kk; ++l) {
      k::axpy(pa[i * kk + l], pb + static_cast<size_t>(l) * n,
              out.data() + static_cast<size_t>(i) * n, n);
    }
  }
  Tensor ta = a, tb = b;
  return make_op({m, n}, std::move(out), {a, b}, [ta, tb, m, kk, n](Node& self) {
    const double* g = self.grad.data();
    if (ta.requires_grad()) {
      ta.node_->ensure_grad();
      double* da = ta.node_->grad.data();
      const double* pb = tb.data();
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < kk; ++l)
          da[i * kk + l] += k::dot(g + static_cast<size_t>(i) * n,
                                   pb + static_cast<size_t>(l) * n, n);
    }
    if (tb.requires_grad()) {
      tb.node_->ensure_grad();
      double* db = tb.node_->grad.data();
      const double* pa = ta.data();
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < kk; ++l)
          k::axpy(pa[i * kk + l], g + static_cast<size_t>(i) * n,
                  db + static_cast<size_t>(l) * n, n);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  int rows, din;
  row_view(x, &rows, &din);
  if (w.ndim() != 2 || w.dim(1) != din)
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " does not match weight " +
                                shape_str(w.shape()));
  int dout = w.dim(0);
  std::vector<double> out(static_cast<size_t>(rows) * dout);
  const double* px = x.data();
  const double* pw = w.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = px + static_cast<size_t>(r) * din;
    double* yr = out.data() + static_cast<size_t>(r) * dout;
    for (int j = 0; j < dout; ++j)
      yr[j] = k::dot(xr, pw + static_cast<size_t>(j) * din, din);
  }
  Tensor tx = x, tw = w;
  std::vector<int> oshape =
      x.ndim() == 1 ? std::vector<int>{dout} : std::vector<int>{rows, dout};
  return make_op(std::move(oshape), std::move(out), {x, w},
                 [tx, tw, rows, din, dout](Node& self) {
                   const double* g = self.grad.data();
                   if (tx.requires_grad()) {
                     tx.node_->ensure_grad();
                     double* dx = tx.node_->grad.data();
                     const double* pw = tw.data();
                     for (int r = 0; r < rows; ++r) {
                       const double* gr = g + static_cast<size_t>(r) * dout;
                       double* dxr = dx + static_cast<size_t>(r) * din;
                       for (int j = 0; j < dout; ++j)
                         k::axpy(gr[j], pw + static_cast<size_t>(j) * din, dxr,
                                 din);
                     }
                   }
                   if (tw.requires_grad()) {
                     tw.node_->ensure_grad();
                     double* dw = tw.node_->grad.data();
                     const double* px = tx.data();
                     for (int r = 0; r < rows; ++r) {
                       const double* gr = g + static_cast<size_t>(r) * dout;
                       const double* xr = px + static_cast<size_t>(r) * din;
                       for (int j = 0; j < dout; ++j)
                         k::axpy(gr[j], xr, dw + static_cast<size_t>(j) * din,
                                 din);
                     }
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.vec());
  const double* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  Tensor ta = a, tb = b;
  return make_op(a.shape(), std::move(out), {a, b}, [ta, tb](Node& self) {
    for (const Tensor& t : {ta, tb}) {
      if (!t.requires_grad()) continue;
      t.node_->ensure_grad();
      double* d = t.node_->grad.data();
      const double* g = self.grad.data();
      for (size_t i = 0; i < self.grad.size(); ++i) d[i] += g[i];
    }
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  int rows, cols;
  row_view(x, &rows, &cols);
  if (b.ndim() != 1 || b.dim(0) != cols)
    throw std::invalid_argument("add_rowvec: " + shape_str(b.shape()) +
                                " does not broadcast over " +
                                shape_str(x.shape()));
  std::vector<double> out(x.vec());
  const double* pb = b.data();
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < cols; ++j) out[static_cast<size_t>(r) * cols + j] += pb[j];
  Tensor tx = x, tb = b;
  return make_op(x.shape(), std::move(out), {x, b},
                 [tx, tb, rows, cols](Node& self) {
                   const double* g = self.grad.data();
                   if (tx.requires_grad()) {
                     tx.node_->ensure_grad();
                     double* dx = tx.node_->grad.data();
                     for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += g[i];
                   }
                   if (tb.requires_grad()) {
                     tb.node_->ensure_grad();
                     double* db = tb.node_->grad.data();
                     for (int r = 0; r < rows; ++r)
                       for (int j = 0; j < cols; ++j)
                         db[j] += g[static_cast<size_t>(r) * cols + j];
                   }
                 });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.vec());
  for (double& v : out) v *= c;
  Tensor tx = x;
  return make_op(x.shape(), std::move(out), {x}, [tx, c](Node& self) {
    tx.node_->ensure_grad();
    double* dx = tx.node_->grad.data();
    const double* g = self.grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += c * g[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.vec()) s += v;
  Tensor tx = x;
  return make_op({1}, {s}, {x}, [tx](Node& self) {
    tx.node_->ensure_grad();
    double g = self.grad[0];
    for (double& d : tx.node_->grad) d += g;
  });
}

Tensor gather_rows(const Tensor& x, std::vector<int> rows) {
  if (x.ndim() != 2)
    throw std::invalid_argument("gather_rows: expected 2-D input");
  int cols = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= x.dim(0))
      throw std::invalid_argument("gather_rows: row " + std::to_string(r) +
                                  " out of range for " + shape_str(x.shape()));
  std::vector<double> out(rows.size() * static_cast<size_t>(cols));
  const double* px = x.data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + i * cols, px + static_cast<size_t>(rows[i]) * cols,
                sizeof(double) * static_cast<size_t>(cols));
  Tensor tx = x;
  auto idx = std::make_shared<std::vector<int>>(std::move(rows));
  return make_op({static_cast<int>(idx->size()), cols}, std::move(out), {x},
                 [tx, idx, cols](Node& self) {
                   tx.node_->ensure_grad();
                   double* dx = tx.node_->grad.data();
                   const double* g = self.grad.data();
                   for (size_t i = 0; i < idx->size(); ++i)
                     k::axpy(1.0, g + i * cols,
                             dx + static_cast<size_t>((*idx)[i]) * cols, cols);
                 });
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids,
                  const std::vector<double>& pos_table, int max_len,
                  const std::vector<int>& positions) {
  if (table.ndim() != 2)
    throw std::invalid_argument("embed_rows: table must be 2-D");
  if (ids.size() != positions.size())
    throw std::invalid_argument("embed_rows: ids/positions length mismatch");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embed_rows: token id " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(v));
  for (int p : positions)
    if (p < 0 || p >= max_len)
      throw std::invalid_argument("embed_rows: position " + std::to_string(p) +
                                  " exceeds max_len " + std::to_string(max_len));
  int rows = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(rows) * d);
  const double* pt = table.data();
  for (int r = 0; r < rows; ++r) {
    const double* trow = pt + static_cast<size_t>(ids[r]) * d;
    const double* prow = pos_table.data() + static_cast<size_t>(positions[r]) * d;
    double* yr = out.data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) yr[j] = trow[j] + prow[j];
  }
  Tensor tt = table;
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return make_op({rows, d}, std::move(out), {table},
                 [tt, ids_copy, d](Node& self) {
                   tt.node_->ensure_grad();
                   double* dt = tt.node_->grad.data();
                   const double* g = self.grad.data();
                   for (size_t r = 0; r < ids_copy->size(); ++r)
                     k::axpy(1.0, g + r * d,
                             dt + static_cast<size_t>((*ids_copy)[r]) * d, d);
                 });
}

// ---------------------------------------------------------------------
// normalization / activations
// ---------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  int rows, n;
  row_view(x, &rows, &n);
  if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 ||
      bias.dim(0) != n)
    throw std::invalid_argument("layer_norm: gain/bias must be [" +
                                std::to_string(n) + "], got " +
                                shape_str(gain.shape()) + " and " +
                                shape_str(bias.shape()));
  auto xhat = std::make_shared<std::vector<double>>(x.vec().size());
  auto sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  std::vector<double> out(x.vec().size());
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = px + static_cast<size_t>(r) * n;
    double* hr = xhat->data() + static_cast<size_t>(r) * n;
    k::layer_norm_row(xr, n, kLayerNormEps, hr, &(*sigma)[static_cast<size_t>(r)]);
    double* yr = out.data() + static_cast<size_t>(r) * n;
    for (int j = 0; j < n; ++j) yr[j] = pg[j] * hr[j] + pb[j];
  }
  Tensor tx = x, tg = gain, tb = bias;
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [tx, tg, tb, xhat, sigma, rows, n](Node& self) {
                   const double* g = self.grad.data();
                   const double* pg = tg.data();
                   if (tg.requires_grad()) tg.node_->ensure_grad();
                   if (tb.requires_grad()) tb.node_->ensure_grad();
                   if (tx.requires_grad()) tx.node_->ensure_grad();
                   for (int r = 0; r < rows; ++r) {
                     const double* gr = g + static_cast<size_t>(r) * n;
                     const double* hr = xhat->data() + static_cast<size_t>(r) * n;
                     if (tg.requires_grad()) {
                       double* dg = tg.node_->grad.data();
                       for (int j = 0; j < n; ++j) dg[j] += gr[j] * hr[j];
                     }
                     if (tb.requires_grad()) {
                       double* db = tb.node_->grad.data();
                       for (int j = 0; j < n; ++j) db[j] += gr[j];
                     }
                     if (tx.requires_grad()) {
                       double* dx = tx.node_->grad.data() + static_cast<size_t>(r) * n;
                       double mean_h = 0.0, mean_hx = 0.0;
                       for (int j = 0; j < n; ++j) {
                         double h = gr[j] * pg[j];
                         mean_h += h;
                         mean_hx += h * hr[j];
                       }
                       mean_h /= n;
                       mean_hx /= n;
                       double inv = 1.0 / (*sigma)[static_cast<size_t>(r)];
                       for (int j = 0; j < n; ++j) {
                         double h = gr[j] * pg[j];
                         dx[j] += (h - mean_h - hr[j] * mean_hx) * inv;
                       }
                     }
                   }
                 });
}

Tensor activation(const Tensor& x) {
  std::vector<double> out(x.vec().size());
  const double* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = k::act(px[i]);
  Tensor tx = x;
  return make_op(x.shape(), std::move(out), {x}, [tx](Node& self) {
    tx.node_->ensure_grad();
    double* dx = tx.node_->grad.data();
    const double* g = self.grad.data();
    const double* px = tx.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      dx[i] += g[i] * k::act_grad(px[i]);
  });
}

// ---------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------

Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& mask) {
  int rows, n;
  row_view(logits, &rows, &n);
  if (mask.size() != static_cast<size_t>(logits.numel()))
    throw std::invalid_argument(
        "masked_softmax: mask size " + std::to_string(mask.size()) +
        " does not match logits " + shape_str(logits.shape()));
  std::vector<double> out(logits.vec().size());
  const double* ps = logits.data();
  for (int r = 0; r < rows; ++r) {
    int cnt = k::softmax_masked(ps + static_cast<size_t>(r) * n,
                                mask.data() + static_cast<size_t>(r) * n, n,
                                out.data() + static_cast<size_t>(r) * n);
    if (cnt == 0)
      throw std::invalid_argument("masked_softmax: row " + std::to_string(r) +
                                  " is fully masked");
  }
  Tensor tl = logits;
  auto probs = std::make_shared<std::vector<double>>(out);
  return make_op(logits.shape(), std::move(out), {logits},
                 [tl, probs, rows, n](Node& self) {
                   tl.node_->ensure_grad();
                   double* dx = tl.node_->grad.data();
                   const double* g = self.grad.data();
                   for (int r = 0; r < rows; ++r) {
                     const double* yr = probs->data() + static_cast<size_t>(r) * n;
                     const double* gr = g + static_cast<size_t>(r) * n;
                     double s = 0.0;
                     for (int j = 0; j < n; ++j) s += gr[j] * yr[j];
                     double* dr = dx + static_cast<size_t>(r) * n;
                     for (int j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - s);
                   }
                 });
}

Tensor log_softmax(const Tensor& x) {
  int rows, n;
  row_view(x, &rows, &n);
  std::vector<double> out(x.vec().size());
  const double* px = x.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = px + static_cast<size_t>(r) * n;
    double lse = k::logsumexp(xr, n);
    double* yr = out.data() + static_cast<size_t>(r) * n;
    for (int j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
  Tensor tx = x;
  auto logp = std::make_shared<std::vector<double>>(out);
  return make_op(x.shape(), std::move(out), {x}, [tx, logp, rows, n](Node& self) {
    tx.node_->ensure_grad();
    double* dx = tx.node_->grad.data();
    const double* g = self.grad.data();
    for (int r = 0; r < rows; ++r) {
      const double* gr = g + static_cast<size_t>(r) * n;
      const double* lr = logp->data() + static_cast<size_t>(r) * n;
      double gs = 0.0;
      for (int j = 0; j < n; ++j) gs += gr[j];
      double* dr = dx + static_cast<size_t>(r) * n;
      for (int j = 0; j < n; ++j) dr[j] += gr[j] - std::exp(lr[j]) * gs;
    }
  });
}

namespace {

void check_log_distribution(const Tensor& lp) {
  if (lp.ndim() == 2 && lp.dim(0) != 1)
    throw std::invalid_argument("cross_entropy: expected a single row");
  double lse = kernels::logsumexp(lp.data(), static_cast<int>(lp.numel()));
  if (std::abs(lse) > 1e-6)
    throw std::invalid_argument(
        "cross_entropy: input is not a normalized log-distribution (logsumexp=" +
        std::to_string(lse) + ")");
}

}  // namespace

Tensor cross_entropy(const Tensor& log_probs, int target) {
  check_log_distribution(log_probs);
  int n = static_cast<int>(log_probs.numel());
  if (target < 0 || target >= n)
    throw std::invalid_argument("cross_entropy: target " +
                                std::to_string(target) +
                                " outside vocabulary of size " +
                                std::to_string(n));
  Tensor tl = log_probs;
  double loss = -log_probs.data()[target];
  return make_op({1}, {loss}, {log_probs}, [tl, target](Node& self) {
    tl.node_->ensure_grad();
    tl.node_->grad[static_cast<size_t>(target)] -= self.grad[0];
  });
}

Tensor cross_entropy(const Tensor& log_probs,
                     const std::vector<double>& target) {
  check_log_distribution(log_probs);
  int n = static_cast<int>(log_probs.numel());
  if (static_cast<int>(target.size()) != n)
    throw std::invalid_argument("cross_entropy: target size " +
                                std::to_string(target.size()) +
                                " does not match vocabulary " +
                                std::to_string(n));
  double tsum = 0.0;
  for (double t : target) tsum += t;
  if (std::abs(tsum - 1.0) > 1e-6)
    throw std::invalid_argument("cross_entropy: soft target sums to " +
                                std::to_string(tsum));
  double loss = -k::dot(target.data(), log_probs.data(), n);
  Tensor tl = log_probs;
  auto tgt = std::make_shared<std::vector<double>>(target);
  return make_op({1}, {loss}, {log_probs}, [tl, tgt](Node& self) {
    tl.node_->ensure_grad();
    double g = self.grad[0];
    double* d = tl.node_->grad.data();
    for (size_t j = 0; j < tgt->size(); ++j) d[j] -= g * (*tgt)[j];
  });
}

namespace {

// common machinery for the fused row losses: computes per-row softmax
// probabilities and the summed loss
struct RowLossState {
  std::shared_ptr<std::vector<double>> probs;
  double total = 0.0;
};

RowLossState row_loss_forward(const Tensor& logits, int rows, int v) {
  RowLossState st;
  st.probs = std::make_shared<std::vector<double>>(logits.vec().size());
  const double* pl = logits.data();
  for (int r = 0; r < rows; ++r)
    k::softmax_masked(pl + static_cast<size_t>(r) * v, nullptr, v,
                      st.probs->data() + static_cast<size_t>(r) * v);
  return st;
}

}  // namespace

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy_rows: logits must be 2-D");
  int rows = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy_rows: expected " +
                                std::to_string(rows) + " targets, got " +
                                std::to_string(targets.size()));
  for (int t : targets)
    if (t < 0 || t >= v)
      throw std::invalid_argument("cross_entropy_rows: target id " +
                                  std::to_string(t) +
                                  " outside vocabulary of size " +
                                  std::to_string(v));
  RowLossState st = row_loss_forward(logits, rows, v);
  const double* pl = logits.data();
  for (int r = 0; r < rows; ++r) {
    double lse = k::logsumexp(pl + static_cast<size_t>(r) * v, v);
    st.total += lse - pl[static_cast<size_t>(r) * v + targets[static_cast<size_t>(r)]];
  }
  Tensor tl = logits;
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto probs = st.probs;
  return make_op({1}, {st.total}, {logits}, [tl, tgt, probs, rows, v](Node& self) {
    tl.node_->ensure_grad();
    double g = self.grad[0];
    double* d = tl.node_->grad.data();
    const double* p = probs->data();
    for (int r = 0; r < rows; ++r) {
      const size_t base = static_cast<size_t>(r) * v;
      for (int j = 0; j < v; ++j) d[base + j] += g * p[base + j];
      d[base + static_cast<size_t>((*tgt)[static_cast<size_t>(r)])] -= g;
    }
  });
}

Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<double>& soft_targets) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy_rows: logits must be 2-D");
  int rows = logits.dim(0), v = logits.dim(1);
  if (soft_targets.size() != static_cast<size_t>(logits.numel()))
    throw std::invalid_argument(
        "cross_entropy_rows: soft target matrix does not match logits");
  RowLossState st = row_loss_forward(logits, rows, v);
  const double* pl = logits.data();
  for (int r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * v;
    double tsum = 0.0;
    for (int j = 0; j < v; ++j) tsum += soft_targets[base + j];
    if (std::abs(tsum - 1.0) > 1e-6)
      throw std::invalid_argument("cross_entropy_rows: soft target row " +
                                  std::to_string(r) + " sums to " +
                                  std::to_string(tsum));
    double lse = k::logsumexp(pl + base, v);
    st.total += lse - k::dot(soft_targets.data() + base, pl + base, v);
  }
  Tensor tl = logits;
  auto tgt = std::make_shared<std::vector<double>>(soft_targets);
  auto probs = st.probs;
  return make_op({1}, {st.total}, {logits}, [tl, tgt, probs, rows, v](Node& self) {
    tl.node_->ensure_grad();
    double g = self.grad[0];
    double* d = tl.node_->grad.data();
    const double* p = probs->data();
    const double* t = tgt->data();
    for (size_t i = 0; i < static_cast<size_t>(rows) * v; ++i)
      d[i] += g * (p[i] - t[i]);
  });
}

// ---------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  size_t n = x.vec().size();
  auto keep = std::make_shared<std::vector<uint8_t>>(n);
  for (size_t i = 0; i < n; ++i) (*keep)[i] = rng.real01() >= p ? 1 : 0;
  double inv = 1.0 / (1.0 - p);
  std::vector<double> out(n);
  const double* px = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = (*keep)[i] ? px[i] * inv : 0.0;
  Tensor tx = x;
  return make_op(x.shape(), std::move(out), {x}, [tx, keep, inv](Node& self) {
    tx.node_->ensure_grad();
    double* dx = tx.node_->grad.data();
    const double* g = self.grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if ((*keep)[i]) dx[i] += g[i] * inv;
  });
}

// ---------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------

MaskPtr causal_mask(int size) {
  auto m = std::make_shared<AttnMask>();
  m->size = size;
  m->allowed.assign(static_cast<size_t>(size) * size, 0);
  for (int q = 0; q < size; ++q)
    for (int c = 0; c <= q; ++c) m->allowed[static_cast<size_t>(q) * size + c] = 1;
  return m;
}

MaskPtr flat_causal_mask(int prefix_len, int n_rollouts, int rollout_len) {
  int size = prefix_len + n_rollouts * rollout_len;
  auto m = std::make_shared<AttnMask>();
  m->size = size;
  m->allowed.assign(static_cast<size_t>(size) * size, 0);
  auto block_of = [&](int idx) {  // -1 for prefix, else rollout index
    return idx < prefix_len ? -1 : (idx - prefix_len) / rollout_len;
  };
  for (int q = 0; q < size; ++q) {
    int bq = block_of(q);
    for (int c = 0; c < size; ++c) {
      int bc = block_of(c);
      bool ok;
      if (bq == -1) {
        ok = bc == -1 && c <= q;  // prefix attends causally within prefix
      } else if (bc == -1) {
        ok = true;  // rollouts see the whole prefix
      } else {
        ok = bc == bq && c <= q;  // own block, causally
      }
      if (ok) m->allowed[static_cast<size_t>(q) * size + c] = 1;
    }
  }
  return m;
}

// ---------------------------------------------------------------------
// fused multi-head attention
// ---------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k_in, const Tensor& v,
                 const std::vector<AttnSpan>& spans, int n_head, double scale,
                 double dropout_p, Rng* rng) {
  check_same_shape(q, k_in, "attention(q,k)");
  check_same_shape(q, v, "attention(q,v)");
  if (q.ndim() != 2) throw std::invalid_argument("attention: inputs must be 2-D");
  int rows = q.dim(0), d = q.dim(1);
  if (n_head <= 0 || d % n_head != 0)
    throw std::invalid_argument("attention: head count " +
                                std::to_string(n_head) +
                                " does not divide width " + std::to_string(d));
  int dh = d / n_head;
  int64_t total = 0;
  for (const AttnSpan& s : spans) {
    if (s.mask && s.mask->size != s.len)
      throw std::invalid_argument("attention: mask size does not match span");
    total += s.len;
  }
  if (total != rows)
    throw std::invalid_argument("attention: spans cover " +
                                std::to_string(total) + " rows of " +
                                std::to_string(rows));
  bool use_drop = dropout_p > 0.0 && rng != nullptr;

  // saved attention weights (post-softmax, pre-dropout), one block per
  // (span, head), plus keep bytes when dropout is active
  size_t alpha_total = 0;
  for (const AttnSpan& s : spans)
    alpha_total += static_cast<size_t>(s.len) * s.len * static_cast<size_t>(n_head);
  auto alpha = std::make_shared<std::vector<double>>(alpha_total);
  auto keep = use_drop ? std::make_shared<std::vector<uint8_t>>(alpha_total)
                       : nullptr;

  std::vector<double> out(static_cast<size_t>(rows) * d, 0.0);
  const double* pq = q.data();
  const double* pk = k_in.data();
  const double* pv = v.data();
  std::vector<double> srow;
  double inv_keep = use_drop ? 1.0 / (1.0 - dropout_p) : 1.0;

  size_t ablock = 0;
  for (const AttnSpan& sp : spans) {
    int t = sp.len;
    const uint8_t* mask = sp.mask ? sp.mask->allowed.data() : nullptr;
    srow.resize(static_cast<size_t>(t));
    for (int h = 0; h < n_head; ++h) {
      int c0 = h * dh;
      for (int r = 0; r < t; ++r) {
        const double* qr = pq + static_cast<size_t>(sp.offset + r) * d + c0;
        const uint8_t* mrow = mask ? mask + static_cast<size_t>(r) * t : nullptr;
        for (int c = 0; c < t; ++c) {
          if (mrow && !mrow[c]) {
            srow[static_cast<size_t>(c)] = 0.0;
            continue;
          }
          srow[static_cast<size_t>(c)] =
              scale * k::dot(qr, pk + static_cast<size_t>(sp.offset + c) * d + c0, dh);
        }
        double* arow = alpha->data() + ablock + (static_cast<size_t>(h) * t + r) * t;
        int cnt = k::softmax_masked(srow.data(), mrow, t, arow);
        if (cnt == 0)
          throw std::invalid_argument("attention: fully masked row " +
                                      std::to_string(r));
        double* orow = out.data() + static_cast<size_t>(sp.offset + r) * d + c0;
        if (use_drop) {
          uint8_t* krow = keep->data() + ablock + (static_cast<size_t>(h) * t + r) * t;
          for (int c = 0; c < t; ++c) {
            double a = arow[c];
            if (a == 0.0) {
              krow[c] = 0;
              continue;
            }
            krow[c] = rng->real01() >= dropout_p ? 1 : 0;
            if (krow[c])
              k::axpy(a * inv_keep, pv + static_cast<size_t>(sp.offset + c) * d + c0,
                      orow, dh);
          }
        } else {
          for (int c = 0; c < t; ++c) {
            double a = arow[c];
            if (a != 0.0)
              k::axpy(a, pv + static_cast<size_t>(sp.offset + c) * d + c0, orow, dh);
          }
        }
      }
    }
    ablock += static_cast<size_t>(t) * t * static_cast<size_t>(n_head);
  }

  Tensor tq = q, tk = k_in, tv = v;
  auto spans_copy = std::make_shared<std::vector<AttnSpan>>(spans);
  return make_op(
      q.shape(), std::move(out), {q, k_in, v},
      [tq, tk, tv, spans_copy, alpha, keep, n_head, dh, d, scale,
       inv_keep](Node& self) {
        const double* g = self.grad.data();
        tq.node_->ensure_grad();
        tk.node_->ensure_grad();
        tv.node_->ensure_grad();
        double* dq = tq.node_->grad.data();
        double* dk = tk.node_->grad.data();
        double* dv = tv.node_->grad.data();
        const double* pq = tq.data();
        const double* pk = tk.data();
        const double* pv = tv.data();
        std::vector<double> dalpha;
        size_t ablock = 0;
        for (const AttnSpan& sp : *spans_copy) {
          int t = sp.len;
          dalpha.resize(static_cast<size_t>(t));
          for (int h = 0; h < n_head; ++h) {
            int c0 = h * dh;
            for (int r = 0; r < t; ++r) {
              const double* arow =
                  alpha->data() + ablock + (static_cast<size_t>(h) * t + r) * t;
              const uint8_t* krow =
                  keep ? keep->data() + ablock + (static_cast<size_t>(h) * t + r) * t
                       : nullptr;
              const double* gr = g + static_cast<size_t>(sp.offset + r) * d + c0;
              // dV and d(alpha)
              for (int c = 0; c < t; ++c) {
                double a = arow[c];
                if (a == 0.0) {
                  dalpha[static_cast<size_t>(c)] = 0.0;
                  continue;
                }
                double aeff = (krow && !krow[c]) ? 0.0 : inv_keep;
                if (krow) {
                  if (krow[c])
                    k::axpy(a * inv_keep, gr,
                            dv + static_cast<size_t>(sp.offset + c) * d + c0, dh);
                } else {
                  k::axpy(a, gr, dv + static_cast<size_t>(sp.offset + c) * d + c0,
                          dh);
                  aeff = 1.0;
                }
                dalpha[static_cast<size_t>(c)] =
                    aeff == 0.0
                        ? 0.0
                        : aeff * k::dot(gr,
                                        pv + static_cast<size_t>(sp.offset + c) * d + c0,
                                        dh);
              }
              // softmax backward: ds = a .* (dalpha - sum(dalpha .* a))
              double s = 0.0;
              for (int c = 0; c < t; ++c) s += dalpha[static_cast<size_t>(c)] * arow[c];
              const double* qr = pq + static_cast<size_t>(sp.offset + r) * d + c0;
              double* dqr = dq + static_cast<size_t>(sp.offset + r) * d + c0;
              for (int c = 0; c < t; ++c) {
                double a = arow[c];
                if (a == 0.0) continue;
                double ds = a * (dalpha[static_cast<size_t>(c)] - s) * scale;
                k::axpy(ds, pk + static_cast<size_t>(sp.offset + c) * d + c0, dqr, dh);
                k::axpy(ds, qr, dk + static_cast<size_t>(sp.offset + c) * d + c0, dh);
              }
            }
          }
          ablock += static_cast<size_t>(t) * t * static_cast<size_t>(n_head);
        }
      });
}

}  // namespace latf
