#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "efficientspeech/ops.hpp"
#include "efficientspeech/tensor.hpp"

// Reverse-mode differentiation. A Var is a shared node holding a value and, when it takes part
// in differentiation, a gradient accumulator. Operations executed while a Tape is recording
// append a node with a backward closure; Tape::backward replays them in reverse creation order,
// which is a valid topological order because every node's inputs exist before it does.
namespace es::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::function<void(const Tensor<T>&)> backward;

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
      return;
    }
    if (grad.shape() != g.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match " +
                       shape_str(grad.shape()) + " at op " + std::string(op));
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }

  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Var<T>>& nodes() const { return nodes_; }

  // Builds the output node. The backward closure is only retained when some input needs a
  // gradient and the tape is recording; otherwise the node is a plain value.
  Var<T> record(Tensor<T> value, std::string_view op, const std::vector<Var<T>>& inputs,
                BackwardFn fn) {
    auto out = std::make_shared<Node<T>>();
    out->value = std::move(value);
    out->op = op;
    bool needs = false;
    if (recording_) {
      for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
    }
    if (needs) {
      out->requires_grad = true;
      out->backward = std::move(fn);
      nodes_.push_back(out);
    }
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded node. Returns how many nodes
  // ran their backward closure.
  std::size_t backward(const Var<T>& loss) {
    if (!loss || loss->value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       (loss ? shape_str(loss->value.shape()) : std::string("null")));
    }
    if (!loss->requires_grad) throw Error("backward: loss is not on the tape");
    loss->grad = Tensor<T>(loss->value.shape(), T(1));
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n.grad);
      ++visited;
    }
    return visited;
  }

  // Diagnostic for non-finite losses: first recorded node whose value is not finite.
  const Node<T>* first_non_finite() const {
    for (const auto& n : nodes_) {
      if (!n->value.all_finite()) return n.get();
    }
    return nullptr;
  }

  void clear() { nodes_.clear(); }

 private:
  bool recording_;
  std::vector<Var<T>> nodes_;
};

template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tensor<T> y = ops::linear_forward(x->value, w->value, b ? &b->value : nullptr);
  return tape.record(std::move(y), "linear", {x, w, b}, [x, w, b](const Tensor<T>& g) {
    Tensor<T> gx, gw, gb;
    ops::linear_backward(x->value, w->value, g, x->requires_grad ? &gx : nullptr,
                         w->requires_grad ? &gw : nullptr, (b && b->requires_grad) ? &gb : nullptr);
    if (x->requires_grad) x->accumulate(gx);
    if (w->requires_grad) w->accumulate(gw);
    if (b && b->requires_grad) b->accumulate(gb);
  });
}

template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  return linear(tape, a, b, Var<T>());
}

template <typename T>
Var<T> transpose(Tape<T>& tape, const Var<T>& x) {
  return tape.record(ops::transpose(x->value), "transpose", {x},
                     [x](const Tensor<T>& g) { x->accumulate(ops::transpose(g)); });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw ShapeError("add: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  }
  Tensor<T> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  return tape.record(std::move(y), "add", {a, b}, [a, b](const Tensor<T>& g) {
    a->accumulate(g);
    b->accumulate(g);
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T s) {
  Tensor<T> y = x->value;
  for (auto& v : y.data()) v *= s;
  return tape.record(std::move(y), "scale", {x}, [x, s](const Tensor<T>& g) {
    Tensor<T> gx = g;
    for (auto& v : gx.data()) v *= s;
    x->accumulate(gx);
  });
}

template <typename T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> y = ops::softmax_rows(x->value);
  auto saved = std::make_shared<Tensor<T>>(y);
  return tape.record(std::move(y), "softmax", {x}, [x, saved](const Tensor<T>& g) {
    x->accumulate(ops::softmax_rows_backward(*saved, g));
  });
}

template <typename T>
Var<T> activation(Tape<T>& tape, ops::Activation kind, const Var<T>& x) {
  return tape.record(ops::activation_forward(kind, x->value), ops::activation_name(kind), {x},
                     [x, kind](const Tensor<T>& g) { x->accumulate(ops::activation_backward(kind, x->value, g)); });
}

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
  auto cache = std::make_shared<ops::LayerNormCache<T>>();
  Tensor<T> y = ops::layer_norm_forward(x->value, gamma->value, beta->value, eps,
                                        tape.recording() ? cache.get() : nullptr);
  return tape.record(std::move(y), "layer_norm", {x, gamma, beta},
                     [x, gamma, beta, cache](const Tensor<T>& g) {
                       Tensor<T> gx, gg, gb;
                       ops::layer_norm_backward(x->value, gamma->value, g, *cache,
                                                x->requires_grad ? &gx : nullptr,
                                                gamma->requires_grad ? &gg : nullptr,
                                                beta->requires_grad ? &gb : nullptr);
                       if (x->requires_grad) x->accumulate(gx);
                       if (gamma->requires_grad) gamma->accumulate(gg);
                       if (beta->requires_grad) beta->accumulate(gb);
                     });
}

// x: c_in x L (channel-major).
template <typename T>
Var<T> conv1d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              const ops::Conv1dParams& p) {
  Tensor<T> y = ops::conv1d_forward(x->value, w->value, b ? &b->value : nullptr, p);
  return tape.record(std::move(y), "conv1d", {x, w, b}, [x, w, b, p](const Tensor<T>& g) {
    Tensor<T> gx, gw, gb;
    ops::conv1d_backward(x->value, w->value, g, p, x->requires_grad ? &gx : nullptr,
                         w->requires_grad ? &gw : nullptr, (b && b->requires_grad) ? &gb : nullptr);
    if (x->requires_grad) x->accumulate(gx);
    if (w->requires_grad) w->accumulate(gw);
    if (b && b->requires_grad) b->accumulate(gb);
  });
}

template <typename T>
Var<T> conv1d_transposed(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                         std::size_t stride) {
  Tensor<T> y = ops::conv1d_transposed_forward(x->value, w->value, b ? &b->value : nullptr, stride);
  return tape.record(std::move(y), "conv1d_transposed", {x, w, b}, [x, w, b, stride](const Tensor<T>& g) {
    Tensor<T> gx, gw, gb;
    ops::conv1d_transposed_backward(x->value, w->value, g, stride, x->requires_grad ? &gx : nullptr,
                                    w->requires_grad ? &gw : nullptr,
                                    (b && b->requires_grad) ? &gb : nullptr);
    if (x->requires_grad) x->accumulate(gx);
    if (w->requires_grad) w->accumulate(gw);
    if (b && b->requires_grad) b->accumulate(gb);
  });
}

// Column block [start, start + width) of an N x c matrix.
template <typename T>
Var<T> slice_cols(Tape<T>& tape, const Var<T>& x, std::size_t start, std::size_t width) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (start + width > c) throw ShapeError("slice_cols out of range");
  Tensor<T> y({n, width});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < width; ++j) y(r, j) = x->value(r, start + j);
  }
  return tape.record(std::move(y), "slice_cols", {x}, [x, start, width, n, c](const Tensor<T>& g) {
    Tensor<T> gx({n, c});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < width; ++j) gx(r, start + j) = g(r, j);
    }
    x->accumulate(gx);
  });
}

// First `count` rows of x.
template <typename T>
Var<T> head_rows(Tape<T>& tape, const Var<T>& x, std::size_t count) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (count > n) throw ShapeError("head_rows: cannot take " + std::to_string(count) + " of " + std::to_string(n));
  if (count == n) return x;
  std::vector<T> data(x->value.data().begin(), x->value.data().begin() + count * c);
  return tape.record(Tensor<T>({count, c}, std::move(data)), "head_rows", {x},
                     [x, n, c, count](const Tensor<T>& g) {
                       Tensor<T> gx({n, c});
                       std::copy(g.data().begin(), g.data().end(), gx.data().begin());
                       x->accumulate(gx);
                     });
}

template <typename T>
Var<T> concat_cols(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front()->value.rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->value.ndim() != 2 || p->value.rows() != n) {
      throw ShapeError("concat_cols: row count mismatch, " + shape_str(p->value.shape()) + " vs " +
                       std::to_string(n) + " rows");
    }
    total += p->value.cols();
  }
  Tensor<T> y({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < p->value.cols(); ++j) y(r, off + j) = p->value(r, j);
    }
    off += p->value.cols();
  }
  return tape.record(std::move(y), "concat_cols", parts, [parts, n](const Tensor<T>& g) {
    std::size_t o = 0;
    for (const auto& p : parts) {
      const std::size_t w = p->value.cols();
      if (p->requires_grad) {
        Tensor<T> gp({n, w});
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < w; ++j) gp(r, j) = g(r, o + j);
        }
        p->accumulate(gp);
      }
      o += w;
    }
  });
}

// Rows of table selected by ids (embedding lookup).
template <typename T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& table, const std::vector<std::size_t>& ids) {
  const std::size_t rows = table->value.rows(), c = table->value.cols();
  Tensor<T> y({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw TokenError(i, static_cast<long long>(ids[i]), rows);
    std::copy(table->value.row(ids[i]).begin(), table->value.row(ids[i]).end(), y.row(i).begin());
  }
  return tape.record(std::move(y), "gather_rows", {table}, [table, ids, rows, c](const Tensor<T>& g) {
    Tensor<T> gt({rows, c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) gt(ids[i], j) += g(i, j);
    }
    table->accumulate(gt);
  });
}

// Row i repeated counts[i] times, in order.
template <typename T>
Var<T> repeat_rows(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& counts) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (counts.size() != n) {
    throw ShapeError("repeat_rows: " + std::to_string(counts.size()) + " counts for " +
                     std::to_string(n) + " rows");
  }
  std::size_t m = 0;
  for (auto r : counts) m += r;
  Tensor<T> y({m, c});
  std::size_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < counts[i]; ++r, ++o) {
      std::copy(x->value.row(i).begin(), x->value.row(i).end(), y.row(o).begin());
    }
  }
  return tape.record(std::move(y), "repeat_rows", {x}, [x, counts, n, c](const Tensor<T>& g) {
    Tensor<T> gx({n, c});
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < counts[i]; ++r, ++o) {
        for (std::size_t j = 0; j < c; ++j) gx(i, j) += g(o, j);
      }
    }
    x->accumulate(gx);
  });
}

// Scalar sum of squares, mostly for tests.
template <typename T>
Var<T> sum_squares(Tape<T>& tape, const Var<T>& x) {
  T acc = 0;
  for (T v : x->value.data()) acc += v * v;
  return tape.record(Tensor<T>({1}, {acc}), "sum_squares", {x}, [x](const Tensor<T>& g) {
    Tensor<T> gx = x->value;
    for (auto& v : gx.data()) v *= T(2) * g[0];
    x->accumulate(gx);
  });
}

// Scalar sum |pred - target| over all elements. target is a constant.
template <typename T>
Var<T> sum_abs_error(Tape<T>& tape, const Var<T>& pred, const Tensor<T>& target) {
  if (pred->value.shape() != target.shape()) {
    throw AlignmentError("prediction shape " + shape_str(pred->value.shape()) +
                         " does not match target shape " + shape_str(target.shape()));
  }
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) acc += std::abs(pred->value[i] - target[i]);
  return tape.record(Tensor<T>({1}, {acc}), "sum_abs_error", {pred}, [pred, target](const Tensor<T>& g) {
    Tensor<T> gx(target.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T d = pred->value[i] - target[i];
      gx[i] = d > T(0) ? g[0] : (d < T(0) ? -g[0] : T(0));
    }
    pred->accumulate(gx);
  });
}

// Scalar sum (pred - target)^2 over all elements. target is a constant.
template <typename T>
Var<T> sum_squared_error(Tape<T>& tape, const Var<T>& pred, const Tensor<T>& target) {
  if (pred->value.size() != target.size()) {
    throw AlignmentError("prediction size " + std::to_string(pred->value.size()) +
                         " does not match target size " + std::to_string(target.size()));
  }
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = pred->value[i] - target[i];
    acc += d * d;
  }
  return tape.record(Tensor<T>({1}, {acc}), "sum_squared_error", {pred}, [pred, target](const Tensor<T>& g) {
    Tensor<T> gx(pred->value.shape());
    for (std::size_t i = 0; i < target.size(); ++i) gx[i] = T(2) * (pred->value[i] - target[i]) * g[0];
    pred->accumulate(gx);
  });
}

// Multi-head self-attention composed from recorded primitives so it differentiates for free.
template <typename T>
Var<T> self_attention(Tape<T>& tape, const Var<T>& x, const Var<T>& wq, const Var<T>& wk,
                      const Var<T>& wv, const Var<T>& wo, std::size_t heads) {
  const std::size_t c = x->value.cols();
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(c));
  }
  const std::size_t dh = c / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  Var<T> q = matmul(tape, x, wq), k = matmul(tape, x, wk), v = matmul(tape, x, wv);
  std::vector<Var<T>> ctx;
  ctx.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? q : slice_cols(tape, q, h * dh, dh);
    Var<T> kh = heads == 1 ? k : slice_cols(tape, k, h * dh, dh);
    Var<T> vh = heads == 1 ? v : slice_cols(tape, v, h * dh, dh);
    Var<T> scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), scale_factor);
    ctx.push_back(matmul(tape, softmax_rows(tape, scores), vh));
  }
  Var<T> context = heads == 1 ? ctx.front() : concat_cols(tape, ctx);
  return matmul(tape, context, wo);
}

}  // namespace es::ag
