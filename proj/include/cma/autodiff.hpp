// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode tape over the kernels in ops.hpp. A Tape records one
// forward pass; backward() may run once, after which the tape is spent.

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cma/ops.hpp"
#include "cma/tensor.hpp"

namespace cma {

template <class T>
struct ParamGroup {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  T lr_multiplier = T{1};
  // Set by Tape::backward when a gradient reached the group; cleared by the
  // optimizer. Groups without one are skipped by the update.
  bool has_grad = false;

  ParamGroup() = default;
  ParamGroup(std::string n, Tensor<T> v, bool train = true, T lr_mult = T{1})
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        trainable(train),
        lr_multiplier(lr_mult) {
    if (!(lr_multiplier > T{0})) {
      throw std::invalid_argument("lr_multiplier must be positive for " + name);
    }
  }

  void zero_grad() {
    grad = Tensor<T>(value.shape());
    has_grad = false;
  }
};

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Var constant(Tensor<T> v) { return push(std::move(v), false, {}, nullptr); }

  // A trainable group becomes a gradient-receiving leaf; a frozen group is
  // recorded as a constant.
  Var param(ParamGroup<T>& group) {
    Var v = push(group.value, group.trainable, {}, nullptr);
    if (group.trainable) nodes_[v.id].group = &group;
    return v;
  }

  // Records an arbitrary differentiable operation. `fn` receives the gradient
  // of the output and must call accumulate_grad for each parent it wishes to
  // propagate into.
  Var custom(Tensor<T> value, std::vector<Var> parents, Backward fn,
             const char* what = "op") {
    require_finite(value, what);
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
    return push(std::move(value), rg, std::move(parents), rg ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate_grad(Var v, const Tensor<T>& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    require_same_shape(g.shape(), n.value.shape(), "accumulate_grad");
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      ops::accumulate(n.grad, g);
    }
  }

  // Gradient accumulated at a node by the last backward pass (empty if none
  // reached it).
  const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }

  void backward(Var loss) {
    if (done_) throw std::logic_error("backward already run on this tape; record a new forward pass");
    const Tensor<T>& lv = value(loss);
    if (lv.rank() != 0) {
      throw ShapeError("backward expects a scalar loss, got shape " + to_string(lv.shape()));
    }
    done_ = true;
    accumulate_grad(loss, Tensor<T>::scalar(T{1}));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      // Move the closure out so it can push into other nodes' grads freely.
      Backward fn = std::move(n.backward);
      Tensor<T> g = std::move(n.grad);
      fn(*this, g);
      n.grad = std::move(g);
    }
    for (Node& n : nodes_) {
      if (!n.group) continue;
      if (!n.has_grad) continue;
      ops::accumulate(n.group->grad, n.grad);
      n.group->has_grad = true;
    }
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    return custom(ops::add(value(a), value(b)), {a, b},
                  [a, b](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, g);
                    t.accumulate_grad(b, g);
                  }, "add");
  }

  Var sub(Var a, Var b) {
    return custom(ops::sub(value(a), value(b)), {a, b},
                  [a, b](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, g);
                    t.accumulate_grad(b, ops::scale(g, T{-1}));
                  }, "sub");
  }

  Var mul(Var a, Var b) {
    return custom(ops::mul(value(a), value(b)), {a, b},
                  [a, b](Tape& t, const Tensor<T>& g) {
                    if (t.requires_grad(a)) t.accumulate_grad(a, ops::mul(g, t.value(b)));
                    if (t.requires_grad(b)) t.accumulate_grad(b, ops::mul(g, t.value(a)));
                  }, "mul");
  }

  Var scale(Var a, T s) {
    return custom(ops::scale(value(a), s), {a},
                  [a, s](Tape& t, const Tensor<T>& g) { t.accumulate_grad(a, ops::scale(g, s)); },
                  "scale");
  }

  Var relu(Var a) {
    return custom(ops::relu(value(a)), {a},
                  [a](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::relu_backward(t.value(a), g));
                  }, "relu");
  }

  Var log(Var a) {
    return custom(ops::log(value(a)), {a},
                  [a](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::log_backward(t.value(a), g));
                  }, "log");
  }

  // Stops gradient flow; the output carries the same value.
  Var detach(Var a) { return constant(value(a)); }

  Var reshape(Var a, Shape shape) {
    const Shape in = value(a).shape();
    return custom(value(a).reshaped(std::move(shape)), {a},
                  [a, in](Tape& t, const Tensor<T>& g) { t.accumulate_grad(a, g.reshaped(in)); },
                  "reshape");
  }

  // ---- reductions -------------------------------------------------------

  Var sum(Var a) {
    const Shape in = value(a).shape();
    return custom(Tensor<T>::scalar(ops::sum(value(a))), {a},
                  [a, in](Tape& t, const Tensor<T>& g) { t.accumulate_grad(a, Tensor<T>(in, g.item())); },
                  "sum");
  }

  Var mean(Var a) {
    const Shape in = value(a).shape();
    const T n = static_cast<T>(value(a).size());
    return custom(Tensor<T>::scalar(ops::sum(value(a)) / n), {a},
                  [a, in, n](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, Tensor<T>(in, g.item() / n));
                  }, "mean");
  }

  Var masked_sum(Var a, Tensor<T> mask) {
    Tensor<T> out = Tensor<T>::scalar(ops::masked_sum(value(a), mask));
    return custom(std::move(out), {a},
                  [a, mask = std::move(mask)](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::scale(mask, g.item()));
                  }, "masked_sum");
  }

  // Mean over masked-in elements; 0 with zero gradient when the mask is empty.
  Var masked_mean(Var a, Tensor<T> mask) {
    const T w = ops::sum(mask);
    Tensor<T> out = Tensor<T>::scalar(ops::masked_mean(value(a), mask));
    return custom(std::move(out), {a},
                  [a, w, mask = std::move(mask)](Tape& t, const Tensor<T>& g) {
                    if (w == T{0}) return;
                    t.accumulate_grad(a, ops::scale(mask, g.item() / w));
                  }, "masked_mean");
  }

  // ---- dense -------------------------------------------------------------

  Var matmul(Var a, Var b) {
    return custom(ops::matmul(value(a), value(b)), {a, b},
                  [a, b](Tape& t, const Tensor<T>& g) {
                    Tensor<T> da, db;
                    ops::matmul_backward(t.value(a), t.value(b), g,
                                         t.requires_grad(a) ? &da : nullptr,
                                         t.requires_grad(b) ? &db : nullptr);
                    if (t.requires_grad(a)) t.accumulate_grad(a, da);
                    if (t.requires_grad(b)) t.accumulate_grad(b, db);
                  }, "matmul");
  }

  Var linear(Var x, Var w, Var b) {
    return custom(ops::linear(value(x), value(w), value(b)), {x, w, b},
                  [x, w, b](Tape& t, const Tensor<T>& g) {
                    const bool need_w = t.requires_grad(w) || t.requires_grad(b);
                    auto lg = ops::linear_backward(t.value(x), t.value(w), g,
                                                   t.requires_grad(x), need_w);
                    if (t.requires_grad(x)) t.accumulate_grad(x, lg.dx);
                    if (need_w) {
                      t.accumulate_grad(w, lg.dw);
                      t.accumulate_grad(b, lg.db);
                    }
                  }, "linear");
  }

  // ---- channel normalizations -------------------------------------------

  Var softmax(Var a) {
    Var out = custom(ops::softmax(value(a)), {a}, nullptr, "softmax");
    if (requires_grad(out)) {
      nodes_[out.id].backward = [a, out](Tape& t, const Tensor<T>& g) {
        t.accumulate_grad(a, ops::softmax_backward(t.value(out), g));
      };
    }
    return out;
  }

  Var log_softmax(Var a) {
    Var out = custom(ops::log_softmax(value(a)), {a}, nullptr, "log_softmax");
    if (requires_grad(out)) {
      nodes_[out.id].backward = [a, out](Tape& t, const Tensor<T>& g) {
        // dx = g - softmax(x) * sum(g)
        const Tensor<T>& y = t.value(out);
        const std::size_t k = y.shape().back(), n = leading(y.shape());
        Tensor<T> dx(y.shape());
        for (std::size_t r = 0; r < n; ++r) {
          T gs{0};
          for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
          for (std::size_t j = 0; j < k; ++j)
            dx[r * k + j] = g[r * k + j] - std::exp(y[r * k + j]) * gs;
        }
        t.accumulate_grad(a, dx);
      };
    }
    return out;
  }

  Var l2_normalize(Var a) {
    Var out = custom(ops::l2_normalize(value(a)), {a}, nullptr, "l2_normalize");
    if (requires_grad(out)) {
      nodes_[out.id].backward = [a, out](Tape& t, const Tensor<T>& g) {
        t.accumulate_grad(a, ops::l2_normalize_backward(t.value(a), t.value(out), g));
      };
    }
    return out;
  }

  // ---- spatial -------------------------------------------------------------

  Var patchify(Var img, std::size_t s) {
    const Shape in = value(img).shape();
    return custom(ops::patchify(value(img), s), {img},
                  [img, in, s](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(img, ops::unpatchify(g, in, s));
                  }, "patchify");
  }

  Var upsample_bilinear(Var a, std::size_t factor) {
    const Shape in = value(a).shape();
    return custom(ops::upsample_bilinear(value(a), factor), {a},
                  [a, in, factor](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::upsample_bilinear_backward(g, in, factor));
                  }, "upsample_bilinear");
  }

  Var upsample_nearest(Var a, std::size_t factor) {
    const Shape in = value(a).shape();
    return custom(ops::upsample_nearest(value(a), factor), {a},
                  [a, in, factor](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::upsample_nearest_backward(g, in, factor));
                  }, "upsample_nearest");
  }

  Var avg_pool(Var a, std::size_t kh, std::size_t kw) {
    const Shape in = value(a).shape();
    return custom(ops::avg_pool(value(a), kh, kw), {a},
                  [a, in, kh, kw](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(a, ops::avg_pool_backward(g, in, kh, kw));
                  }, "avg_pool");
  }

  // Weights are data (not differentiated).
  Var block_weighted_sum(Var z, Tensor<T> weight, std::size_t g) {
    const Shape in = value(z).shape();
    Tensor<T> out = ops::block_weighted_sum(value(z), weight, g);
    return custom(std::move(out), {z},
                  [z, in, g, weight = std::move(weight)](Tape& t, const Tensor<T>& grad) {
                    t.accumulate_grad(z, ops::block_weighted_sum_backward(grad, weight, in, g));
                  }, "block_weighted_sum");
  }

  Var block_mean(Var z, std::size_t g) {
    const Shape in = value(z).shape();
    const auto sizes = ops::block_sizes(in.at(1), in.at(2), g);
    return custom(ops::block_mean(value(z), g), {z},
                  [z, in, g, sizes](Tape& t, const Tensor<T>& grad) {
                    const std::size_t b = in[0], c = in[3], p = g * g;
                    Tensor<T> scaled = grad;
                    for (std::size_t n = 0; n < b; ++n)
                      for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          scaled[(n * p + i) * c + ch] /= static_cast<T>(sizes[i]);
                    t.accumulate_grad(z, ops::block_weighted_sum_backward(scaled, Tensor<T>{}, in, g));
                  }, "block_mean");
  }

  // Bilinear sampling of `src` at fixed coordinates; also returns the
  // validity mask through `valid` when provided.
  Var grid_sample(Var src, Tensor<T> coords, Tensor<T>* valid = nullptr) {
    const Shape in = value(src).shape();
    auto r = ops::grid_sample(value(src), coords);
    if (valid) *valid = r.valid;
    return custom(std::move(r.values), {src},
                  [src, in, coords = std::move(coords)](Tape& t, const Tensor<T>& g) {
                    t.accumulate_grad(src, ops::grid_sample_backward(g, coords, in));
                  }, "grid_sample");
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    Backward backward;
    ParamGroup<T>* group = nullptr;
    bool has_grad = false;
  };

  Var push(Tensor<T> v, bool rg, std::vector<Var> parents, Backward fn) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg;
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool done_ = false;
};

}  // namespace cma
