#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "jgan/rng.hpp"
#include "jgan/tensor.hpp"

// Reverse-mode autodiff on a dynamic tape. Ops are free functions that
// build nodes; Graph owns parameter leaves and runs backward. The op set
// is exactly what the networks and losses need; each backward is written
// by hand and covered by finite-difference tests.
namespace jgan::ad {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> val;
  Tensor<T> grad;
  bool needs_grad = false;
  bool grad_alloc = false;
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> backward_fn;

  void ensure_grad() {
    if (!grad_alloc) {
      grad = Tensor<T>(val.shape);
      grad_alloc = true;
    }
  }
};

template <typename T>
Var<T> make_node(Tensor<T> val, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->needs_grad) n->needs_grad = true;
  if (n->needs_grad) n->backward_fn = std::move(fn);
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> t) {
  auto n = std::make_shared<Node<T>>();
  n->val = std::move(t);
  return n;
}

// Trainable parameter: value plus a name for checkpoints/optimizers.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

template <typename T>
class Graph {
 public:
  // Leaf var for a parameter; one node per param per graph.
  Var<T> param(Param<T>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    auto n = std::make_shared<Node<T>>();
    n->val = p.value;
    n->needs_grad = p.trainable;
    leaves_.emplace(&p, n);
    return n;
  }

  void backward(const Var<T>& root) {
    if (root->val.numel() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    // iterative post-order topo sort
    std::vector<Node<T>*> order;
    std::unordered_map<Node<T>*, int> state;  // 0 new, 1 open, 2 done
    std::vector<Node<T>*> stack{root.get()};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      int& st = state[n];
      if (st == 0) {
        st = 1;
        for (auto& p : n->parents)
          if (p->needs_grad && state[p.get()] != 2) stack.push_back(p.get());
      } else {
        stack.pop_back();
        if (st == 1) {
          st = 2;
          order.push_back(n);
        }
      }
    }
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->needs_grad && n->backward_fn && n->grad_alloc) n->backward_fn(*n);
    }
  }

  // Gradient of a parameter accumulated by the last backward(); zeros if
  // the parameter was not used in this graph.
  Tensor<T> grad_of(const Param<T>& p) const {
    auto it = leaves_.find(const_cast<Param<T>*>(&p));
    if (it == leaves_.end() || !it->second->grad_alloc) return Tensor<T>(p.value.shape);
    return it->second->grad;
  }

 private:
  std::unordered_map<Param<T>*, Var<T>> leaves_;
};

namespace detail {

template <typename T>
void accum(const Var<T>& p, const Tensor<T>& g) {
  if (!p->needs_grad) return;
  p->ensure_grad();
  for (int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const EMat<T>>;
template <typename T>
using MMap = Eigen::Map<EMat<T>>;

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    detail::accum(n.parents[0], n.grad);
    detail::accum(n.parents[1], n.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& a = n.parents[0];
    const auto& b = n.parents[1];
    if (a->needs_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->val[i];
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->val[i];
    }
  });
}

// y = a*x + b, elementwise with scalar constants
template <typename T>
Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = a * v + b;
  return make_node<T>(std::move(out), {x}, [a](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += a * n.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (x->val[i] > T(0)) x->grad[i] += n.grad[i];
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& x) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = std::tanh(v);
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += n.grad[i] * (T(1) - n.val[i] * n.val[i]);
  });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = v * v;
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += T(2) * n.grad[i] * x->val[i];
  });
}

// softplus(x) = log(1 + e^x), stable form; gradient is the sigmoid
template <typename T>
Var<T> softplus(const Var<T>& x) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) {
    T m = v > T(0) ? v : T(0);
    v = m + std::log1p(std::exp(-std::abs(v)));
  }
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T v = x->val[i];
      T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                      : std::exp(v) / (T(1) + std::exp(v));
      x->grad[i] += n.grad[i] * s;
    }
  });
}

// 1/x elementwise (used on scalar sigma in spectral norm)
template <typename T>
Var<T> reciprocal(const Var<T>& x) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = T(1) / v;
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += -n.grad[i] * n.val[i] * n.val[i];
  });
}

// 1/sqrt(v + eps) elementwise (batch-norm inverse stddev)
template <typename T>
Var<T> rsqrt_eps(const Var<T>& x, T eps) {
  Tensor<T> out = x->val;
  for (auto& v : out.data) v = T(1) / std::sqrt(v + eps);
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T y = n.val[i];
      x->grad[i] += n.grad[i] * (T(-0.5) * y * y * y);
    }
  });
}

// ---- reductions / broadcasts over the channel (last) axis ----

namespace detail {
template <typename T>
inline void lead_ch(const Tensor<T>& t, int64_t& lead, int64_t& ch) {
  ch = t.shape.back();
  lead = t.numel() / ch;
}
}  // namespace detail

template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  int64_t lead, ch;
  detail::lead_ch(x->val, lead, ch);
  Tensor<T> out({ch});
  for (int64_t i = 0; i < lead; ++i)
    for (int64_t c = 0; c < ch; ++c) out[c] += x->val[i * ch + c];
  for (auto& v : out.data) v /= static_cast<T>(lead);
  return make_node<T>(std::move(out), {x}, [lead, ch](Node<T>& n) {
    const auto& x = n.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    T inv = T(1) / static_cast<T>(lead);
    for (int64_t i = 0; i < lead; ++i)
      for (int64_t c = 0; c < ch; ++c) x->grad[i * ch + c] += n.grad[c] * inv;
  });
}

template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& b) {
  int64_t lead, ch;
  detail::lead_ch(x->val, lead, ch);
  if (b->val.numel() != ch) throw std::invalid_argument("add_channel: width mismatch");
  Tensor<T> out = x->val;
  for (int64_t i = 0; i < lead; ++i)
    for (int64_t c = 0; c < ch; ++c) out[i * ch + c] += b->val[c];
  return make_node<T>(std::move(out), {x, b}, [lead, ch](Node<T>& n) {
    const auto& x = n.parents[0];
    const auto& b = n.parents[1];
    detail::accum(x, n.grad);
    if (b->needs_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < lead; ++i)
        for (int64_t c = 0; c < ch; ++c) b->grad[c] += n.grad[i * ch + c];
    }
  });
}

template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& s) {
  int64_t lead, ch;
  detail::lead_ch(x->val, lead, ch);
  if (s->val.numel() != ch) throw std::invalid_argument("mul_channel: width mismatch");
  Tensor<T> out = x->val;
  for (int64_t i = 0; i < lead; ++i)
    for (int64_t c = 0; c < ch; ++c) out[i * ch + c] *= s->val[c];
  return make_node<T>(std::move(out), {x, s}, [lead, ch](Node<T>& n) {
    const auto& x = n.parents[0];
    const auto& s = n.parents[1];
    if (x->needs_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < lead; ++i)
        for (int64_t c = 0; c < ch; ++c)
          x->grad[i * ch + c] += n.grad[i * ch + c] * s->val[c];
    }
    if (s->needs_grad) {
      s->ensure_grad();
      for (int64_t i = 0; i < lead; ++i)
        for (int64_t c = 0; c < ch; ++c)
          s->grad[c] += n.grad[i * ch + c] * x->val[i * ch + c];
    }
  });
}

// ---- per-sample channel scale/shift (conditional batch norm) ----
// x is [N, ..., C], s is [N, C]; broadcast over interior dims.

namespace detail {
template <typename T>
inline void sample_inner_ch(const Tensor<T>& t, int64_t& n, int64_t& inner, int64_t& ch) {
  n = t.shape.front();
  ch = t.shape.back();
  inner = t.numel() / (n * ch);
}
}  // namespace detail

template <typename T>
Var<T> mul_nc(const Var<T>& x, const Var<T>& s) {
  int64_t N, inner, ch;
  detail::sample_inner_ch(x->val, N, inner, ch);
  if (s->val.rank() != 2 || s->val.dim(0) != N || s->val.dim(1) != ch)
    throw std::invalid_argument("mul_nc: scale must be [N, C]");
  Tensor<T> out = x->val;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < inner; ++i)
      for (int64_t c = 0; c < ch; ++c)
        out[(n * inner + i) * ch + c] *= s->val.at(n, c);
  return make_node<T>(std::move(out), {x, s}, [N, inner, ch](Node<T>& nd) {
    const auto& x = nd.parents[0];
    const auto& s = nd.parents[1];
    if (x->needs_grad) {
      x->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < inner; ++i)
          for (int64_t c = 0; c < ch; ++c)
            x->grad[(n * inner + i) * ch + c] +=
                nd.grad[(n * inner + i) * ch + c] * s->val.at(n, c);
    }
    if (s->needs_grad) {
      s->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < inner; ++i)
          for (int64_t c = 0; c < ch; ++c)
            s->grad.at(n, c) +=
                nd.grad[(n * inner + i) * ch + c] * x->val[(n * inner + i) * ch + c];
    }
  });
}

template <typename T>
Var<T> add_nc(const Var<T>& x, const Var<T>& t) {
  int64_t N, inner, ch;
  detail::sample_inner_ch(x->val, N, inner, ch);
  if (t->val.rank() != 2 || t->val.dim(0) != N || t->val.dim(1) != ch)
    throw std::invalid_argument("add_nc: shift must be [N, C]");
  Tensor<T> out = x->val;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < inner; ++i)
      for (int64_t c = 0; c < ch; ++c)
        out[(n * inner + i) * ch + c] += t->val.at(n, c);
  return make_node<T>(std::move(out), {x, t}, [N, inner, ch](Node<T>& nd) {
    const auto& x = nd.parents[0];
    const auto& t = nd.parents[1];
    detail::accum(x, nd.grad);
    if (t->needs_grad) {
      t->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < inner; ++i)
          for (int64_t c = 0; c < ch; ++c)
            t->grad.at(n, c) += nd.grad[(n * inner + i) * ch + c];
    }
  });
}

// rows of a [K, D] table selected by integer ids; backward scatter-adds
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<int64_t> ids) {
  int64_t K = table->val.dim(0), D = table->val.dim(1);
  int64_t N = static_cast<int64_t>(ids.size());
  for (int64_t id : ids)
    if (id < 0 || id >= K) throw std::out_of_range("gather_rows: id out of range");
  Tensor<T> out({N, D});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t d = 0; d < D; ++d) out.at(n, d) = table->val.at(ids[static_cast<size_t>(n)], d);
  return make_node<T>(std::move(out), {table}, [ids = std::move(ids), D](Node<T>& nd) {
    const auto& t = nd.parents[0];
    if (!t->needs_grad) return;
    t->ensure_grad();
    for (size_t n = 0; n < ids.size(); ++n)
      for (int64_t d = 0; d < D; ++d)
        t->grad.at(ids[n], d) += nd.grad.at(static_cast<int64_t>(n), d);
  });
}

// ---- linear algebra ----

// y = x W^T, x:[N,in], W:[out,in] -> [N,out]
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& W) {
  int64_t N = x->val.dim(0), in = x->val.dim(1);
  int64_t out_d = W->val.dim(0);
  if (W->val.dim(1) != in) throw std::invalid_argument("dense: weight/input width mismatch");
  Tensor<T> out({N, out_d});
  detail::CMap<T> xm(x->val.data.data(), N, in);
  detail::CMap<T> wm(W->val.data.data(), out_d, in);
  detail::MMap<T> om(out.data.data(), N, out_d);
  om.noalias() = xm * wm.transpose();
  return make_node<T>(std::move(out), {x, W}, [N, in, out_d](Node<T>& nd) {
    const auto& x = nd.parents[0];
    const auto& W = nd.parents[1];
    detail::CMap<T> gm(nd.grad.data.data(), N, out_d);
    if (x->needs_grad) {
      x->ensure_grad();
      detail::CMap<T> wm(W->val.data.data(), out_d, in);
      detail::MMap<T> xg(x->grad.data.data(), N, in);
      xg.noalias() += gm * wm;
    }
    if (W->needs_grad) {
      W->ensure_grad();
      detail::CMap<T> xm(x->val.data.data(), N, in);
      detail::MMap<T> wg(W->grad.data.data(), out_d, in);
      wg.noalias() += gm.transpose() * xm;
    }
  });
}

template <typename T>
Var<T> matvec(const Var<T>& W, const Var<T>& v) {
  int64_t r = W->val.dim(0), c = W->val.dim(1);
  if (v->val.numel() != c) throw std::invalid_argument("matvec: size mismatch");
  Tensor<T> out({r});
  for (int64_t i = 0; i < r; ++i) {
    T acc = T(0);
    for (int64_t j = 0; j < c; ++j) acc += W->val.at(i, j) * v->val[j];
    out[i] = acc;
  }
  return make_node<T>(std::move(out), {W, v}, [r, c](Node<T>& nd) {
    const auto& W = nd.parents[0];
    const auto& v = nd.parents[1];
    if (W->needs_grad) {
      W->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) W->grad.at(i, j) += nd.grad[i] * v->val[j];
    }
    if (v->needs_grad) {
      v->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) v->grad[j] += nd.grad[i] * W->val.at(i, j);
    }
  });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  if (a->val.numel() != b->val.numel()) throw std::invalid_argument("dot: size mismatch");
  T acc = T(0);
  for (int64_t i = 0; i < a->val.numel(); ++i) acc += a->val[i] * b->val[i];
  return make_node<T>(Tensor<T>::scalar(acc), {a, b}, [](Node<T>& nd) {
    const auto& a = nd.parents[0];
    const auto& b = nd.parents[1];
    T g = nd.grad[0];
    if (a->needs_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < a->val.numel(); ++i) a->grad[i] += g * b->val[i];
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < b->val.numel(); ++i) b->grad[i] += g * a->val[i];
    }
  });
}

// per-row inner product of two [N, D] tensors -> [N]
template <typename T>
Var<T> rows_dot(const Var<T>& a, const Var<T>& b) {
  if (!a->val.same_shape(b->val) || a->val.rank() != 2)
    throw std::invalid_argument("rows_dot: need matching [N,D]");
  int64_t N = a->val.dim(0), D = a->val.dim(1);
  Tensor<T> out({N});
  for (int64_t n = 0; n < N; ++n) {
    T acc = T(0);
    for (int64_t d = 0; d < D; ++d) acc += a->val.at(n, d) * b->val.at(n, d);
    out[n] = acc;
  }
  return make_node<T>(std::move(out), {a, b}, [N, D](Node<T>& nd) {
    const auto& a = nd.parents[0];
    const auto& b = nd.parents[1];
    if (a->needs_grad) {
      a->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t d = 0; d < D; ++d) a->grad.at(n, d) += nd.grad[n] * b->val.at(n, d);
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t d = 0; d < D; ++d) b->grad.at(n, d) += nd.grad[n] * a->val.at(n, d);
    }
  });
}

// multiply every element by a scalar-valued var ([1])
template <typename T>
Var<T> mul_bcast(const Var<T>& x, const Var<T>& s) {
  if (s->val.numel() != 1) throw std::invalid_argument("mul_bcast: scale must be scalar");
  Tensor<T> out = x->val;
  T sv = s->val[0];
  for (auto& v : out.data) v *= sv;
  return make_node<T>(std::move(out), {x, s}, [](Node<T>& nd) {
    const auto& x = nd.parents[0];
    const auto& s = nd.parents[1];
    T sv = s->val[0];
    if (x->needs_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < nd.grad.numel(); ++i) x->grad[i] += nd.grad[i] * sv;
    }
    if (s->needs_grad) {
      s->ensure_grad();
      T acc = T(0);
      for (int64_t i = 0; i < nd.grad.numel(); ++i) acc += nd.grad[i] * x->val[i];
      s->grad[0] += acc;
    }
  });
}

// ---- shape ops ----

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int64_t> shape) {
  Tensor<T> out = x->val.reshaped(shape);
  return make_node<T>(std::move(out), {x}, [](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) x->grad[i] += nd.grad[i];
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(0) != b->val.dim(0))
    throw std::invalid_argument("concat_cols: need [N,A],[N,B]");
  int64_t N = a->val.dim(0), A = a->val.dim(1), B = b->val.dim(1);
  Tensor<T> out({N, A + B});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t i = 0; i < A; ++i) out.at(n, i) = a->val.at(n, i);
    for (int64_t i = 0; i < B; ++i) out.at(n, A + i) = b->val.at(n, i);
  }
  return make_node<T>(std::move(out), {a, b}, [N, A, B](Node<T>& nd) {
    const auto& a = nd.parents[0];
    const auto& b = nd.parents[1];
    if (a->needs_grad) {
      a->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < A; ++i) a->grad.at(n, i) += nd.grad.at(n, i);
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < B; ++i) b->grad.at(n, i) += nd.grad.at(n, A + i);
    }
  });
}

// ---- spatial ops (NHWC) ----

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& K, int stride, int pad) {
  // x: [N,H,W,Cin], K: [Cout,kh,kw,Cin]
  int64_t N = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), Cin = x->val.dim(3);
  int64_t Cout = K->val.dim(0), kh = K->val.dim(1), kw = K->val.dim(2);
  if (K->val.dim(3) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  int64_t OH = (H + 2 * pad - kh) / stride + 1;
  int64_t OW = (W + 2 * pad - kw) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");
  Tensor<T> out({N, OH, OW, Cout});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow)
        for (int64_t co = 0; co < Cout; ++co) {
          T acc = T(0);
          for (int64_t r = 0; r < kh; ++r) {
            int64_t ih = oh * stride - pad + r;
            if (ih < 0 || ih >= H) continue;
            for (int64_t c = 0; c < kw; ++c) {
              int64_t iw = ow * stride - pad + c;
              if (iw < 0 || iw >= W) continue;
              const T* xp = &x->val.at(n, ih, iw, 0);
              const T* kp = &K->val.at(co, r, c, 0);
              for (int64_t ci = 0; ci < Cin; ++ci) acc += xp[ci] * kp[ci];
            }
          }
          out.at(n, oh, ow, co) = acc;
        }
  return make_node<T>(std::move(out), {x, K},
                      [N, H, W, Cin, Cout, kh, kw, OH, OW, stride, pad](Node<T>& nd) {
    const auto& x = nd.parents[0];
    const auto& K = nd.parents[1];
    bool gx = x->needs_grad, gk = K->needs_grad;
    if (gx) x->ensure_grad();
    if (gk) K->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow)
          for (int64_t co = 0; co < Cout; ++co) {
            T g = nd.grad.at(n, oh, ow, co);
            if (g == T(0)) continue;
            for (int64_t r = 0; r < kh; ++r) {
              int64_t ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              for (int64_t c = 0; c < kw; ++c) {
                int64_t iw = ow * stride - pad + c;
                if (iw < 0 || iw >= W) continue;
                if (gx) {
                  T* xg = &x->grad.at(n, ih, iw, 0);
                  const T* kp = &K->val.at(co, r, c, 0);
                  for (int64_t ci = 0; ci < Cin; ++ci) xg[ci] += g * kp[ci];
                }
                if (gk) {
                  T* kg = &K->grad.at(co, r, c, 0);
                  const T* xp = &x->val.at(n, ih, iw, 0);
                  for (int64_t ci = 0; ci < Cin; ++ci) kg[ci] += g * xp[ci];
                }
              }
            }
          }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  int64_t N = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  Tensor<T> out({N, 2 * H, 2 * W, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        for (int64_t c = 0; c < C; ++c) {
          T v = x->val.at(n, h, w, c);
          out.at(n, 2 * h, 2 * w, c) = v;
          out.at(n, 2 * h, 2 * w + 1, c) = v;
          out.at(n, 2 * h + 1, 2 * w, c) = v;
          out.at(n, 2 * h + 1, 2 * w + 1, c) = v;
        }
  return make_node<T>(std::move(out), {x}, [N, H, W, C](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c)
            x->grad.at(n, h, w, c) += nd.grad.at(n, 2 * h, 2 * w, c) +
                                      nd.grad.at(n, 2 * h, 2 * w + 1, c) +
                                      nd.grad.at(n, 2 * h + 1, 2 * w, c) +
                                      nd.grad.at(n, 2 * h + 1, 2 * w + 1, c);
  });
}

template <typename T>
Var<T> avgpool2x2(const Var<T>& x) {
  int64_t N = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  if (H % 2 || W % 2) throw std::invalid_argument("avgpool2x2: odd spatial size");
  Tensor<T> out({N, H / 2, W / 2, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H / 2; ++h)
      for (int64_t w = 0; w < W / 2; ++w)
        for (int64_t c = 0; c < C; ++c)
          out.at(n, h, w, c) =
              (x->val.at(n, 2 * h, 2 * w, c) + x->val.at(n, 2 * h, 2 * w + 1, c) +
               x->val.at(n, 2 * h + 1, 2 * w, c) + x->val.at(n, 2 * h + 1, 2 * w + 1, c)) /
              T(4);
  return make_node<T>(std::move(out), {x}, [N, H, W, C](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t h = 0; h < H / 2; ++h)
        for (int64_t w = 0; w < W / 2; ++w)
          for (int64_t c = 0; c < C; ++c) {
            T g = nd.grad.at(n, h, w, c) / T(4);
            x->grad.at(n, 2 * h, 2 * w, c) += g;
            x->grad.at(n, 2 * h, 2 * w + 1, c) += g;
            x->grad.at(n, 2 * h + 1, 2 * w, c) += g;
            x->grad.at(n, 2 * h + 1, 2 * w + 1, c) += g;
          }
  });
}

// global sum pool over H,W -> [N, C]
template <typename T>
Var<T> sumpool_hw(const Var<T>& x) {
  int64_t N = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  Tensor<T> out({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        for (int64_t c = 0; c < C; ++c) out.at(n, c) += x->val.at(n, h, w, c);
  return make_node<T>(std::move(out), {x}, [N, H, W, C](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c) x->grad.at(n, h, w, c) += nd.grad.at(n, c);
  });
}

// ---- rows / batch ----

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  int64_t N = x->val.dim(0), D = x->val.dim(1);
  Tensor<T> out = x->val;
  for (int64_t n = 0; n < N; ++n) {
    T m = out.at(n, 0);
    for (int64_t d = 1; d < D; ++d) m = std::max(m, out.at(n, d));
    T sum = T(0);
    for (int64_t d = 0; d < D; ++d) {
      T e = std::exp(out.at(n, d) - m);
      out.at(n, d) = e;
      sum += e;
    }
    for (int64_t d = 0; d < D; ++d) out.at(n, d) /= sum;
  }
  return make_node<T>(std::move(out), {x}, [N, D](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t n = 0; n < N; ++n) {
      T dotgy = T(0);
      for (int64_t d = 0; d < D; ++d) dotgy += nd.grad.at(n, d) * nd.val.at(n, d);
      for (int64_t d = 0; d < D; ++d)
        x->grad.at(n, d) += nd.val.at(n, d) * (nd.grad.at(n, d) - dotgy);
    }
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  T acc = T(0);
  for (T v : x->val.data) acc += v;
  int64_t n = x->val.numel();
  acc /= static_cast<T>(n);
  return make_node<T>(Tensor<T>::scalar(acc), {x}, [n](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    T g = nd.grad[0] / static_cast<T>(n);
    for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
  });
}

// inverted dropout; mask is sampled in the forward pass and reused by
// the backward pass, so a fixed rng seed makes the op deterministic
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng, bool active) {
  if (!active || rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  Tensor<T> mask(x->val.shape);
  T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data) m = rng.uniform() < rate ? T(0) : scale;
  Tensor<T> out = x->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return make_node<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& nd) {
    const auto& x = nd.parents[0];
    if (!x->needs_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) x->grad[i] += nd.grad[i] * mask[i];
  });
}

}  // namespace jgan::ad
