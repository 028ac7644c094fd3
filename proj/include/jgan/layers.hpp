#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "jgan/autodiff.hpp"

namespace jgan {

using ad::Graph;
using ad::Param;
using ad::Var;

// Forward-pass context. Power iterations and running-stat updates are
// explicit so that finite-difference checks can freeze all state.
struct Pass {
  bool training = false;
  bool update_bn = false;
  bool update_sn = false;
  Rng* rng = nullptr;
};

inline Pass train_pass(Rng& rng, bool update_sn, bool update_bn) {
  return Pass{true, update_bn, update_sn, &rng};
}
inline Pass eval_pass() { return Pass{}; }

// named parameter / state listings used by optimizers and checkpoints
template <typename T>
struct ParamList {
  std::vector<Param<T>*> params;
  std::vector<std::pair<std::string, Tensor<T>*>> state;  // running stats, SN u/v
};

// ---- init ----

// Orthogonal rows/columns via Householder QR with sign correction, so a
// given seed always produces the same matrix.
template <typename T>
Tensor<T> orthogonal(std::vector<int64_t> shape, Rng& rng) {
  int64_t rows = shape[0];
  int64_t cols = 1;
  for (size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  int64_t r = std::max(rows, cols), c = std::min(rows, cols);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  Mat a(r, c);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ() * Mat::Identity(r, c);
  Mat rm = qr.matrixQR().topRows(c).template triangularView<Eigen::Upper>();
  for (int64_t j = 0; j < c; ++j)
    if (rm(j, j) < 0) q.col(j) = -q.col(j);
  Tensor<T> out(std::move(shape));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      out[i * cols + j] = static_cast<T>(rows >= cols ? q(i, j) : q(j, i));
  return out;
}

// ---- spectral normalization ----

template <typename T>
struct SpectralNormState {
  Tensor<T> u;  // left singular estimate, unit norm
  Tensor<T> v;  // matching right estimate
  int power_iterations = 1;
  uint64_t reinit_seed = 0x5eed;
};

namespace detail {
template <typename T>
T l2_normalize(Tensor<T>& x) {
  T n = T(0);
  for (T v : x.data) n += v * v;
  n = std::sqrt(n);
  if (n > T(0))
    for (T& v : x.data) v /= n;
  return n;
}
}  // namespace detail

// One (or more) power-iteration steps on a 2-D weight view; updates the
// persistent u/v estimates in place. Returns the current sigma estimate.
// A degenerate W^T u (norm < 1e-12) re-initializes u randomly and warns.
template <typename T>
T spectral_power_iterate(const Tensor<T>& W, SpectralNormState<T>& st, int iterations) {
  int64_t rows = W.dim(0), cols = W.numel() / W.dim(0);
  if (!W.all_finite()) throw std::invalid_argument("spectral norm: non-finite weight");
  if (st.u.numel() != rows) {
    Rng r(st.reinit_seed);
    st.u = r.normal_tensor<T>({rows});
    detail::l2_normalize(st.u);
  }
  if (st.v.numel() != cols) st.v = Tensor<T>({cols});
  for (int it = 0; it < iterations; ++it) {
    // v = normalize(W^T u)
    Tensor<T> v({cols});
    for (int64_t j = 0; j < cols; ++j) {
      T acc = T(0);
      for (int64_t i = 0; i < rows; ++i) acc += W[i * cols + j] * st.u[i];
      v[j] = acc;
    }
    if (detail::l2_normalize(v) < T(1e-12)) {
      std::cerr << "[jgan] warning: degenerate weight in spectral norm, re-initializing u\n";
      st.reinit_seed = st.reinit_seed * 6364136223846793005ULL + 1442695040888963407ULL;
      Rng r(st.reinit_seed);
      st.u = r.normal_tensor<T>({rows});
      detail::l2_normalize(st.u);
      continue;
    }
    st.v = v;
    // u = normalize(W v)
    Tensor<T> u({rows});
    for (int64_t i = 0; i < rows; ++i) {
      T acc = T(0);
      for (int64_t j = 0; j < cols; ++j) acc += W[i * cols + j] * st.v[j];
      u[i] = acc;
    }
    detail::l2_normalize(u);
    st.u = u;
  }
  if (st.v.numel() != cols) throw std::logic_error("spectral norm: v not initialized");
  T sigma = T(0);
  for (int64_t i = 0; i < rows; ++i) {
    T acc = T(0);
    for (int64_t j = 0; j < cols; ++j) acc += W[i * cols + j] * st.v[j];
    sigma += st.u[i] * acc;
  }
  return sigma;
}

// W / sigma with sigma from the state's current estimate after running
// the configured number of power iterations. W must be 2-D here.
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& W, SpectralNormState<T>& st,
                             T* sigma_out = nullptr) {
  T sigma = spectral_power_iterate(W, st, st.power_iterations);
  if (sigma_out) *sigma_out = sigma;
  Tensor<T> out = W;
  for (T& v : out.data) v /= sigma;
  return out;
}

// Graph version: sigma = u^T (W v) with u, v held constant, so gradients
// flow through W / sigma exactly as in the reference recipe.
template <typename T>
Var<T> spectral_normalize_var(Graph<T>& g, const Var<T>& Wleaf, SpectralNormState<T>& st,
                              const Pass& pass) {
  int64_t rows = Wleaf->val.dim(0);
  int64_t cols = Wleaf->val.numel() / rows;
  auto W2 = Wleaf->val.rank() == 2 ? Wleaf : ad::reshape(Wleaf, {rows, cols});
  int iters = (pass.training && pass.update_sn) ? st.power_iterations : 0;
  spectral_power_iterate(W2->val, st, iters);
  auto u = ad::constant(st.u);
  auto v = ad::constant(st.v);
  auto sigma = ad::dot(u, ad::matvec(W2, v));
  auto Wbar = ad::mul_bcast(W2, ad::reciprocal(sigma));
  if (Wleaf->val.rank() != 2) Wbar = ad::reshape(Wbar, Wleaf->val.shape);
  return Wbar;
}

// ---- layers ----

template <typename T>
struct DenseLayer {
  Param<T> W;  // [out, in]
  Param<T> b;  // [out], absent if !has_bias
  bool has_bias = true;
  bool use_sn = false;
  SpectralNormState<T> sn;

  DenseLayer() = default;
  DenseLayer(std::string name, int64_t out, int64_t in, Rng& rng, bool bias = true,
             bool spectral = false) {
    W.name = name + ".W";
    W.value = orthogonal<T>({out, in}, rng);
    has_bias = bias;
    if (bias) {
      b.name = name + ".b";
      b.value = Tensor<T>({out});
    }
    use_sn = spectral;
    if (spectral) {
      sn.reinit_seed = rng.next_u64();
      spectral_power_iterate(W.value, sn, 1);  // warm up u/v
    }
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const Pass& pass) {
    auto w = g.param(W);
    if (use_sn) w = spectral_normalize_var(g, w, sn, pass);
    auto y = ad::dense(x, w);
    if (has_bias) y = ad::add_channel(y, g.param(b));
    return y;
  }

  void collect(const std::string&, ParamList<T>& out) {
    out.params.push_back(&W);
    if (has_bias) out.params.push_back(&b);
    if (use_sn) {
      out.state.emplace_back(W.name + ".sn_u", &sn.u);
      out.state.emplace_back(W.name + ".sn_v", &sn.v);
    }
  }
};

template <typename T>
struct ConvLayer {
  Param<T> K;  // [out, kh, kw, in]
  Param<T> b;  // [out]
  int stride = 1, pad = 0;
  bool has_bias = true;
  bool use_sn = false;
  SpectralNormState<T> sn;

  ConvLayer() = default;
  ConvLayer(std::string name, int64_t out, int64_t in, int ksize, int stride_, int pad_,
            Rng& rng, bool bias = true, bool spectral = false) {
    K.name = name + ".K";
    K.value = orthogonal<T>({out, ksize, ksize, in}, rng);
    stride = stride_;
    pad = pad_;
    has_bias = bias;
    if (bias) {
      b.name = name + ".b";
      b.value = Tensor<T>({out});
    }
    use_sn = spectral;
    if (spectral) {
      sn.reinit_seed = rng.next_u64();
      Tensor<T> flat = K.value.reshaped({K.value.dim(0), K.value.numel() / K.value.dim(0)});
      spectral_power_iterate(flat, sn, 1);
    }
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const Pass& pass) {
    auto k = g.param(K);
    if (use_sn) k = spectral_normalize_var(g, k, sn, pass);
    auto y = ad::conv2d(x, k, stride, pad);
    if (has_bias) y = ad::add_channel(y, g.param(b));
    return y;
  }

  void collect(const std::string&, ParamList<T>& out) {
    out.params.push_back(&K);
    if (has_bias) out.params.push_back(&b);
    if (use_sn) {
      out.state.emplace_back(K.name + ".sn_u", &sn.u);
      out.state.emplace_back(K.name + ".sn_v", &sn.v);
    }
  }
};

// Normalizes over all leading dims per channel (last axis). Training
// passes use batch statistics; eval uses the running averages.
template <typename T>
struct BatchNorm {
  Param<T> gamma, beta;  // [C]
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);

  BatchNorm() = default;
  BatchNorm(std::string name, int64_t channels) {
    gamma.name = name + ".gamma";
    gamma.value = Tensor<T>::full({channels}, T(1));
    beta.name = name + ".beta";
    beta.value = Tensor<T>({channels});
    running_mean = Tensor<T>({channels});
    running_var = Tensor<T>::full({channels}, T(1));
  }

  // normalized activations before the affine part
  Var<T> normalize(Graph<T>& g, const Var<T>& x, const Pass& pass) {
    if (pass.training) {
      auto mu = ad::channel_mean(x);
      auto xc = ad::add_channel(x, ad::affine(mu, T(-1), T(0)));
      auto var = ad::channel_mean(ad::square(xc));
      auto inv = ad::rsqrt_eps(var, eps);
      if (pass.update_bn) {
        for (int64_t c = 0; c < running_mean.numel(); ++c) {
          running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * mu->val[c];
          running_var[c] = momentum * running_var[c] + (T(1) - momentum) * var->val[c];
        }
      }
      return ad::mul_channel(xc, inv);
    }
    Tensor<T> shift = running_mean;
    for (auto& v : shift.data) v = -v;
    Tensor<T> inv = running_var;
    for (auto& v : inv.data) v = T(1) / std::sqrt(v + eps);
    auto xc = ad::add_channel(x, ad::constant(shift));
    return ad::mul_channel(xc, ad::constant(inv));
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const Pass& pass) {
    auto xhat = normalize(g, x, pass);
    return ad::add_channel(ad::mul_channel(xhat, g.param(gamma)), g.param(beta));
  }

  void collect(const std::string&, ParamList<T>& out) {
    out.params.push_back(&gamma);
    out.params.push_back(&beta);
    out.state.emplace_back(gamma.name + ".running_mean", &running_mean);
    out.state.emplace_back(gamma.name + ".running_var", &running_var);
  }
};

// Batch norm whose affine parameters are selected per sample by class id.
template <typename T>
struct CondBatchNorm {
  Param<T> gamma, beta;  // [K, C]
  BatchNorm<T> base;     // provides stats machinery; its affine params unused

  CondBatchNorm() = default;
  CondBatchNorm(std::string name, int64_t classes, int64_t channels) {
    gamma.name = name + ".gamma";
    gamma.value = Tensor<T>::full({classes, channels}, T(1));
    beta.name = name + ".beta";
    beta.value = Tensor<T>({classes, channels});
    base = BatchNorm<T>(name + ".stats", channels);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const std::vector<int64_t>& class_ids,
                 const Pass& pass) {
    if (static_cast<int64_t>(class_ids.size()) != x->val.dim(0))
      throw std::invalid_argument("conditional batch norm: one class id per sample");
    auto xhat = base.normalize(g, x, pass);
    auto gs = ad::gather_rows(g.param(gamma), std::vector<int64_t>(class_ids));
    auto bs = ad::gather_rows(g.param(beta), std::vector<int64_t>(class_ids));
    return ad::add_nc(ad::mul_nc(xhat, gs), bs);
  }

  void collect(const std::string&, ParamList<T>& out) {
    out.params.push_back(&gamma);
    out.params.push_back(&beta);
    out.state.emplace_back(gamma.name + ".running_mean", &base.running_mean);
    out.state.emplace_back(gamma.name + ".running_var", &base.running_var);
  }
};

}  // namespace jgan
