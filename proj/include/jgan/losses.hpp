#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "jgan/nets.hpp"

namespace jgan {

enum class LossFamily { standard, hinge };

inline LossFamily loss_family_from_string(const std::string& s) {
  if (s == "standard") return LossFamily::standard;
  if (s == "hinge") return LossFamily::hinge;
  throw std::invalid_argument("unknown loss family: " + s);
}
inline std::string to_string(LossFamily f) {
  return f == LossFamily::standard ? "standard" : "hinge";
}

// ---- losses on score graphs ----
// Standard family takes pre-sigmoid logits; -log sigmoid is computed as
// softplus so it stays finite for any |s| the nets can produce.

template <typename T>
Var<T> d_loss_standard_var(const Var<T>& scores_real, const Var<T>& scores_fake) {
  auto real_term = ad::mean_all(ad::softplus(ad::affine(scores_real, T(-1), T(0))));
  auto fake_term = ad::mean_all(ad::softplus(scores_fake));
  return ad::add(real_term, fake_term);
}

template <typename T>
Var<T> g_loss_standard_var(const Var<T>& scores_fake) {
  return ad::mean_all(ad::softplus(ad::affine(scores_fake, T(-1), T(0))));
}

template <typename T>
Var<T> d_loss_hinge_var(const Var<T>& scores_real, const Var<T>& scores_fake) {
  auto real_term = ad::mean_all(ad::relu(ad::affine(scores_real, T(-1), T(1))));
  auto fake_term = ad::mean_all(ad::relu(ad::affine(scores_fake, T(1), T(1))));
  return ad::add(real_term, fake_term);
}

template <typename T>
Var<T> g_loss_hinge_var(const Var<T>& scores_fake) {
  return ad::mean_all(ad::affine(scores_fake, T(-1), T(0)));
}

template <typename T>
Var<T> d_loss_var(LossFamily f, const Var<T>& sr, const Var<T>& sf) {
  return f == LossFamily::standard ? d_loss_standard_var(sr, sf) : d_loss_hinge_var(sr, sf);
}
template <typename T>
Var<T> g_loss_var(LossFamily f, const Var<T>& sf) {
  return f == LossFamily::standard ? g_loss_standard_var(sf) : g_loss_hinge_var(sf);
}

// ---- scalar wrappers over plain score arrays ----

namespace detail {
inline void require_finite(std::span<const double> s, const char* what) {
  for (double v : s)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite score");
}
inline ad::Var<double> score_const(std::span<const double> s) {
  Tensor<double> t({static_cast<int64_t>(s.size())});
  std::copy(s.begin(), s.end(), t.data.begin());
  return ad::constant(std::move(t));
}
}  // namespace detail

inline double d_loss_standard(std::span<const double> sr, std::span<const double> sf) {
  detail::require_finite(sr, "d_loss_standard");
  detail::require_finite(sf, "d_loss_standard");
  return d_loss_standard_var(detail::score_const(sr), detail::score_const(sf))->val[0];
}
inline double g_loss_standard(std::span<const double> sf) {
  detail::require_finite(sf, "g_loss_standard");
  return g_loss_standard_var(detail::score_const(sf))->val[0];
}
inline double d_loss_hinge(std::span<const double> sr, std::span<const double> sf) {
  detail::require_finite(sr, "d_loss_hinge");
  detail::require_finite(sf, "d_loss_hinge");
  return d_loss_hinge_var(detail::score_const(sr), detail::score_const(sf))->val[0];
}
inline double g_loss_hinge(std::span<const double> sf) {
  detail::require_finite(sf, "g_loss_hinge");
  return g_loss_hinge_var(detail::score_const(sf))->val[0];
}

// ---- score wiring per formulation ----

// Draw class ids from the training label marginal (conditional fakes).
inline std::vector<int64_t> sample_from_marginal(const std::vector<double>& marginal, int64_t n,
                                                 Rng& rng) {
  if (marginal.empty()) throw std::invalid_argument("label marginal is empty");
  std::vector<int64_t> ids(static_cast<size_t>(n));
  for (auto& id : ids) id = rng.categorical(marginal);
  return ids;
}

template <typename T>
struct ScorePair {
  Var<T> real;
  Var<T> fake;
};

// Real pairs always come from the data; fake pairs depend on the mode:
// unsupervised scores images alone, conditional scores G(z|L) against the
// sampled label, joint scores (G_I(z), G_L(z)) where the label is the
// generator's own soft output.
template <typename T>
ScorePair<T> pair_scores(Graph<T>& g, GanModel<T>& model, const Tensor<T>& real_images,
                         const Tensor<T>& real_label_rows,
                         const std::vector<double>& label_marginal, const Tensor<T>& z,
                         Rng& rng, const Pass& pass) {
  ScorePair<T> out;
  auto real_var = ad::constant(real_images);
  switch (model.mode) {
    case CondMode::unsupervised: {
      out.real = model.disc.score(g, real_var, nullptr, pass);
      auto fake = model.gen.forward(g, z, {}, pass);
      out.fake = model.disc.score(g, fake.image, nullptr, pass);
      break;
    }
    case CondMode::conditional_concat:
    case CondMode::conditional_cbn: {
      if (real_label_rows.numel() == 0)
        throw std::invalid_argument("pair_scores: conditional mode needs real labels");
      out.real = model.disc.score(g, real_var, ad::constant(real_label_rows), pass);
      auto ids = sample_from_marginal(label_marginal, z.dim(0), rng);
      auto fake = model.gen.forward(g, z, ids, pass);
      auto fake_labels = ad::constant(onehot_tensor<T>(ids, model.spec.label_dim));
      out.fake = model.disc.score(g, fake.image, fake_labels, pass);
      break;
    }
    case CondMode::joint: {
      if (real_label_rows.numel() == 0)
        throw std::invalid_argument("pair_scores: joint mode needs real labels");
      out.real = model.disc.score(g, real_var, ad::constant(real_label_rows), pass);
      auto fake = model.gen.forward(g, z, {}, pass);
      out.fake = model.disc.score(g, fake.image, fake.label, pass);
      break;
    }
  }
  return out;
}

// Fake-side scores only (generator updates).
template <typename T>
Var<T> fake_scores(Graph<T>& g, GanModel<T>& model, const std::vector<double>& label_marginal,
                   const Tensor<T>& z, Rng& rng, const Pass& pass) {
  switch (model.mode) {
    case CondMode::unsupervised: {
      auto fake = model.gen.forward(g, z, {}, pass);
      return model.disc.score(g, fake.image, nullptr, pass);
    }
    case CondMode::conditional_concat:
    case CondMode::conditional_cbn: {
      auto ids = sample_from_marginal(label_marginal, z.dim(0), rng);
      auto fake = model.gen.forward(g, z, ids, pass);
      auto fake_labels = ad::constant(onehot_tensor<T>(ids, model.spec.label_dim));
      return model.disc.score(g, fake.image, fake_labels, pass);
    }
    case CondMode::joint: {
      auto fake = model.gen.forward(g, z, {}, pass);
      return model.disc.score(g, fake.image, fake.label, pass);
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace jgan
