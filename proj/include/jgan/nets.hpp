#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "jgan/layers.hpp"

namespace jgan {

enum class Arch { resnet, mlp };
enum class CondMode { unsupervised, conditional_concat, conditional_cbn, joint };

inline std::string to_string(CondMode m) {
  switch (m) {
    case CondMode::unsupervised: return "unsupervised";
    case CondMode::conditional_concat: return "conditional-concat";
    case CondMode::conditional_cbn: return "conditional-cbn";
    case CondMode::joint: return "joint";
  }
  return "?";
}

inline CondMode cond_mode_from_string(const std::string& s) {
  if (s == "unsupervised") return CondMode::unsupervised;
  if (s == "conditional-concat") return CondMode::conditional_concat;
  if (s == "conditional-cbn") return CondMode::conditional_cbn;
  if (s == "joint") return CondMode::joint;
  throw std::invalid_argument("unknown mode: " + s);
}

// Architecture hyperparameters. The resnet path follows the reference
// tables (base 4 -> 32 for CIFAR, 6 -> 48 for STL); the mlp path is the
// small stand-in for 2-D point data.
struct NetSpec {
  Arch arch = Arch::resnet;
  int64_t base_size = 4;           // D_b
  int64_t image_size = 32;         // D_f
  int64_t tap_size = 32;           // D_r
  int64_t label_head_width = 128;  // C_l
  int64_t label_dim = 10;          // D_o
  int64_t z_dim = 128;
  int64_t gen_channels = 256;
  int64_t disc_channels = 128;
  int64_t data_channels = 3;
  int64_t label_head_blocks = 2;  // hidden dense count: 2 clean, 3 weak
  double label_head_dropout = 0.5;
  int64_t mlp_hidden = 64;

  void validate() const {
    if (arch == Arch::resnet) {
      if (image_size != 8 * base_size)
        throw std::invalid_argument("net spec: image_size must be 8*base_size");
      if (tap_size != image_size)
        throw std::invalid_argument("net spec: tap_size must equal image_size");
    }
    if (base_size < 1 || image_size < 1 || label_head_width < 1 || label_dim < 1 ||
        z_dim < 1 || gen_channels < 1 || disc_channels < 1 || data_channels < 1 ||
        mlp_hidden < 1 || label_head_blocks < 1)
      throw std::invalid_argument("net spec: all dimensions must be positive");
  }

  static NetSpec cifar(int64_t classes) {
    NetSpec s;
    s.base_size = 4;
    s.image_size = s.tap_size = 32;
    s.label_dim = classes;
    s.label_head_width = classes > 10 ? 256 : 128;
    return s;
  }
  static NetSpec stl() {
    NetSpec s;
    s.base_size = 6;
    s.image_size = s.tap_size = 48;
    s.label_dim = 10;
    s.label_head_width = 128;
    return s;
  }
  static NetSpec mixture2d(int64_t classes, int64_t hidden = 64, int64_t zdim = 8) {
    NetSpec s;
    s.arch = Arch::mlp;
    s.base_size = 1;
    s.image_size = s.tap_size = 1;
    s.data_channels = 2;
    s.label_dim = classes;
    s.label_head_width = hidden;
    s.z_dim = zdim;
    s.mlp_hidden = hidden;
    s.label_head_dropout = 0.0;
    return s;
  }
};

// (z then label), fixed order
template <typename T>
Var<T> concat_condition(const Var<T>& z, const Var<T>& onehot) {
  return ad::concat_cols(z, onehot);
}

template <typename T>
Tensor<T> onehot_tensor(const std::vector<int64_t>& ids, int64_t classes) {
  Tensor<T> out({static_cast<int64_t>(ids.size()), classes});
  for (size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || ids[n] >= classes) throw std::out_of_range("one-hot: label out of range");
    out.at(static_cast<int64_t>(n), ids[n]) = T(1);
  }
  return out;
}

// ---- generator residual block (upscale) ----

template <typename T>
struct GenResUpBlock {
  bool cond = false;
  BatchNorm<T> bn1, bn2;
  CondBatchNorm<T> cbn1, cbn2;
  ConvLayer<T> conv1, conv2, conv_sc;
  bool has_sc = false;

  GenResUpBlock() = default;
  GenResUpBlock(const std::string& name, int64_t in, int64_t out, bool conditional,
                int64_t classes, Rng& rng)
      : cond(conditional) {
    if (cond) {
      cbn1 = CondBatchNorm<T>(name + ".cbn1", classes, in);
      cbn2 = CondBatchNorm<T>(name + ".cbn2", classes, out);
    } else {
      bn1 = BatchNorm<T>(name + ".bn1", in);
      bn2 = BatchNorm<T>(name + ".bn2", out);
    }
    conv1 = ConvLayer<T>(name + ".conv1", out, in, 3, 1, 1, rng);
    conv2 = ConvLayer<T>(name + ".conv2", out, out, 3, 1, 1, rng);
    has_sc = in != out;
    if (has_sc) conv_sc = ConvLayer<T>(name + ".conv_sc", out, in, 1, 1, 0, rng);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const std::vector<int64_t>& ids,
                 const Pass& pass) {
    auto h = cond ? cbn1.forward(g, x, ids, pass) : bn1.forward(g, x, pass);
    h = ad::relu(h);
    h = ad::upsample_nearest2x(h);
    h = conv1.forward(g, h, pass);
    h = cond ? cbn2.forward(g, h, ids, pass) : bn2.forward(g, h, pass);
    h = ad::relu(h);
    h = conv2.forward(g, h, pass);
    auto sc = ad::upsample_nearest2x(x);
    if (has_sc) sc = conv_sc.forward(g, sc, pass);
    return ad::add(h, sc);
  }

  void collect(ParamList<T>& out) {
    if (cond) {
      cbn1.collect("", out);
      cbn2.collect("", out);
    } else {
      bn1.collect("", out);
      bn2.collect("", out);
    }
    conv1.collect("", out);
    conv2.collect("", out);
    if (has_sc) conv_sc.collect("", out);
  }
};

// ---- discriminator residual block ----
// The input block skips the pre-activation (its input is the image) and
// pools before its 1x1 shortcut; later blocks pre-activate.

template <typename T>
struct DiscResBlock {
  bool first = false, down = false, learnable_sc = false;
  ConvLayer<T> conv1, conv2, conv_sc;

  DiscResBlock() = default;
  DiscResBlock(const std::string& name, int64_t in, int64_t out, bool first_, bool down_,
               Rng& rng)
      : first(first_), down(down_) {
    conv1 = ConvLayer<T>(name + ".conv1", out, in, 3, 1, 1, rng, true, true);
    conv2 = ConvLayer<T>(name + ".conv2", out, out, 3, 1, 1, rng, true, true);
    learnable_sc = first || down || in != out;
    if (learnable_sc)
      conv_sc = ConvLayer<T>(name + ".conv_sc", out, in, 1, 1, 0, rng, true, true);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x, const Pass& pass) {
    Var<T> h = x, sc = x;
    if (first) {
      h = conv1.forward(g, h, pass);
      h = ad::relu(h);
      h = conv2.forward(g, h, pass);
      h = ad::avgpool2x2(h);
      sc = conv_sc.forward(g, ad::avgpool2x2(sc), pass);
    } else {
      h = ad::relu(h);
      h = conv1.forward(g, h, pass);
      h = ad::relu(h);
      h = conv2.forward(g, h, pass);
      if (down) h = ad::avgpool2x2(h);
      if (learnable_sc) sc = conv_sc.forward(g, sc, pass);
      if (down) sc = ad::avgpool2x2(sc);
    }
    return ad::add(h, sc);
  }

  void collect(ParamList<T>& out) {
    conv1.collect("", out);
    conv2.collect("", out);
    if (learnable_sc) conv_sc.collect("", out);
  }

  void audit(std::vector<std::string>& missing) const {
    if (!conv1.use_sn) missing.push_back(conv1.K.name);
    if (!conv2.use_sn) missing.push_back(conv2.K.name);
    if (learnable_sc && !conv_sc.use_sn) missing.push_back(conv_sc.K.name);
  }
};

// ---- label head ----
// Consumes the generator tap. Image taps go through the strided 7x7 conv
// first; 2-D taps feed the dense stack directly. Dropout hits every
// dense input during training.

template <typename T>
struct LabelHead {
  bool has_conv = false;
  ConvLayer<T> conv7;
  std::vector<BatchNorm<T>> bns;
  std::vector<DenseLayer<T>> denses;
  double dropout_rate = 0.5;
  int64_t flat_dim = 0;

  LabelHead() = default;
  LabelHead(const std::string& name, const NetSpec& spec, Rng& rng) {
    dropout_rate = spec.label_head_dropout;
    has_conv = spec.arch == Arch::resnet;
    int64_t in_dim;
    if (has_conv) {
      conv7 = ConvLayer<T>(name + ".conv7", spec.gen_channels, spec.gen_channels, 7, 4, 3, rng);
      int64_t o = (spec.tap_size + 2 * 3 - 7) / 4 + 1;
      in_dim = flat_dim = o * o * spec.gen_channels;
    } else {
      in_dim = flat_dim = spec.mlp_hidden;
    }
    int64_t m = spec.label_head_blocks;
    for (int64_t i = 0; i < m; ++i) {
      bns.emplace_back(name + ".bn" + std::to_string(i), in_dim);
      denses.emplace_back(name + ".dense" + std::to_string(i), spec.label_head_width, in_dim,
                          rng);
      in_dim = spec.label_head_width;
    }
    bns.emplace_back(name + ".bn_out", in_dim);
    denses.emplace_back(name + ".dense_out", spec.label_dim, in_dim, rng);
  }

  // rows on the simplex
  Var<T> forward(Graph<T>& g, const Var<T>& tap, const Pass& pass) {
    Var<T> x = tap;
    if (has_conv) {
      if (tap->val.rank() != 4) throw std::invalid_argument("label head: tap must be [N,H,W,C]");
      x = conv7.forward(g, x, pass);
      x = ad::reshape(x, {x->val.dim(0), flat_dim});
    } else if (tap->val.rank() != 2 || tap->val.dim(1) != flat_dim) {
      throw std::invalid_argument("label head: tap width mismatch");
    }
    for (size_t i = 0; i < denses.size(); ++i) {
      x = bns[i].forward(g, x, pass);
      x = ad::relu(x);
      if (pass.training && dropout_rate > 0.0) {
        if (!pass.rng) throw std::invalid_argument("label head: training pass needs rng");
        x = ad::dropout(x, dropout_rate, *pass.rng, true);
      }
      x = denses[i].forward(g, x, pass);
    }
    return ad::softmax_rows(x);
  }

  void collect(ParamList<T>& out) {
    if (has_conv) conv7.collect("", out);
    for (auto& b : bns) b.collect("", out);
    for (auto& d : denses) d.collect("", out);
  }
};

// ---- generator ----

template <typename T>
struct GenOut {
  Var<T> image;  // [N, H, W, C], tanh range for image data
  Var<T> tap;    // activation feeding the label head
  Var<T> label;  // [N, D_o] rows on the simplex; joint mode only
};

template <typename T>
struct Generator {
  NetSpec spec;
  CondMode mode = CondMode::unsupervised;
  // resnet
  DenseLayer<T> dense0;
  std::vector<GenResUpBlock<T>> blocks;
  BatchNorm<T> bn_final;
  ConvLayer<T> conv_img;
  // mlp
  DenseLayer<T> fc1, fc2, fc_out;
  BatchNorm<T> fbn1, fbn2;
  CondBatchNorm<T> fcbn1, fcbn2;

  std::optional<LabelHead<T>> head;

  Generator() = default;
  Generator(const NetSpec& s, CondMode m, Rng& rng) : spec(s), mode(m) {
    spec.validate();
    bool cbn = mode == CondMode::conditional_cbn;
    int64_t zin = spec.z_dim + (mode == CondMode::conditional_concat ? spec.label_dim : 0);
    if (spec.arch == Arch::resnet) {
      int64_t ch = spec.gen_channels;
      dense0 = DenseLayer<T>("gen.dense0", spec.base_size * spec.base_size * ch, zin, rng);
      for (int i = 0; i < 3; ++i)
        blocks.emplace_back("gen.block" + std::to_string(i + 1), ch, ch, cbn, spec.label_dim,
                            rng);
      bn_final = BatchNorm<T>("gen.bn_final", ch);
      conv_img = ConvLayer<T>("gen.conv_img", spec.data_channels, ch, 3, 1, 1, rng);
    } else {
      int64_t h = spec.mlp_hidden;
      fc1 = DenseLayer<T>("gen.fc1", h, zin, rng);
      fc2 = DenseLayer<T>("gen.fc2", h, h, rng);
      fc_out = DenseLayer<T>("gen.fc_out", spec.data_channels, h, rng);
      if (cbn) {
        fcbn1 = CondBatchNorm<T>("gen.cbn1", spec.label_dim, h);
        fcbn2 = CondBatchNorm<T>("gen.cbn2", spec.label_dim, h);
      } else {
        fbn1 = BatchNorm<T>("gen.bn1", h);
        fbn2 = BatchNorm<T>("gen.bn2", h);
      }
    }
    if (mode == CondMode::joint) head.emplace("gen.head", spec, rng);
  }

  // Joint and unsupervised generators have no label port: class_ids must
  // be empty. Conditional generators require one id per sample.
  GenOut<T> forward(Graph<T>& g, const Tensor<T>& z, const std::vector<int64_t>& class_ids,
                    const Pass& pass) {
    bool conditional =
        mode == CondMode::conditional_concat || mode == CondMode::conditional_cbn;
    if (!conditional && !class_ids.empty())
      throw std::invalid_argument("generator: this mode takes no labels");
    if (conditional && static_cast<int64_t>(class_ids.size()) != z.dim(0))
      throw std::invalid_argument("generator: conditional mode needs one label per sample");
    if (z.rank() != 2 || z.dim(1) != spec.z_dim)
      throw std::invalid_argument("generator: z must be [N, " + std::to_string(spec.z_dim) +
                                  "]");
    if (!z.all_finite()) throw std::invalid_argument("generator: non-finite z");

    auto zin = ad::constant(z);
    if (mode == CondMode::conditional_concat)
      zin = concat_condition(zin, ad::constant(onehot_tensor<T>(class_ids, spec.label_dim)));

    GenOut<T> out;
    if (spec.arch == Arch::resnet) {
      auto x = dense0.forward(g, zin, pass);
      x = ad::reshape(x, {z.dim(0), spec.base_size, spec.base_size, spec.gen_channels});
      for (auto& b : blocks) x = b.forward(g, x, class_ids, pass);
      x = bn_final.forward(g, x, pass);
      out.tap = ad::relu(x);
      out.image = ad::tanh_op(conv_img.forward(g, out.tap, pass));
    } else {
      bool cbn = mode == CondMode::conditional_cbn;
      auto h = fc1.forward(g, zin, pass);
      h = cbn ? fcbn1.forward(g, h, class_ids, pass) : fbn1.forward(g, h, pass);
      h = ad::relu(h);
      h = fc2.forward(g, h, pass);
      h = cbn ? fcbn2.forward(g, h, class_ids, pass) : fbn2.forward(g, h, pass);
      out.tap = ad::relu(h);
      auto pt = fc_out.forward(g, out.tap, pass);
      out.image = ad::reshape(pt, {z.dim(0), 1, 1, spec.data_channels});
    }
    if (head) out.label = head->forward(g, out.tap, pass);
    return out;
  }

  ParamList<T> params() {
    ParamList<T> out;
    if (spec.arch == Arch::resnet) {
      dense0.collect("", out);
      for (auto& b : blocks) b.collect(out);
      bn_final.collect("", out);
      conv_img.collect("", out);
    } else {
      fc1.collect("", out);
      fc2.collect("", out);
      fc_out.collect("", out);
      if (mode == CondMode::conditional_cbn) {
        fcbn1.collect("", out);
        fcbn2.collect("", out);
      } else {
        fbn1.collect("", out);
        fbn2.collect("", out);
      }
    }
    if (head) head->collect(out);
    return out;
  }
};

// ---- discriminator ----

template <typename T>
struct Discriminator {
  NetSpec spec;
  bool has_projection = false;
  // resnet
  std::vector<DiscResBlock<T>> blocks;
  // mlp
  DenseLayer<T> fc1, fc2;
  // shared
  DenseLayer<T> dense_score;
  Param<T> V;  // [D_o, feature_dim]
  SpectralNormState<T> sn_v;

  Discriminator() = default;
  Discriminator(const NetSpec& s, bool projection, Rng& rng)
      : spec(s), has_projection(projection) {
    int64_t feat;
    if (spec.arch == Arch::resnet) {
      int64_t ch = spec.disc_channels;
      blocks.emplace_back("disc.block1", spec.data_channels, ch, true, true, rng);
      blocks.emplace_back("disc.block2", ch, ch, false, true, rng);
      blocks.emplace_back("disc.block3", ch, ch, false, false, rng);
      blocks.emplace_back("disc.block4", ch, ch, false, false, rng);
      feat = ch;
    } else {
      int64_t h = spec.mlp_hidden;
      fc1 = DenseLayer<T>("disc.fc1", h, spec.data_channels, rng, true, true);
      fc2 = DenseLayer<T>("disc.fc2", h, h, rng, true, true);
      feat = h;
    }
    dense_score = DenseLayer<T>("disc.score", 1, feat, rng, true, true);
    if (has_projection) {
      V.name = "disc.V";
      V.value = orthogonal<T>({spec.label_dim, feat}, rng);
      sn_v.reinit_seed = rng.next_u64();
      spectral_power_iterate(V.value, sn_v, 1);
    }
  }

  Var<T> features(Graph<T>& g, const Var<T>& image, const Pass& pass) {
    if (spec.arch == Arch::resnet) {
      if (image->val.dim(1) != spec.image_size || image->val.dim(2) != spec.image_size)
        throw std::invalid_argument("discriminator: image size mismatch");
      Var<T> x = image;
      for (auto& b : blocks) x = b.forward(g, x, pass);
      x = ad::relu(x);
      return ad::sumpool_hw(x);
    }
    auto x = ad::reshape(image, {image->val.dim(0), spec.data_channels});
    x = ad::relu(fc1.forward(g, x, pass));
    x = ad::relu(fc2.forward(g, x, pass));
    return x;
  }

  // score = dense(phi) [+ sum_c label_c (V phi)_c]; label may be one-hot
  // or any point on the simplex
  Var<T> score(Graph<T>& g, const Var<T>& image, const Var<T>& label, const Pass& pass) {
    if (label && !has_projection)
      throw std::invalid_argument("discriminator: label given but projection embedding absent");
    auto phi = features(g, image, pass);
    auto base = ad::reshape(dense_score.forward(g, phi, pass), {phi->val.dim(0)});
    if (!label) return base;
    if (label->val.rank() != 2 || label->val.dim(1) != spec.label_dim)
      throw std::invalid_argument("discriminator: label must be [N, label_dim]");
    auto v = spectral_normalize_var(g, g.param(V), sn_v, pass);
    auto embedded = ad::dense(phi, v);  // [N, D_o]
    return ad::add(base, ad::rows_dot(label, embedded));
  }

  ParamList<T> params() {
    ParamList<T> out;
    if (spec.arch == Arch::resnet)
      for (auto& b : blocks) b.collect(out);
    else {
      fc1.collect("", out);
      fc2.collect("", out);
    }
    dense_score.collect("", out);
    if (has_projection) {
      out.params.push_back(&V);
      out.state.emplace_back(V.name + ".sn_u", &sn_v.u);
      out.state.emplace_back(V.name + ".sn_v", &sn_v.v);
    }
    return out;
  }

  // names of parameterized layers that bypass spectral normalization;
  // must be empty by construction
  std::vector<std::string> layers_without_sn() const {
    std::vector<std::string> missing;
    if (spec.arch == Arch::resnet)
      for (const auto& b : blocks) b.audit(missing);
    else {
      if (!fc1.use_sn) missing.push_back(fc1.W.name);
      if (!fc2.use_sn) missing.push_back(fc2.W.name);
    }
    if (!dense_score.use_sn) missing.push_back(dense_score.W.name);
    // V is normalized explicitly in score()
    return missing;
  }
};

// ---- model container ----

template <typename T>
struct GanModel {
  NetSpec spec;
  CondMode mode = CondMode::unsupervised;
  Generator<T> gen;
  Discriminator<T> disc;
  uint64_t init_seed = 0;

  GanModel() = default;
  GanModel(const NetSpec& s, CondMode m, uint64_t seed) : spec(s), mode(m), init_seed(seed) {
    Rng rng(seed);
    gen = Generator<T>(spec, mode, rng);
    disc = Discriminator<T>(spec, mode != CondMode::unsupervised, rng);
  }

  ParamList<T> gen_params() { return gen.params(); }
  ParamList<T> disc_params() { return disc.params(); }
};

}  // namespace jgan
