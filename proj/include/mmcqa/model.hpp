#pragma once

// Assembles the model variants out of the encoder, fusion, and head blocks:
// named parameter stores, tape staging, and the shared trunk forward pass.
// A "model" here is one task head's network (classifier, retrieval, or
// auxiliary matcher); the training stages juggle up to three of them.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcqa/fusion.hpp"
#include "mmcqa/heads.hpp"
#include "mmcqa/image.hpp"
#include "mmcqa/optim.hpp"
#include "mmcqa/rng.hpp"
#include "mmcqa/tape.hpp"
#include "mmcqa/tensor.hpp"
#include "mmcqa/text.hpp"

namespace mmcqa {

enum class Variant : std::uint8_t {
  kTextOnly,
  kImageOnly,
  kConcat,
  kSumProdConcat,
  kSan1,
  kSan2,
  kGlobalWeight,
  kGlobalWeightAttention,
};

inline constexpr std::size_t kVariantCount = 8;

const char* to_string(Variant v);
Variant variant_from_string(const std::string& name);

inline bool variant_uses_text(Variant v) { return v != Variant::kImageOnly; }
inline bool variant_uses_image(Variant v) { return v != Variant::kTextOnly; }

enum class ModelKind : std::uint8_t { kClassifier, kRetrieval, kAuxiliary };

const char* to_string(ModelKind k);

// Structure-changing switches. The no_* pairs carve pieces out of the full
// model; big_att / big_fc grow a plain stacked-attention baseline until its
// trainable-parameter count matches the full model's.
struct AblationFlags {
  bool no_image_weight = false;
  bool no_aux = false;
  bool no_aux_it = false;
  bool no_aux_ti = false;
  bool no_attention = false;
  bool no_finetune = false;
  bool big_att = false;
  bool big_fc = false;
};

void validate_flags(Variant v, const AblationFlags& f);

// Fusion structure after applying the flags to the variant.
enum class FusionKind : std::uint8_t {
  kNone,         // single modality, head reads the bare encoder output
  kConcat,
  kSumProd,
  kSan1,
  kSan2,
  kGlobalWeight,
  kGated,        // scalar gate realized as the extra attention row
};

FusionKind effective_fusion(Variant v, const AblationFlags& f);

inline bool fusion_is_spatial(FusionKind k) {
  return k == FusionKind::kSan1 || k == FusionKind::kSan2 || k == FusionKind::kGated;
}

struct ModelDims {
  TextDims text;                   // text.vocab fixed once the corpus is known
  std::size_t image_dim = 64;      // raw feature width per region
  std::size_t regions = 49;        // spatial rows per image
  std::size_t attention_dim = 64;  // k
  std::size_t categories = 0;      // classifier output width
  std::size_t pool = 0;            // expert pool size
  std::size_t aux_channels = 32;   // auxiliary head hidden width
  std::size_t n_neg = 50;          // sampled negatives per retrieval positive
  std::size_t fc_width = 0;        // big-fc stack width; 0 means no stack
};

// Everything but the weights: enough to rebuild an identical topology.
struct ModelSpec {
  Variant variant = Variant::kGlobalWeightAttention;
  ModelKind kind = ModelKind::kClassifier;
  AblationFlags flags;
  ModelDims dims;                  // big widths resolved
  FusionKind fusion = FusionKind::kGated;
  bool stage2_concat = false;      // text path concatenates the frozen twin
};

// Head input width: bare encoder output for single-modality variants, the
// joint embedding (sum ++ product) otherwise.
inline std::size_t fused_dim(const ModelSpec& spec) {
  return spec.fusion == FusionKind::kNone ? spec.dims.text.d : 2 * spec.dims.text.d;
}

// Validates, resolves the fusion kind, and for big_att / big_fc searches the
// width whose trainable-parameter count lands within 2% of the full model's.
ModelSpec make_spec(Variant v, ModelKind kind, ModelDims dims, AblationFlags flags);

enum class ParamInit : std::uint8_t {
  kGlorot,
  kZero,
  kEmbedding,    // uniform(-0.05, 0.05), PAD row cleared to zero
  kNormal,       // N(0, 0.1)
  kIdentityTop,  // [2d, d] with the top d rows an identity: pass-through init
};

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  ParamInit init = ParamInit::kGlorot;
};

// Enumerates the spec's parameters in store order; the same order fixes the
// init draw sequence and the checkpoint blob layout. Stage-2 additions are
// not included (see add_stage2_params).
void for_each_model_param(const ModelSpec& spec, const std::function<void(const ParamSpec&)>& fn);

std::size_t model_param_count(const ModelSpec& spec);

template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, double lr_scale = 1.0) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    const std::size_t i = values_.size();
    index_.emplace(name, i);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    lr_scales_.push_back(lr_scale);
    return i;
  }

  std::size_t size() const { return values_.size(); }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return it->second;
  }

  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  Tensor<T>& at(const std::string& name) { return values_[index_of(name)]; }
  const Tensor<T>& at(const std::string& name) const { return values_[index_of(name)]; }

  double lr_scale(std::size_t i) const { return lr_scales_.at(i); }
  void set_lr_scale(std::size_t i, double s) { lr_scales_.at(i) = s; }
  const std::vector<double>& lr_scales() const { return lr_scales_; }

  // Returns how many parameters matched.
  std::size_t set_lr_scale_prefix(const std::string& prefix, double s) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].rfind(prefix, 0) == 0) {
        lr_scales_[i] = s;
        ++hits;
      }
    }
    return hits;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (lr_scales_[i] > 0.0) n += values_[i].numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<double> lr_scales_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
Tensor<T> init_param(const ParamSpec& p, Rng& rng) {
  switch (p.init) {
    case ParamInit::kGlorot:
      return Tensor<T>::glorot(p.shape.at(0), p.shape.at(1), rng);
    case ParamInit::kZero:
      return Tensor<T>::zeros(p.shape, true);
    case ParamInit::kEmbedding: {
      Tensor<T> t = Tensor<T>::random_uniform(p.shape, T(0.05), rng, true);
      for (std::size_t j = 0; j < t.cols(); ++j) t.at(0, j) = T(0);
      return t;
    }
    case ParamInit::kNormal:
      return Tensor<T>::random_normal(p.shape, T(0), T(0.1), rng, true);
    case ParamInit::kIdentityTop: {
      Tensor<T> t = Tensor<T>::zeros(p.shape, true);
      for (std::size_t j = 0; j < t.cols(); ++j) t.at(j, j) = T(1);
      return t;
    }
  }
  throw std::logic_error("init_param: unhandled init kind");
}

}  // namespace detail

template <typename T>
struct Model {
  ModelSpec spec;
  ParamStore<T> params;
};

using ModelF = Model<float>;

template <typename T>
Model<T> build_model(const ModelSpec& spec, Rng& rng) {
  Model<T> m;
  m.spec = spec;
  for_each_model_param(spec, [&](const ParamSpec& p) {
    m.params.add(p.name, detail::init_param<T>(p, rng));
  });
  return m;
}

// Grafts the auxiliary model's frozen text branch onto a main-task model and
// adds the concat-reducing projection, initialized to reproduce the original
// text embedding exactly. Freezes the model's own text branch.
template <typename T>
void add_stage2_params(Model<T>& m, const ParamStore<T>& aux_params) {
  if (m.spec.stage2_concat) throw std::logic_error("add_stage2_params: already applied");
  if (!variant_uses_text(m.spec.variant))
    throw std::invalid_argument("add_stage2_params: variant has no text branch");
  static const char* kTextParams[] = {"embedding", "conv1_w", "conv1_b", "conv2_w", "conv2_b",
                                      "conv3_w",   "conv3_b", "proj_w",  "proj_b"};
  for (const char* suffix : kTextParams) {
    Tensor<T> copy = aux_params.at(std::string("text.") + suffix);
    copy.set_requires_grad(true);
    m.params.add(std::string("aux.") + suffix, std::move(copy), 0.0);
  }
  const std::size_t d = m.spec.dims.text.d;
  ParamSpec reduce{"stage2.reduce_w", {2 * d, d}, ParamInit::kIdentityTop};
  Rng unused(0);
  m.params.add(reduce.name, detail::init_param<T>(reduce, unused));
  m.params.add("stage2.reduce_b", Tensor<T>::zeros({d}, true));
  m.params.set_lr_scale_prefix("text.", 0.0);
  m.spec.stage2_concat = true;
}

// ---- staging and forward ----

template <typename T>
struct StagedModel {
  const Model<T>* model = nullptr;
  std::vector<ValueId> leaves;  // aligned with the store

  ValueId at(const std::string& name) const {
    return leaves.at(model->params.index_of(name));
  }
};

// Frozen parameters are staged without requires_grad so backward skips
// their whole subgraph.
template <typename T>
StagedModel<T> stage_model(Tape<T>& tape, const Model<T>& m) {
  StagedModel<T> sm;
  sm.model = &m;
  sm.leaves.reserve(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    Tensor<T> v = m.params.value(i);
    v.set_requires_grad(m.params.lr_scale(i) > 0.0);
    sm.leaves.push_back(tape.leaf(std::move(v)));
  }
  return sm;
}

namespace detail {

template <typename T>
TextParamIds text_ids(const StagedModel<T>& sm, const std::string& prefix) {
  TextParamIds p;
  p.embedding = sm.at(prefix + ".embedding");
  p.conv_w = {sm.at(prefix + ".conv1_w"), sm.at(prefix + ".conv2_w"), sm.at(prefix + ".conv3_w")};
  p.conv_b = {sm.at(prefix + ".conv1_b"), sm.at(prefix + ".conv2_b"), sm.at(prefix + ".conv3_b")};
  p.proj_w = sm.at(prefix + ".proj_w");
  p.proj_b = sm.at(prefix + ".proj_b");
  return p;
}

template <typename T>
FusionParamIds fusion_ids(const StagedModel<T>& sm, const std::string& prefix) {
  FusionParamIds p;
  p.w_ia = sm.at(prefix + ".w_ia");
  p.w_ta = sm.at(prefix + ".w_ta");
  p.b_a = sm.at(prefix + ".b_a");
  p.w_alpha = sm.at(prefix + ".w_alpha");
  p.b_alpha = sm.at(prefix + ".b_alpha");
  if (sm.model->params.has(prefix + ".w_tt")) {
    p.w_tt = sm.at(prefix + ".w_tt");
    p.b_t = sm.at(prefix + ".b_t");
  }
  return p;
}

}  // namespace detail

// Shared trunk: encoders, fusion, and the optional big-fc stack. text may be
// null only for the image-only variant, image_rows only for text-only.
// image_rows is [B, D] for flat fusion and [B*m, D] for spatial fusion.
template <typename T>
FusionOut model_trunk(Tape<T>& tape, const StagedModel<T>& sm, const TextBatch* text,
                      const Tensor<T>* image_rows) {
  const ModelSpec& spec = sm.model->spec;
  ValueId v_t = kNoParam;
  if (variant_uses_text(spec.variant)) {
    if (text == nullptr) throw std::invalid_argument("model_trunk: text batch required");
    v_t = text_cnn_encode_batch(tape, *text, detail::text_ids(sm, "text"), spec.dims.text);
    if (spec.stage2_concat) {
      ValueId v_aux = text_cnn_encode_batch(tape, *text, detail::text_ids(sm, "aux"), spec.dims.text);
      ValueId cat = tape.concat(v_t, v_aux, 1);
      v_t = tape.add_rows(tape.matmul(cat, sm.at("stage2.reduce_w")), sm.at("stage2.reduce_b"));
    }
  }
  ValueId v_i = kNoParam;
  if (variant_uses_image(spec.variant)) {
    if (image_rows == nullptr) throw std::invalid_argument("model_trunk: image rows required");
    if (image_rows->cols() != spec.dims.image_dim)
      throw std::invalid_argument("model_trunk: image feature width mismatch");
    Tensor<T> rows = *image_rows;
    rows.set_requires_grad(false);
    v_i = project_image_rows(tape, tape.leaf(std::move(rows)), sm.at("image.proj_w"),
                             sm.at("image.proj_b"));
  }
  FusionOut out;
  switch (spec.fusion) {
    case FusionKind::kNone:
      out.v_it = spec.variant == Variant::kImageOnly ? v_i : v_t;
      break;
    case FusionKind::kConcat:
      out.v_it = fuse_concat(tape, v_t, v_i);
      break;
    case FusionKind::kSumProd:
      out.v_it = fuse_sum_prod_concat(tape, v_t, v_i);
      break;
    case FusionKind::kSan1:
      out = san_fuse(tape, v_i, v_t, {detail::fusion_ids(sm, "fusion")});
      break;
    case FusionKind::kSan2:
      out = san_fuse(tape, v_i, v_t,
                     {detail::fusion_ids(sm, "fusion"), detail::fusion_ids(sm, "fusion.hop2")});
      break;
    case FusionKind::kGlobalWeight:
      out = global_weight_fuse(tape, v_i, v_t, detail::fusion_ids(sm, "fusion"));
      break;
    case FusionKind::kGated:
      out = global_weight_attention_fuse(tape, v_i, v_t, detail::fusion_ids(sm, "fusion"));
      break;
  }
  if (spec.dims.fc_width > 0) {
    out.v_it = tape.tanh_op(
        tape.affine_rows(out.v_it, sm.at("fusion.fc1_w"), sm.at("fusion.fc1_b")));
    out.v_it = tape.tanh_op(
        tape.affine_rows(out.v_it, sm.at("fusion.fc2_w"), sm.at("fusion.fc2_b")));
  }
  return out;
}

template <typename T>
ValueId model_classifier_probs(Tape<T>& tape, const StagedModel<T>& sm, ValueId v_out) {
  ClassifierParamIds p{sm.at("head.cls_w"), sm.at("head.cls_b")};
  return classify(tape, v_out, p);
}

template <typename T>
ValueId model_expert_scores(Tape<T>& tape, const StagedModel<T>& sm, ValueId v_out) {
  return score_experts(tape, v_out, sm.at("head.experts"), sm.at("head.match_m"));
}

template <typename T>
AuxHeadParamIds model_aux_ids(const StagedModel<T>& sm) {
  return AuxHeadParamIds{sm.at("head.aux1_w"), sm.at("head.aux1_b"), sm.at("head.aux2_w"),
                         sm.at("head.aux2_b")};
}

// ---- optimizer plumbing ----

template <typename T>
std::vector<Tensor<T>*> param_ptrs(Model<T>& m) {
  std::vector<Tensor<T>*> ptrs;
  ptrs.reserve(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) ptrs.push_back(&m.params.value(i));
  return ptrs;
}

template <typename T>
void init_optimizer(Model<T>& m, AdamWState& state) {
  std::vector<Tensor<T>*> ptrs = param_ptrs(m);
  state.init(ptrs);
}

// Backward from a scalar loss, PAD-row zeroing, global-norm clip, one AdamW
// step. Frozen leaves produce zero grads so store alignment is preserved.
// Returns the pre-clip gradient norm.
template <typename T>
double apply_gradients(Tape<T>& tape, ValueId loss, const StagedModel<T>& sm, Model<T>& m,
                       AdamWState& state, const AdamWConfig& cfg) {
  std::vector<Tensor<T>> all = tape.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    Tensor<T> g = std::move(all.at(sm.leaves[i]));
    if (g.numel() == 0) g = Tensor<T>::zeros(m.params.value(i).shape());
    grads.push_back(std::move(g));
  }
  if (m.params.has("text.embedding")) {
    Tensor<T>& g = grads[m.params.index_of("text.embedding")];
    for (std::size_t j = 0; j < g.cols(); ++j) g.at(0, j) = T(0);
  }
  const double norm = clip_global_norm(grads, cfg.clip_norm);
  std::vector<Tensor<T>*> ptrs = param_ptrs(m);
  adamw_step(ptrs, grads, state, cfg, m.params.lr_scales());
  return norm;
}

}  // namespace mmcqa
