#include "mmcqa/model.hpp"

#include <array>
#include <cstdlib>
#include <utility>

namespace mmcqa {

namespace {

constexpr std::array<const char*, kVariantCount> kVariantNames = {
    "text-only",     "image-only", "concat",        "sum-prod-concat",
    "san-1",         "san-2",      "global-weight", "global-weight-attention",
};

}  // namespace

const char* to_string(Variant v) { return kVariantNames.at(static_cast<std::size_t>(v)); }

Variant variant_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
    if (name == kVariantNames[i]) return static_cast<Variant>(i);
  }
  throw std::invalid_argument("unknown variant: " + name);
}

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kClassifier: return "classifier";
    case ModelKind::kRetrieval: return "retrieval";
    case ModelKind::kAuxiliary: return "auxiliary";
  }
  return "?";
}

void validate_flags(Variant v, const AblationFlags& f) {
  const bool gated = v == Variant::kGlobalWeightAttention;
  if (f.no_attention && !gated)
    throw std::invalid_argument("no_attention only applies to global-weight-attention");
  if (f.no_image_weight && !gated)
    throw std::invalid_argument("no_image_weight only applies to global-weight-attention");
  if (f.no_attention && f.no_image_weight)
    throw std::invalid_argument("no_attention and no_image_weight are mutually exclusive");
  if ((f.big_att || f.big_fc) && v != Variant::kSan1)
    throw std::invalid_argument("big_att / big_fc grow the san-1 baseline only");
  if (f.big_att && f.big_fc)
    throw std::invalid_argument("big_att and big_fc are mutually exclusive");
  if ((f.no_aux_it || f.no_aux_ti) && f.no_aux)
    throw std::invalid_argument("no_aux already disables both matching directions");
  if ((f.no_aux_it || f.no_aux_ti) && !(variant_uses_text(v) && variant_uses_image(v)))
    throw std::invalid_argument("aux direction flags need a bimodal variant");
}

FusionKind effective_fusion(Variant v, const AblationFlags& f) {
  switch (v) {
    case Variant::kTextOnly:
    case Variant::kImageOnly:
      return FusionKind::kNone;
    case Variant::kConcat:
      return FusionKind::kConcat;
    case Variant::kSumProdConcat:
      return FusionKind::kSumProd;
    case Variant::kSan1:
      return FusionKind::kSan1;
    case Variant::kSan2:
      return FusionKind::kSan2;
    case Variant::kGlobalWeight:
      return FusionKind::kGlobalWeight;
    case Variant::kGlobalWeightAttention:
      if (f.no_attention) return FusionKind::kGlobalWeight;
      if (f.no_image_weight) return FusionKind::kSan1;
      return FusionKind::kGated;
  }
  throw std::logic_error("effective_fusion: unhandled variant");
}

namespace {

void attention_params(const ModelDims& dims, std::size_t logit_rows, const std::string& prefix,
                      const std::function<void(const ParamSpec&)>& fn) {
  const std::size_t k = dims.attention_dim;
  const std::size_t d = dims.text.d;
  fn({prefix + ".w_ia", {k, d}, ParamInit::kGlorot});
  fn({prefix + ".w_ta", {k, d}, ParamInit::kGlorot});
  fn({prefix + ".b_a", {k}, ParamInit::kZero});
  fn({prefix + ".w_alpha", {1, k}, ParamInit::kGlorot});
  fn({prefix + ".b_alpha", {logit_rows}, ParamInit::kZero});
}

}  // namespace

void for_each_model_param(const ModelSpec& spec,
                          const std::function<void(const ParamSpec&)>& fn) {
  const ModelDims& dims = spec.dims;
  const TextDims& t = dims.text;
  if (variant_uses_text(spec.variant)) {
    fn({"text.embedding", {t.vocab, t.embed}, ParamInit::kEmbedding});
    for (std::size_t g = 0; g < 3; ++g) {
      const std::string stem = "text.conv" + std::to_string(g + 1);
      fn({stem + "_w", {(g + 1) * t.embed, t.filters[g]}, ParamInit::kGlorot});
      fn({stem + "_b", {t.filters[g]}, ParamInit::kZero});
    }
    fn({"text.proj_w", {t.sum_filters(), t.d}, ParamInit::kGlorot});
    fn({"text.proj_b", {t.d}, ParamInit::kZero});
  }
  if (variant_uses_image(spec.variant)) {
    fn({"image.proj_w", {dims.image_dim, t.d}, ParamInit::kGlorot});
    fn({"image.proj_b", {t.d}, ParamInit::kZero});
  }
  switch (spec.fusion) {
    case FusionKind::kNone:
    case FusionKind::kConcat:
    case FusionKind::kSumProd:
      break;
    case FusionKind::kSan1:
      attention_params(dims, dims.regions, "fusion", fn);
      break;
    case FusionKind::kSan2:
      attention_params(dims, dims.regions, "fusion", fn);
      attention_params(dims, dims.regions, "fusion.hop2", fn);
      break;
    case FusionKind::kGlobalWeight:
    case FusionKind::kGated:
      attention_params(dims, spec.fusion == FusionKind::kGated ? dims.regions + 1 : 1,
                       "fusion", fn);
      // Both gated variants blend in the text-derived stand-in v_T'.
      fn({"fusion.w_tt", {t.d, t.d}, ParamInit::kGlorot});
      fn({"fusion.b_t", {t.d}, ParamInit::kZero});
      break;
  }
  const std::size_t h = fused_dim(spec);
  if (dims.fc_width > 0) {
    fn({"fusion.fc1_w", {dims.fc_width, h}, ParamInit::kGlorot});
    fn({"fusion.fc1_b", {dims.fc_width}, ParamInit::kZero});
    fn({"fusion.fc2_w", {h, dims.fc_width}, ParamInit::kGlorot});
    fn({"fusion.fc2_b", {h}, ParamInit::kZero});
  }
  switch (spec.kind) {
    case ModelKind::kClassifier:
      fn({"head.cls_w", {dims.categories, h}, ParamInit::kGlorot});
      fn({"head.cls_b", {dims.categories}, ParamInit::kZero});
      break;
    case ModelKind::kRetrieval:
      fn({"head.experts", {dims.pool, h}, ParamInit::kNormal});
      fn({"head.match_m", {h, h}, ParamInit::kGlorot});
      break;
    case ModelKind::kAuxiliary:
      fn({"head.aux1_w", {dims.aux_channels, h}, ParamInit::kGlorot});
      fn({"head.aux1_b", {dims.aux_channels}, ParamInit::kZero});
      fn({"head.aux2_w", {1, dims.aux_channels}, ParamInit::kGlorot});
      fn({"head.aux2_b", {1}, ParamInit::kZero});
      break;
  }
}

std::size_t model_param_count(const ModelSpec& spec) {
  std::size_t total = 0;
  for_each_model_param(spec, [&](const ParamSpec& p) {
    std::size_t n = 1;
    for (std::size_t dim : p.shape) n *= dim;
    total += n;
  });
  return total;
}

namespace {

// Picks the width whose parameter count lands closest to target. Counts are
// affine and increasing in the width, so the first candidate at or past the
// target brackets the optimum with its predecessor.
std::size_t match_width(ModelSpec& spec, std::size_t ModelDims::*field, std::size_t target) {
  std::size_t best_width = 1;
  std::size_t best_err = static_cast<std::size_t>(-1);
  for (std::size_t w = 1; w <= 1u << 20; ++w) {
    spec.dims.*field = w;
    const std::size_t count = model_param_count(spec);
    const std::size_t err = count > target ? count - target : target - count;
    if (err < best_err) {
      best_err = err;
      best_width = w;
    }
    if (count >= target) break;
  }
  if (best_err * 50 > target)
    throw std::runtime_error("budget match: no width lands within 2% of the full model");
  return best_width;
}

}  // namespace

ModelSpec make_spec(Variant v, ModelKind kind, ModelDims dims, AblationFlags flags) {
  validate_flags(v, flags);
  if (variant_uses_text(v) && dims.text.vocab <= kReservedIds)
    throw std::invalid_argument("make_spec: vocabulary not set");
  if (kind == ModelKind::kClassifier && dims.categories == 0)
    throw std::invalid_argument("make_spec: classifier needs categories");
  if (kind == ModelKind::kRetrieval && dims.pool == 0)
    throw std::invalid_argument("make_spec: retrieval needs a non-empty expert pool");
  if (kind == ModelKind::kAuxiliary && !(variant_uses_text(v) && variant_uses_image(v)))
    throw std::invalid_argument("make_spec: auxiliary matching needs both modalities");
  if (variant_uses_image(v) && (dims.image_dim == 0 || dims.regions == 0))
    throw std::invalid_argument("make_spec: image dims not set");
  ModelSpec spec;
  spec.variant = v;
  spec.kind = kind;
  spec.flags = flags;
  spec.dims = dims;
  spec.fusion = effective_fusion(v, flags);
  if (spec.fusion != FusionKind::kNone && spec.fusion != FusionKind::kConcat &&
      spec.fusion != FusionKind::kSumProd && dims.attention_dim == 0)
    throw std::invalid_argument("make_spec: attention dim not set");
  if (flags.big_att || flags.big_fc) {
    ModelSpec full = spec;
    full.variant = Variant::kGlobalWeightAttention;
    full.flags = AblationFlags{};
    full.fusion = FusionKind::kGated;
    full.dims.fc_width = 0;
    const std::size_t target = model_param_count(full);
    ModelSpec probe = spec;
    if (flags.big_att) {
      spec.dims.attention_dim = match_width(probe, &ModelDims::attention_dim, target);
    } else {
      spec.dims.fc_width = match_width(probe, &ModelDims::fc_width, target);
    }
  }
  return spec;
}

}  // namespace mmcqa
