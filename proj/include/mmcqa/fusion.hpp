#pragma once

// Image-text combination mechanisms: concatenation baselines, stacked
// attention over spatial regions, and two gated variants that learn how much
// the image should contribute (a scalar gate, and an extra attention row
// holding a transformed text vector as the fall-back candidate).
//
// Everything is batched. Per-sample vectors are rows of [B, d] matrices;
// per-sample region stacks are sample-major [B*m, d] (sample b owns rows
// b*m .. b*m+m-1).

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmcqa/tape.hpp"

namespace mmcqa {

// Sentinel for fusion parameter slots a variant does not use. Accidentally
// feeding it to the tape throws rather than aliasing node 0.
inline constexpr ValueId kNoParam = static_cast<ValueId>(-1);

// Tape leaf ids for one fusion block. b_alpha's length picks the variant:
// 1 for the scalar gate, m for stacked attention, m+1 for gated attention
// with the fall-back row.
struct FusionParamIds {
  ValueId w_ia = kNoParam;     // [k, d] image-side attention projection
  ValueId w_ta = kNoParam;     // [k, d] text-side attention projection
  ValueId b_a = kNoParam;      // [k]
  ValueId w_alpha = kNoParam;  // [1, k] attention logit row
  ValueId b_alpha = kNoParam;  // [1] | [m] | [m+1]
  ValueId w_tt = kNoParam;     // [d, d] fall-back text transform
  ValueId b_t = kNoParam;      // [d]
};

struct AttentionOut {
  ValueId alpha;  // [B, R]; each row non-negative, sums to 1
  ValueId v_img;  // [B, d] attention-weighted combination of the value rows
};

struct FusionOut {
  ValueId v_it = kNoParam;          // [B, 2d] joint embedding
  ValueId alpha = kNoParam;         // [B, m] / [B, m+1]; unset for non-attention variants
  ValueId image_weight = kNoParam;  // [B] in [0,1]; unset for ungated variants
};

// v_T' = tanh(W_TT' v_T + b_T'): the text-derived stand-in the gated
// variants fall back to when the image is down-weighted.
template <typename T>
ValueId fallback_text(Tape<T>& tape, ValueId v_t, const FusionParamIds& p) {
  return tape.tanh_op(tape.affine_rows(v_t, p.w_tt, p.b_t));
}

// [v_T || v_I]
template <typename T>
ValueId fuse_concat(Tape<T>& tape, ValueId v_t, ValueId v_i) {
  if (tape.value(v_t).cols() != tape.value(v_i).cols())
    throw std::invalid_argument("fuse_concat: dim mismatch");
  return tape.concat(v_t, v_i, 1);
}

// [v_T + x || v_T * x], the joint embedding both gated variants emit; x is
// the (possibly gated) image contribution.
template <typename T>
ValueId joint_embed(Tape<T>& tape, ValueId v_t, ValueId x) {
  return tape.concat(tape.add(v_t, x), tape.mul(v_t, x), 1);
}

// Baseline with the same algebra as joint_embed but applied to the raw
// image embedding, no gating upstream.
template <typename T>
ValueId fuse_sum_prod_concat(Tape<T>& tape, ValueId v_t, ValueId v_i) {
  return joint_embed(tape, v_t, v_i);
}

namespace detail {

// batch, regions from the row counts of a [B, d] query against [B*R, d]
// values; throws when the value rows cannot be split evenly.
template <typename T>
std::pair<std::size_t, std::size_t> split_regions(const Tape<T>& tape, ValueId values,
                                                  ValueId query, const char* what) {
  const std::size_t batch = tape.value(query).rows();
  const std::size_t rows = tape.value(values).rows();
  if (batch == 0 || rows % batch != 0 || rows == 0)
    throw std::invalid_argument(std::string(what) + ": value rows must be batch * regions");
  return {batch, rows / batch};
}

// One attention hop: logit_i = W_alpha tanh(W_IA v_i + W_TA q + b_A) + b_i
// over each sample's R value rows, softmax, then the weighted row sum.
template <typename T>
AttentionOut attend_hop(Tape<T>& tape, ValueId values, ValueId query, const FusionParamIds& p,
                        std::size_t batch, std::size_t regions) {
  if (tape.value(p.b_alpha).numel() != regions)
    throw std::invalid_argument("fusion: attention bias length must match region count");
  ValueId q = tape.affine_rows(query, p.w_ta, p.b_a);                            // [B, k]
  ValueId h = tape.tanh_op(tape.add(tape.matmul(values, p.w_ia, false, true),
                                    tape.repeat_rows(q, regions)));              // [B*R, k]
  ValueId logits = tape.reshape(tape.matmul(h, p.w_alpha, false, true), {batch, regions});
  ValueId alpha = tape.softmax_rows(tape.add_rows(logits, p.b_alpha));
  return {alpha, tape.attend(alpha, values)};
}

// alpha[:, R-1] as a [B] vector.
template <typename T>
ValueId last_column(Tape<T>& tape, ValueId alpha, std::size_t batch, std::size_t regions) {
  std::vector<std::uint32_t> idx(batch);
  for (std::size_t b = 0; b < batch; ++b)
    idx[b] = static_cast<std::uint32_t>(b * regions + regions - 1);
  return tape.gather_rows(tape.reshape(alpha, {batch * regions}), std::move(idx));
}

}  // namespace detail

// Stacked attention over the spatial rows, one or two hops. The second hop
// re-queries with v_T + first hop's image vector using its own parameters.
// Returns the final hop's weights and image vector.
template <typename T>
AttentionOut san_attend(Tape<T>& tape, ValueId v_sp, ValueId v_t,
                        const std::vector<FusionParamIds>& hops) {
  if (hops.empty() || hops.size() > 2)
    throw std::invalid_argument("san_attend: 1 or 2 hops supported");
  auto [batch, regions] = detail::split_regions(tape, v_sp, v_t, "san_attend");
  AttentionOut out = detail::attend_hop(tape, v_sp, v_t, hops[0], batch, regions);
  if (hops.size() == 2) {
    ValueId query = tape.add(v_t, out.v_img);
    out = detail::attend_hop(tape, v_sp, query, hops[1], batch, regions);
  }
  return out;
}

// san_attend followed by the joint embedding; no explicit image weight.
template <typename T>
FusionOut san_fuse(Tape<T>& tape, ValueId v_sp, ValueId v_t,
                   const std::vector<FusionParamIds>& hops) {
  AttentionOut a = san_attend(tape, v_sp, v_t, hops);
  FusionOut out;
  out.alpha = a.alpha;
  out.v_it = joint_embed(tape, v_t, a.v_img);
  return out;
}

// Scalar gate: alpha = sigmoid(W_alpha tanh(W_IA v_I + W_TA v_T + b_A) + b),
// image contribution alpha * v_I + (1 - alpha) * v_T'.
template <typename T>
FusionOut global_weight_fuse(Tape<T>& tape, ValueId v_i, ValueId v_t, const FusionParamIds& p) {
  const std::size_t batch = tape.value(v_t).rows();
  ValueId h = tape.tanh_op(tape.add_rows(tape.add(tape.matmul(v_i, p.w_ia, false, true),
                                                  tape.matmul(v_t, p.w_ta, false, true)),
                                         p.b_a));                                // [B, k]
  ValueId logits = tape.reshape(tape.matmul(h, p.w_alpha, false, true), {batch});
  ValueId alpha = tape.sigmoid(tape.add_scalar(logits, p.b_alpha));              // [B]
  ValueId one_minus = tape.add_const(tape.scale_const(alpha, -1.0), 1.0);
  ValueId v_img = tape.add(tape.row_scale(v_i, alpha),
                           tape.row_scale(fallback_text(tape, v_t, p), one_minus));
  FusionOut out;
  out.image_weight = alpha;
  out.v_it = joint_embed(tape, v_t, v_img);
  return out;
}

// Gated attention: v_T' joins the spatial rows as candidate m+1, softmax runs
// over m+1 rows, and the image weight is the mass left on the real regions,
// 1 - alpha_{m+1}.
template <typename T>
FusionOut global_weight_attention_fuse(Tape<T>& tape, ValueId v_sp, ValueId v_t,
                                       const FusionParamIds& p) {
  auto [batch, regions] = detail::split_regions(tape, v_sp, v_t, "global_weight_attention_fuse");
  ValueId stacked = tape.concat(v_sp, fallback_text(tape, v_t, p), 0);  // [B*m + B, d]
  std::vector<std::uint32_t> plan(batch * (regions + 1));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < regions; ++i)
      plan[b * (regions + 1) + i] = static_cast<std::uint32_t>(b * regions + i);
    plan[b * (regions + 1) + regions] = static_cast<std::uint32_t>(batch * regions + b);
  }
  ValueId cand = tape.gather_rows(stacked, std::move(plan));  // [B*(m+1), d]
  AttentionOut a = detail::attend_hop(tape, cand, v_t, p, batch, regions + 1);
  FusionOut out;
  out.alpha = a.alpha;
  out.v_it = joint_embed(tape, v_t, a.v_img);
  ValueId fb_mass = detail::last_column(tape, a.alpha, batch, regions + 1);
  out.image_weight = tape.add_const(tape.scale_const(fb_mass, -1.0), 1.0);
  return out;
}

// Evaluation-time rescaling of the gated-attention image weight: uniform
// attention over the m regions plus the fall-back row then reads as exactly
// 1, matching the scalar gate's "1 means balanced" convention.
inline double normalized_image_weight(double summed_region_mass, std::size_t regions) {
  return summed_region_mass * double(regions + 1) / double(regions);
}

}  // namespace mmcqa
