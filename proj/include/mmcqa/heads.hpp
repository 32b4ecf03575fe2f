#pragma once

// Task-specific output layers and losses: per-category sigmoid classification
// with mean binary cross-entropy, matching-matrix expert scoring with a
// sampled-softmax retrieval loss, and the 5-way candidate matching head used
// by the auxiliary task.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mmcqa/fusion.hpp"
#include "mmcqa/rng.hpp"
#include "mmcqa/tape.hpp"

namespace mmcqa {

struct ClassifierParamIds {
  ValueId w = kNoParam;  // [C, h]
  ValueId b = kNoParam;  // [C]
};

// Candidate scorer of the auxiliary matching task: two kernel-size-1 stages
// along the candidate axis, h -> c -> 1 with tanh between, so the five
// candidates are scored independently.
struct AuxHeadParamIds {
  ValueId c1_w = kNoParam;  // [c, h]
  ValueId c1_b = kNoParam;  // [c]
  ValueId c2_w = kNoParam;  // [1, c]
  ValueId c2_b = kNoParam;  // [1]
};

inline constexpr std::size_t kAuxCandidates = 5;

// Independent per-category probabilities sigmoid(W v_IT + b): [B, C].
template <typename T>
ValueId classify(Tape<T>& tape, ValueId v_it, const ClassifierParamIds& p) {
  return tape.sigmoid(tape.affine_rows(v_it, p.w, p.b));
}

// Mean over every (sample, category) cell of -[y ln p + (1-y) ln(1-p)], with
// p clamped to [1e-7, 1-1e-7]. gold[b] lists the positive category ids.
template <typename T>
ValueId bce_multilabel_loss(Tape<T>& tape, ValueId probs,
                            const std::vector<std::vector<std::uint32_t>>& gold) {
  const Tensor<T>& pr = tape.value(probs);
  const std::size_t batch = pr.rows(), categories = pr.cols();
  if (gold.size() != batch)
    throw std::invalid_argument("bce_multilabel_loss: one gold set per sample required");
  Tensor<T> y = Tensor<T>::zeros({batch, categories});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::uint32_t c : gold[b]) {
      if (c >= categories) throw std::invalid_argument("bce_multilabel_loss: category out of range");
      y.at(b, c) = T(1);
    }
  }
  Tensor<T> not_y = Tensor<T>::full({batch, categories}, T(1));
  for (std::size_t i = 0; i < y.numel(); ++i) not_y[i] -= y[i];

  ValueId pc = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
  ValueId hit = tape.mul(tape.leaf(std::move(y)), tape.log_op(pc));
  ValueId miss = tape.mul(tape.leaf(std::move(not_y)),
                          tape.log_op(tape.add_const(tape.scale_const(pc, -1.0), 1.0)));
  return tape.scale_const(tape.sum(tape.add(hit, miss)),
                          -1.0 / double(batch * categories));
}

// score[b][i] = e_i^T M v_IT[b]: [B, |E|].
template <typename T>
ValueId score_experts(Tape<T>& tape, ValueId v_it, ValueId experts, ValueId matching) {
  return tape.matmul(tape.matmul(v_it, matching, false, true), experts, false, true);
}

// Pool indices ranked best first: descending score, ties by ascending id.
template <typename T>
std::vector<std::size_t> rank_experts(const Tensor<T>& scores, std::size_t row,
                                      const std::vector<std::uint64_t>& ids) {
  if (ids.size() != scores.cols())
    throw std::invalid_argument("rank_experts: one id per pool column required");
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.at(row, a) != scores.at(row, b)) return scores.at(row, a) > scores.at(row, b);
    return ids[a] < ids[b];
  });
  return order;
}

// One sampled-softmax row per positive: the positive's flat score index
// first, then its negatives. Rows from the same sample share one negative
// draw; sample_of groups rows for per-sample averaging.
struct RetrievalPlan {
  std::vector<std::vector<std::uint32_t>> rows;
  std::vector<std::size_t> sample_of;
  std::size_t active_samples = 0;
};

// answerers[b] indexes the expert pool; samples with no answerers are
// skipped. Negatives are drawn uniformly without replacement from
// pool \ answerers, or all of them when n_neg would exhaust the remainder.
inline RetrievalPlan plan_retrieval(std::size_t batch, std::size_t pool,
                                    const std::vector<std::vector<std::uint32_t>>& answerers,
                                    std::size_t n_neg, Rng& rng) {
  if (answerers.size() != batch)
    throw std::invalid_argument("plan_retrieval: one answerer set per sample required");
  RetrievalPlan plan;
  std::vector<char> is_answerer(pool);
  for (std::size_t b = 0; b < batch; ++b) {
    if (answerers[b].empty()) continue;
    std::fill(is_answerer.begin(), is_answerer.end(), 0);
    for (std::uint32_t a : answerers[b]) {
      if (a >= pool) throw std::invalid_argument("plan_retrieval: answerer outside the pool");
      is_answerer[a] = 1;
    }
    std::vector<std::uint32_t> candidates;
    for (std::size_t i = 0; i < pool; ++i)
      if (!is_answerer[i]) candidates.push_back(static_cast<std::uint32_t>(i));
    std::vector<std::uint32_t> negatives;
    if (candidates.size() <= n_neg) {
      negatives = candidates;
    } else {
      for (std::size_t pick : rng.sample_without_replacement(candidates.size(), n_neg))
        negatives.push_back(candidates[pick]);
    }
    const std::uint32_t base = static_cast<std::uint32_t>(b * pool);
    for (std::uint32_t pos : answerers[b]) {
      std::vector<std::uint32_t> row;
      row.reserve(negatives.size() + 1);
      row.push_back(base + pos);
      for (std::uint32_t neg : negatives) row.push_back(base + neg);
      plan.rows.push_back(std::move(row));
      plan.sample_of.push_back(b);
    }
    ++plan.active_samples;
  }
  if (plan.rows.empty()) throw std::invalid_argument("plan_retrieval: no positives in batch");
  return plan;
}

// Mean over samples of the per-sample mean of -ln softmax(positive | row).
// Row widths may differ (the all-negatives fall-back), so each row gets its
// own softmax.
template <typename T>
ValueId retrieval_loss_from_plan(Tape<T>& tape, ValueId scores, const RetrievalPlan& plan) {
  const Tensor<T>& s = tape.value(scores);
  ValueId flat = tape.reshape(scores, {s.numel()});
  ValueId total = kNoParam;
  std::size_t row = 0;
  while (row < plan.rows.size()) {
    const std::size_t sample = plan.sample_of[row];
    ValueId sample_sum = kNoParam;
    std::size_t positives = 0;
    for (; row < plan.rows.size() && plan.sample_of[row] == sample; ++row, ++positives) {
      ValueId picked = tape.gather_rows(flat, plan.rows[row]);
      ValueId log_p = tape.gather_rows(tape.log_softmax_rows(picked), {0});
      sample_sum = sample_sum == kNoParam ? log_p : tape.add(sample_sum, log_p);
    }
    ValueId sample_loss = tape.scale_const(sample_sum, -1.0 / double(positives));
    total = total == kNoParam ? sample_loss : tape.add(total, sample_loss);
  }
  return tape.scale_const(total, 1.0 / double(plan.active_samples));
}

template <typename T>
ValueId retrieval_loss(Tape<T>& tape, ValueId scores,
                       const std::vector<std::vector<std::uint32_t>>& answerers,
                       std::size_t n_neg, Rng& rng) {
  const Tensor<T>& s = tape.value(scores);
  return retrieval_loss_from_plan(tape, scores,
                                  plan_retrieval(s.rows(), s.cols(), answerers, n_neg, rng));
}

// Five joint embeddings per sample (candidates already fused with the anchor
// upstream), sample-major [B*5, h] -> candidate logits [B, 5].
template <typename T>
ValueId aux_match_logits(Tape<T>& tape, ValueId candidates, const AuxHeadParamIds& p) {
  const Tensor<T>& c = tape.value(candidates);
  if (c.rows() % kAuxCandidates != 0)
    throw std::invalid_argument("aux_match: candidate rows must come in fives");
  ValueId hidden = tape.tanh_op(tape.affine_rows(candidates, p.c1_w, p.c1_b));
  ValueId scores = tape.affine_rows(hidden, p.c2_w, p.c2_b);  // [B*5, 1]
  return tape.reshape(scores, {c.rows() / kAuxCandidates, kAuxCandidates});
}

// Probability that each of the five candidates is the matching one: [B, 5].
template <typename T>
ValueId aux_match(Tape<T>& tape, ValueId candidates, const AuxHeadParamIds& p) {
  return tape.softmax_rows(aux_match_logits(tape, candidates, p));
}

// -mean_b ln p(gold_b): cross-entropy of the 5-way match.
template <typename T>
ValueId aux_match_loss(Tape<T>& tape, ValueId candidates, const AuxHeadParamIds& p,
                       const std::vector<std::uint32_t>& gold) {
  ValueId log_probs = tape.log_softmax_rows(aux_match_logits(tape, candidates, p));
  const std::size_t batch = tape.value(log_probs).rows();
  if (gold.size() != batch)
    throw std::invalid_argument("aux_match_loss: one gold index per sample required");
  std::vector<std::uint32_t> picks(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (gold[b] >= kAuxCandidates)
      throw std::invalid_argument("aux_match_loss: gold candidate out of range");
    picks[b] = static_cast<std::uint32_t>(b * kAuxCandidates + gold[b]);
  }
  ValueId flat = tape.reshape(log_probs, {batch * kAuxCandidates});
  return tape.scale_const(tape.sum(tape.gather_rows(flat, std::move(picks))),
                          -1.0 / double(batch));
}

}  // namespace mmcqa
