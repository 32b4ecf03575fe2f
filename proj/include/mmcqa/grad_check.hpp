#pragma once

// Central finite-difference check for tape gradients. The numeric reference
// is always evaluated in double precision; the analytic gradient comes from
// whatever precision the caller builds in, so the same harness validates the
// 32-bit training path against a trustworthy oracle.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmcqa/tape.hpp"
#include "mmcqa/tensor.hpp"

namespace mmcqa {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;

  const GradCheckEntry* worst_entry() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries) {
      if (!w || e.max_rel_err > w->max_rel_err) w = &e;
    }
    return w;
  }
};

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

// build must be callable as build(Tape<U>&, const std::vector<ValueId>&) -> ValueId
// for U = T and U = double, returning a scalar loss. Each parameter element
// is perturbed by eps_base * max(1, |x|).
template <typename T, typename Builder>
GradCheckReport grad_check(const std::vector<Tensor<T>>& params,
                           const std::vector<std::string>& names, Builder&& build,
                           double eps_base = 1e-4) {
  if (names.size() != params.size())
    throw std::invalid_argument("grad_check: names/params size mismatch");

  Tape<T> tape;
  std::vector<ValueId> ids;
  ids.reserve(params.size());
  for (const Tensor<T>& p : params) {
    Tensor<T> t = p;
    t.set_requires_grad(true);
    ids.push_back(tape.leaf(std::move(t)));
  }
  const ValueId loss = build(tape, ids);
  if (tape.value(loss).numel() != 1)
    throw std::invalid_argument("grad_check: builder must return a scalar loss");
  const std::vector<Tensor<T>> grads = tape.backward(loss);

  std::vector<Tensor<double>> base;
  base.reserve(params.size());
  for (const Tensor<T>& p : params) base.push_back(p.template cast<double>());

  auto eval = [&](const std::vector<Tensor<double>>& ps) {
    Tape<double> t2;
    std::vector<ValueId> ids2;
    ids2.reserve(ps.size());
    for (const Tensor<double>& p : ps) {
      Tensor<double> q = p;
      q.set_requires_grad(false);
      ids2.push_back(t2.leaf(std::move(q)));
    }
    return double(t2.value(build(t2, ids2))[0]);
  };

  GradCheckReport report;
  std::vector<Tensor<double>> work = base;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = names[p];
    const Tensor<T>& g = grads[ids[p]];
    for (std::size_t i = 0; i < base[p].numel(); ++i) {
      const double x = base[p][i];
      const double eps = eps_base * std::max(1.0, std::abs(x));
      work[p][i] = x + eps;
      const double up = eval(work);
      work[p][i] = x - eps;
      const double down = eval(work);
      work[p][i] = x;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = double(g[i]);
      const double err = rel_err(analytic, numeric);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = i;
        entry.analytic = analytic;
        entry.numeric = numeric;
      }
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mmcqa
