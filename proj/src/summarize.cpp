#include "multilane/summarize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

Summary summarize_with_map(const Tensor& selectors, const Tensor& g) {
  if (selectors.rank() != 2 || g.rank() != 2) {
    throw DimensionError("summarize: selectors and taps must be rank 2");
  }
  if (selectors.dim(1) != g.dim(1)) {
    throw DimensionError("summarize: selector width " + shape_string(selectors.shape()) +
                         " vs taps " + shape_string(g.shape()));
  }
  const Tensor frozen = g.requires_grad() ? detach(g) : g;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(g.dim(1)));
  Tensor alpha = softmax(scale(matmul(selectors, transpose(frozen)), inv_sqrt), -1);
  Tensor tokens = matmul(alpha, frozen);
  return {tokens, alpha};
}

Tensor summarize(const Tensor& selectors, const Tensor& g) {
  return summarize_with_map(selectors, g).tokens;
}

Tensor attention_map(const Tensor& selectors, const Tensor& g) {
  NoGradGuard no_grad;
  return summarize_with_map(selectors, g).attention;
}

Tensor init_selectors(std::size_t count, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor s = Tensor::zeros({count, dim});
  for (auto& v : s.mutable_values()) v = static_cast<Real>(rng.truncated_normal(0.02));
  s.set_requires_grad(true);
  return s;
}

namespace {

Real cosine(const Real* a, const Real* b, std::size_t d) {
  Real dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0 || nb <= 0) return 0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

MergedTokens tome_summarize(const Tensor& g, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("tome_summarize: max_len must be at least 2");
  if (g.rank() != 2) throw DimensionError("tome_summarize: taps must be rank 2");
  const std::size_t d = g.dim(1);
  std::vector<Real> data = g.to_vector();
  std::vector<Real> sizes(g.dim(0), Real(1));
  std::size_t passes = 0;

  while (sizes.size() > max_len) {
    const std::size_t n = sizes.size();
    std::vector<std::size_t> a_idx, b_idx;
    for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? a_idx : b_idx).push_back(i);

    struct Match {
      std::size_t a;
      std::size_t b;
      Real score;
    };
    std::vector<Match> matches;
    matches.reserve(a_idx.size());
    for (std::size_t a : a_idx) {
      Match best{a, b_idx.front(), Real(-2)};
      for (std::size_t b : b_idx) {
        const Real s = cosine(&data[a * d], &data[b * d], d);
        if (s > best.score) best = {a, b, s};
      }
      matches.push_back(best);
    }
    std::stable_sort(matches.begin(), matches.end(),
                     [](const Match& x, const Match& y) { return x.score > y.score; });

    const std::size_t r = std::min(n / 2, a_idx.size());
    std::vector<Real> acc(n * d, Real(0));
    std::vector<Real> acc_size(n, Real(0));
    std::vector<bool> merged(n, false);
    for (std::size_t b : b_idx) {
      for (std::size_t j = 0; j < d; ++j) acc[b * d + j] = data[b * d + j] * sizes[b];
      acc_size[b] = sizes[b];
    }
    for (std::size_t m = 0; m < r; ++m) {
      const auto& [a, b, score] = matches[m];
      for (std::size_t j = 0; j < d; ++j) acc[b * d + j] += data[a * d + j] * sizes[a];
      acc_size[b] += sizes[a];
      merged[a] = true;
    }

    std::vector<Real> next_data;
    std::vector<Real> next_sizes;
    next_data.reserve((n - r) * d);
    for (std::size_t i = 0; i < n; ++i) {
      if (merged[i]) continue;
      if (i % 2 == 1) {
        for (std::size_t j = 0; j < d; ++j) next_data.push_back(acc[i * d + j] / acc_size[i]);
        next_sizes.push_back(acc_size[i]);
      } else {
        next_data.insert(next_data.end(), data.begin() + i * d, data.begin() + (i + 1) * d);
        next_sizes.push_back(sizes[i]);
      }
    }
    data = std::move(next_data);
    sizes = std::move(next_sizes);
    ++passes;
  }
  return {Tensor::from({sizes.size(), d}, std::move(data)), std::move(sizes), passes};
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
