#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <vector>

#include "multilane/tensor.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

struct Summary {
  Tensor tokens;     // summarized patches ḡ [L_s×D]
  Tensor attention;  // α [L_s×(L+1)], rows sum to 1
};

/// Patch-Selector summarization of frozen tap tokens `g` [(L+1)×D]:
/// ḡ_j = Σ_k α_jk g_k, α_j = softmax(s_j gᵀ / sqrt(D)).
/// `g` is detached internally, so gradients reach only the selectors.
Summary summarize_with_map(const Tensor& selectors, const Tensor& g);
Tensor summarize(const Tensor& selectors, const Tensor& g);
// Gradient-free α.
Tensor attention_map(const Tensor& selectors, const Tensor& g);

/// Trainable selector matrix [count×D], truncated normal std 0.02.
Tensor init_selectors(std::size_t count, std::size_t dim, std::uint64_t seed);

struct MergedTokens {
  Tensor tokens;              // [n×D], n <= max_len
  std::vector<Real> sizes;    // number of original tokens folded into each row
  std::size_t passes = 0;
};

/// Repeated bipartite soft matching. Each pass alternates tokens into sets
/// A (even positions) and B (odd positions), pairs every A token with its most
/// cosine-similar B token (ties to the lower index), and folds the floor(n/2)
/// best-matched A tokens into their partners by size-weighted mean. Passes
/// repeat until at most `max_len` tokens remain. Gradient-free.
MergedTokens tome_summarize(const Tensor& g, std::size_t max_len);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
