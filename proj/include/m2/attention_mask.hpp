#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace m2 {

// Boolean attention mask over [query x key]. allows(q, k) == true means
// query position q may attend to key position k.
struct AttentionMask {
  std::size_t tokens = 0;
  std::vector<std::uint8_t> allow; // tokens * tokens, row-major

  bool allows(std::size_t q, std::size_t k) const {
    return allow[q * tokens + k] != 0;
  }

  static AttentionMask causal(std::size_t tokens) {
    AttentionMask m;
    m.tokens = tokens;
    m.allow.assign(tokens * tokens, 0);
    for (std::size_t q = 0; q < tokens; ++q) {
      for (std::size_t k = 0; k <= q; ++k) {
        m.allow[q * tokens + k] = 1;
      }
    }
    return m;
  }

  // Block-diagonal causal: attention stays inside the token's own sample.
  static AttentionMask block_causal(const std::vector<int> &sample_ids) {
    AttentionMask m;
    m.tokens = sample_ids.size();
    m.allow.assign(m.tokens * m.tokens, 0);
    for (std::size_t q = 0; q < m.tokens; ++q) {
      for (std::size_t k = 0; k <= q; ++k) {
        if (sample_ids[q] == sample_ids[k]) {
          m.allow[q * m.tokens + k] = 1;
        }
      }
    }
    return m;
  }
};

} // namespace m2
