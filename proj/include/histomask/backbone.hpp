// SPDX-License-Identifier: Apache-2.0
//
// Single-sample view of the frozen backbone: token embedding, the unmodulated
// stack of post-norm sub-layers and the decoder head.
#pragma once

#include "histomask/maskproc.hpp"
#include "histomask/model.hpp"

namespace histomask {

enum class TokenOrigin : std::uint8_t { mask = 0, value = 1 };

struct TokenSequence {
  MatD tokens;                      // G x D, row g belongs to gene g
  std::vector<TokenOrigin> origin;  // G
};

/// Backbone tensors only; every modulator of a retrofitted model is dropped.
Model<double> frozen_backbone(const Model<double>& model);

TokenSequence embed_tokens(const MaskedExpression& me, const Model<double>& backbone);
TokenSequence backbone_forward(const TokenSequence& seq, const Model<double>& backbone);
VecD decode(const TokenSequence& seq, const Model<double>& backbone);

/// decode(backbone_forward(embed_tokens(me))) for one sample.
VecD reconstruct(const MaskedExpression& me, const Model<double>& backbone);

}  // namespace histomask
