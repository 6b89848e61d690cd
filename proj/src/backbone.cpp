// SPDX-License-Identifier: Apache-2.0
#include "histomask/backbone.hpp"

namespace histomask {

namespace {

void require_backbone(const Model<double>& m) {
  if (m.config().conditioned())
    throw std::invalid_argument("expected an unconditioned backbone; use frozen_backbone()");
}

}  // namespace

Model<double> frozen_backbone(const Model<double>& model) {
  ModelConfig cfg = model.config();
  cfg.conditioning = Conditioning::none;
  cfg.lora_rank = 0;
  Model<double> out(cfg);
  out.copy_matching(model);
  return out;
}

TokenSequence embed_tokens(const MaskedExpression& me, const Model<double>& backbone) {
  require_backbone(backbone);
  const int G = backbone.config().genes;
  if (me.x.size() != G || static_cast<int>(me.m.size()) != G)
    throw std::invalid_argument("embed_tokens: length mismatch");
  if (!me.x.allFinite()) throw std::invalid_argument("embed_tokens: non-finite input");
  if (!is_binary(me.m)) throw std::invalid_argument("embed_tokens: mask must be binary");
  ModelInput<double> in;
  in.values = me.x.transpose();
  in.value_token = me.m;
  // masked values never reach the lift
  for (int g = 0; g < G; ++g)
    if (!me.m[g]) in.values(0, g) = 0.0;
  TokenSequence seq;
  seq.tokens = backbone.embed(in);
  seq.origin.resize(G);
  for (int g = 0; g < G; ++g) seq.origin[g] = me.m[g] ? TokenOrigin::value : TokenOrigin::mask;
  return seq;
}

TokenSequence backbone_forward(const TokenSequence& seq, const Model<double>& backbone) {
  require_backbone(backbone);
  const auto& cfg = backbone.config();
  if (seq.tokens.rows() != cfg.genes || seq.tokens.cols() != cfg.width)
    throw std::invalid_argument("backbone_forward: expected a G x D token matrix");
  MatD h = seq.tokens;
  const MatD none;
  for (int j = 0; j < backbone.sublayer_count(); ++j) {
    h = backbone.sublayer_forward(j, h, none, 1, nullptr);
    if (!h.allFinite()) throw DivergenceError("backbone_forward: non-finite activations");
  }
  return {std::move(h), seq.origin};
}

VecD decode(const TokenSequence& seq, const Model<double>& backbone) {
  require_backbone(backbone);
  const MatD none;
  return backbone.decode_tokens(seq.tokens, none, 1, nullptr).row(0).transpose();
}

VecD reconstruct(const MaskedExpression& me, const Model<double>& backbone) {
  return decode(backbone_forward(embed_tokens(me, backbone), backbone), backbone);
}

}  // namespace histomask
