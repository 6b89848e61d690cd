// SPDX-License-Identifier: Apache-2.0
#include "histomask/backbone.hpp"
#include "histomask/checkpoint.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>

using namespace histomask;
using histomask::testing::max_abs;

namespace {

ModelConfig small_config(int G = 6, int D = 8, int L = 1, int H = 2) {
  ModelConfig c;
  c.genes = G;
  c.width = D;
  c.layers = L;
  c.heads = H;
  c.ffn_width = 12;
  c.cond_dim = 5;
  c.time_dim = 8;
  c.cond_hidden = 10;
  return c;
}

Model<double> random_backbone(const ModelConfig& c, std::uint64_t seed) {
  Model<double> m(c);
  Rng rng(seed);
  m.init_backbone(rng);
  // non-trivial norm affines and biases
  for (auto& p : m.params())
    if (p.name.find("beta") != std::string::npos || p.name.find(".b") != std::string::npos)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = 0.3 * rng.normal();
  return m;
}

MatD ref_norm(const MatD& x, const MatD& gamma, const MatD& beta) {
  MatD out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      out(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * gamma(0, c) + beta(0, c);
  }
  return out;
}

MatD row_bias(const MatD& x, const MatD& b) { return x.rowwise() + b.row(0); }

// Straightforward single-sample forward written from the architecture
// description, used as an oracle for the library implementation.
VecD ref_reconstruct(const Model<double>& m, const VecD& x, const Mask& mask) {
  const auto& c = m.config();
  const auto& P = m.params();
  const int G = c.genes, D = c.width, H = c.heads, dh = D / H;
  MatD h(G, D);
  for (int g = 0; g < G; ++g) {
    if (mask[g])
      h.row(g) = x[g] * P["embed.value_w"].value.row(0) + P["embed.value_b"].value.row(0);
    else
      h.row(g) = P["embed.mask"].value.row(0);
    h.row(g) += P["embed.gene"].value.row(g);
  }
  const double lambda = c.residual_scale;
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto W = [&](const std::string& n) { return P[pre + n].value; };
    const MatD q = row_bias(h * W("attn.wq"), W("attn.bq"));
    const MatD k = row_bias(h * W("attn.wk"), W("attn.bk"));
    const MatD v = row_bias(h * W("attn.wv"), W("attn.bv"));
    MatD att(G, D);
    for (int head = 0; head < H; ++head) {
      MatD s = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() / std::sqrt(double(dh));
      for (int r = 0; r < G; ++r) {
        const double mx = s.row(r).maxCoeff();
        double z = 0;
        for (int j = 0; j < G; ++j) z += (s(r, j) = std::exp(s(r, j) - mx));
        s.row(r) /= z;
      }
      att.middleCols(head * dh, dh) = s * v.middleCols(head * dh, dh);
    }
    const MatD u1 = row_bias(att * W("attn.wo"), W("attn.bo"));
    h = ref_norm(u1 + lambda * h, W("ln1.gamma"), W("ln1.beta"));
    const MatD a = row_bias(h * W("ffn.w1a"), W("ffn.b1a"));
    const MatD b = row_bias(h * W("ffn.w1b"), W("ffn.b1b"));
    const MatD act = (a.array() / (1.0 + (-a.array()).exp())) * b.array();
    const MatD u2 = row_bias(act * W("ffn.w2"), W("ffn.b2"));
    h = ref_norm(u2 + lambda * h, W("ln2.gamma"), W("ln2.beta"));
  }
  return (h * P["decoder.w"].value).col(0).array() + P["decoder.b"].value(0, 0);
}

void zero_sublayers(Model<double>& m) {
  for (auto& p : m.params())
    if (p.name.rfind("layer", 0) == 0 && p.name.find(".ln") == std::string::npos) p.value.setZero();
}

MaskedExpression observed(const VecD& x, const Mask& m) { return apply_mask(x, m); }

}  // namespace

TEST_CASE("configuration validation") {
  auto c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.genes = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.residual_scale = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("embedding of all-masked input") {
  const auto m = random_backbone(small_config(), 1);
  const VecD x = VecD::LinSpaced(6, -1, 1);
  const auto seq = embed_tokens(observed(x, Mask(6, 0)), m);
  for (int g = 0; g < 6; ++g) {
    CHECK(seq.origin[g] == TokenOrigin::mask);
    CHECK(max_abs(seq.tokens.row(g), m.params()["embed.mask"].value + m.params()["embed.gene"].value.row(g)) == 0.0);
  }
}

TEST_CASE("constructed identity lift") {
  auto m = random_backbone(small_config(2, 4), 2);
  m.params()["embed.gene"].value.setZero();
  m.params()["embed.value_w"].value.setZero();
  m.params()["embed.value_w"].value(0, 0) = 1.0;
  m.params()["embed.value_b"].value.setZero();
  const auto seq = embed_tokens(observed(VecD{{0.5, 2.0}}, Mask{1, 1}), m);
  CHECK(seq.tokens(0, 0) == 0.5);
  CHECK(seq.tokens(1, 0) == 2.0);
}

TEST_CASE("masked values never reach the tokens") {
  const auto m = random_backbone(small_config(2, 4), 3);
  MaskedExpression a{VecD{{3.0, 999.0}}, Mask{1, 0}};
  MaskedExpression b{VecD{{3.0, -5.0}}, Mask{1, 0}};
  CHECK(embed_tokens(a, m).tokens == embed_tokens(b, m).tokens);
  CHECK(reconstruct(a, m) == reconstruct(b, m));
}

TEST_CASE("embedding errors") {
  const auto m = random_backbone(small_config(), 4);
  CHECK_THROWS_AS(embed_tokens(MaskedExpression{VecD::Zero(5), Mask(5, 1)}, m), std::invalid_argument);
  VecD bad = VecD::Zero(6);
  bad[2] = INFINITY;
  CHECK_THROWS_AS(embed_tokens(MaskedExpression{bad, Mask(6, 1)}, m), std::invalid_argument);
}

TEST_CASE("zero sub-layers reduce to per-token normalization of the scaled residual") {
  auto c = small_config();
  c.residual_scale = 2.0;
  auto m = random_backbone(c, 5);
  zero_sublayers(m);
  for (auto& p : m.params())
    if (p.name.find("ln") != std::string::npos)
      p.name.find("gamma") != std::string::npos ? p.value.setOnes() : p.value.setZero();
  const MatD h = histomask::testing::random_matrix(6, 8, 9);
  const MatD ones = MatD::Ones(1, 8), zeros = MatD::Zero(1, 8);
  const MatD want = ref_norm(2.0 * ref_norm(2.0 * h, ones, zeros), ones, zeros);
  const auto out = backbone_forward(TokenSequence{h, std::vector<TokenOrigin>(6, TokenOrigin::value)}, m);
  CHECK(max_abs(out.tokens, want) < 1e-12);
}

TEST_CASE("zero input propagates only the bias path") {
  const auto m = random_backbone(small_config(), 6);
  const auto& P = m.params();
  const MatD zero = MatD::Zero(6, 8);
  // attention on zero tokens: uniform weights over identical value rows bv
  MatD att = MatD::Zero(6, 8).rowwise() + P["layer0.attn.bv"].value.row(0);
  MatD h = ref_norm(row_bias(att * P["layer0.attn.wo"].value, P["layer0.attn.bo"].value), P["layer0.ln1.gamma"].value,
                    P["layer0.ln1.beta"].value);
  const MatD a = row_bias(h * P["layer0.ffn.w1a"].value, P["layer0.ffn.b1a"].value);
  const MatD b = row_bias(h * P["layer0.ffn.w1b"].value, P["layer0.ffn.b1b"].value);
  const MatD act = (a.array() / (1.0 + (-a.array()).exp())) * b.array();
  h = ref_norm(row_bias(act * P["layer0.ffn.w2"].value, P["layer0.ffn.b2"].value) + h, P["layer0.ln2.gamma"].value,
               P["layer0.ln2.beta"].value);
  const auto out = backbone_forward(TokenSequence{zero, std::vector<TokenOrigin>(6, TokenOrigin::value)}, m);
  CHECK(max_abs(out.tokens, h) < 1e-12);
}

TEST_CASE("reconstruction matches an independent reference forward") {
  for (int L : {1, 2}) {
    auto c = small_config(7, 8, L, 2);
    c.residual_scale = 0.7;
    const auto m = random_backbone(c, 10 + L);
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
      VecD x(7);
      for (auto& v : x) v = rng.normal();
      const Mask mask = sample_mask_direct(7, 0.5, rng);
      const VecD got = reconstruct(observed(x, mask), m);
      CHECK((got - ref_reconstruct(m, x, mask)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("permuting genes together with their embeddings permutes the output") {
  const auto m = random_backbone(small_config(6, 8, 2, 2), 12);
  auto swapped = m;
  auto& E = swapped.params()["embed.gene"].value;
  E.row(1).swap(E.row(4));
  VecD x = VecD::LinSpaced(6, -2, 3);
  Mask mask{1, 0, 1, 1, 0, 1};
  VecD xs = x;
  std::swap(xs[1], xs[4]);
  Mask ms = mask;
  std::swap(ms[1], ms[4]);
  const VecD a = reconstruct(observed(x, mask), m);
  const VecD b = reconstruct(observed(xs, ms), swapped);
  VecD bs = b;
  std::swap(bs[1], bs[4]);
  CHECK((a - bs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("decoder head") {
  auto m = random_backbone(small_config(), 13);
  const MatD tok = histomask::testing::random_matrix(6, 8, 14);
  const TokenSequence seq{tok, std::vector<TokenOrigin>(6, TokenOrigin::value)};
  m.params()["decoder.w"].value.setZero();
  m.params()["decoder.b"].value(0, 0) = -1.25;
  CHECK(decode(seq, m) == VecD::Constant(6, -1.25));
  m.params()["decoder.w"].value(0, 0) = 1.0;
  m.params()["decoder.b"].value(0, 0) = 0.0;
  CHECK(decode(seq, m) == tok.col(0));
}

TEST_CASE("identity lift and readout compose to the identity on visible genes") {
  auto m = random_backbone(small_config(5, 4), 15);
  m.params()["embed.gene"].value.setZero();
  m.params()["embed.value_w"].value.setZero();
  m.params()["embed.value_w"].value(0, 0) = 1.0;
  m.params()["embed.value_b"].value.setZero();
  m.params()["decoder.w"].value.setZero();
  m.params()["decoder.w"].value(0, 0) = 1.0;
  m.params()["decoder.b"].value.setZero();
  const VecD x{{0.1, -2.0, 3.5, 7.0, 0.0}};
  const Mask mask{1, 1, 0, 1, 0};
  const VecD out = decode(embed_tokens(observed(x, mask), m), m);
  for (int g = 0; g < 5; ++g)
    if (mask[g]) CHECK(out[g] == x[g]);
}

TEST_CASE("determinism and divergence detection") {
  const auto m = random_backbone(small_config(), 16);
  const VecD x = VecD::LinSpaced(6, 0, 1);
  CHECK(reconstruct(observed(x, Mask(6, 1)), m) == reconstruct(observed(x, Mask(6, 1)), m));
  MatD nan_tokens = MatD::Zero(6, 8);
  nan_tokens(0, 0) = NAN;
  CHECK_THROWS_AS(backbone_forward(TokenSequence{nan_tokens, std::vector<TokenOrigin>(6, TokenOrigin::value)}, m),
                  DivergenceError);
}

TEST_CASE("frozen_backbone drops modulators") {
  auto c = small_config();
  c.conditioning = Conditioning::soft_adaln;
  Model<double> full(c);
  Rng rng(3);
  full.init_backbone(rng);
  full.init_modulators(rng);
  CHECK_THROWS_AS(reconstruct(observed(VecD::Zero(6), Mask(6, 1)), full), std::invalid_argument);
  const auto fb = frozen_backbone(full);
  CHECK(!fb.config().conditioned());
  for (const auto& p : fb.params()) CHECK(p.value == full.params()[p.name].value);
}

TEST_CASE("checkpoint round trip and manifest") {
  auto c = small_config();
  c.conditioning = Conditioning::soft_adaln;
  Model<float> m(c);
  Rng rng(21);
  m.init_backbone(rng);
  m.init_modulators(rng);
  m.add_lora(2, rng);
  m.apply_update_scheme(UpdateScheme::backbone_lora);
  const auto dir = histomask::testing::scratch_dir("ckpt");
  const auto bin = dir / "m.bin";
  save_checkpoint(bin, m, "finetune", "abc123");
  const auto info = read_checkpoint_info(bin);
  CHECK(info.stage == "finetune");
  CHECK(info.config_hash == "abc123");
  CHECK(info.tensors.size() == m.params().size());
  std::size_t scalars = 0;
  for (std::size_t i = 0; i < info.tensors.size(); ++i) {
    const auto& e = info.tensors[i];
    const auto& p = m.params().at(i);
    CHECK(e.name == p.name);
    CHECK(e.frozen == !p.trainable);
    scalars += static_cast<std::size_t>(e.rows * e.cols);
  }
  CHECK(std::filesystem::file_size(bin) == scalars * sizeof(float));
  // little-endian float32 in manifest order
  std::ifstream in(bin, std::ios::binary);
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  const std::uint32_t bits = bytes[0] | (bytes[1] << 8) | (bytes[2] << 16) | (std::uint32_t(bytes[3]) << 24);
  float first;
  std::memcpy(&first, &bits, 4);
  CHECK(first == m.params().at(0).value(0, 0));

  CheckpointInfo back_info;
  const auto back = load_checkpoint(bin, &back_info);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params().at(i).value == m.params().at(i).value);
    CHECK(back.params().at(i).trainable == m.params().at(i).trainable);
  }
  save_checkpoint(bin, m, "pretrain", "x", true);
  for (const auto& e : read_checkpoint_info(bin).tensors) CHECK(e.frozen);

  Model<float> wrong(small_config(6, 16));
  CHECK_THROWS_AS(load_into(wrong, bin), ConfigError);
  CHECK_THROWS_AS(read_checkpoint_info(dir / "missing.bin"), MissingPrerequisite);
}
