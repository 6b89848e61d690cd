// SPDX-License-Identifier: Apache-2.0
#include "histomask/model.hpp"

#include <cmath>
#include <stdexcept>

namespace histomask {

Conditioning parse_conditioning(const std::string& name) {
  if (name == "none") return Conditioning::none;
  if (name == "soft_adaln" || name == "softadaln_full") return Conditioning::soft_adaln;
  if (name == "no_softnorm" || name == "softadaln_nosoftnorm") return Conditioning::no_softnorm;
  if (name == "no_idinit" || name == "softadaln_noidinit") return Conditioning::no_idinit;
  if (name == "hist_affine_ln") return Conditioning::hist_affine_ln;
  throw std::invalid_argument("unknown conditioning: " + name);
}

std::string to_string(Conditioning c) {
  switch (c) {
    case Conditioning::none: return "none";
    case Conditioning::soft_adaln: return "soft_adaln";
    case Conditioning::no_softnorm: return "no_softnorm";
    case Conditioning::no_idinit: return "no_idinit";
    case Conditioning::hist_affine_ln: return "hist_affine_ln";
  }
  return "unknown";
}

UpdateScheme parse_update_scheme(const std::string& name) {
  if (name == "modulators_only") return UpdateScheme::modulators_only;
  if (name == "scratch") return UpdateScheme::scratch;
  if (name == "decoder_tune") return UpdateScheme::decoder_tune;
  if (name == "backbone_lora") return UpdateScheme::backbone_lora;
  throw std::invalid_argument("unknown update scheme: " + name);
}

std::string to_string(UpdateScheme s) {
  switch (s) {
    case UpdateScheme::modulators_only: return "modulators_only";
    case UpdateScheme::scratch: return "scratch";
    case UpdateScheme::decoder_tune: return "decoder_tune";
    case UpdateScheme::backbone_lora: return "backbone_lora";
  }
  return "unknown";
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::modulator: return "modulator";
    case ParamGroup::lora: return "lora";
  }
  return "unknown";
}

ParamGroup parse_param_group(const std::string& name) {
  if (name == "backbone") return ParamGroup::backbone;
  if (name == "decoder") return ParamGroup::decoder;
  if (name == "modulator") return ParamGroup::modulator;
  if (name == "lora") return ParamGroup::lora;
  throw std::invalid_argument("unknown parameter group: " + name);
}

void ModelConfig::validate() const {
  if (genes < 2) throw std::invalid_argument("model requires G >= 2");
  if (layers < 1) throw std::invalid_argument("model requires L >= 1");
  if (width < 1 || heads < 1 || width % heads != 0)
    throw std::invalid_argument("model width must be divisible by head count");
  if (ffn_width < 1 || cond_hidden < 1) throw std::invalid_argument("hidden widths must be positive");
  if (!(residual_scale > 0.0)) throw std::invalid_argument("residual scale must be positive");
  if (conditioned() && (cond_dim < 1 || time_dim < 2))
    throw std::invalid_argument("conditioned model needs cond_dim >= 1 and time_dim >= 2");
  if (lora_rank < 0) throw std::invalid_argument("lora rank must be nonnegative");
}

// ---------------------------------------------------------------- ParamStore

template <typename T>
std::size_t ParamStore<T>::add(const std::string& name, ParamGroup group, Eigen::Index rows,
                               Eigen::Index cols) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  Param<T> p;
  p.name = name;
  p.group = group;
  p.value = Mat<T>::Zero(rows, cols);
  p.grad = Mat<T>::Zero(rows, cols);
  params_.push_back(std::move(p));
  index_[name] = params_.size() - 1;
  return params_.size() - 1;
}

template <typename T>
Param<T>& ParamStore<T>::operator[](const std::string& name) {
  return params_.at(index_of(name));
}

template <typename T>
const Param<T>& ParamStore<T>::operator[](const std::string& name) const {
  return params_.at(index_of(name));
}

template <typename T>
std::size_t ParamStore<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (!trainable_only || p.trainable) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_)
    if (p.trainable) p.grad.setZero();
}

// ---------------------------------------------------------------- construction

namespace {

const char* linear_name(Linear id) {
  switch (id) {
    case Linear::wq: return "attn.wq";
    case Linear::wk: return "attn.wk";
    case Linear::wv: return "attn.wv";
    case Linear::wo: return "attn.wo";
    case Linear::w1a: return "ffn.w1a";
    case Linear::w1b: return "ffn.w1b";
    case Linear::w2: return "ffn.w2";
  }
  return "?";
}

const char* bias_name(Linear id) {
  switch (id) {
    case Linear::wq: return "attn.bq";
    case Linear::wk: return "attn.bk";
    case Linear::wv: return "attn.bv";
    case Linear::wo: return "attn.bo";
    case Linear::w1a: return "ffn.b1a";
    case Linear::w1b: return "ffn.b1b";
    case Linear::w2: return "ffn.b2";
  }
  return "?";
}

template <typename T>
void fill_normal(Mat<T>& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
}

template <typename T>
Mat<T> sigmoid_of(const Mat<T>& x) {
  return (T(1) / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Mat<T> silu_of(const Mat<T>& x) {
  return (x.array() * sigmoid_of(x).array()).matrix();
}

template <typename T>
Mat<T> silu_grad_of(const Mat<T>& x) {
  const Mat<T> s = sigmoid_of(x);
  return (s.array() * (T(1) + x.array() * (T(1) - s.array()))).matrix();
}

/// Adds per-sample row vectors (B x D) to each of the sample's G token rows.
template <typename T>
void add_per_sample(Mat<T>& tokens, const Mat<T>& per_sample, int genes) {
  for (Eigen::Index b = 0; b < per_sample.rows(); ++b)
    tokens.middleRows(b * genes, genes).rowwise() += per_sample.row(b);
}

template <typename T>
void mul_per_sample(Mat<T>& tokens, const Mat<T>& per_sample, int genes) {
  for (Eigen::Index b = 0; b < per_sample.rows(); ++b)
    tokens.middleRows(b * genes, genes).array().rowwise() *= per_sample.row(b).array();
}

/// Sum over each sample's G token rows -> B x D.
template <typename T>
Mat<T> sum_per_sample(const Mat<T>& tokens, int genes) {
  const Eigen::Index batch = tokens.rows() / genes;
  Mat<T> out(batch, tokens.cols());
  for (Eigen::Index b = 0; b < batch; ++b) out.row(b) = tokens.middleRows(b * genes, genes).colwise().sum();
  return out;
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build();
}

template <typename T>
void Model<T>::build() {
  const int G = cfg_.genes;
  const int D = cfg_.width;
  const int F = cfg_.ffn_width;
  gene_emb_ = params_.add("embed.gene", ParamGroup::backbone, G, D);
  value_w_ = params_.add("embed.value_w", ParamGroup::backbone, 1, D);
  value_b_ = params_.add("embed.value_b", ParamGroup::backbone, 1, D);
  mask_tok_ = params_.add("embed.mask", ParamGroup::backbone, 1, D);

  layers_.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto& L = layers_[l];
    for (int i = 0; i < kLinearCount; ++i) {
      const auto id = static_cast<Linear>(i);
      int in = D, out = D;
      if (id == Linear::w1a || id == Linear::w1b) out = F;
      if (id == Linear::w2) in = F;
      L.w[i] = params_.add(pre + linear_name(id), ParamGroup::backbone, in, out);
      L.b[i] = params_.add(pre + bias_name(id), ParamGroup::backbone, 1, out);
      L.lora_a[i] = L.lora_b[i] = ParamStore<T>::npos;
      if (id == Linear::wo) {
        L.ln1_g = params_.add(pre + "ln1.gamma", ParamGroup::backbone, 1, D);
        L.ln1_b = params_.add(pre + "ln1.beta", ParamGroup::backbone, 1, D);
      }
    }
    L.ln2_g = params_.add(pre + "ln2.gamma", ParamGroup::backbone, 1, D);
    L.ln2_b = params_.add(pre + "ln2.beta", ParamGroup::backbone, 1, D);
    params_.at(L.ln1_g).value.setOnes();
    params_.at(L.ln2_g).value.setOnes();
  }
  dec_w_ = params_.add("decoder.w", ParamGroup::decoder, D, 1);
  dec_b_ = params_.add("decoder.b", ParamGroup::decoder, 1, 1);

  if (!cfg_.conditioned()) return;

  const int cin = cfg_.cond_dim + cfg_.time_dim;
  cond_w1_ = params_.add("cond.w1", ParamGroup::modulator, cin, cfg_.cond_hidden);
  cond_b1_ = params_.add("cond.b1", ParamGroup::modulator, 1, cfg_.cond_hidden);
  cond_w2_ = params_.add("cond.w2", ParamGroup::modulator, cfg_.cond_hidden, D);
  cond_b2_ = params_.add("cond.b2", ParamGroup::modulator, 1, D);

  mods_.resize(sublayer_count());
  for (int j = 0; j < sublayer_count(); ++j) {
    const std::string pre = "mod" + std::to_string(j) + ".";
    auto& M = mods_[j];
    if (cfg_.conditioning == Conditioning::hist_affine_ln) {
      M.gamma_w = params_.add(pre + "ln_gamma.w", ParamGroup::modulator, D, D);
      M.gamma_b = params_.add(pre + "ln_gamma.b", ParamGroup::modulator, 1, D);
      M.beta_w = params_.add(pre + "ln_beta.w", ParamGroup::modulator, D, D);
      M.beta_b = params_.add(pre + "ln_beta.b", ParamGroup::modulator, 1, D);
      continue;
    }
    if (cfg_.uses_soft_norm()) M.eta = params_.add(pre + "eta", ParamGroup::modulator, 1, 1);
    M.scale_w = params_.add(pre + "scale.w", ParamGroup::modulator, D, D);
    M.scale_b = params_.add(pre + "scale.b", ParamGroup::modulator, 1, D);
    M.shift_w = params_.add(pre + "shift.w", ParamGroup::modulator, D, D);
    M.shift_b = params_.add(pre + "shift.b", ParamGroup::modulator, 1, D);
    M.gate_w = params_.add(pre + "gate.w", ParamGroup::modulator, D, D);
    M.gate_b = params_.add(pre + "gate.b", ParamGroup::modulator, 1, D);
  }
  if (cfg_.conditioning != Conditioning::hist_affine_ln) {
    if (cfg_.uses_soft_norm()) dec_mod_.eta = params_.add("mod.dec.eta", ParamGroup::modulator, 1, 1);
    dec_mod_.scale_w = params_.add("mod.dec.scale.w", ParamGroup::modulator, D, D);
    dec_mod_.scale_b = params_.add("mod.dec.scale.b", ParamGroup::modulator, 1, D);
    dec_mod_.shift_w = params_.add("mod.dec.shift.w", ParamGroup::modulator, D, D);
    dec_mod_.shift_b = params_.add("mod.dec.shift.b", ParamGroup::modulator, 1, D);
    for (auto& M : mods_) params_.at(M.gate_b).value.setConstant(static_cast<T>(cfg_.gate_bias));
  }
}

template <typename T>
void Model<T>::init_backbone(Rng& rng) {
  const int D = cfg_.width;
  fill_normal(params_.at(gene_emb_).value, 1.0, rng);
  fill_normal(params_.at(value_w_).value, 1.0, rng);
  params_.at(value_b_).value.setZero();
  fill_normal(params_.at(mask_tok_).value, 1.0, rng);
  for (auto& L : layers_) {
    for (int i = 0; i < kLinearCount; ++i) {
      auto& w = params_.at(L.w[i]).value;
      fill_normal(w, 1.0 / std::sqrt(static_cast<double>(w.rows())), rng);
      params_.at(L.b[i]).value.setZero();
    }
    params_.at(L.ln1_g).value.setOnes();
    params_.at(L.ln1_b).value.setZero();
    params_.at(L.ln2_g).value.setOnes();
    params_.at(L.ln2_b).value.setZero();
  }
  fill_normal(params_.at(dec_w_).value, 1.0 / std::sqrt(static_cast<double>(D)), rng);
  params_.at(dec_b_).value.setZero();
}

template <typename T>
void Model<T>::init_modulators(Rng& rng) {
  if (!cfg_.conditioned()) return;
  auto& w1 = params_.at(cond_w1_).value;
  auto& w2 = params_.at(cond_w2_).value;
  fill_normal(w1, 1.0 / std::sqrt(static_cast<double>(w1.rows())), rng);
  params_.at(cond_b1_).value.setZero();
  fill_normal(w2, 1.0 / std::sqrt(static_cast<double>(w2.rows())), rng);
  params_.at(cond_b2_).value.setZero();

  constexpr double kSmall = 0.02;
  const bool random_init = cfg_.conditioning == Conditioning::no_idinit ||
                           cfg_.conditioning == Conditioning::hist_affine_ln;
  auto init = [&](std::size_t idx) {
    auto& m = params_.at(idx).value;
    if (random_init) fill_normal(m, kSmall, rng);
    else m.setZero();
  };
  for (auto& M : mods_) {
    if (cfg_.conditioning == Conditioning::hist_affine_ln) {
      init(M.gamma_w);
      init(M.gamma_b);
      init(M.beta_w);
      init(M.beta_b);
      continue;
    }
    if (M.eta != ParamStore<T>::npos) params_.at(M.eta).value.setZero();
    init(M.scale_w);
    init(M.scale_b);
    init(M.shift_w);
    init(M.shift_b);
    init(M.gate_w);
    if (random_init) init(M.gate_b);
    else params_.at(M.gate_b).value.setConstant(static_cast<T>(cfg_.gate_bias));
  }
  if (cfg_.conditioning != Conditioning::hist_affine_ln) {
    if (dec_mod_.eta != ParamStore<T>::npos) params_.at(dec_mod_.eta).value.setZero();
    init(dec_mod_.scale_w);
    init(dec_mod_.scale_b);
    init(dec_mod_.shift_w);
    init(dec_mod_.shift_b);
  }
}

template <typename T>
void Model<T>::add_lora(int rank, Rng& rng) {
  if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
  if (has_lora_) throw std::logic_error("lora factors already present");
  for (int l = 0; l < cfg_.layers; ++l) {
    auto& L = layers_[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (int i = 0; i < kLinearCount; ++i) {
      const auto& w = params_.at(L.w[i]).value;
      const auto in = w.rows();
      const auto out = w.cols();
      const std::string base = pre + linear_name(static_cast<Linear>(i));
      L.lora_a[i] = params_.add(base + ".lora_a", ParamGroup::lora, in, rank);
      L.lora_b[i] = params_.add(base + ".lora_b", ParamGroup::lora, rank, out);
      fill_normal(params_.at(L.lora_a[i]).value, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    }
  }
  cfg_.lora_rank = rank;
  has_lora_ = true;
}

template <typename T>
void Model<T>::apply_update_scheme(UpdateScheme scheme) {
  for (auto& p : params_) {
    bool on = false;
    switch (scheme) {
      case UpdateScheme::modulators_only: on = p.group == ParamGroup::modulator; break;
      case UpdateScheme::scratch: on = p.group != ParamGroup::lora; break;
      case UpdateScheme::decoder_tune:
        on = p.group == ParamGroup::modulator || p.group == ParamGroup::decoder;
        break;
      case UpdateScheme::backbone_lora:
        on = p.group == ParamGroup::modulator || p.group == ParamGroup::lora;
        break;
    }
    p.trainable = on;
  }
}

template <typename T>
bool Model<T>::any_trainable(ParamGroup g) const {
  for (const auto& p : params_)
    if (p.group == g && p.trainable) return true;
  return false;
}

// ---------------------------------------------------------------- forward

template <typename T>
Mat<T> Model<T>::effective_weight(int layer, Linear id) const {
  const int i = static_cast<int>(id);
  const auto& L = layers_[layer];
  if (L.lora_a[i] == ParamStore<T>::npos) return params_.at(L.w[i]).value;
  // alpha = r, so the low-rank update enters with unit scale
  return params_.at(L.w[i]).value + params_.at(L.lora_a[i]).value * params_.at(L.lora_b[i]).value;
}

template <typename T>
Mat<T> Model<T>::linear_forward(int layer, Linear id, const Mat<T>& x) const {
  const int i = static_cast<int>(id);
  const auto& L = layers_[layer];
  Mat<T> y(x.rows(), params_.at(L.w[i]).value.cols());
  if (L.lora_a[i] == ParamStore<T>::npos) y.noalias() = x * params_.at(L.w[i]).value;
  else y.noalias() = x * effective_weight(layer, id);
  y.rowwise() += params_.at(L.b[i]).value.row(0);
  return y;
}

template <typename T>
Mat<T> Model<T>::embed(const ModelInput<T>& in) const {
  const int G = cfg_.genes;
  const int B = in.batch();
  if (in.values.cols() != G) throw std::invalid_argument("model input: gene count mismatch");
  if (static_cast<int>(in.value_token.size()) != B * G)
    throw std::invalid_argument("model input: token-kind length mismatch");
  if (!in.values.allFinite()) throw std::invalid_argument("model input: non-finite expression");
  const auto& E = params_.at(gene_emb_).value;
  const auto& vw = params_.at(value_w_).value;
  const auto& vb = params_.at(value_b_).value;
  const auto& mk = params_.at(mask_tok_).value;
  Mat<T> h(static_cast<Eigen::Index>(B) * G, cfg_.width);
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < G; ++g) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * G + g;
      if (in.value_token[r]) h.row(r) = in.values(b, g) * vw.row(0) + vb.row(0) + E.row(g);
      else h.row(r) = mk.row(0) + E.row(g);
    }
  }
  return h;
}

template <typename T>
Mat<T> Model<T>::condition(const ModelInput<T>& in, ForwardCache<T>* cache) const {
  if (!cfg_.conditioned()) return {};
  const int B = in.batch();
  if (in.cond.rows() != B || in.cond.cols() != cfg_.cond_dim)
    throw std::invalid_argument("model input: condition shape mismatch");
  if (static_cast<int>(in.timestep.size()) != B)
    throw std::invalid_argument("model input: timestep count mismatch");
  if (!in.cond.allFinite()) throw std::invalid_argument("model input: non-finite condition");
  Mat<T> cin(B, cfg_.cond_dim + cfg_.time_dim);
  for (int b = 0; b < B; ++b) {
    cin.row(b).head(cfg_.cond_dim) = in.cond.row(b);
    cin.row(b).tail(cfg_.time_dim) =
        timestep_embedding(in.timestep[b], cfg_.time_dim).transpose().template cast<T>();
  }
  Mat<T> pre = cin * params_.at(cond_w1_).value;
  pre.rowwise() += params_.at(cond_b1_).value.row(0);
  Mat<T> hid = silu_of(pre);
  Mat<T> c = hid * params_.at(cond_w2_).value;
  c.rowwise() += params_.at(cond_b2_).value.row(0);
  if (cache) {
    cache->cond_in = std::move(cin);
    cache->cond_pre = std::move(pre);
    cache->cond_hidden = std::move(hid);
    cache->c = c;
  }
  return c;
}

template <typename T>
Mat<T> Model<T>::sublayer_forward(int j, const Mat<T>& h_in, const Mat<T>& c, int batch,
                                  SublayerCache<T>* sc) const {
  const int G = cfg_.genes;
  const int D = cfg_.width;
  const int layer = j / 2;
  const bool attention = (j % 2) == 0;
  const auto& L = layers_[layer];
  const bool modulated = cfg_.conditioned() && cfg_.conditioning != Conditioning::hist_affine_ln;

  // SoftAdaLN on the sub-layer input
  Mat<T> hm;
  if (modulated) {
    const auto& M = mods_[j];
    NormCache<T> soft;
    Mat<T> base;
    if (M.eta != ParamStore<T>::npos) {
      const T eta = params_.at(M.eta).value(0, 0);
      base = soft_norm_rows<T>(h_in, eta, static_cast<T>(kSoftNormEps), sc ? &soft : nullptr);
    } else {
      base = h_in;
    }
    Mat<T> s = c * params_.at(M.scale_w).value;
    s.rowwise() += params_.at(M.scale_b).value.row(0);
    Mat<T> k = c * params_.at(M.shift_w).value;
    k.rowwise() += params_.at(M.shift_b).value.row(0);
    hm = base;
    Mat<T> one_plus_s = (s.array() + T(1)).matrix();
    mul_per_sample(hm, one_plus_s, G);
    add_per_sample(hm, k, G);
    if (sc) {
      sc->soft = std::move(soft);
      sc->soft_out = std::move(base);
      sc->scale = std::move(s);
      sc->shift = std::move(k);
    }
  } else {
    hm = h_in;
  }

  // frozen sub-layer
  Mat<T> u;
  if (attention) {
    const int H = cfg_.heads;
    const int dh = D / H;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> q = linear_forward(layer, Linear::wq, hm);
    Mat<T> k = linear_forward(layer, Linear::wk, hm);
    Mat<T> v = linear_forward(layer, Linear::wv, hm);
    Mat<T> o(hm.rows(), D);
    if (sc) sc->probs.resize(static_cast<std::size_t>(batch) * H);
    Mat<T> scores(G, G);
    for (int b = 0; b < batch; ++b) {
      for (int hd = 0; hd < H; ++hd) {
        const auto qb = q.block(static_cast<Eigen::Index>(b) * G, hd * dh, G, dh);
        const auto kb = k.block(static_cast<Eigen::Index>(b) * G, hd * dh, G, dh);
        const auto vb = v.block(static_cast<Eigen::Index>(b) * G, hd * dh, G, dh);
        scores.noalias() = (qb * kb.transpose()) * inv_sqrt;
        const Vec<T> mx = scores.rowwise().maxCoeff();
        for (int r = 0; r < G; ++r) scores.row(r).array() -= mx[r];
        scores.array() = scores.array().exp();
        const Vec<T> inv_sum = scores.rowwise().sum().cwiseInverse();
        scores.array().colwise() *= inv_sum.array();
        o.block(static_cast<Eigen::Index>(b) * G, hd * dh, G, dh).noalias() = scores * vb;
        if (sc) sc->probs[static_cast<std::size_t>(b) * H + hd] = scores;
      }
    }
    u = linear_forward(layer, Linear::wo, o);
    if (sc) {
      sc->q = std::move(q);
      sc->k = std::move(k);
      sc->v = std::move(v);
      sc->attn = std::move(o);
    }
  } else {
    Mat<T> a1 = linear_forward(layer, Linear::w1a, hm);
    Mat<T> a2 = linear_forward(layer, Linear::w1b, hm);
    Mat<T> gated = (silu_of(a1).array() * a2.array()).matrix();
    u = linear_forward(layer, Linear::w2, gated);
    if (sc) {
      sc->a1 = std::move(a1);
      sc->a2 = std::move(a2);
      sc->gated = std::move(gated);
    }
  }

  // gated residual + post-norm
  const T lambda = static_cast<T>(cfg_.residual_scale);
  Mat<T> r;
  if (cfg_.gated()) {
    const auto& M = mods_[j];
    Mat<T> tau;
    if (force_unit_gate) {
      tau = Mat<T>::Ones(batch, D);
    } else {
      tau = c * params_.at(M.gate_w).value;
      tau.rowwise() += params_.at(M.gate_b).value.row(0);
      tau = sigmoid_of(tau);
    }
    r = u;
    mul_per_sample(r, tau, G);
    r += lambda * h_in;
    if (sc) sc->tau = std::move(tau);
  } else {
    r = u + lambda * h_in;
  }

  NormCache<T> post;
  Mat<T> out = normalize_rows<T>(r, static_cast<T>(kLayerNormEps), sc ? &post : nullptr);
  if (cfg_.conditioning == Conditioning::hist_affine_ln) {
    const auto& M = mods_[j];
    Mat<T> gam = c * params_.at(M.gamma_w).value;
    gam.rowwise() += params_.at(M.gamma_b).value.row(0);
    Mat<T> bet = c * params_.at(M.beta_w).value;
    bet.rowwise() += params_.at(M.beta_b).value.row(0);
    mul_per_sample(out, gam, G);
    add_per_sample(out, bet, G);
    if (sc) {
      sc->gamma_c = std::move(gam);
      sc->beta_c = std::move(bet);
    }
  } else {
    const auto& g = params_.at(attention ? L.ln1_g : L.ln2_g).value;
    const auto& bt = params_.at(attention ? L.ln1_b : L.ln2_b).value;
    out.array().rowwise() *= g.row(0).array();
    out.rowwise() += bt.row(0);
  }
  if (sc) {
    sc->h_in = h_in;
    sc->hm = std::move(hm);
    sc->u = std::move(u);
    sc->post = std::move(post);
  }
  return out;
}

template <typename T>
Mat<T> Model<T>::decode_tokens(const Mat<T>& h, const Mat<T>& c, int batch,
                               ForwardCache<T>* cache) const {
  const int G = cfg_.genes;
  Mat<T> hd;
  if (cfg_.conditioned() && cfg_.conditioning != Conditioning::hist_affine_ln) {
    NormCache<T> soft;
    Mat<T> base;
    if (dec_mod_.eta != ParamStore<T>::npos) {
      const T eta = params_.at(dec_mod_.eta).value(0, 0);
      base = soft_norm_rows<T>(h, eta, static_cast<T>(kSoftNormEps), cache ? &soft : nullptr);
    } else {
      base = h;
    }
    Mat<T> s = c * params_.at(dec_mod_.scale_w).value;
    s.rowwise() += params_.at(dec_mod_.scale_b).value.row(0);
    Mat<T> k = c * params_.at(dec_mod_.shift_w).value;
    k.rowwise() += params_.at(dec_mod_.shift_b).value.row(0);
    hd = base;
    Mat<T> one_plus_s = (s.array() + T(1)).matrix();
    mul_per_sample(hd, one_plus_s, G);
    add_per_sample(hd, k, G);
    if (cache) {
      cache->dec_soft = std::move(soft);
      cache->dec_soft_out = std::move(base);
      cache->dec_scale = std::move(s);
      cache->dec_shift = std::move(k);
    }
  } else {
    hd = h;
  }
  Mat<T> y = hd * params_.at(dec_w_).value;
  y.array() += params_.at(dec_b_).value(0, 0);
  if (cache) cache->dec_in = std::move(hd);
  // N x 1 -> B x G (row-major, samples are contiguous)
  return Eigen::Map<const Mat<T>>(y.data(), batch, G);
}

template <typename T>
Mat<T> Model<T>::forward(const ModelInput<T>& in, ForwardCache<T>* cache) const {
  const int B = in.batch();
  if (cache) {
    cache->batch = B;
    cache->value_token = in.value_token;
    cache->values = in.values;
    cache->sub.assign(sublayer_count(), {});
  }
  Mat<T> c = condition(in, cache);
  Mat<T> h = embed(in);
  for (int j = 0; j < sublayer_count(); ++j)
    h = sublayer_forward(j, h, c, B, cache ? &cache->sub[j] : nullptr);
  if (cache) cache->h_final = h;
  return decode_tokens(h, c, B, cache);
}

// ---------------------------------------------------------------- backward

template <typename T>
bool Model<T>::linear_needs_grad(int layer, Linear id) const {
  const int i = static_cast<int>(id);
  const auto& L = layers_[layer];
  if (params_.at(L.w[i]).trainable || params_.at(L.b[i]).trainable) return true;
  return L.lora_a[i] != ParamStore<T>::npos &&
         (params_.at(L.lora_a[i]).trainable || params_.at(L.lora_b[i]).trainable);
}

template <typename T>
Mat<T> Model<T>::linear_backward(int layer, Linear id, const Mat<T>& x, const Mat<T>& dy,
                                 bool need_dx) {
  const int i = static_cast<int>(id);
  const auto& L = layers_[layer];
  auto& W = params_.at(L.w[i]);
  auto& bias = params_.at(L.b[i]);
  const bool lora = L.lora_a[i] != ParamStore<T>::npos;
  if (W.trainable || (lora && (params_.at(L.lora_a[i]).trainable || params_.at(L.lora_b[i]).trainable))) {
    Mat<T> dW = x.transpose() * dy;
    if (W.trainable) W.grad += dW;
    if (lora) {
      auto& A = params_.at(L.lora_a[i]);
      auto& Bf = params_.at(L.lora_b[i]);
      if (A.trainable) A.grad.noalias() += dW * Bf.value.transpose();
      if (Bf.trainable) Bf.grad.noalias() += A.value.transpose() * dW;
    }
  }
  if (bias.trainable) bias.grad.row(0) += dy.colwise().sum();
  if (!need_dx) return {};
  if (lora) return dy * effective_weight(layer, id).transpose();
  return dy * W.value.transpose();
}

template <typename T>
void Model<T>::affine_backward(std::size_t w, std::size_t b, const Mat<T>& x, const Mat<T>& dy,
                               Mat<T>& dx) {
  auto& W = params_.at(w);
  auto& bias = params_.at(b);
  if (W.trainable) W.grad.noalias() += x.transpose() * dy;
  if (bias.trainable) bias.grad.row(0) += dy.colwise().sum();
  dx.noalias() += dy * W.value.transpose();
}

template <typename T>
Mat<T> Model<T>::sublayer_backward(int j, const SublayerCache<T>& sc, const Mat<T>& c,
                                   const Mat<T>& d_out, int batch, Mat<T>& dc) {
  const int G = cfg_.genes;
  const int D = cfg_.width;
  const int layer = j / 2;
  const bool attention = (j % 2) == 0;
  const auto& L = layers_[layer];
  const T lambda = static_cast<T>(cfg_.residual_scale);

  // post-norm
  Mat<T> d_normed = d_out;
  if (cfg_.conditioning == Conditioning::hist_affine_ln) {
    const auto& M = mods_[j];
    Mat<T> prod = (d_out.array() * sc.post.normed.array()).matrix();
    Mat<T> d_gamma = sum_per_sample(prod, G);
    Mat<T> d_beta = sum_per_sample(d_out, G);
    mul_per_sample(d_normed, sc.gamma_c, G);
    affine_backward(M.gamma_w, M.gamma_b, c, d_gamma, dc);
    affine_backward(M.beta_w, M.beta_b, c, d_beta, dc);
  } else {
    auto& g = params_.at(attention ? L.ln1_g : L.ln2_g);
    auto& bt = params_.at(attention ? L.ln1_b : L.ln2_b);
    if (g.trainable) g.grad.row(0) += (d_out.array() * sc.post.normed.array()).colwise().sum().matrix();
    if (bt.trainable) bt.grad.row(0) += d_out.colwise().sum();
    d_normed.array().rowwise() *= g.value.row(0).array();
  }
  Mat<T> dr = normalize_rows_backward<T>(d_normed, sc.post);

  Mat<T> dh_in = lambda * dr;
  Mat<T> du;
  if (cfg_.gated()) {
    const auto& M = mods_[j];
    du = dr;
    mul_per_sample(du, sc.tau, G);
    if (!force_unit_gate) {
      Mat<T> prod = (dr.array() * sc.u.array()).matrix();
      Mat<T> d_tau = sum_per_sample(prod, G);
      Mat<T> d_pre = (d_tau.array() * sc.tau.array() * (T(1) - sc.tau.array())).matrix();
      affine_backward(M.gate_w, M.gate_b, c, d_pre, dc);
    }
  } else {
    du = std::move(dr);
  }

  // frozen sub-layer
  Mat<T> dhm;
  if (attention) {
    const int H = cfg_.heads;
    const int dh = D / H;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> d_o = linear_backward(layer, Linear::wo, sc.attn, du);
    Mat<T> dq(d_o.rows(), D), dk(d_o.rows(), D), dv(d_o.rows(), D);
    Mat<T> dP(G, G), dS(G, G);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * G;
      for (int hd = 0; hd < H; ++hd) {
        const auto& P = sc.probs[static_cast<std::size_t>(b) * H + hd];
        const auto dob = d_o.block(r0, hd * dh, G, dh);
        dP.noalias() = dob * sc.v.block(r0, hd * dh, G, dh).transpose();
        dv.block(r0, hd * dh, G, dh).noalias() = P.transpose() * dob;
        const Vec<T> rowdot = (dP.array() * P.array()).rowwise().sum();
        dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix();
        dq.block(r0, hd * dh, G, dh).noalias() = (dS * sc.k.block(r0, hd * dh, G, dh)) * inv_sqrt;
        dk.block(r0, hd * dh, G, dh).noalias() = (dS.transpose() * sc.q.block(r0, hd * dh, G, dh)) * inv_sqrt;
      }
    }
    dhm = linear_backward(layer, Linear::wq, sc.hm, dq);
    dhm += linear_backward(layer, Linear::wk, sc.hm, dk);
    dhm += linear_backward(layer, Linear::wv, sc.hm, dv);
  } else {
    Mat<T> d_gated = linear_backward(layer, Linear::w2, sc.gated, du);
    Mat<T> d_a1 = (d_gated.array() * sc.a2.array() *
                   silu_grad_of(sc.a1).array())
                      .matrix();
    Mat<T> d_a2 = (d_gated.array() * silu_of(sc.a1).array()).matrix();
    dhm = linear_backward(layer, Linear::w1a, sc.hm, d_a1);
    dhm += linear_backward(layer, Linear::w1b, sc.hm, d_a2);
  }

  // SoftAdaLN
  const bool modulated = cfg_.conditioned() && cfg_.conditioning != Conditioning::hist_affine_ln;
  if (!modulated) {
    dh_in += dhm;
    return dh_in;
  }
  const auto& M = mods_[j];
  Mat<T> prod = (dhm.array() * sc.soft_out.array()).matrix();
  Mat<T> d_scale = sum_per_sample(prod, G);
  Mat<T> d_shift = sum_per_sample(dhm, G);
  affine_backward(M.scale_w, M.scale_b, c, d_scale, dc);
  affine_backward(M.shift_w, M.shift_b, c, d_shift, dc);
  Mat<T> d_base = dhm;
  Mat<T> one_plus_s = (sc.scale.array() + T(1)).matrix();
  mul_per_sample(d_base, one_plus_s, G);
  if (M.eta != ParamStore<T>::npos) {
    auto& eta = params_.at(M.eta);
    T d_eta = 0;
    dh_in += soft_norm_rows_backward<T>(d_base, sc.h_in, sc.soft, eta.value(0, 0), &d_eta);
    if (eta.trainable) eta.grad(0, 0) += d_eta;
  } else {
    dh_in += d_base;
  }
  return dh_in;
}

template <typename T>
void Model<T>::backward(const ForwardCache<T>& cache, const Mat<T>& d_out) {
  const int G = cfg_.genes;
  const int B = cache.batch;
  if (d_out.rows() != B || d_out.cols() != G) throw std::invalid_argument("backward: gradient shape mismatch");
  const Eigen::Index N = static_cast<Eigen::Index>(B) * G;
  Eigen::Map<const Vec<T>> dy(d_out.data(), N);

  auto& dw = params_.at(dec_w_);
  auto& db = params_.at(dec_b_);
  if (dw.trainable) dw.grad.col(0) += cache.dec_in.transpose() * dy;
  if (db.trainable) db.grad(0, 0) += dy.sum();

  Mat<T> dc;
  if (cfg_.conditioned()) dc = Mat<T>::Zero(B, cfg_.width);
  const Mat<T>& c = cache.c;

  Mat<T> dh = dy * dw.value.col(0).transpose();
  if (cfg_.conditioned() && cfg_.conditioning != Conditioning::hist_affine_ln) {
    Mat<T> prod = (dh.array() * cache.dec_soft_out.array()).matrix();
    Mat<T> d_scale = sum_per_sample(prod, G);
    Mat<T> d_shift = sum_per_sample(dh, G);
    affine_backward(dec_mod_.scale_w, dec_mod_.scale_b, c, d_scale, dc);
    affine_backward(dec_mod_.shift_w, dec_mod_.shift_b, c, d_shift, dc);
    Mat<T> one_plus_s = (cache.dec_scale.array() + T(1)).matrix();
    mul_per_sample(dh, one_plus_s, G);
    if (dec_mod_.eta != ParamStore<T>::npos) {
      auto& eta = params_.at(dec_mod_.eta);
      T d_eta = 0;
      dh = soft_norm_rows_backward<T>(dh, cache.h_final, cache.dec_soft, eta.value(0, 0), &d_eta);
      if (eta.trainable) eta.grad(0, 0) += d_eta;
    }
  }

  for (int j = sublayer_count() - 1; j >= 0; --j) dh = sublayer_backward(j, cache.sub[j], c, dh, B, dc);

  // token embedding
  auto& E = params_.at(gene_emb_);
  auto& vw = params_.at(value_w_);
  auto& vb = params_.at(value_b_);
  auto& mk = params_.at(mask_tok_);
  if (E.trainable || vw.trainable || vb.trainable || mk.trainable) {
    for (int b = 0; b < B; ++b) {
      for (int g = 0; g < G; ++g) {
        const Eigen::Index r = static_cast<Eigen::Index>(b) * G + g;
        if (E.trainable) E.grad.row(g) += dh.row(r);
        if (cache.value_token[r]) {
          if (vw.trainable) vw.grad.row(0) += cache.values(b, g) * dh.row(r);
          if (vb.trainable) vb.grad.row(0) += dh.row(r);
        } else if (mk.trainable) {
          mk.grad.row(0) += dh.row(r);
        }
      }
    }
  }

  if (!cfg_.conditioned()) return;
  auto& w2 = params_.at(cond_w2_);
  auto& b2 = params_.at(cond_b2_);
  auto& w1 = params_.at(cond_w1_);
  auto& b1 = params_.at(cond_b1_);
  if (!(w1.trainable || b1.trainable || w2.trainable || b2.trainable)) return;
  if (w2.trainable) w2.grad.noalias() += cache.cond_hidden.transpose() * dc;
  if (b2.trainable) b2.grad.row(0) += dc.colwise().sum();
  Mat<T> d_hidden = dc * w2.value.transpose();
  Mat<T> d_pre =
      (d_hidden.array() * silu_grad_of(cache.cond_pre).array()).matrix();
  if (w1.trainable) w1.grad.noalias() += cache.cond_in.transpose() * d_pre;
  if (b1.trainable) b1.grad.row(0) += d_pre.colwise().sum();
}

// ---------------------------------------------------------------- conversion

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(cfg_);
  if (has_lora_) {
    Rng dummy(0);
    out.add_lora(cfg_.lora_rank, dummy);
  }
  out.force_unit_gate = force_unit_gate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = params_.at(i);
    auto& dst = out.params_[src.name];
    dst.value = src.value.template cast<U>();
    dst.grad = Mat<U>::Zero(src.value.rows(), src.value.cols());
    dst.trainable = src.trainable;
  }
  return out;
}

template <typename T>
template <typename U>
void Model<T>::copy_matching(const Model<U>& other) {
  for (const auto& src : other.params()) {
    if (!params_.contains(src.name)) continue;
    auto& dst = params_[src.name];
    if (dst.value.rows() != src.value.rows() || dst.value.cols() != src.value.cols())
      throw std::invalid_argument("shape mismatch copying parameter " + src.name);
    dst.value = src.value.template cast<T>();
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template void Model<float>::copy_matching<double>(const Model<double>&);
template void Model<double>::copy_matching<float>(const Model<float>&);
template void Model<float>::copy_matching<float>(const Model<float>&);
template void Model<double>::copy_matching<double>(const Model<double>&);

}  // namespace histomask
