// SPDX-License-Identifier: Apache-2.0
//
// Toy masked-autoencoder transformer with optional condition-driven
// modulation. Parameters live in a named store whose trainable flags form the
// freezing manifest; the backward pass only accumulates gradients for
// trainable tensors.
#pragma once

#include "histomask/common.hpp"
#include "histomask/softadaln.hpp"

#include <array>
#include <deque>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace histomask {

enum class Conditioning { none, soft_adaln, no_softnorm, no_idinit, hist_affine_ln };
enum class ParamGroup { backbone, decoder, modulator, lora };
enum class UpdateScheme { modulators_only, scratch, decoder_tune, backbone_lora };

Conditioning parse_conditioning(const std::string& name);
std::string to_string(Conditioning c);
UpdateScheme parse_update_scheme(const std::string& name);
std::string to_string(UpdateScheme s);
std::string to_string(ParamGroup g);
ParamGroup parse_param_group(const std::string& name);

struct ModelConfig {
  int genes = 100;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int ffn_width = 128;
  int cond_dim = 48;
  int time_dim = 64;
  int cond_hidden = 128;
  double residual_scale = 1.0;
  double gate_bias = kDefaultGateBias;
  Conditioning conditioning = Conditioning::none;
  int lora_rank = 0;

  void validate() const;
  bool conditioned() const { return conditioning != Conditioning::none; }
  bool gated() const {
    return conditioning == Conditioning::soft_adaln || conditioning == Conditioning::no_softnorm ||
           conditioning == Conditioning::no_idinit;
  }
  bool uses_soft_norm() const {
    return conditioning == Conditioning::soft_adaln || conditioning == Conditioning::no_idinit;
  }
};

template <typename T>
struct Param {
  std::string name;
  ParamGroup group = ParamGroup::backbone;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = false;
};

/// Ordered, name-indexed parameter tensors. Insertion order is the checkpoint
/// order.
template <typename T>
class ParamStore {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::size_t add(const std::string& name, ParamGroup group, Eigen::Index rows, Eigen::Index cols);
  Param<T>& at(std::size_t i) { return params_[i]; }
  const Param<T>& at(std::size_t i) const { return params_[i]; }
  Param<T>& operator[](const std::string& name);
  const Param<T>& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Number of scalar parameters, optionally restricted to trainable tensors.
  std::size_t scalar_count(bool trainable_only = false) const;
  void zero_grad();

 private:
  std::deque<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct ModelInput {
  Mat<T> values;                          // B x G
  std::vector<std::uint8_t> value_token;  // B * G, 1 = value lift, 0 = mask token
  Mat<T> cond;                            // B x C; ignored when unconditioned
  std::vector<int> timestep;              // B
  int batch() const { return static_cast<int>(values.rows()); }
};

template <typename T>
struct SublayerCache {
  Mat<T> h_in;
  NormCache<T> soft;
  Mat<T> soft_out;
  Mat<T> scale, shift;  // B x D
  Mat<T> hm;            // sub-layer input
  Mat<T> q, k, v, attn;
  std::vector<Mat<T>> probs;  // B * H matrices of G x G
  Mat<T> a1, a2, gated;
  Mat<T> u;
  Mat<T> tau;  // B x D
  NormCache<T> post;
  Mat<T> gamma_c, beta_c;  // B x D (hist-affine variant)
};

template <typename T>
struct ForwardCache {
  int batch = 0;
  std::vector<std::uint8_t> value_token;
  Mat<T> values;
  Mat<T> cond_in, cond_pre, cond_hidden, c;
  std::vector<SublayerCache<T>> sub;
  Mat<T> h_final;
  NormCache<T> dec_soft;
  Mat<T> dec_soft_out, dec_scale, dec_shift;
  Mat<T> dec_in;
};

enum class Linear : int { wq = 0, wk, wv, wo, w1a, w1b, w2 };
constexpr int kLinearCount = 7;

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Random initialization of embeddings, sub-layers and decoder.
  void init_backbone(Rng& rng);
  /// Identity initialization (or the small-random variant for no_idinit and
  /// hist_affine_ln) of every modulator and of the condition encoder.
  void init_modulators(Rng& rng);
  /// Adds rank-r additive factors to every attention and feed-forward matrix;
  /// B starts at zero so the effective weights are unchanged.
  void add_lora(int rank, Rng& rng);

  void apply_update_scheme(UpdateScheme scheme);

  /// B x G reconstruction. Fills `cache` for backward when given.
  Mat<T> forward(const ModelInput<T>& in, ForwardCache<T>* cache = nullptr) const;

  /// Accumulates dL/dparam into the grad buffers of trainable tensors.
  void backward(const ForwardCache<T>& cache, const Mat<T>& d_out);

  /// Forces tau = 1 exactly (used to check the identity-init equivalence).
  bool force_unit_gate = false;

  template <typename U>
  Model<U> cast() const;

  /// Copies every tensor present in `other` (matched by name and shape).
  template <typename U>
  void copy_matching(const Model<U>& other);

  // Stage-level access used by the per-operation API.
  Mat<T> embed(const ModelInput<T>& in) const;
  Mat<T> condition(const ModelInput<T>& in, ForwardCache<T>* cache) const;
  Mat<T> sublayer_forward(int j, const Mat<T>& h_in, const Mat<T>& c, int batch,
                          SublayerCache<T>* cache) const;
  Mat<T> decode_tokens(const Mat<T>& h, const Mat<T>& c, int batch, ForwardCache<T>* cache) const;

  int sublayer_count() const { return 2 * cfg_.layers; }

 private:
  struct LayerIdx {
    std::array<std::size_t, kLinearCount> w{};
    std::array<std::size_t, kLinearCount> b{};
    std::array<std::size_t, kLinearCount> lora_a{};
    std::array<std::size_t, kLinearCount> lora_b{};
    std::size_t ln1_g = 0, ln1_b = 0, ln2_g = 0, ln2_b = 0;
  };
  struct ModIdx {
    std::size_t eta = ParamStore<T>::npos;
    std::size_t scale_w = 0, scale_b = 0, shift_w = 0, shift_b = 0;
    std::size_t gate_w = ParamStore<T>::npos, gate_b = ParamStore<T>::npos;
    std::size_t gamma_w = ParamStore<T>::npos, gamma_b = 0, beta_w = 0, beta_b = 0;
  };

  void build();
  Mat<T> effective_weight(int layer, Linear id) const;
  Mat<T> linear_forward(int layer, Linear id, const Mat<T>& x) const;
  /// Returns dL/dx and accumulates weight (or low-rank factor) gradients.
  Mat<T> linear_backward(int layer, Linear id, const Mat<T>& x, const Mat<T>& dy,
                         bool need_dx = true);
  bool linear_needs_grad(int layer, Linear id) const;
  void affine_backward(std::size_t w, std::size_t b, const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx);
  Mat<T> sublayer_backward(int j, const SublayerCache<T>& sc, const Mat<T>& c, const Mat<T>& d_out,
                           int batch, Mat<T>& dc);
  bool any_trainable(ParamGroup g) const;

  ModelConfig cfg_;
  ParamStore<T> params_;
  std::size_t gene_emb_ = 0, value_w_ = 0, value_b_ = 0, mask_tok_ = 0;
  std::vector<LayerIdx> layers_;
  std::size_t dec_w_ = 0, dec_b_ = 0;
  std::size_t cond_w1_ = 0, cond_b1_ = 0, cond_w2_ = 0, cond_b2_ = 0;
  std::vector<ModIdx> mods_;
  ModIdx dec_mod_;
  bool has_lora_ = false;

  template <typename>
  friend class Model;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace histomask
