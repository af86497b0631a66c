#pragma once

// Pythia-style decoder LM assembled from the sequence mixers: token
// embedding, parallel attention/MLP residual blocks, final layernorm,
// untied LM head. Supports the softmax teacher, the Hedgehog student and
// the HedgeMamba student as mixer kinds.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hm/mixers.hpp"
#include "hm/tensor.hpp"

namespace hm::model {

enum class MixerKind { softmax, hedgehog, hedgemamba };

std::string mixer_kind_name(MixerKind k);
MixerKind mixer_kind_from_name(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_mlp = 256;
  double rotary_fraction = 0.25;
  MixerKind mixer_kind = MixerKind::softmax;
  mixers::ComponentFlags components;
  std::size_t conv_kernel = 4;   // kappa
  std::size_t delta_rank = 16;   // d_r
  double layernorm_eps = 1e-5;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t state_size() const { return 2 * head_dim(); }
  void validate() const;
};

std::map<std::string, std::string> model_config_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);

// Per-layer mixer parameter bundle. Which tensors are defined depends on
// mixer_kind and the component flags; undefined tensors are absent from
// checkpoints and parameter counts.
struct MixerParams {
  Tensor wq, bq, wk, bk, wv, bv;  // q/k/v maps
  Tensor wo, bo;                  // output projection
  std::vector<Tensor> hq_w, hq_b, hk_w, hk_b;  // hedgehog maps per head
  Tensor lambda;                               // [N, head_dim]
  Tensor dt_wd, dt_bd, dt_wu, dt_bu;           // delta MLP
  Tensor conv_w, conv_b;
  Tensor gate_w, gate_b;
};

struct LayerParams {
  Tensor ln1_g, ln1_b;  // pre-mixer norm
  Tensor ln2_g, ln2_b;  // pre-MLP norm (parallel stream)
  MixerParams mixer;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct Model {
  ModelConfig cfg;
  Tensor embed;    // [vocab, d]
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor unembed;  // [d, vocab]
};

Model build_model(const ModelConfig& cfg);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// All parameters in a stable order (checkpoint order).
std::vector<NamedParam> named_params(const Model& m);
std::vector<NamedParam> named_params(Model& m);
std::size_t param_count(const Model& m);

// Views adapting the per-layer bundle to the mixer-level structs.
mixers::AttentionParams attention_params(const MixerParams& mp,
                                         const ModelConfig& cfg);
mixers::HedgehogParams hedgehog_q(const MixerParams& mp);
mixers::HedgehogParams hedgehog_k(const MixerParams& mp);
mixers::SsmParams ssm_params(const MixerParams& mp);

// Mixer sublayer including the output projection.
Tensor mixer_forward(const Tensor& x, const LayerParams& layer,
                     const ModelConfig& cfg);

// x + mixer(ln1(x)) + mlp(ln2(x))
Tensor block_forward(const Tensor& x, const LayerParams& layer,
                     const ModelConfig& cfg);

struct ForwardTrace {
  Tensor logits;                       // [L, vocab]
  std::vector<Tensor> block_outputs;   // filled when collect_trace
  std::vector<Tensor> mixer_outputs;   // filled when collect_trace
};

ForwardTrace lm_forward(const Model& m, const std::vector<int>& tokens,
                        bool collect_trace = false);

// Deep copy (fresh storage for every tensor).
Model clone_model(const Model& m);

// Swaps the mixer kind. softmax -> hedgehog attaches fresh seeded Hedgehog
// maps; hedgehog -> hedgemamba applies the bridge substitutions and
// identity initializations. All non-mixer parameters are preserved
// bit-exactly.
Model convert_mixer(const Model& src, MixerKind target,
                    std::uint64_t hedgehog_seed);

// ---- checkpoint container ----

void save_checkpoint(const Model& m, const std::string& path,
                     const std::map<std::string, std::string>& extra_config);
Model load_checkpoint(const std::string& path,
                      std::map<std::string, std::string>* config_out = nullptr);

}  // namespace hm::model
