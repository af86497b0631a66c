#include "hm/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "hm/bridge.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace hm::model {

std::string mixer_kind_name(MixerKind k) {
  switch (k) {
    case MixerKind::softmax: return "softmax";
    case MixerKind::hedgehog: return "hedgehog";
    case MixerKind::hedgemamba: return "hedgemamba";
  }
  throw std::logic_error("mixer_kind_name: bad enum");
}

MixerKind mixer_kind_from_name(const std::string& s) {
  if (s == "softmax") return MixerKind::softmax;
  if (s == "hedgehog") return MixerKind::hedgehog;
  if (s == "hedgemamba") return MixerKind::hedgemamba;
  throw std::invalid_argument("unknown mixer kind: " + s);
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model must be divisible by n_heads");
  }
  if (rotary_fraction < 0.0 || rotary_fraction > 1.0) {
    throw std::invalid_argument("rotary_fraction must be in [0,1]");
  }
  if (conv_kernel == 0) throw std::invalid_argument("conv_kernel must be >= 1");
  if (delta_rank == 0) throw std::invalid_argument("delta_rank must be >= 1");
}

namespace {

std::string bool_str(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad boolean value: " + s);
}

}  // namespace

std::map<std::string, std::string> model_config_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["vocab_size"] = std::to_string(cfg.vocab_size);
  kv["d_model"] = std::to_string(cfg.d_model);
  kv["n_layers"] = std::to_string(cfg.n_layers);
  kv["n_heads"] = std::to_string(cfg.n_heads);
  kv["d_mlp"] = std::to_string(cfg.d_mlp);
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", cfg.rotary_fraction);
    kv["rotary_fraction"] = buf;
  }
  kv["mixer"] = mixer_kind_name(cfg.mixer_kind);
  kv["ssm_decay"] = bool_str(cfg.components.ssm_decay);
  kv["conv"] = bool_str(cfg.components.conv);
  kv["gate"] = bool_str(cfg.components.gate);
  kv["conv_kernel"] = std::to_string(cfg.conv_kernel);
  kv["delta_rank"] = std::to_string(cfg.delta_rank);
  kv["seed"] = std::to_string(cfg.seed);
  return kv;
}

ModelConfig model_config_from_kv(
    const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  auto get = [&kv](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw std::invalid_argument(std::string("missing config key: ") + key);
    }
    return it->second;
  };
  cfg.vocab_size = std::stoull(get("vocab_size"));
  cfg.d_model = std::stoull(get("d_model"));
  cfg.n_layers = std::stoull(get("n_layers"));
  cfg.n_heads = std::stoull(get("n_heads"));
  cfg.d_mlp = std::stoull(get("d_mlp"));
  cfg.rotary_fraction = std::stod(get("rotary_fraction"));
  cfg.mixer_kind = mixer_kind_from_name(get("mixer"));
  cfg.components.ssm_decay = parse_bool(get("ssm_decay"));
  cfg.components.conv = parse_bool(get("conv"));
  cfg.components.gate = parse_bool(get("gate"));
  cfg.conv_kernel = std::stoull(get("conv_kernel"));
  cfg.delta_rank = std::stoull(get("delta_rank"));
  cfg.seed = std::stoull(get("seed"));
  cfg.validate();
  return cfg;
}

// ---- construction ----

namespace {

Tensor linear_weight(Rng& rng, std::size_t in, std::size_t out) {
  return rng.normal_tensor({in, out}, 0.0,
                           1.0 / std::sqrt(static_cast<double>(in)), true);
}

Tensor zero_bias(std::size_t n) { return Tensor::zeros({n}, true); }

void init_hedgehog_maps(MixerParams& mp, const ModelConfig& cfg, Rng& rng) {
  const std::size_t dh = cfg.head_dim();
  mp.hq_w.clear();
  mp.hq_b.clear();
  mp.hk_w.clear();
  mp.hk_b.clear();
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    mp.hq_w.push_back(linear_weight(rng, dh, dh));
    mp.hq_b.push_back(zero_bias(dh));
  }
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    mp.hk_w.push_back(linear_weight(rng, dh, dh));
    mp.hk_b.push_back(zero_bias(dh));
  }
}

MixerParams build_mixer(const ModelConfig& cfg, Rng& rng) {
  MixerParams mp;
  const std::size_t d = cfg.d_model;
  mp.wq = linear_weight(rng, d, d);
  mp.bq = zero_bias(d);
  mp.wk = linear_weight(rng, d, d);
  mp.bk = zero_bias(d);
  mp.wv = linear_weight(rng, d, d);
  mp.bv = zero_bias(d);
  mp.wo = linear_weight(rng, d, d);
  mp.bo = zero_bias(d);
  if (cfg.mixer_kind != MixerKind::softmax) {
    init_hedgehog_maps(mp, cfg, rng);
  }
  if (cfg.mixer_kind == MixerKind::hedgemamba) {
    // fresh builds start at the identity point like a bridged conversion
    bridge::substitute_linear_attention(mp, cfg, rng);
  }
  return mp;
}

}  // namespace

Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  m.embed = rng.normal_tensor({cfg.vocab_size, cfg.d_model}, 0.0, 0.02, true);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = Tensor::full({cfg.d_model}, 1.0, true);
    lp.ln1_b = zero_bias(cfg.d_model);
    lp.ln2_g = Tensor::full({cfg.d_model}, 1.0, true);
    lp.ln2_b = zero_bias(cfg.d_model);
    lp.mixer = build_mixer(cfg, rng);
    lp.mlp_w1 = linear_weight(rng, cfg.d_model, cfg.d_mlp);
    lp.mlp_b1 = zero_bias(cfg.d_mlp);
    lp.mlp_w2 = linear_weight(rng, cfg.d_mlp, cfg.d_model);
    lp.mlp_b2 = zero_bias(cfg.d_model);
    m.layers.push_back(std::move(lp));
  }
  m.lnf_g = Tensor::full({cfg.d_model}, 1.0, true);
  m.lnf_b = zero_bias(cfg.d_model);
  m.unembed = linear_weight(rng, cfg.d_model, cfg.vocab_size);
  return m;
}

// ---- parameter enumeration ----

namespace {

void collect_params(const Model& m, std::vector<NamedParam>& out) {
  auto push = [&out](const std::string& name, const Tensor& t) {
    if (t.defined()) out.push_back({name, t});
  };
  push("embed", m.embed);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& lp = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    push(p + "ln1.g", lp.ln1_g);
    push(p + "ln1.b", lp.ln1_b);
    push(p + "ln2.g", lp.ln2_g);
    push(p + "ln2.b", lp.ln2_b);
    const auto& mp = lp.mixer;
    push(p + "mixer.wq", mp.wq);
    push(p + "mixer.bq", mp.bq);
    push(p + "mixer.wk", mp.wk);
    push(p + "mixer.bk", mp.bk);
    push(p + "mixer.wv", mp.wv);
    push(p + "mixer.bv", mp.bv);
    push(p + "mixer.wo", mp.wo);
    push(p + "mixer.bo", mp.bo);
    for (std::size_t h = 0; h < mp.hq_w.size(); ++h) {
      push(p + "mixer.hhq." + std::to_string(h) + ".w", mp.hq_w[h]);
      push(p + "mixer.hhq." + std::to_string(h) + ".b", mp.hq_b[h]);
    }
    for (std::size_t h = 0; h < mp.hk_w.size(); ++h) {
      push(p + "mixer.hhk." + std::to_string(h) + ".w", mp.hk_w[h]);
      push(p + "mixer.hhk." + std::to_string(h) + ".b", mp.hk_b[h]);
    }
    push(p + "mixer.lambda", mp.lambda);
    push(p + "mixer.dt.wd", mp.dt_wd);
    push(p + "mixer.dt.bd", mp.dt_bd);
    push(p + "mixer.dt.wu", mp.dt_wu);
    push(p + "mixer.dt.bu", mp.dt_bu);
    push(p + "mixer.conv.w", mp.conv_w);
    push(p + "mixer.conv.b", mp.conv_b);
    push(p + "mixer.gate.w", mp.gate_w);
    push(p + "mixer.gate.b", mp.gate_b);
    push(p + "mlp.w1", lp.mlp_w1);
    push(p + "mlp.b1", lp.mlp_b1);
    push(p + "mlp.w2", lp.mlp_w2);
    push(p + "mlp.b2", lp.mlp_b2);
  }
  push("ln_f.g", m.lnf_g);
  push("ln_f.b", m.lnf_b);
  push("unembed", m.unembed);
}

}  // namespace

std::vector<NamedParam> named_params(const Model& m) {
  std::vector<NamedParam> out;
  collect_params(m, out);
  return out;
}

std::vector<NamedParam> named_params(Model& m) {
  std::vector<NamedParam> out;
  collect_params(m, out);
  return out;
}

std::size_t param_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& p : named_params(m)) n += p.tensor.numel();
  return n;
}

// ---- mixer views ----

mixers::AttentionParams attention_params(const MixerParams& mp,
                                         const ModelConfig& cfg) {
  mixers::AttentionParams ap;
  ap.wq = mp.wq;
  ap.bq = mp.bq;
  ap.wk = mp.wk;
  ap.bk = mp.bk;
  ap.wv = mp.wv;
  ap.bv = mp.bv;
  ap.num_heads = cfg.n_heads;
  ap.rotary_fraction = cfg.rotary_fraction;
  return ap;
}

mixers::HedgehogParams hedgehog_q(const MixerParams& mp) {
  return {mp.hq_w, mp.hq_b};
}

mixers::HedgehogParams hedgehog_k(const MixerParams& mp) {
  return {mp.hk_w, mp.hk_b};
}

mixers::SsmParams ssm_params(const MixerParams& mp) {
  mixers::SsmParams sp;
  sp.lambda = mp.lambda;
  sp.dt_wd = mp.dt_wd;
  sp.dt_bd = mp.dt_bd;
  sp.dt_wu = mp.dt_wu;
  sp.dt_bu = mp.dt_bu;
  sp.conv_w = mp.conv_w;
  sp.conv_b = mp.conv_b;
  sp.gate_w = mp.gate_w;
  sp.gate_b = mp.gate_b;
  sp.wv = mp.wv;
  sp.bv = mp.bv;
  return sp;
}

// ---- forward ----

Tensor mixer_forward(const Tensor& x, const LayerParams& layer,
                     const ModelConfig& cfg) {
  const auto& mp = layer.mixer;
  switch (cfg.mixer_kind) {
    case MixerKind::softmax: {
      Tensor y = mixers::softmax_attention(x, attention_params(mp, cfg), true);
      return add_rowvec(matmul(y, mp.wo), mp.bo);
    }
    case MixerKind::hedgehog: {
      Tensor y = mixers::linear_attention(x, attention_params(mp, cfg),
                                          hedgehog_q(mp), hedgehog_k(mp),
                                          /*causal=*/true, /*normalize=*/true);
      return add_rowvec(matmul(y, mp.wo), mp.bo);
    }
    case MixerKind::hedgemamba: {
      return mixers::hedgemamba_forward(x, attention_params(mp, cfg),
                                        hedgehog_q(mp), hedgehog_k(mp),
                                        ssm_params(mp), mp.wo, mp.bo,
                                        cfg.components);
    }
  }
  throw std::logic_error("mixer_forward: bad mixer kind");
}

namespace {

Tensor mlp_forward(const Tensor& x, const LayerParams& layer) {
  Tensor h = gelu(add_rowvec(matmul(x, layer.mlp_w1), layer.mlp_b1));
  return add_rowvec(matmul(h, layer.mlp_w2), layer.mlp_b2);
}

}  // namespace

Tensor block_forward(const Tensor& x, const LayerParams& layer,
                     const ModelConfig& cfg) {
  Tensor attn_out = mixer_forward(
      layernorm(x, layer.ln1_g, layer.ln1_b, cfg.layernorm_eps), layer, cfg);
  Tensor mlp_out = mlp_forward(
      layernorm(x, layer.ln2_g, layer.ln2_b, cfg.layernorm_eps), layer);
  return add(add(x, attn_out), mlp_out);
}

ForwardTrace lm_forward(const Model& m, const std::vector<int>& tokens,
                        bool collect_trace) {
  ForwardTrace trace;
  Tensor x = embedding_lookup(m.embed, tokens);
  for (const auto& layer : m.layers) {
    if (collect_trace) {
      Tensor attn_out = mixer_forward(
          layernorm(x, layer.ln1_g, layer.ln1_b, m.cfg.layernorm_eps), layer,
          m.cfg);
      Tensor mlp_out = mlp_forward(
          layernorm(x, layer.ln2_g, layer.ln2_b, m.cfg.layernorm_eps), layer);
      x = add(add(x, attn_out), mlp_out);
      trace.mixer_outputs.push_back(attn_out);
      trace.block_outputs.push_back(x);
    } else {
      x = block_forward(x, layer, m.cfg);
    }
  }
  x = layernorm(x, m.lnf_g, m.lnf_b, m.cfg.layernorm_eps);
  trace.logits = matmul(x, m.unembed);
  return trace;
}

// ---- conversion ----

namespace {

Tensor clone_keep(const Tensor& t) {
  if (!t.defined()) return {};
  Tensor c = t.clone();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

Model clone_model(const Model& m) {
  Model out;
  out.cfg = m.cfg;
  out.embed = clone_keep(m.embed);
  for (const auto& lp : m.layers) {
    LayerParams c;
    c.ln1_g = clone_keep(lp.ln1_g);
    c.ln1_b = clone_keep(lp.ln1_b);
    c.ln2_g = clone_keep(lp.ln2_g);
    c.ln2_b = clone_keep(lp.ln2_b);
    const auto& mp = lp.mixer;
    auto& cm = c.mixer;
    cm.wq = clone_keep(mp.wq);
    cm.bq = clone_keep(mp.bq);
    cm.wk = clone_keep(mp.wk);
    cm.bk = clone_keep(mp.bk);
    cm.wv = clone_keep(mp.wv);
    cm.bv = clone_keep(mp.bv);
    cm.wo = clone_keep(mp.wo);
    cm.bo = clone_keep(mp.bo);
    for (const auto& t : mp.hq_w) cm.hq_w.push_back(clone_keep(t));
    for (const auto& t : mp.hq_b) cm.hq_b.push_back(clone_keep(t));
    for (const auto& t : mp.hk_w) cm.hk_w.push_back(clone_keep(t));
    for (const auto& t : mp.hk_b) cm.hk_b.push_back(clone_keep(t));
    cm.lambda = clone_keep(mp.lambda);
    cm.dt_wd = clone_keep(mp.dt_wd);
    cm.dt_bd = clone_keep(mp.dt_bd);
    cm.dt_wu = clone_keep(mp.dt_wu);
    cm.dt_bu = clone_keep(mp.dt_bu);
    cm.conv_w = clone_keep(mp.conv_w);
    cm.conv_b = clone_keep(mp.conv_b);
    cm.gate_w = clone_keep(mp.gate_w);
    cm.gate_b = clone_keep(mp.gate_b);
    c.mlp_w1 = clone_keep(lp.mlp_w1);
    c.mlp_b1 = clone_keep(lp.mlp_b1);
    c.mlp_w2 = clone_keep(lp.mlp_w2);
    c.mlp_b2 = clone_keep(lp.mlp_b2);
    out.layers.push_back(std::move(c));
  }
  out.lnf_g = clone_keep(m.lnf_g);
  out.lnf_b = clone_keep(m.lnf_b);
  out.unembed = clone_keep(m.unembed);
  return out;
}

Model convert_mixer(const Model& src, MixerKind target,
                    std::uint64_t hedgehog_seed) {
  if (target == MixerKind::hedgemamba &&
      src.cfg.mixer_kind != MixerKind::hedgehog) {
    throw std::invalid_argument(
        "convert_mixer: hedgemamba target requires a hedgehog source");
  }
  Model out = clone_model(src);
  if (target == src.cfg.mixer_kind) return out;
  out.cfg.mixer_kind = target;
  if (target == MixerKind::hedgehog) {
    Rng rng(hedgehog_seed);
    for (auto& lp : out.layers) {
      init_hedgehog_maps(lp.mixer, out.cfg, rng);
      // conversion drops any ssm-only tensors
      lp.mixer.lambda = {};
      lp.mixer.dt_wd = lp.mixer.dt_bd = lp.mixer.dt_wu = lp.mixer.dt_bu = {};
      lp.mixer.conv_w = lp.mixer.conv_b = {};
      lp.mixer.gate_w = lp.mixer.gate_b = {};
    }
    return out;
  }
  if (target == MixerKind::hedgemamba) {
    Rng rng(hedgehog_seed);
    for (auto& lp : out.layers) {
      bridge::substitute_linear_attention(lp.mixer, out.cfg, rng);
    }
    return out;
  }
  throw std::invalid_argument("convert_mixer: unsupported target");
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[8] = {'H', 'M', 'C', 'K', 'P', 'T', '0', '\n'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path,
                     const std::map<std::string, std::string>& extra_config) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for write: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);

  std::map<std::string, std::string> kv = extra_config;
  for (const auto& [k, v] : model_config_kv(m.cfg)) kv[k] = v;
  std::string config_text;
  for (const auto& [k, v] : kv) config_text += k + "=" + v + "\n";
  write_u64(os, config_text.size());
  os.write(config_text.data(),
           static_cast<std::streamsize>(config_text.size()));

  const auto params = named_params(m);
  write_u64(os, params.size());
  for (const auto& p : params) {
    write_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    os.put(0);  // dtype tag: 0 = f64
    const auto& shape = p.tensor.shape();
    write_u64(os, shape.size());
    for (std::size_t d : shape) write_u64(os, d);
    const auto& data = p.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path,
                      std::map<std::string, std::string>* config_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8] = {};
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint magic mismatch: " + path +
                             " is not a hedgemamba checkpoint");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint version mismatch: file has v" +
                             std::to_string(version) + ", this build reads v" +
                             std::to_string(kVersion));
  }
  const std::uint64_t config_len = read_u64(is);
  std::string config_text(config_len, '\0');
  is.read(config_text.data(), static_cast<std::streamsize>(config_len));

  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < config_text.size()) {
    const std::size_t eol = config_text.find('\n', pos);
    const std::string line = config_text.substr(pos, eol - pos);
    pos = (eol == std::string::npos) ? config_text.size() : eol + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("checkpoint config line not key=value: " + line);
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (config_out) *config_out = kv;

  Model m = build_model(model_config_from_kv(kv));
  auto params = named_params(m);
  std::map<std::string, Tensor> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;

  const std::uint64_t n_params = read_u64(is);
  if (n_params != params.size()) {
    throw std::runtime_error(
        "checkpoint parameter count mismatch: file has " +
        std::to_string(n_params) + ", model expects " +
        std::to_string(params.size()));
  }
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::uint64_t name_len = read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    const int dtype = is.get();
    if (dtype != 0) {
      throw std::runtime_error("checkpoint dtype tag unsupported: " +
                               std::to_string(dtype));
    }
    const std::uint64_t ndim = read_u64(is);
    Shape shape(ndim);
    for (auto& d : shape) d = read_u64(is);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint has unknown parameter: " + name);
    }
    Tensor t = it->second;
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint shape mismatch for " + name +
                               ": file " + shape_str(shape) + ", model " +
                               shape_str(t.shape()));
    }
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated at " + name);
  }
  return m;
}

}  // namespace hm::model
