#include "hm/data.hpp"

#include <array>
#include <cmath>
#include <fstream>

namespace hm::data {

std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) {
      throw std::invalid_argument("detokenize: id out of byte range");
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return s;
}

Corpus corpus_from_ids(std::vector<int> ids, double val_fraction) {
  if (ids.empty()) throw std::runtime_error("corpus is empty");
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw std::invalid_argument("val_fraction must be in [0, 1)");
  }
  Corpus c;
  c.ids = std::move(ids);
  const auto val_len = static_cast<std::size_t>(
      static_cast<double>(c.ids.size()) * val_fraction);
  c.train_end = c.ids.size() - val_len;
  return c;
}

Corpus load_corpus(const std::vector<std::string>& paths,
                   double val_fraction) {
  std::vector<int> ids;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open corpus file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)),
                      std::istreambuf_iterator<char>());
    auto part = tokenize_bytes(bytes);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return corpus_from_ids(std::move(ids), val_fraction);
}

BatchSampler::BatchSampler(const Corpus& corpus, std::size_t seq_len,
                           std::size_t batch_size, std::uint64_t seed)
    : corpus_(&corpus),
      seq_len_(seq_len),
      batch_size_(batch_size),
      rng_(seed) {
  if (seq_len == 0 || batch_size == 0) {
    throw std::invalid_argument("BatchSampler: seq_len and batch_size >= 1");
  }
  if (corpus.train_end < seq_len + 1) {
    throw std::runtime_error(
        "corpus too small: train region must hold at least one window of "
        "seq_len + 1 tokens");
  }
  // a window starting at o consumes ids[o .. o+seq_len]
  max_offset_ = corpus.train_end - seq_len;
}

Batch BatchSampler::next() {
  Batch b;
  b.inputs.resize(batch_size_);
  b.targets.resize(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const auto o = static_cast<std::size_t>(rng_.below(max_offset_));
    b.inputs[i].assign(corpus_->ids.begin() + static_cast<std::ptrdiff_t>(o),
                       corpus_->ids.begin() +
                           static_cast<std::ptrdiff_t>(o + seq_len_));
    b.targets[i].assign(
        corpus_->ids.begin() + static_cast<std::ptrdiff_t>(o + 1),
        corpus_->ids.begin() + static_cast<std::ptrdiff_t>(o + 1 + seq_len_));
  }
  return b;
}

double perplexity(const model::Model& m, const Corpus& corpus,
                  std::size_t seq_len, std::size_t max_windows) {
  if (corpus.val_size() < seq_len + 1) {
    throw std::runtime_error("perplexity: validation split too small");
  }
  NoGrad ng;
  double nll_sum = 0.0;
  std::size_t tokens = 0;
  std::size_t w = 0;
  for (;; ++w) {
    if (max_windows != 0 && w >= max_windows) break;
    const std::size_t start = corpus.train_end + w * (seq_len + 1);
    if (start + seq_len >= corpus.ids.size()) break;
    std::vector<int> inputs(corpus.ids.begin() +
                                static_cast<std::ptrdiff_t>(start),
                            corpus.ids.begin() +
                                static_cast<std::ptrdiff_t>(start + seq_len));
    auto trace = model::lm_forward(m, inputs);
    const auto& logits = trace.logits.data();
    const std::size_t v = m.cfg.vocab_size;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const int target = corpus.ids[start + t + 1];
      const double* row = logits.data() + t * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double se = 0.0;
      for (std::size_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
      nll_sum += (std::log(se) + mx) - row[static_cast<std::size_t>(target)];
      ++tokens;
    }
  }
  if (tokens == 0) throw std::runtime_error("perplexity: no full window fits");
  return std::exp(nll_sum / static_cast<double>(tokens));
}

// ---- complexity benchmark ----

namespace {

double fit_loglog_slope(const std::vector<BenchPoint>& pts) {
  const std::size_t n = pts.size();
  double sx = 0.0, sy = 0.0;
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = std::log(static_cast<double>(pts[i].length));
    ys[i] = std::log(static_cast<double>(pts[i].multadds));
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / static_cast<double>(n);
  const double my = sy / static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (xs[i] - mx) * (ys[i] - my);
    den += (xs[i] - mx) * (xs[i] - mx);
  }
  return num / den;
}

unsigned long long count_core(model::MixerKind kind, std::size_t L,
                              std::size_t d, Rng& rng) {
  NoGrad ng;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  switch (kind) {
    case model::MixerKind::softmax: {
      Tensor q = rng.normal_tensor({L, d}, 0.0, 1.0);
      Tensor k = rng.normal_tensor({L, d}, 0.0, 1.0);
      Tensor v = rng.normal_tensor({L, d}, 0.0, 1.0);
      opcount::reset();
      mixers::attention_core(q, k, v, /*causal=*/true, scale);
      return opcount::multadds();
    }
    case model::MixerKind::hedgehog: {
      Tensor phi_q = softmax_last(rng.normal_tensor({L, 2 * d}, 0.0, 1.0));
      Tensor phi_k = softmax_last(rng.normal_tensor({L, 2 * d}, 0.0, 1.0));
      Tensor v = rng.normal_tensor({L, d}, 0.0, 1.0);
      opcount::reset();
      mixers::linear_attention_core(phi_q, phi_k, v, /*normalize=*/true);
      return opcount::multadds();
    }
    case model::MixerKind::hedgemamba: {
      const std::size_t N = 2 * d;
      Tensor lambda = rng.normal_tensor({N, d}, 0.5, 0.2);
      Tensor delta = softplus(rng.normal_tensor({L, 1}, 0.5, 0.2));
      Tensor b = softmax_last(rng.normal_tensor({L, N}, 0.0, 1.0));
      Tensor c = softmax_last(rng.normal_tensor({L, N}, 0.0, 1.0));
      Tensor v = rng.normal_tensor({L, d}, 0.0, 1.0);
      opcount::reset();
      Tensor lam = mixers::decay_from_rate(lambda, delta);
      Tensor b_scaled = mul_colvec(b, delta);
      auto [v_exp, lam_exp] = mixers::expand_for_normalization(v, lam);
      Tensor y2 = mixers::ssm_scan(lam_exp, b_scaled, c, v_exp);
      Tensor num = slice(y2, 1, 0, d);
      Tensor den = slice(y2, 1, d, d);
      div(num, mixers::clamp_min(den, mixers::kNormalizerFloor));
      return opcount::multadds();
    }
  }
  throw std::logic_error("count_core: bad mixer kind");
}

}  // namespace

BenchCurve flop_bench(model::MixerKind kind,
                      const std::vector<std::size_t>& lengths, std::size_t d) {
  if (lengths.size() < 2) {
    throw std::invalid_argument("flop_bench: need at least two lengths");
  }
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] <= lengths[i - 1]) {
      throw std::invalid_argument("flop_bench: lengths must be increasing");
    }
  }
  BenchCurve curve;
  curve.mixer = model::mixer_kind_name(kind);
  Rng rng(91);
  for (std::size_t L : lengths) {
    curve.points.push_back({L, count_core(kind, L, d, rng)});
  }
  curve.exponent = fit_loglog_slope(curve.points);
  return curve;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchCurve>& curves) {
  os << "mixer,L,multadds\n";
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      os << c.mixer << "," << p.length << "," << p.multadds << "\n";
    }
  }
  for (const auto& c : curves) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", c.exponent);
    os << "# exponent," << c.mixer << "," << buf << "\n";
  }
}

// ---- synthetic corpus ----

namespace {

const char* const kWords[] = {
    "the",    "quick",  "river",  "stone",  "light",  "forest", "wind",
    "tower",  "dream",  "silver", "night",  "garden", "voice",  "ember",
    "cloud",  "path",   "meadow", "star",   "harbor", "field",  "echo",
    "crystal", "shadow", "spring", "winter", "amber",  "falcon", "glass",
    "hollow", "ivy",    "lantern", "moss",  "north",  "orchid", "pearl",
    "quiet",  "raven",  "sable",  "thorn",  "umber",
};
constexpr std::size_t kNumWords = sizeof(kWords) / sizeof(kWords[0]);

}  // namespace

std::vector<int> synthesize_corpus(std::size_t n_bytes, std::uint64_t seed) {
  if (n_bytes == 0) throw std::invalid_argument("synthesize_corpus: n_bytes 0");
  Rng rng(seed);
  // sparse word-level Markov chain: each word gets three preferred
  // successors, so transitions are learnable but not deterministic
  std::vector<std::array<std::size_t, 3>> succ(kNumWords);
  for (auto& s : succ) {
    for (auto& v : s) v = rng.below(kNumWords);
  }
  std::string text;
  text.reserve(n_bytes + 64);
  std::size_t word = rng.below(kNumWords);
  std::size_t sentence_left = 5 + rng.below(5);
  std::size_t sentences_in_line = 0;
  while (text.size() < n_bytes) {
    const double u = rng.uniform();
    if (u < 0.04) {
      // noise token: gibberish keeps the entropy floor above zero
      const std::size_t len = 3 + rng.below(4);
      for (std::size_t i = 0; i < len; ++i) {
        text.push_back(static_cast<char>('a' + rng.below(26)));
      }
    } else {
      text += kWords[word];
    }
    const double t = rng.uniform();
    if (t < 0.55) {
      word = succ[word][0];
    } else if (t < 0.8) {
      word = succ[word][1];
    } else if (t < 0.92) {
      word = succ[word][2];
    } else {
      word = rng.below(kNumWords);
    }
    if (--sentence_left == 0) {
      text += ".";
      sentence_left = 5 + rng.below(5);
      if (++sentences_in_line == 8) {
        text.push_back('\n');
        sentences_in_line = 0;
      } else {
        text.push_back(' ');
      }
    } else {
      text.push_back(' ');
    }
  }
  text.resize(n_bytes);
  return tokenize_bytes(text);
}

void generate_corpus_file(const std::string& path, std::size_t n_bytes,
                          std::uint64_t seed) {
  const auto ids = synthesize_corpus(n_bytes, seed);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open corpus output: " + path);
  const std::string text = detokenize(ids);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw std::runtime_error("corpus write failed: " + path);
}

}  // namespace hm::data
