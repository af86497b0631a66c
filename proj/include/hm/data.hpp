#pragma once

// Corpus ingestion (byte-level tokens), deterministic batching, perplexity
// evaluation and the counted-operation complexity benchmark.

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "hm/model.hpp"

namespace hm::data {

std::vector<int> tokenize_bytes(std::string_view text);
std::string detokenize(const std::vector<int>& ids);

struct Corpus {
  std::vector<int> ids;    // byte values 0..255
  std::size_t train_end;   // val split is the tail [train_end, ids.size())

  std::size_t train_size() const { return train_end; }
  std::size_t val_size() const { return ids.size() - train_end; }
};

// Concatenates raw bytes from the given files; the validation split is a
// fixed fraction at the tail.
Corpus load_corpus(const std::vector<std::string>& paths,
                   double val_fraction = 0.01);
Corpus corpus_from_ids(std::vector<int> ids, double val_fraction = 0.01);

struct Batch {
  std::vector<std::vector<int>> inputs;   // [batch][seq_len]
  std::vector<std::vector<int>> targets;  // inputs shifted by one
};

// Samples windows uniformly (with replacement) from the train region using
// a seeded generator: same seed, same batch sequence.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, std::size_t seq_len,
               std::size_t batch_size, std::uint64_t seed);
  Batch next();
  std::size_t max_offset() const { return max_offset_; }

 private:
  const Corpus* corpus_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::size_t max_offset_;  // offsets drawn from [0, max_offset_)
  Rng rng_;
};

// exp of the mean next-token NLL over non-overlapping windows covering a
// fixed prefix of the validation region. max_windows = 0 evaluates the
// whole region. Deterministic; independent of any batch size.
double perplexity(const model::Model& m, const Corpus& corpus,
                  std::size_t seq_len, std::size_t max_windows = 0);

struct BenchPoint {
  std::size_t length;
  unsigned long long multadds;
};

struct BenchCurve {
  std::string mixer;
  std::vector<BenchPoint> points;
  double exponent;  // log-log least-squares slope
};

// Counts the scalar multiply-adds of the sequence-mixing core (inputs
// already projected, one head of width d) at each length. Projections are
// position-wise and identical across mixers, so they are excluded.
BenchCurve flop_bench(model::MixerKind kind, const std::vector<std::size_t>& lengths,
                      std::size_t d);

void write_bench_csv(std::ostream& os, const std::vector<BenchCurve>& curves);

// Synthetic training corpus: Markov-chained words with injected noise
// tokens. Deterministic for a given seed.
std::vector<int> synthesize_corpus(std::size_t n_bytes, std::uint64_t seed);
void generate_corpus_file(const std::string& path, std::size_t n_bytes,
                          std::uint64_t seed);

}  // namespace hm::data
