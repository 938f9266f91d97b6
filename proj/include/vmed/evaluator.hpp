#pragma once

// Response metrics: smoothed sentence-level BLEU-1..4 and the cosine of
// averaged word embeddings (A-Glove), plus the n-draw averaging protocol
// for stochastic generators.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmed/corpus.hpp"
#include "vmed/tokens.hpp"

namespace vmed {

inline constexpr double kBleuEpsilon = 0.1;

// Geometric mean of clipped n-gram precisions for n = 1..max_n times the
// brevity penalty min(1, exp(1 - |ref|/|cand|)). An order with no matches
// contributes kBleuEpsilon / |cand|; an order longer than the candidate is
// left out of the mean. An empty candidate scores 0 (1 if the reference is
// empty too).
double sentence_bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                     std::size_t max_n);
double sentence_bleu(const TokenSequence& candidate, const TokenSequence& reference, std::size_t max_n);

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  // Text format: `token v1 ... vd` per line; every line must have the same d.
  static EmbeddingTable load(const std::string& path);
  static EmbeddingTable parse(const std::string& text, const std::string& source = "<memory>");

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  void add(const std::string& token, std::vector<double> vector);
  // Null for out-of-vocabulary tokens (treated as the zero vector).
  const std::vector<double>* find(const std::string& token) const;

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
};

// Cosine between the mean candidate and mean reference vectors; 0 when
// either mean is the zero vector.
double embedding_avg_cosine(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                            const EmbeddingTable& table);

struct PairScores {
  std::array<double, 4> bleu{};  // BLEU-1..4 averaged over draws, in [0, 1]
  std::optional<double> a_glove;
  std::vector<TokenSequence> draws;
};

struct EvalReport {
  std::array<double, 4> bleu{};  // corpus means, in [0, 1]
  std::optional<double> a_glove;
  std::vector<PairScores> pairs;
};

// Produces one response for a context; must be safe to call concurrently
// when threads > 1.
using ResponseGenerator = std::function<TokenSequence(const TokenSequence& context, std::uint64_t seed)>;

struct EvalOptions {
  std::size_t n_draws = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Both must be set for A-Glove.
  const Vocabulary* vocab = nullptr;
  const EmbeddingTable* embeddings = nullptr;
};

// Draw d of pair p uses seed draw_seed(options.seed, p, d), so serial and
// threaded runs agree.
std::uint64_t draw_seed(std::uint64_t seed, std::size_t pair, std::size_t draw);

EvalReport evaluate_stochastic(const std::vector<ConversationPair>& pairs, const ResponseGenerator& generator,
                               const EvalOptions& options);

std::string format_report(const EvalReport& report, bool per_pair, const Vocabulary* vocab = nullptr);

}  // namespace vmed
