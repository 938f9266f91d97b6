#pragma once

// Conversation ingestion: tokenization, vocabulary, truncation and batching.
//
// Corpus file: UTF-8, one `context<TAB>response` pair per line; multi-turn
// contexts join utterances with " </s> ". Blank lines are skipped.
// Vocab file: one token per line, id = line index, the first four lines are
// <pad> <bos> <eos> <unk>.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vmed/tokens.hpp"

namespace vmed {

std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  // Specials only.
  Vocabulary();

  // Keeps the cap - 4 most frequent tokens; ties go to the lexicographically smaller one.
  static Vocabulary from_counts(const std::map<std::string, std::size_t>& counts, std::size_t cap);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;
  std::string serialize() const;

  std::size_t size() const { return tokens_.size(); }
  TokenId id(const std::string& token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  std::size_t frequency(TokenId id) const { return id < counts_.size() ? counts_[id] : 0; }

  TokenSequence encode(std::string_view text) const;
  std::string decode(const TokenSequence& ids) const;

 private:
  void add(const std::string& token, std::size_t count);

  std::vector<std::string> tokens_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, TokenId> index_;
};

struct TextPair {
  std::string context;
  std::string response;
};

struct ConversationPair {
  TokenSequence context;
  TokenSequence response;
};

struct Batch {
  std::size_t size() const { return context_lengths.size(); }
  ConversationPair pair(std::size_t row) const;

  std::vector<TokenSequence> contexts;  // rows padded with kPad to the batch maximum
  std::vector<std::size_t> context_lengths;
  std::vector<TokenSequence> responses;
  std::vector<std::size_t> response_lengths;
};

// Throws std::runtime_error naming the line for a line without a TAB.
std::vector<TextPair> read_pairs(const std::string& path);
std::vector<TextPair> parse_pairs(std::string_view text, const std::string& source = "<memory>");

Vocabulary build_vocab(const std::vector<TextPair>& pairs, std::size_t cap);
Vocabulary build_vocab(const std::string& corpus_path, std::size_t cap);

// Context keeps its last max_context tokens; response keeps its first max_response.
ConversationPair encode_pair(const Vocabulary& vocab, const TextPair& pair, std::size_t max_context,
                             std::size_t max_response);
std::vector<ConversationPair> encode_pairs(const Vocabulary& vocab, const std::vector<TextPair>& pairs,
                                           std::size_t max_context, std::size_t max_response);

// Pair indices in batch order; shuffled deterministically from seed.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n_pairs, std::size_t batch_size, std::uint64_t seed,
                                                    bool shuffle);
std::vector<Batch> batches(const std::vector<ConversationPair>& pairs, std::size_t batch_size, std::uint64_t seed,
                           bool shuffle);

// A toy translation task: the response spells the first few context words in
// a second "language". Learnable exactly, so overfitting is measurable.
struct SyntheticCorpusOptions {
  std::size_t n_pairs = 50;
  std::size_t n_words = 16;          // source words; as many target words are added
  std::size_t min_context = 3;
  std::size_t max_context = 6;
  std::size_t response_words = 3;
  std::uint64_t seed = 1;
};

std::vector<TextPair> synthetic_corpus(const SyntheticCorpusOptions& options);
std::string format_pairs(const std::vector<TextPair>& pairs);

}  // namespace vmed
