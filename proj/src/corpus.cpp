#include "vmed/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace vmed {

namespace {

const char* const kSpecialNames[kNumSpecial] = {"<pad>", "<bos>", "<eos>", "<unk>"};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* name : kSpecialNames) add(name, 0);
}

void Vocabulary::add(const std::string& token, std::size_t count) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(token);
  counts_.push_back(count);
}

Vocabulary Vocabulary::from_counts(const std::map<std::string, std::size_t>& counts, std::size_t cap) {
  if (cap < kNumSpecial) {
    throw std::invalid_argument("vocabulary cap must be at least " + std::to_string(kNumSpecial));
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto& [token, count] : counts) {
    if (std::find(std::begin(kSpecialNames), std::end(kSpecialNames), token) != std::end(kSpecialNames)) continue;
    ranked.emplace_back(token, count);
  }
  // std::map iteration is already lexicographic, so a stable sort on count keeps ties ordered.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  const std::size_t keep = std::min(ranked.size(), cap - kNumSpecial);
  for (std::size_t i = 0; i < keep; ++i) vocab.add(ranked[i].first, ranked[i].second);
  return vocab;
}

Vocabulary Vocabulary::load(const std::string& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kNumSpecial) throw std::runtime_error(path + ": vocab file lacks the special tokens");
  for (std::size_t i = 0; i < kNumSpecial; ++i) {
    if (lines[i] != kSpecialNames[i]) {
      throw std::runtime_error(path + ":" + std::to_string(i + 1) + ": expected " + kSpecialNames[i]);
    }
  }
  Vocabulary vocab;
  for (std::size_t i = kNumSpecial; i < lines.size(); ++i) {
    if (lines[i].empty() || vocab.index_.count(lines[i]) != 0) {
      throw std::runtime_error(path + ":" + std::to_string(i + 1) + ": empty or duplicate token");
    }
    vocab.add(lines[i], 0);
  }
  return vocab;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const std::string& t : tokens_) out += t + "\n";
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << serialize();
  if (!out) throw std::runtime_error("failed writing " + path);
}

TokenId Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence out;
  for (const std::string& t : tokenize(text)) out.push_back(id(t));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& ids) const {
  std::string out;
  for (TokenId i : ids) {
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

ConversationPair Batch::pair(std::size_t row) const {
  ConversationPair p;
  p.context.assign(contexts.at(row).begin(), contexts[row].begin() + static_cast<long>(context_lengths[row]));
  p.response.assign(responses.at(row).begin(), responses[row].begin() + static_cast<long>(response_lengths[row]));
  return p;
}

std::vector<TextPair> parse_pairs(std::string_view text, const std::string& source) {
  std::vector<TextPair> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw std::runtime_error(source + ":" + std::to_string(line_no) + ": expected context<TAB>response");
    }
    out.push_back({std::string(line.substr(0, tab)), std::string(line.substr(tab + 1))});
  }
  return out;
}

std::vector<TextPair> read_pairs(const std::string& path) { return parse_pairs(read_file(path), path); }

Vocabulary build_vocab(const std::vector<TextPair>& pairs, std::size_t cap) {
  std::map<std::string, std::size_t> counts;
  for (const TextPair& p : pairs) {
    for (const std::string& t : tokenize(p.context)) ++counts[t];
    for (const std::string& t : tokenize(p.response)) ++counts[t];
  }
  return Vocabulary::from_counts(counts, cap);
}

Vocabulary build_vocab(const std::string& corpus_path, std::size_t cap) {
  return build_vocab(read_pairs(corpus_path), cap);
}

ConversationPair encode_pair(const Vocabulary& vocab, const TextPair& pair, std::size_t max_context,
                             std::size_t max_response) {
  ConversationPair out{vocab.encode(pair.context), vocab.encode(pair.response)};
  if (out.context.size() > max_context) {
    out.context.erase(out.context.begin(), out.context.end() - static_cast<long>(max_context));
  }
  if (out.response.size() > max_response) out.response.resize(max_response);
  return out;
}

std::vector<ConversationPair> encode_pairs(const Vocabulary& vocab, const std::vector<TextPair>& pairs,
                                           std::size_t max_context, std::size_t max_response) {
  std::vector<ConversationPair> out;
  out.reserve(pairs.size());
  for (const TextPair& p : pairs) out.push_back(encode_pair(vocab, p, max_context, max_response));
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n_pairs, std::size_t batch_size, std::uint64_t seed,
                                                    bool shuffle) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(n_pairs);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    // Fisher-Yates with an explicit draw so the order does not depend on the library's shuffle.
    std::mt19937_64 rng(seed);
    for (std::size_t i = n_pairs; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n_pairs; start += batch_size) {
    const std::size_t end = std::min(n_pairs, start + batch_size);
    out.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return out;
}

std::vector<Batch> batches(const std::vector<ConversationPair>& pairs, std::size_t batch_size, std::uint64_t seed,
                           bool shuffle) {
  std::vector<Batch> out;
  for (const auto& rows : batch_indices(pairs.size(), batch_size, seed, shuffle)) {
    Batch b;
    std::size_t max_c = 0;
    std::size_t max_r = 0;
    for (std::size_t r : rows) {
      max_c = std::max(max_c, pairs[r].context.size());
      max_r = std::max(max_r, pairs[r].response.size());
    }
    for (std::size_t r : rows) {
      TokenSequence c = pairs[r].context;
      TokenSequence y = pairs[r].response;
      b.context_lengths.push_back(c.size());
      b.response_lengths.push_back(y.size());
      c.resize(max_c, kPad);
      y.resize(max_r, kPad);
      b.contexts.push_back(std::move(c));
      b.responses.push_back(std::move(y));
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<TextPair> synthetic_corpus(const SyntheticCorpusOptions& options) {
  if (options.n_words == 0 || options.response_words == 0 || options.min_context < options.response_words ||
      options.max_context < options.min_context) {
    throw std::invalid_argument("synthetic_corpus: inconsistent options");
  }
  std::vector<std::string> source;
  std::vector<std::string> target;
  for (std::size_t i = 0; i < options.n_words; ++i) {
    source.push_back("w" + std::to_string(i));
    target.push_back("t" + std::to_string(i));
  }
  std::mt19937_64 rng(options.seed);
  auto draw = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  std::set<std::vector<std::size_t>> seen_heads;
  std::vector<TextPair> out;
  std::size_t attempts = 0;
  while (out.size() < options.n_pairs) {
    if (++attempts > 1000 * (options.n_pairs + 1)) {
      throw std::invalid_argument("synthetic_corpus: too few words for the requested number of distinct pairs");
    }
    const std::size_t len = options.min_context + draw(options.max_context - options.min_context + 1);
    std::vector<std::size_t> words(len);
    for (std::size_t& w : words) w = draw(options.n_words);
    // Distinct heads keep every response a function of its context.
    std::vector<std::size_t> head(words.begin(), words.begin() + static_cast<long>(options.response_words));
    if (!seen_heads.insert(head).second) continue;
    TextPair p;
    for (std::size_t w : words) p.context += (p.context.empty() ? "" : " ") + source[w];
    for (std::size_t w : head) p.response += (p.response.empty() ? "" : " ") + target[w];
    out.push_back(std::move(p));
  }
  return out;
}

std::string format_pairs(const std::vector<TextPair>& pairs) {
  std::string out;
  for (const TextPair& p : pairs) out += p.context + "\t" + p.response + "\n";
  return out;
}

}  // namespace vmed
