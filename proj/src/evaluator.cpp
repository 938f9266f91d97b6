#include "vmed/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "vmed/config.hpp"
#include "vmed/seed.hpp"

namespace vmed {

namespace {

constexpr std::uint64_t kDrawStream = 3;

template <typename T>
double bleu_impl(const std::vector<T>& cand, const std::vector<T>& ref, std::size_t max_n) {
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("sentence_bleu: max_n must be in 1..4");
  if (cand.empty()) return ref.empty() ? 1.0 : 0.0;
  if (ref.empty()) return 0.0;
  const double c = static_cast<double>(cand.size());
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= max_n && n <= cand.size(); ++n) {
    std::map<std::vector<T>, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<T>(ref.begin() + i, ref.begin() + i + n)];
    std::map<std::vector<T>, std::size_t> cand_counts;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++cand_counts[std::vector<T>(cand.begin() + i, cand.begin() + i + n)];
    }
    std::size_t matches = 0;
    for (const auto& [gram, count] : cand_counts) {
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matches += std::min(count, it->second);
    }
    const double total = static_cast<double>(cand.size() - n + 1);
    const double p = matches > 0 ? static_cast<double>(matches) / total : kBleuEpsilon / c;
    log_sum += std::log(p);
    ++orders;
  }
  const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref.size()) / c));
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

std::vector<std::string> to_words(const Vocabulary& vocab, const TokenSequence& ids) {
  std::vector<std::string> out;
  for (TokenId id : ids) out.push_back(vocab.token(id));
  return out;
}

}  // namespace

double sentence_bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                     std::size_t max_n) {
  return bleu_impl(candidate, reference, max_n);
}

double sentence_bleu(const TokenSequence& candidate, const TokenSequence& reference, std::size_t max_n) {
  return bleu_impl(candidate, reference, max_n);
}

void EmbeddingTable::add(const std::string& token, std::vector<double> vector) {
  if (dim_ == 0) dim_ = vector.size();
  if (vector.size() != dim_ || dim_ == 0) {
    throw std::invalid_argument("embedding for '" + token + "' has dimension " + std::to_string(vector.size()) +
                                ", expected " + std::to_string(dim_));
  }
  vectors_[token] = std::move(vector);
}

const std::vector<double>* EmbeddingTable::find(const std::string& token) const {
  const auto it = vectors_.find(token);
  return it == vectors_.end() ? nullptr : &it->second;
}

EmbeddingTable EmbeddingTable::parse(const std::string& text, const std::string& source) {
  EmbeddingTable table;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<double> v;
    std::string field;
    while (fields >> field) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw std::runtime_error(source + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
      }
    }
    try {
      table.add(token, std::move(v));
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (table.size() == 0) throw std::runtime_error(source + ": no embeddings found");
  return table;
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embeddings file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

double embedding_avg_cosine(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                            const EmbeddingTable& table) {
  if (table.size() == 0) throw std::invalid_argument("embedding_avg_cosine: empty table");
  auto mean = [&](const std::vector<std::string>& words) {
    std::vector<double> acc(table.dim(), 0.0);
    for (const std::string& w : words) {
      if (const auto* v = table.find(w)) {
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += (*v)[j];
      }
    }
    if (!words.empty()) {
      for (double& x : acc) x /= static_cast<double>(words.size());
    }
    return acc;
  };
  const std::vector<double> a = mean(candidate);
  const std::vector<double> b = mean(reference);
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::uint64_t draw_seed(std::uint64_t seed, std::size_t pair, std::size_t draw) {
  return derive_seed(seed, kDrawStream, (static_cast<std::uint64_t>(pair) << 20) ^ draw);
}

EvalReport evaluate_stochastic(const std::vector<ConversationPair>& pairs, const ResponseGenerator& generator,
                               const EvalOptions& options) {
  if (options.n_draws < 1) throw std::invalid_argument("evaluate_stochastic: n_draws must be >= 1");
  const bool glove = options.vocab != nullptr && options.embeddings != nullptr;
  EvalReport report;
  report.pairs.resize(pairs.size());

  auto score_pair = [&](std::size_t p) {
    PairScores& out = report.pairs[p];
    double glove_sum = 0.0;
    for (std::size_t d = 0; d < options.n_draws; ++d) {
      TokenSequence response = generator(pairs[p].context, draw_seed(options.seed, p, d));
      for (std::size_t n = 1; n <= 4; ++n) out.bleu[n - 1] += sentence_bleu(response, pairs[p].response, n);
      if (glove) {
        glove_sum += embedding_avg_cosine(to_words(*options.vocab, response),
                                          to_words(*options.vocab, pairs[p].response), *options.embeddings);
      }
      out.draws.push_back(std::move(response));
    }
    const double n = static_cast<double>(options.n_draws);
    for (double& b : out.bleu) b /= n;
    if (glove) out.a_glove = glove_sum / n;
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, pairs.size()));
  if (threads == 1) {
    for (std::size_t p = 0; p < pairs.size(); ++p) score_pair(p);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t p = t; p < pairs.size(); p += threads) score_pair(p);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (std::thread& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  if (!pairs.empty()) {
    const double n = static_cast<double>(pairs.size());
    double glove_sum = 0.0;
    for (const PairScores& s : report.pairs) {
      for (std::size_t k = 0; k < 4; ++k) report.bleu[k] += s.bleu[k];
      if (s.a_glove) glove_sum += *s.a_glove;
    }
    for (double& b : report.bleu) b /= n;
    if (glove) report.a_glove = glove_sum / n;
  }
  return report;
}

std::string format_report(const EvalReport& report, bool per_pair, const Vocabulary* vocab) {
  auto pct = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * x);
    return std::string(buf);
  };
  std::string out;
  out += "pairs=" + std::to_string(report.pairs.size()) + "\n";
  for (std::size_t k = 0; k < 4; ++k) out += "bleu" + std::to_string(k + 1) + "=" + pct(report.bleu[k]) + "\n";
  if (report.a_glove) out += "a_glove=" + format_double(*report.a_glove) + "\n";
  if (per_pair) {
    for (std::size_t p = 0; p < report.pairs.size(); ++p) {
      const PairScores& s = report.pairs[p];
      out += "pair=" + std::to_string(p);
      for (std::size_t k = 0; k < 4; ++k) out += " bleu" + std::to_string(k + 1) + "=" + pct(s.bleu[k]);
      if (s.a_glove) out += " a_glove=" + format_double(*s.a_glove);
      if (vocab != nullptr && !s.draws.empty()) out += " first_draw=\"" + vocab->decode(s.draws.front()) + "\"";
      out += "\n";
    }
  }
  return out;
}

}  // namespace vmed
