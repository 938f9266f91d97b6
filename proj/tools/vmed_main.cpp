// vmed: train, sample from, evaluate and verify a variational memory
// encoder-decoder.
//
// Exit codes: 0 success, 1 usage/config/path error, 2 non-finite training
// loss, 3 verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vmed/config.hpp"
#include "vmed/corpus.hpp"
#include "vmed/evaluator.hpp"
#include "vmed/model.hpp"
#include "vmed/trainer.hpp"
#include "vmed/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNonFinite = 2;
constexpr int kExitVerify = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every key=value setting shared by config files, checkpoint headers and flags.
struct Setting {
  std::string key;
  std::string help;
};

const std::vector<Setting>& model_settings() {
  static const std::vector<Setting> s = {
      {"embed_dim", "word embedding size"},
      {"hidden_dim", "LSTM hidden size"},
      {"n_layers", "LSTM layers per controller"},
      {"memory_slots", "memory slots"},
      {"slot_width", "memory slot width, even; latent size is half"},
      {"k", "read heads = mixture modes"},
      {"max_context_len", "context tokens kept"},
      {"max_utterance_len", "response tokens kept"},
      {"samples_per_step", "latent samples per step in the bound"},
  };
  return s;
}

const std::vector<Setting>& train_settings() {
  static const std::vector<Setting> s = {
      {"learning_rate", "Adam learning rate"},
      {"clip_norm", "global gradient-norm clip"},
      {"init_std", "initial weight standard deviation"},
      {"anneal_steps", "steps over which the KL weight ramps to 1; 0 = one epoch"},
      {"epochs", "training epochs"},
      {"batch_size", "pairs per update"},
      {"seed", "random seed"},
      {"vocab_cap", "vocabulary size including 4 specials"},
  };
  return s;
}

std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  for (char& c : f) {
    if (c == '_') c = '-';
  }
  return f;
}

class SettingFlags {
 public:
  void attach(CLI::App* app, const std::vector<Setting>& settings) {
    for (const Setting& s : settings) {
      CLI::Option* opt = app->add_option(flag_for(s.key), values_[s.key], s.help);
      options_.emplace_back(s.key, opt);
    }
  }

  // Defaults, then the config file, then explicit flags.
  vmed::KeyValues resolve(const vmed::KeyValues& defaults, const std::string& config_path) const {
    vmed::KeyValues kv = defaults;
    if (!config_path.empty()) {
      const vmed::KeyValues file = vmed::KeyValues::load(config_path);
      for (const auto& [k, v] : file.entries()) {
        if (!known(k)) throw UsageError(config_path + ": unknown setting '" + k + "'");
        kv.set(k, v);
      }
    }
    apply_flags(kv);
    return kv;
  }

  void apply_flags(vmed::KeyValues& kv) const {
    for (const auto& [key, opt] : options_) {
      if (opt->count() > 0) kv.set(key, values_.at(key));
    }
  }

  bool given(const std::string& key) const {
    for (const auto& [k, opt] : options_) {
      if (k == key) return opt->count() > 0;
    }
    return false;
  }

 private:
  bool known(const std::string& key) const {
    for (const auto& [k, opt] : options_) {
      if (k == key) return true;
    }
    return false;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::pair<std::string, CLI::Option*>> options_;
};

vmed::KeyValues default_settings() {
  vmed::KeyValues kv;
  vmed::VmedConfig model;
  model.vocab_size = vmed::kNumSpecial;
  model.write_to(kv);
  vmed::TrainConfig train;
  train.write_to(kv);
  kv.set("vocab_cap", std::size_t{20000});
  return kv;
}

vmed::TokenMode parse_token_mode(const std::string& s) {
  if (s == "greedy") return vmed::TokenMode::kGreedy;
  if (s == "sample") return vmed::TokenMode::kSample;
  throw UsageError("--mode must be greedy or sample, got '" + s + "'");
}

vmed::LatentMode parse_latent_mode(const std::string& s) {
  if (s == "sample") return vmed::LatentMode::kSample;
  if (s == "mean") return vmed::LatentMode::kMean;
  throw UsageError("--latent must be sample or mean, got '" + s + "'");
}

std::string default_vocab_path(const std::string& checkpoint) {
  return (fs::path(checkpoint).parent_path() / "vocab.txt").string();
}

vmed::Vocabulary load_vocab_for(const vmed::VmedModel& model, const std::string& path) {
  vmed::Vocabulary vocab = vmed::Vocabulary::load(path);
  if (vocab.size() != model.config().vocab_size) {
    throw UsageError(path + ": vocabulary has " + std::to_string(vocab.size()) + " entries but the checkpoint expects " +
                     std::to_string(model.config().vocab_size));
  }
  return vocab;
}

vmed::TokenSequence tail(vmed::TokenSequence ids, std::size_t n) {
  if (ids.size() > n) ids.erase(ids.begin(), ids.end() - static_cast<long>(n));
  return ids;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string vocab;
  std::string out = "checkpoints";
  std::string config;
  std::string resume;
  bool quiet = false;
  SettingFlags settings;
};

int cmd_train(TrainArgs& args) {
  if (!fs::exists(args.corpus)) throw UsageError("corpus not found: " + args.corpus);
  const std::vector<vmed::TextPair> text = vmed::read_pairs(args.corpus);
  if (text.empty()) throw UsageError(args.corpus + ": no training pairs");

  std::optional<vmed::Checkpoint> resumed;
  vmed::KeyValues kv;
  if (!args.resume.empty()) {
    resumed.emplace(vmed::load_checkpoint(args.resume));
    kv = default_settings();
    resumed->model.config().write_to(kv);
    resumed->train.write_to(kv);
    args.settings.apply_flags(kv);
  } else {
    kv = args.settings.resolve(default_settings(), args.config);
  }

  fs::create_directories(args.out);
  vmed::Vocabulary vocab;
  if (!args.vocab.empty()) {
    vocab = vmed::Vocabulary::load(args.vocab);
  } else if (resumed) {
    vocab = vmed::Vocabulary::load((fs::path(args.resume).parent_path() / "vocab.txt").string());
  } else {
    vocab = vmed::build_vocab(text, kv.get_size("vocab_cap"));
  }
  vocab.save((fs::path(args.out) / "vocab.txt").string());

  kv.set("vocab_size", vocab.size());
  vmed::VmedConfig model_config;
  vmed::TrainConfig train_config;
  try {
    model_config = vmed::VmedConfig::read_from(kv);
    train_config = vmed::TrainConfig::read_from(kv);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::unique_ptr<vmed::VmedModel> owned;
  vmed::AdamState adam;
  if (resumed) {
    if (resumed->model.config().vocab_size != vocab.size()) throw UsageError("vocabulary does not match checkpoint");
    vmed::KeyValues saved;
    vmed::KeyValues requested;
    resumed->model.config().write_to(saved);
    model_config.write_to(requested);
    if (saved.to_string() != requested.to_string()) throw UsageError("model settings cannot change on --resume");
    owned = std::make_unique<vmed::VmedModel>(std::move(resumed->model));
    adam = std::move(resumed->adam);
  } else {
    owned = std::make_unique<vmed::VmedModel>(model_config);
    vmed::init_params(*owned, train_config.seed, train_config.init_std);
  }
  vmed::VmedModel& model = *owned;

  const std::vector<vmed::ConversationPair> pairs =
      vmed::encode_pairs(vocab, text, model_config.max_context_len, model_config.max_utterance_len);
  for (const auto& p : pairs) {
    if (p.context.empty() || p.response.empty()) {
      throw UsageError(args.corpus + ": every pair needs a nonempty context and response");
    }
  }

  vmed::Trainer trainer(model, pairs, train_config, std::move(adam));
  const fs::path log_path = fs::path(args.out) / "train.log";
  std::ofstream log(log_path, resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw UsageError("cannot write " + log_path.string());

  vmed::TrainHooks hooks;
  hooks.on_step = [&](const vmed::StepRecord& r) { log << vmed::format_log_line(r) << '\n'; };
  hooks.on_epoch_end = [&](const vmed::EpochSummary& e) {
    log.flush();
    char name[32];
    std::snprintf(name, sizeof(name), "epoch-%03zu.ckpt", e.epoch);
    vmed::save_checkpoint((fs::path(args.out) / name).string(), model, trainer.config(), trainer.adam());
    vmed::save_checkpoint((fs::path(args.out) / "last.ckpt").string(), model, trainer.config(), trainer.adam());
    if (!args.quiet) {
      std::cerr << "epoch " << e.epoch << " loss=" << vmed::format_double(e.mean_loss)
                << " recon_nll=" << vmed::format_double(e.mean_recon_nll)
                << " kl_sum=" << vmed::format_double(e.mean_kl_sum) << '\n';
    }
  };
  try {
    trainer.run(hooks);
  } catch (const vmed::NonFiniteLoss& e) {
    log.flush();
    std::cerr << "vmed train: " << e.what() << '\n';
    return kExitNonFinite;
  }
  return 0;
}

// ---- generate --------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint;
  std::string vocab;
  std::string input = "-";
  std::string output = "-";
  std::size_t n_draws = 1;
  std::uint64_t seed = 0;
  std::string mode = "greedy";
  std::string latent = "sample";
  std::size_t max_len = 0;
};

int cmd_generate(const GenerateArgs& args) {
  vmed::Checkpoint ck = vmed::load_checkpoint(args.checkpoint);
  const vmed::Vocabulary vocab =
      load_vocab_for(ck.model, args.vocab.empty() ? default_vocab_path(args.checkpoint) : args.vocab);
  if (args.n_draws < 1) throw UsageError("--n-draws must be >= 1");
  if (args.max_len > ck.model.config().max_utterance_len) {
    throw UsageError("--max-len exceeds the model's max_utterance_len");
  }
  vmed::GenerateOptions options;
  options.token_mode = parse_token_mode(args.mode);
  options.latent_mode = parse_latent_mode(args.latent);
  options.max_len = args.max_len;

  std::ifstream in_file;
  if (args.input != "-") {
    in_file.open(args.input);
    if (!in_file) throw UsageError("cannot open " + args.input);
  }
  std::istream& in = args.input == "-" ? std::cin : in_file;
  std::ofstream out_file;
  if (args.output != "-") {
    out_file.open(args.output, std::ios::trunc);
    if (!out_file) throw UsageError("cannot write " + args.output);
  }
  std::ostream& out = args.output == "-" ? std::cout : out_file;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const vmed::TokenSequence context = tail(vocab.encode(line), ck.model.config().max_context_len);
    if (context.empty()) {
      out << '\n';
      ++line_no;
      continue;
    }
    for (std::size_t d = 0; d < args.n_draws; ++d) {
      options.seed = vmed::draw_seed(args.seed, line_no, d);
      if (d > 0) out << " /*/ ";
      out << vocab.decode(vmed::generate(ck.model, context, options));
    }
    out << '\n';
    ++line_no;
  }
  return 0;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string vocab;
  std::string corpus;
  std::string embeddings;
  bool a_glove = false;
  bool self_reference = false;
  bool per_pair = false;
  std::size_t n_draws = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string mode = "greedy";
  std::string latent = "sample";
};

int cmd_evaluate(const EvaluateArgs& args) {
  if (args.a_glove && args.embeddings.empty()) throw UsageError("--a-glove needs --embeddings FILE");
  if (!args.embeddings.empty() && !fs::exists(args.embeddings)) {
    throw UsageError("embeddings file not found: " + args.embeddings);
  }
  if (!fs::exists(args.corpus)) throw UsageError("corpus not found: " + args.corpus);
  if (args.n_draws < 1) throw UsageError("--n-draws must be >= 1");
  vmed::Checkpoint ck = vmed::load_checkpoint(args.checkpoint);
  const vmed::VmedModel& model = ck.model;
  const vmed::Vocabulary vocab =
      load_vocab_for(model, args.vocab.empty() ? default_vocab_path(args.checkpoint) : args.vocab);
  std::optional<vmed::EmbeddingTable> table;
  if (!args.embeddings.empty()) table = vmed::EmbeddingTable::load(args.embeddings);

  std::vector<vmed::ConversationPair> pairs = vmed::encode_pairs(
      vocab, vmed::read_pairs(args.corpus), model.config().max_context_len, model.config().max_utterance_len);
  std::erase_if(pairs, [](const vmed::ConversationPair& p) { return p.context.empty(); });

  vmed::GenerateOptions base;
  base.token_mode = parse_token_mode(args.mode);
  base.latent_mode = parse_latent_mode(args.latent);
  if (args.self_reference) {
    vmed::GenerateOptions ref;
    ref.token_mode = vmed::TokenMode::kGreedy;
    ref.latent_mode = vmed::LatentMode::kMean;
    for (auto& p : pairs) p.response = vmed::generate(model, p.context, ref);
  }

  vmed::EvalOptions options;
  options.n_draws = args.n_draws;
  options.seed = args.seed;
  options.threads = args.threads;
  if (table) {
    options.vocab = &vocab;
    options.embeddings = &*table;
  }
  const vmed::EvalReport report = vmed::evaluate_stochastic(
      pairs,
      [&](const vmed::TokenSequence& context, std::uint64_t seed) {
        vmed::GenerateOptions o = base;
        o.seed = seed;
        return vmed::generate(model, context, o);
      },
      options);
  std::cout << vmed::format_report(report, args.per_pair, &vocab);
  return 0;
}

// ---- verify ----------------------------------------------------------------

struct VerifyArgs {
  std::uint64_t seed = 1;
  std::size_t cases = 1000;
  std::size_t mc_samples = 1000000;
  std::size_t threads = 1;
  std::string inject_fault;
};

int cmd_verify(const VerifyArgs& args) {
  vmed::VerifyOptions options;
  options.seed = args.seed;
  options.cases = args.cases;
  options.mc_samples = args.mc_samples;
  options.threads = args.threads;
  if (args.inject_fault == "dvar") {
    options.d_var = [](const vmed::mog::DiagGaussian& f, const vmed::mog::MixtureOfGaussians& g) {
      return vmed::mog::d_var(f, g) - 1.0;
    };
  } else if (!args.inject_fault.empty()) {
    throw UsageError("unknown fault '" + args.inject_fault + "'");
  }
  if (args.cases == 0) {
    std::cerr << "warning: --cases 0 checks nothing; passing vacuously\n";
    std::cout << "verify: 0 cases, vacuous pass\n";
    return 0;
  }
  const vmed::VerifyReport report = vmed::run_verify(options);
  std::cout << report.format();
  std::cout << (report.passed() ? "verify: all properties passed\n" : "verify: FAILED\n");
  return report.passed() ? 0 : kExitVerify;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  vmed::SyntheticCorpusOptions options;
  std::string out = "-";
};

int cmd_synth(const SynthArgs& args) {
  const std::string text = vmed::format_pairs(vmed::synthetic_corpus(args.options));
  if (args.out == "-") {
    std::cout << text;
  } else {
    std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + args.out);
    out << text;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational memory encoder-decoder: train, generate, evaluate, verify"};
  app.require_subcommand(1);

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a context<TAB>response corpus");
  train_cmd->add_option("--corpus", train.corpus, "training corpus (TSV)")->required();
  train_cmd->add_option("--vocab", train.vocab, "existing vocab file (default: build from the corpus)");
  train_cmd->add_option("--out", train.out, "output directory for vocab, log and checkpoints")
      ->capture_default_str();
  train_cmd->add_option("--config", train.config, "key=value settings file (flags take precedence)");
  train_cmd->add_option("--resume", train.resume, "continue from this checkpoint");
  train_cmd->add_flag("--quiet", train.quiet, "no per-epoch progress on stderr");
  train.settings.attach(train_cmd, model_settings());
  train.settings.attach(train_cmd, train_settings());

  GenerateArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("generate", "write responses for one context per input line");
  gen_cmd->add_option("--checkpoint", gen.checkpoint, "model checkpoint")->required();
  gen_cmd->add_option("--vocab", gen.vocab, "vocab file (default: vocab.txt next to the checkpoint)");
  gen_cmd->add_option("--input", gen.input, "contexts, one per line ('-' = stdin)")->capture_default_str();
  gen_cmd->add_option("--output", gen.output, "responses ('-' = stdout)")->capture_default_str();
  gen_cmd->add_option("--n-draws", gen.n_draws, "responses per context, separated by ' /*/ '")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "random seed")->capture_default_str();
  gen_cmd->add_option("--mode", gen.mode, "token choice: greedy or sample")->capture_default_str();
  gen_cmd->add_option("--latent", gen.latent, "latent: sample (from the prior) or mean")->capture_default_str();
  gen_cmd->add_option("--max-len", gen.max_len, "maximum response length (0 = model limit)")
      ->capture_default_str();

  EvaluateArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "BLEU-1..4 and A-Glove over a test corpus");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--vocab", eval.vocab, "vocab file (default: vocab.txt next to the checkpoint)");
  eval_cmd->add_option("--corpus", eval.corpus, "test corpus (TSV)")->required();
  eval_cmd->add_flag("--a-glove", eval.a_glove, "also report embedding-average cosine (needs --embeddings)");
  eval_cmd->add_option("--embeddings", eval.embeddings, "word vectors: `token v1 ... vd` per line");
  eval_cmd->add_flag("--self-reference", eval.self_reference,
                     "score against the model's own greedy, mean-latent responses");
  eval_cmd->add_flag("--per-pair", eval.per_pair, "print per-pair scores");
  eval_cmd->add_option("--n-draws", eval.n_draws, "responses averaged per context")->capture_default_str();
  eval_cmd->add_option("--seed", eval.seed, "random seed")->capture_default_str();
  eval_cmd->add_option("--threads", eval.threads, "worker threads")->capture_default_str();
  eval_cmd->add_option("--mode", eval.mode, "token choice: greedy or sample")->capture_default_str();
  eval_cmd->add_option("--latent", eval.latent, "latent: sample or mean")->capture_default_str();

  VerifyArgs ver;
  CLI::App* ver_cmd = app.add_subcommand("verify", "randomized checks of the mixture mathematics");
  ver_cmd->add_option("--seed", ver.seed, "random seed")->capture_default_str();
  ver_cmd->add_option("--cases", ver.cases, "cases per property (Monte-Carlo: cases/5)")->capture_default_str();
  ver_cmd->add_option("--mc-samples", ver.mc_samples, "samples per Monte-Carlo estimate")->capture_default_str();
  ver_cmd->add_option("--threads", ver.threads, "threads for the Monte-Carlo property")->capture_default_str();
  ver_cmd->add_option("--inject-fault", ver.inject_fault, "")->group("");

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic translation corpus");
  synth_cmd->add_option("--pairs", synth.options.n_pairs, "number of pairs")->capture_default_str();
  synth_cmd->add_option("--words", synth.options.n_words, "source words (as many target words)")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth.options.seed, "random seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "output file ('-' = stdout)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*gen_cmd) return cmd_generate(gen);
    if (*eval_cmd) return cmd_evaluate(eval);
    if (*ver_cmd) return cmd_verify(ver);
    if (*synth_cmd) return cmd_synth(synth);
  } catch (const std::exception& e) {
    std::cerr << "vmed: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}
