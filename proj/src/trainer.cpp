#include "vmed/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace vmed {

namespace {

constexpr char kMagic[8] = {'V', 'M', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return value;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }

  bool done() const { return at_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& message) const {
    throw std::runtime_error(source_ + ": " + message);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - at_ < n) fail(std::string("truncated checkpoint while reading ") + what);
  }

  const std::string& bytes_;
  const std::string& source_;
  std::size_t at_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const ad::Shape& shape, std::span<const double> data) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put<std::uint64_t>(out, d);
  for (double x : data) put<double>(out, x);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be > 0");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("config: clip_norm must be > 0");
  if (!(init_std > 0.0)) throw std::invalid_argument("config: init_std must be > 0");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
}

void TrainConfig::write_to(KeyValues& kv) const {
  kv.set("learning_rate", learning_rate);
  kv.set("clip_norm", clip_norm);
  kv.set("init_std", init_std);
  kv.set("anneal_steps", anneal_steps);
  kv.set("epochs", epochs);
  kv.set("batch_size", batch_size);
  kv.set("seed", std::to_string(seed));
}

TrainConfig TrainConfig::read_from(const KeyValues& kv) {
  TrainConfig c;
  c.learning_rate = kv.get_double("learning_rate");
  c.clip_norm = kv.get_double("clip_norm");
  c.init_std = kv.get_double("init_std");
  c.anneal_steps = kv.get_size("anneal_steps");
  c.epochs = kv.get_size("epochs");
  c.batch_size = kv.get_size("batch_size");
  c.seed = kv.get_u64("seed");
  c.validate();
  return c;
}

AdamState AdamState::for_model(const VmedModel& model) {
  AdamState s;
  for (const NamedParameter& p : model.parameters()) {
    s.m.emplace_back(p.tensor.size(), 0.0);
    s.v.emplace_back(p.tensor.size(), 0.0);
  }
  return s;
}

void init_params(VmedModel& model, std::uint64_t seed, double init_std) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  for (NamedParameter& p : model.parameters()) {
    for (double& x : p.tensor.mutable_data()) x = p.is_bias ? 0.0 : normal(rng);
    p.tensor.zero_grad();
  }
}

double clip_gradients(std::span<const std::span<double>> grads, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_gradients: clip_norm must be > 0");
  double sq = 0.0;
  for (std::span<double> g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const double factor = clip_norm / norm;
    for (std::span<double> g : grads) {
      for (double& x : g) x *= factor;
    }
  }
  return norm;
}

double anneal_alpha(std::size_t step, std::size_t anneal_steps) {
  constexpr double kFloor = 1e-3;
  if (anneal_steps == 0) return 1.0;
  const double ramp = static_cast<double>(step) / static_cast<double>(anneal_steps);
  return std::min(1.0, std::max(kFloor, ramp));
}

void adam_update(VmedModel& model, AdamState& state, double learning_rate) {
  auto& params = model.parameters();
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_update: state does not match model");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<double> w = params[i].tensor.mutable_data();
    std::span<const double> g = params[i].tensor.grad();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = AdamState::kBeta1 * m[j] + (1.0 - AdamState::kBeta1) * gj;
      v[j] = AdamState::kBeta2 * v[j] + (1.0 - AdamState::kBeta2) * gj * gj;
      w[j] -= learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + AdamState::kEps);
    }
  }
}

NonFiniteLoss::NonFiniteLoss(std::uint64_t step, double loss)
    : std::runtime_error("non-finite loss (" + format_double(loss) + ") at step " + std::to_string(step)),
      step_(step) {}

std::string format_log_line(const StepRecord& r) {
  return "step=" + std::to_string(r.step) + " epoch=" + std::to_string(r.epoch) + " loss=" + format_double(r.loss) +
         " recon_nll=" + format_double(r.recon_nll) + " kl_sum=" + format_double(r.kl_sum) +
         " alpha=" + format_double(r.alpha);
}

Trainer::Trainer(VmedModel& model, const std::vector<ConversationPair>& pairs, TrainConfig config, AdamState adam)
    : model_(model), pairs_(pairs), config_(config), adam_(std::move(adam)) {
  config_.validate();
  if (pairs_.empty()) throw std::invalid_argument("Trainer: empty training corpus");
  if (adam_.m.empty()) {
    const std::uint64_t step = adam_.step;
    adam_ = AdamState::for_model(model_);
    adam_.step = step;
  }
  if (adam_.m.size() != model_.parameters().size()) {
    throw std::invalid_argument("Trainer: optimizer state does not match the model");
  }
}

std::size_t Trainer::steps_per_epoch() const {
  return (pairs_.size() + config_.batch_size - 1) / config_.batch_size;
}

std::uint64_t Trainer::total_steps() const { return steps_per_epoch() * config_.epochs; }

std::size_t Trainer::effective_anneal_steps() const {
  return config_.anneal_steps == 0 ? steps_per_epoch() : config_.anneal_steps;
}

StepRecord Trainer::step(const TrainHooks& hooks) {
  const std::uint64_t s = adam_.step;
  const std::size_t epoch = static_cast<std::size_t>(s / steps_per_epoch());
  if (epoch_batches_.empty() || cached_epoch_ != epoch) {
    epoch_batches_ =
        batch_indices(pairs_.size(), config_.batch_size, derive_seed(config_.seed, kShuffleStream, epoch), true);
    cached_epoch_ = epoch;
  }
  const std::vector<std::size_t>& rows = epoch_batches_[s % steps_per_epoch()];

  StepRecord rec;
  rec.step = s + 1;
  rec.epoch = epoch + 1;
  rec.alpha = anneal_alpha(static_cast<std::size_t>(s), effective_anneal_steps());

  for (NamedParameter& p : model_.parameters()) p.tensor.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const ConversationPair& pair = pairs_[rows[r]];
    NoiseSource noise(derive_seed(config_.seed, kNoiseStream, s * 65536 + r));
    ad::Tape tape;
    const ElboTerms terms = elbo_loss(model_, pair.context, pair.response, noise, rec.alpha, hooks.observer);
    tape.backward(terms.loss * inv_b);
    rec.loss += terms.loss.item() * inv_b;
    rec.recon_nll += terms.recon_nll.item() * inv_b;
    rec.kl_sum += terms.kl_sum.item() * inv_b;
  }
  if (!std::isfinite(rec.loss)) throw NonFiniteLoss(rec.step, rec.loss);

  std::vector<std::span<double>> grads;
  for (NamedParameter& p : model_.parameters()) {
    std::span<double> g = p.tensor.mutable_grad();
    if (!g.empty()) grads.push_back(g);
  }
  rec.grad_norm = clip_gradients(grads, config_.clip_norm);
  adam_update(model_, adam_, config_.learning_rate);
  if (hooks.on_step) hooks.on_step(rec);
  return rec;
}

std::vector<EpochSummary> Trainer::run(const TrainHooks& hooks) {
  std::vector<EpochSummary> summaries;
  EpochSummary current;
  while (adam_.step < total_steps()) {
    const StepRecord rec = step(hooks);
    if (current.steps == 0) current.epoch = rec.epoch;
    ++current.steps;
    current.mean_loss += rec.loss;
    current.mean_recon_nll += rec.recon_nll;
    current.mean_kl_sum += rec.kl_sum;
    if (adam_.step % steps_per_epoch() == 0) {
      const double n = static_cast<double>(current.steps);
      current.mean_loss /= n;
      current.mean_recon_nll /= n;
      current.mean_kl_sum /= n;
      summaries.push_back(current);
      if (hooks.on_epoch_end) hooks.on_epoch_end(current);
      current = {};
    }
  }
  return summaries;
}

std::string serialize_checkpoint(const VmedModel& model, const TrainConfig& train, const AdamState& adam) {
  const auto& params = model.parameters();
  const bool has_moments = !adam.m.empty();
  if (has_moments && (adam.m.size() != params.size() || adam.v.size() != params.size())) {
    throw std::invalid_argument("serialize_checkpoint: optimizer state does not match the model");
  }
  KeyValues kv;
  model.config().write_to(kv);
  train.write_to(kv);
  kv.set("adam_step", std::to_string(adam.step));
  const std::string header = kv.to_string();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() * (has_moments ? 3 : 1)));
  for (const NamedParameter& p : params) put_tensor(out, p.name, p.tensor.shape(), p.tensor.data());
  if (has_moments) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_tensor(out, "adam.m." + params[i].name, params[i].tensor.shape(), adam.m[i]);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_tensor(out, "adam.v." + params[i].name, params[i].tensor.shape(), adam.v[i]);
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const VmedModel& model, const TrainConfig& train,
                     const AdamState& adam) {
  const std::string bytes = serialize_checkpoint(model, train, adam);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into " + path);
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  Reader in(bytes, source);
  if (in.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) in.fail("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFormatVersion) {
    in.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
            std::to_string(kFormatVersion) + ")");
  }
  const auto header_len = in.get<std::uint64_t>("header length");
  if (header_len > bytes.size()) in.fail("header length exceeds file size");
  const KeyValues kv = KeyValues::parse(in.bytes(static_cast<std::size_t>(header_len), "header"));

  Checkpoint ck{VmedModel(VmedConfig::read_from(kv)), TrainConfig::read_from(kv), AdamState{}};
  ck.adam.step = kv.get_u64("adam_step");
  auto& params = ck.model.parameters();
  std::vector<bool> seen(params.size() * 3, false);
  std::vector<std::vector<double>> m(params.size());
  std::vector<std::vector<double>> v(params.size());

  const auto count = in.get<std::uint32_t>("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.get<std::uint32_t>("tensor name length");
    const std::string name = in.bytes(name_len, "tensor name");
    const auto rank = in.get<std::uint32_t>("tensor rank");
    if (rank > 8) in.fail("tensor " + name + ": implausible rank " + std::to_string(rank));
    ad::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(in.get<std::uint64_t>("tensor dims"));

    std::size_t slot = 0;
    std::string base = name;
    if (name.rfind("adam.m.", 0) == 0) {
      slot = 1;
      base = name.substr(7);
    } else if (name.rfind("adam.v.", 0) == 0) {
      slot = 2;
      base = name.substr(7);
    }
    const auto it = std::find_if(params.begin(), params.end(), [&](const NamedParameter& p) { return p.name == base; });
    if (it == params.end()) in.fail("unknown tensor " + name);
    const std::size_t index = static_cast<std::size_t>(it - params.begin());
    if (shape != it->tensor.shape()) {
      in.fail("tensor " + name + " has shape " + ad::shape_str(shape) + " but the config implies " +
              ad::shape_str(it->tensor.shape()));
    }
    if (seen[index * 3 + slot]) in.fail("duplicate tensor " + name);
    seen[index * 3 + slot] = true;
    std::vector<double> data(ad::numel(shape));
    for (double& x : data) x = in.get<double>("tensor data");
    if (slot == 0) {
      std::copy(data.begin(), data.end(), it->tensor.mutable_data().begin());
    } else {
      (slot == 1 ? m : v)[index] = std::move(data);
    }
  }
  if (!in.done()) in.fail("trailing bytes after the last tensor");

  bool any_moments = false;
  bool all_moments = true;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen[i * 3]) in.fail("missing tensor " + params[i].name);
    any_moments = any_moments || seen[i * 3 + 1] || seen[i * 3 + 2];
    all_moments = all_moments && seen[i * 3 + 1] && seen[i * 3 + 2];
  }
  if (any_moments && !all_moments) in.fail("optimizer state is incomplete");
  if (any_moments) {
    ck.adam.m = std::move(m);
    ck.adam.v = std::move(v);
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path);
}

}  // namespace vmed
