#include "vmed/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace vmed {

namespace {

ad::Tensor make_param(std::vector<NamedParameter>& registry, std::string name, ad::Shape shape, bool is_bias) {
  ad::Tensor t = ad::Tensor::parameter(shape, std::vector<double>(ad::numel(shape), 0.0));
  registry.push_back({std::move(name), t, is_bias});
  return t;
}

Affine make_affine(std::vector<NamedParameter>& registry, const std::string& name, std::size_t out, std::size_t in,
                   bool with_bias) {
  Affine a;
  a.weight = make_param(registry, name + ".weight", {out, in}, false);
  if (with_bias) a.bias = make_param(registry, name + ".bias", {out}, true);
  return a;
}

void check_token(const VmedConfig& config, TokenId token) {
  if (token >= config.vocab_size) {
    throw std::out_of_range("token id " + std::to_string(token) + " out of range for vocabulary of " +
                            std::to_string(config.vocab_size));
  }
}

void require_positive(std::size_t value, const char* name) {
  if (value < 1) throw std::invalid_argument(std::string("config: ") + name + " must be >= 1");
}

}  // namespace

void VmedConfig::validate() const {
  if (vocab_size < kNumSpecial) {
    throw std::invalid_argument("config: vocab_size must cover the " + std::to_string(kNumSpecial) +
                                " special tokens");
  }
  require_positive(embed_dim, "embed_dim");
  require_positive(hidden_dim, "hidden_dim");
  require_positive(n_layers, "n_layers");
  require_positive(max_context_len, "max_context_len");
  require_positive(max_utterance_len, "max_utterance_len");
  require_positive(samples_per_step, "samples_per_step");
  memory.validate();
}

void VmedConfig::write_to(KeyValues& kv) const {
  kv.set("vocab_size", vocab_size);
  kv.set("embed_dim", embed_dim);
  kv.set("hidden_dim", hidden_dim);
  kv.set("n_layers", n_layers);
  kv.set("memory_slots", memory.n_slots);
  kv.set("slot_width", memory.slot_width);
  kv.set("k", memory.n_read_heads);
  kv.set("max_context_len", max_context_len);
  kv.set("max_utterance_len", max_utterance_len);
  kv.set("samples_per_step", samples_per_step);
}

VmedConfig VmedConfig::read_from(const KeyValues& kv) {
  VmedConfig c;
  c.vocab_size = kv.get_size("vocab_size");
  c.embed_dim = kv.get_size("embed_dim");
  c.hidden_dim = kv.get_size("hidden_dim");
  c.n_layers = kv.get_size("n_layers");
  c.memory.n_slots = kv.get_size("memory_slots");
  c.memory.slot_width = kv.get_size("slot_width");
  c.memory.n_read_heads = kv.get_size("k");
  c.max_context_len = kv.get_size("max_context_len");
  c.max_utterance_len = kv.get_size("max_utterance_len");
  c.samples_per_step = kv.get_size("samples_per_step");
  c.validate();
  return c;
}

Lstm::Lstm(const std::string& name, std::size_t input_dim, std::size_t hidden_dim, std::size_t n_layers,
           std::vector<NamedParameter>& registry)
    : input_dim_(input_dim), hidden_dim_(hidden_dim) {
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t in = l == 0 ? input_dim : hidden_dim;
    const std::string prefix = name + ".l" + std::to_string(l);
    Layer layer;
    layer.weight = make_param(registry, prefix + ".weight", {4 * hidden_dim, in + hidden_dim}, false);
    layer.bias = make_param(registry, prefix + ".bias", {4 * hidden_dim}, true);
    layers_.push_back(std::move(layer));
  }
}

LstmState Lstm::zero_state() const {
  LstmState s;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    s.h.push_back(ad::Tensor::zeros({hidden_dim_}));
    s.c.push_back(ad::Tensor::zeros({hidden_dim_}));
  }
  return s;
}

LstmState Lstm::step(const LstmState& prev, const ad::Tensor& input) const {
  if (input.rank() != 1 || input.size() != input_dim_) {
    throw ad::ShapeError("Lstm::step: expected input of width " + std::to_string(input_dim_) + ", got " +
                         ad::shape_str(input.shape()));
  }
  const std::size_t H = hidden_dim_;
  LstmState next;
  ad::Tensor x = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const ad::Tensor gates = ad::matmul(layers_[l].weight, ad::concat({x, prev.h[l]})) + layers_[l].bias;
    const ad::Tensor i = ad::sigmoid(ad::slice(gates, 0, H));
    const ad::Tensor f = ad::sigmoid(ad::slice(gates, H, H));
    const ad::Tensor g = ad::tanh(ad::slice(gates, 2 * H, H));
    const ad::Tensor o = ad::sigmoid(ad::slice(gates, 3 * H, H));
    ad::Tensor c = f * prev.c[l] + i * g;
    ad::Tensor h = o * ad::tanh(c);
    next.c.push_back(c);
    next.h.push_back(h);
    x = std::move(h);
  }
  return next;
}

ad::Tensor Affine::operator()(const ad::Tensor& x) const {
  ad::Tensor y = ad::matmul(weight, x);
  return bias.defined() ? y + bias : y;
}

VmedModel::VmedModel(VmedConfig config)
    : config_((config.validate(), config)),
      embedding_(make_param(params_, "embedding", {config_.vocab_size, config_.embed_dim}, false)),
      encoder_("encoder", config_.embed_dim, config_.hidden_dim, config_.n_layers, params_),
      decoder_("decoder", config_.embed_dim + config_.latent_dim(), config_.hidden_dim, config_.n_layers, params_),
      utterance_("utterance", config_.embed_dim, config_.hidden_dim, config_.n_layers, params_),
      encoder_layout_(config_.memory.slot_width, 0),
      decoder_layout_(config_.memory.slot_width, config_.modes()) {
  const std::size_t H = config_.hidden_dim;
  const std::size_t W = config_.memory.slot_width;
  encoder_interface_ = make_affine(params_, "encoder_interface", encoder_layout_.size(), H, true);
  decoder_interface_ = make_affine(params_, "decoder_interface", decoder_layout_.size(), H, true);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    bridge_.push_back(make_affine(params_, "bridge.l" + std::to_string(l), 2 * H, 2 * H, true));
  }
  output_ = make_affine(params_, "output", config_.vocab_size, H, true);
  posterior_mean_ = make_affine(params_, "posterior_mean", config_.latent_dim(), W + H, false);
  posterior_stddev_ = make_affine(params_, "posterior_stddev", config_.latent_dim(), W + H, false);
}

const NamedParameter* VmedModel::find_parameter(const std::string& name) const {
  for (const NamedParameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<double> NoiseSource::normal(std::size_t n) {
  std::vector<double> out(n);
  for (double& v : out) v = normal_(rng_);
  return out;
}

double NoiseSource::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

EncodedContext encode_context(const VmedModel& model, std::span<const TokenId> tokens) {
  const VmedConfig& config = model.config();
  if (tokens.empty()) throw std::invalid_argument("encode_context: empty context");
  if (tokens.size() > config.max_context_len) {
    throw std::invalid_argument("encode_context: context of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_context_len " + std::to_string(config.max_context_len));
  }
  EncodedContext out{mem::initial_state(config.memory), model.encoder().zero_state()};
  for (TokenId token : tokens) {
    check_token(config, token);
    out.encoder_state = model.encoder().step(out.encoder_state, ad::embedding_lookup(model.embedding(), token));
    const mem::InterfaceVector iface =
        model.encoder_layout().parse(model.encoder_interface()(out.encoder_state.output()));
    // Write only: reads stay at r_0 so the first decoding prior is the fixed start prior.
    const ad::Tensor w = mem::content_address(out.memory.matrix, iface.write.key, iface.write.strength);
    out.memory = mem::write(out.memory, iface.write.erase, iface.write.add, w);
  }
  return out;
}

mog::MixtureTensor prior_from_reads(std::span<const ad::Tensor> read_vectors,
                                    std::span<const ad::Tensor> read_weights) {
  if (read_vectors.empty() || read_vectors.size() != read_weights.size()) {
    throw std::invalid_argument("prior_from_reads: need matching, nonempty read vectors and weights");
  }
  mog::MixtureTensor prior;
  prior.weights = mem::mode_weights(read_weights);
  for (const ad::Tensor& r : read_vectors) {
    if (r.rank() != 1 || r.size() % 2 != 0) {
      throw ad::ShapeError("prior_from_reads: read vector must have even width, got " + ad::shape_str(r.shape()));
    }
    const std::size_t half = r.size() / 2;
    prior.components.push_back({ad::slice(r, 0, half), ad::softplus(ad::slice(r, half, half))});
  }
  return prior;
}

mog::GaussianTensor posterior_from_reads_and_truth(const VmedModel& model,
                                                   std::span<const ad::Tensor> read_vectors,
                                                   std::span<const ad::Tensor> read_weights,
                                                   const ad::Tensor& utterance_hidden) {
  if (read_vectors.empty() || read_vectors.size() != read_weights.size()) {
    throw std::invalid_argument("posterior_from_reads_and_truth: need matching, nonempty reads");
  }
  const ad::Tensor pi = mem::mode_weights(read_weights);
  ad::Tensor mixed = ad::slice(pi, 0, 1) * read_vectors[0];
  for (std::size_t i = 1; i < read_vectors.size(); ++i) mixed = mixed + ad::slice(pi, i, 1) * read_vectors[i];
  const ad::Tensor joint = ad::concat({mixed, utterance_hidden});
  return {model.posterior_mean()(joint), ad::softplus(model.posterior_stddev()(joint))};
}

LstmState step_utterance_encoder(const VmedModel& model, const LstmState& prev, TokenId token) {
  check_token(model.config(), token);
  return model.utterance_encoder().step(prev, ad::embedding_lookup(model.embedding(), token));
}

DecodeState start_decoding(const VmedModel& model, const EncodedContext& context) {
  const std::size_t H = model.config().hidden_dim;
  DecodeState state;
  for (std::size_t l = 0; l < model.bridge().size(); ++l) {
    const ad::Tensor hc = model.bridge()[l](
        ad::concat({context.encoder_state.h[l], context.encoder_state.c[l]}));
    state.hidden.h.push_back(ad::slice(hc, 0, H));
    state.hidden.c.push_back(ad::slice(hc, H, H));
  }
  state.memory = context.memory;
  state.prev_token = kBos;
  state.prior = prior_from_reads(state.memory.read_vectors, state.memory.read_weights);
  return state;
}

DecodeStepResult decode_step(const VmedModel& model, const DecodeState& state, const ad::Tensor& z,
                             TokenId prev_token) {
  const VmedConfig& config = model.config();
  check_token(config, prev_token);
  if (z.rank() != 1 || z.size() != config.latent_dim()) {
    throw ad::ShapeError("decode_step: latent must have width " + std::to_string(config.latent_dim()) + ", got " +
                         ad::shape_str(z.shape()));
  }
  DecodeStepResult out;
  const ad::Tensor input = ad::concat({ad::embedding_lookup(model.embedding(), prev_token), z});
  out.state.hidden = model.decoder().step(state.hidden, input);
  const ad::Tensor& h = out.state.hidden.output();
  out.logits = model.output()(h);
  out.state.memory = mem::access(state.memory, model.decoder_layout().parse(model.decoder_interface()(h)));
  out.state.prior = prior_from_reads(out.state.memory.read_vectors, out.state.memory.read_weights);
  out.state.prev_token = prev_token;
  out.state.z = z;
  return out;
}

ElboTerms elbo_loss(const VmedModel& model, std::span<const TokenId> context, std::span<const TokenId> response,
                    NoiseSource& noise, double alpha, const DecodeObserver& observer) {
  const VmedConfig& config = model.config();
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("elbo_loss: alpha must lie in [0, 1]");
  if (response.empty()) throw std::invalid_argument("elbo_loss: empty response");
  if (response.size() > config.max_utterance_len) {
    throw std::invalid_argument("elbo_loss: response of " + std::to_string(response.size()) +
                                " tokens exceeds max_utterance_len " + std::to_string(config.max_utterance_len));
  }
  TokenSequence targets(response.begin(), response.end());
  targets.push_back(kEos);
  for (TokenId t : targets) check_token(config, t);

  const EncodedContext encoded = encode_context(model, context);

  // h^u_t depends only on y_{<=t}, so it is shared by every sample path.
  std::vector<ad::Tensor> utterance;
  LstmState hu = model.utterance_encoder().zero_state();
  for (TokenId t : targets) {
    hu = step_utterance_encoder(model, hu, t);
    utterance.push_back(hu.output());
  }

  ad::Tensor recon;
  ad::Tensor kl;
  for (std::size_t path = 0; path < config.samples_per_step; ++path) {
    DecodeState state = start_decoding(model, encoded);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const mog::GaussianTensor posterior = posterior_from_reads_and_truth(
          model, state.memory.read_vectors, state.memory.read_weights, utterance[t]);
      const ad::Tensor kl_t = mog::d_var(posterior, state.prior);
      const ad::Tensor eps = ad::Tensor::vector(noise.normal(config.latent_dim()));
      const ad::Tensor z = mog::reparam_sample(posterior, eps);
      if (observer) observer(StepTrace{t, state.prior, &posterior, z});
      DecodeStepResult step = decode_step(model, state, z, state.prev_token);
      const ad::Tensor nll_t = ad::cross_entropy_with_logits(step.logits, targets[t]);
      recon = recon.defined() ? recon + nll_t : nll_t;
      kl = kl.defined() ? kl + kl_t : kl_t;
      state = std::move(step.state);
      state.posterior = posterior;
      state.prev_token = targets[t];
    }
  }
  const double inv_l = 1.0 / static_cast<double>(config.samples_per_step);
  if (config.samples_per_step > 1) {
    recon = recon * inv_l;
    kl = kl * inv_l;
  }
  return {alpha * kl + recon, recon, kl};
}

TokenSequence generate(const VmedModel& model, std::span<const TokenId> context, const GenerateOptions& options,
                       const DecodeObserver& observer) {
  const VmedConfig& config = model.config();
  const std::size_t max_len = options.max_len == 0 ? config.max_utterance_len : options.max_len;
  if (max_len > config.max_utterance_len) {
    throw std::invalid_argument("generate: max_len exceeds max_utterance_len");
  }
  ad::NoGradGuard no_grad;
  NoiseSource noise(options.seed);
  DecodeState state = start_decoding(model, encode_context(model, context));
  TokenSequence out;
  for (std::size_t t = 0; t < max_len; ++t) {
    const mog::MixtureTensor& prior = state.prior;
    const std::size_t d = config.latent_dim();
    std::vector<double> z(d, 0.0);
    if (options.latent_mode == LatentMode::kMean) {
      for (std::size_t i = 0; i < prior.size(); ++i) {
        const double pi = prior.weights.at(i);
        const auto mu = prior.components[i].mean.data();
        for (std::size_t j = 0; j < d; ++j) z[j] += pi * mu[j];
      }
    } else {
      // Ancestral: pick a mode by weight, then reparameterize within it.
      const double u = noise.uniform();
      std::size_t mode = prior.size() - 1;
      double acc = 0.0;
      for (std::size_t i = 0; i < prior.size(); ++i) {
        acc += prior.weights.at(i);
        if (u < acc) {
          mode = i;
          break;
        }
      }
      const std::vector<double> eps = noise.normal(d);
      const auto mu = prior.components[mode].mean.data();
      const auto sd = prior.components[mode].stddev.data();
      for (std::size_t j = 0; j < d; ++j) z[j] = mu[j] + sd[j] * eps[j];
    }
    const ad::Tensor zt = ad::Tensor::vector(std::move(z));
    if (observer) observer(StepTrace{t, prior, nullptr, zt});
    DecodeStepResult step = decode_step(model, state, zt, state.prev_token);
    const auto logits = step.logits.data();
    TokenId token = 0;
    if (options.token_mode == TokenMode::kGreedy) {
      token = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const double top = *std::max_element(logits.begin(), logits.end());
      std::vector<double> probs(logits.size());
      double total = 0.0;
      for (std::size_t i = 0; i < logits.size(); ++i) total += probs[i] = std::exp(logits[i] - top);
      const double u = noise.uniform() * total;
      double acc = 0.0;
      token = static_cast<TokenId>(logits.size() - 1);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
          token = static_cast<TokenId>(i);
          break;
        }
      }
    }
    if (token == kEos) break;
    out.push_back(token);
    state = std::move(step.state);
    state.prev_token = token;
  }
  return out;
}

}  // namespace vmed
