#pragma once

// The variational memory encoder-decoder.
//
// An encoder LSTM writes the context into external memory. At every decoding
// step the K read vectors define a mixture-of-Gaussians prior over the latent
// z_t (mean = first half of a read vector, s.d. = softplus of the second
// half, mode weights from the read attention peaks). During training a
// Gaussian posterior built from the mode-weighted reads and an utterance
// encoder over the ground truth supplies z_t; at generation z_t is drawn from
// the prior. The decoder LSTM consumes [embedding(y_{t-1}), z_t], emits
// vocabulary logits, then writes to and reads from memory.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vmed/autodiff.hpp"
#include "vmed/config.hpp"
#include "vmed/memory.hpp"
#include "vmed/mog_math.hpp"
#include "vmed/tokens.hpp"

namespace vmed {

struct VmedConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 96;
  std::size_t hidden_dim = 64;
  std::size_t n_layers = 1;
  mem::MemoryConfig memory{16, 64, 3};
  std::size_t max_context_len = 20;
  std::size_t max_utterance_len = 10;
  // Latent samples per step in the reconstruction expectation (L).
  std::size_t samples_per_step = 1;

  std::size_t modes() const { return memory.n_read_heads; }
  std::size_t latent_dim() const { return memory.slot_width / 2; }
  void validate() const;

  void write_to(KeyValues& kv) const;
  static VmedConfig read_from(const KeyValues& kv);
};

struct NamedParameter {
  std::string name;
  ad::Tensor tensor;
  bool is_bias = false;
};

struct LstmState {
  std::vector<ad::Tensor> h;  // per layer
  std::vector<ad::Tensor> c;

  const ad::Tensor& output() const { return h.back(); }
};

// Stacked LSTM; gate order in the fused weight is input, forget, cell, output.
class Lstm {
 public:
  Lstm(const std::string& name, std::size_t input_dim, std::size_t hidden_dim, std::size_t n_layers,
       std::vector<NamedParameter>& registry);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t hidden_dim() const { return hidden_dim_; }
  std::size_t n_layers() const { return layers_.size(); }

  LstmState zero_state() const;
  LstmState step(const LstmState& prev, const ad::Tensor& input) const;

 private:
  struct Layer {
    ad::Tensor weight;  // (4H, in + H)
    ad::Tensor bias;    // (4H)
  };
  std::size_t input_dim_;
  std::size_t hidden_dim_;
  std::vector<Layer> layers_;
};

struct Affine {
  ad::Tensor weight;
  ad::Tensor bias;  // undefined for bias-free maps

  ad::Tensor operator()(const ad::Tensor& x) const;
};

class VmedModel {
 public:
  // Parameters start at zero; see init_params for the random initialization.
  explicit VmedModel(VmedConfig config);
  VmedModel(const VmedModel&) = delete;
  VmedModel& operator=(const VmedModel&) = delete;
  VmedModel(VmedModel&&) = default;
  VmedModel& operator=(VmedModel&&) = default;

  const VmedConfig& config() const { return config_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  const NamedParameter* find_parameter(const std::string& name) const;

  // One table shared by the encoder, decoder and utterance encoder.
  const ad::Tensor& embedding() const { return embedding_; }
  const Lstm& encoder() const { return encoder_; }
  const Lstm& decoder() const { return decoder_; }
  const Lstm& utterance_encoder() const { return utterance_; }
  const Affine& encoder_interface() const { return encoder_interface_; }
  const Affine& decoder_interface() const { return decoder_interface_; }
  const std::vector<Affine>& bridge() const { return bridge_; }
  const Affine& output() const { return output_; }
  const Affine& posterior_mean() const { return posterior_mean_; }
  const Affine& posterior_stddev() const { return posterior_stddev_; }
  const mem::InterfaceLayout& encoder_layout() const { return encoder_layout_; }
  const mem::InterfaceLayout& decoder_layout() const { return decoder_layout_; }

 private:
  VmedConfig config_;
  std::vector<NamedParameter> params_;
  ad::Tensor embedding_;
  Lstm encoder_;
  Lstm decoder_;
  Lstm utterance_;
  mem::InterfaceLayout encoder_layout_;
  mem::InterfaceLayout decoder_layout_;
  Affine encoder_interface_;
  Affine decoder_interface_;
  std::vector<Affine> bridge_;
  Affine output_;
  Affine posterior_mean_;
  Affine posterior_stddev_;
};

// Standard-normal and uniform draws for latent sampling.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}

  std::vector<double> normal(std::size_t n);
  double uniform();

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

struct EncodedContext {
  mem::MemoryState memory;
  LstmState encoder_state;
};

struct DecodeState {
  LstmState hidden;
  mem::MemoryState memory;
  TokenId prev_token = kBos;
  // Prior for the next step, built from the memory's current reads.
  mog::MixtureTensor prior;
  std::optional<mog::GaussianTensor> posterior;
  ad::Tensor z;  // latent consumed by the step that produced this state
};

struct StepTrace {
  std::size_t step;
  const mog::MixtureTensor& prior;
  const mog::GaussianTensor* posterior;  // null at generation time
  const ad::Tensor& z;
};

using DecodeObserver = std::function<void(const StepTrace&)>;

EncodedContext encode_context(const VmedModel& model, std::span<const TokenId> tokens);

mog::MixtureTensor prior_from_reads(std::span<const ad::Tensor> read_vectors,
                                    std::span<const ad::Tensor> read_weights);

mog::GaussianTensor posterior_from_reads_and_truth(const VmedModel& model,
                                                   std::span<const ad::Tensor> read_vectors,
                                                   std::span<const ad::Tensor> read_weights,
                                                   const ad::Tensor& utterance_hidden);

LstmState step_utterance_encoder(const VmedModel& model, const LstmState& prev, TokenId token);

// Decoder state before the first step: bridged encoder state, BOS, r_0 prior.
DecodeState start_decoding(const VmedModel& model, const EncodedContext& context);

struct DecodeStepResult {
  ad::Tensor logits;
  DecodeState state;
};

DecodeStepResult decode_step(const VmedModel& model, const DecodeState& state, const ad::Tensor& z,
                             TokenId prev_token);

struct ElboTerms {
  ad::Tensor loss;       // alpha * kl_sum + recon_nll
  ad::Tensor recon_nll;  // summed over steps, averaged over latent samples
  ad::Tensor kl_sum;     // summed D_var over steps, averaged over latent samples
};

// Negative timestep-wise lower bound with D_var in place of the KL term.
// Teacher-forced; the target sequence is response followed by EOS.
ElboTerms elbo_loss(const VmedModel& model, std::span<const TokenId> context, std::span<const TokenId> response,
                    NoiseSource& noise, double alpha, const DecodeObserver& observer = {});

enum class TokenMode { kGreedy, kSample };
// kSample draws z from the prior (ancestral); kMean feeds the mixture mean.
enum class LatentMode { kSample, kMean };

struct GenerateOptions {
  TokenMode token_mode = TokenMode::kGreedy;
  LatentMode latent_mode = LatentMode::kSample;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;  // 0 means config.max_utterance_len
};

TokenSequence generate(const VmedModel& model, std::span<const TokenId> context, const GenerateOptions& options,
                       const DecodeObserver& observer = {});

}  // namespace vmed
