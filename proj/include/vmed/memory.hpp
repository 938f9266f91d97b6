#pragma once

// Content-addressed external memory: K read heads, one write head, erase/add
// writes. A reduced DNC without temporal links or usage-based allocation.

#include <cstddef>
#include <span>
#include <vector>

#include "vmed/autodiff.hpp"

namespace vmed::mem {

struct MemoryConfig {
  std::size_t n_slots = 16;
  std::size_t slot_width = 64;
  std::size_t n_read_heads = 1;

  // Throws std::invalid_argument on an odd slot width or n_slots < K < 1.
  void validate() const;
};

// Immutable snapshot; every operation returns a new state.
struct MemoryState {
  ad::Tensor matrix;                     // (n_slots, slot_width)
  std::vector<ad::Tensor> read_weights;  // K x (n_slots)
  ad::Tensor write_weight;               // (n_slots)
  std::vector<ad::Tensor> read_vectors;  // K x (slot_width)
};

// Small constant memory, uniform weights, zero read vectors.
MemoryState initial_state(const MemoryConfig& config);

struct ReadHead {
  ad::Tensor key;       // (slot_width)
  ad::Tensor strength;  // (1), >= 0
};

struct WriteHead {
  ad::Tensor key;
  ad::Tensor strength;
  ad::Tensor erase;  // in (0, 1)
  ad::Tensor add;    // in (-1, 1)
};

struct InterfaceVector {
  std::vector<ReadHead> read_heads;
  WriteHead write;
};

// Splits a controller's raw interface output into heads. Layout, in order:
//   for each read head:  key[W], strength[1]
//   write head:          key[W], strength[1], erase[W], add[W]
// Strengths pass through softplus, erase through sigmoid, add through tanh.
class InterfaceLayout {
 public:
  InterfaceLayout(std::size_t slot_width, std::size_t n_read_heads);

  std::size_t size() const;
  std::size_t slot_width() const { return width_; }
  std::size_t n_read_heads() const { return heads_; }
  InterfaceVector parse(const ad::Tensor& raw) const;

 private:
  std::size_t width_;
  std::size_t heads_;
};

// softmax_j(strength * cos(key, M[j])); cos uses an epsilon-guarded denominator.
ad::Tensor content_address(const ad::Tensor& matrix, const ad::Tensor& key, const ad::Tensor& strength);

// M'[j] = M[j] * (1 - w_j * erase) + w_j * add.
MemoryState write(const MemoryState& state, const ad::Tensor& erase, const ad::Tensor& add,
                  const ad::Tensor& weight);

struct ReadResult {
  std::vector<ad::Tensor> read_vectors;
  std::vector<ad::Tensor> read_weights;
};

ReadResult read(const MemoryState& state, const InterfaceVector& interface);

// pi_i = max(w_i) / sum_k max(w_k); uniform when every maximum is below 1e-12.
ad::Tensor mode_weights(std::span<const ad::Tensor> read_weights);

// One controller access: content-addressed write, then read from the result.
MemoryState access(const MemoryState& state, const InterfaceVector& interface);

}  // namespace vmed::mem
