#include "vmed/memory.hpp"

#include <stdexcept>
#include <string>

namespace vmed::mem {

namespace {

constexpr double kInitialCell = 1e-6;
constexpr double kCosineEps = 1e-8;

void check_width(const char* op, const ad::Tensor& v, std::size_t width) {
  if (v.rank() != 1 || v.size() != width) {
    throw ad::ShapeError(std::string(op) + ": expected vector of width " + std::to_string(width) + ", got " +
                         ad::shape_str(v.shape()));
  }
}

ad::Tensor outer(const ad::Tensor& u, const ad::Tensor& v) {
  return ad::matmul(ad::reshape(u, {u.size(), 1}), ad::reshape(v, {1, v.size()}));
}

}  // namespace

void MemoryConfig::validate() const {
  if (slot_width == 0 || slot_width % 2 != 0) {
    throw std::invalid_argument("memory: slot_width must be even and positive, got " + std::to_string(slot_width));
  }
  if (n_read_heads < 1) throw std::invalid_argument("memory: need at least one read head");
  if (n_slots < n_read_heads) {
    throw std::invalid_argument("memory: n_slots (" + std::to_string(n_slots) + ") must be >= read heads (" +
                                std::to_string(n_read_heads) + ")");
  }
}

MemoryState initial_state(const MemoryConfig& config) {
  config.validate();
  MemoryState state;
  state.matrix = ad::Tensor::full({config.n_slots, config.slot_width}, kInitialCell);
  const double uniform = 1.0 / static_cast<double>(config.n_slots);
  for (std::size_t i = 0; i < config.n_read_heads; ++i) {
    state.read_weights.push_back(ad::Tensor::full({config.n_slots}, uniform));
    state.read_vectors.push_back(ad::Tensor::zeros({config.slot_width}));
  }
  state.write_weight = ad::Tensor::full({config.n_slots}, uniform);
  return state;
}

InterfaceLayout::InterfaceLayout(std::size_t slot_width, std::size_t n_read_heads)
    : width_(slot_width), heads_(n_read_heads) {
  if (slot_width == 0) throw std::invalid_argument("InterfaceLayout: slot_width must be positive");
}

std::size_t InterfaceLayout::size() const { return heads_ * (width_ + 1) + 3 * width_ + 1; }

InterfaceVector InterfaceLayout::parse(const ad::Tensor& raw) const {
  check_width("InterfaceLayout::parse", raw, size());
  InterfaceVector out;
  std::size_t at = 0;
  auto take = [&](std::size_t n) {
    ad::Tensor part = ad::slice(raw, at, n);
    at += n;
    return part;
  };
  for (std::size_t i = 0; i < heads_; ++i) {
    ReadHead head;
    head.key = take(width_);
    head.strength = ad::softplus(take(1));
    out.read_heads.push_back(std::move(head));
  }
  out.write.key = take(width_);
  out.write.strength = ad::softplus(take(1));
  out.write.erase = ad::sigmoid(take(width_));
  out.write.add = ad::tanh(take(width_));
  return out;
}

ad::Tensor content_address(const ad::Tensor& matrix, const ad::Tensor& key, const ad::Tensor& strength) {
  if (matrix.rank() != 2) throw ad::ShapeError("content_address: memory must be a matrix");
  check_width("content_address", key, matrix.dim(1));
  if (strength.size() != 1) throw ad::ShapeError("content_address: strength must be a scalar");
  if (strength.item() < 0.0) throw std::invalid_argument("content_address: strength must be >= 0");
  const ad::Tensor dots = ad::matmul(matrix, key);
  const ad::Tensor denom = ad::row_norms(matrix) * ad::l2_norm(key) + kCosineEps;
  return ad::softmax((dots / denom) * strength);
}

MemoryState write(const MemoryState& state, const ad::Tensor& erase, const ad::Tensor& add,
                  const ad::Tensor& weight) {
  const std::size_t width = state.matrix.dim(1);
  check_width("write", erase, width);
  check_width("write", add, width);
  check_width("write", weight, state.matrix.dim(0));
  MemoryState next = state;
  next.matrix = state.matrix * (1.0 - outer(weight, erase)) + outer(weight, add);
  next.write_weight = weight;
  return next;
}

ReadResult read(const MemoryState& state, const InterfaceVector& interface) {
  ReadResult out;
  const ad::Tensor memory_t = ad::transpose(state.matrix);
  for (const ReadHead& head : interface.read_heads) {
    ad::Tensor w = content_address(state.matrix, head.key, head.strength);
    out.read_vectors.push_back(ad::matmul(memory_t, w));
    out.read_weights.push_back(std::move(w));
  }
  return out;
}

ad::Tensor mode_weights(std::span<const ad::Tensor> read_weights) {
  if (read_weights.empty()) throw std::invalid_argument("mode_weights: need at least one read weighting");
  std::vector<ad::Tensor> maxima;
  maxima.reserve(read_weights.size());
  bool all_tiny = true;
  for (const ad::Tensor& w : read_weights) {
    maxima.push_back(ad::max(w));
    all_tiny = all_tiny && maxima.back().item() < 1e-12;
  }
  if (all_tiny) {
    return ad::Tensor::full({read_weights.size()}, 1.0 / static_cast<double>(read_weights.size()));
  }
  const ad::Tensor peaks = ad::concat(maxima);
  return peaks / ad::sum(peaks);
}

MemoryState access(const MemoryState& state, const InterfaceVector& interface) {
  const ad::Tensor w = content_address(state.matrix, interface.write.key, interface.write.strength);
  MemoryState next = write(state, interface.write.erase, interface.write.add, w);
  ReadResult r = read(next, interface);
  next.read_vectors = std::move(r.read_vectors);
  next.read_weights = std::move(r.read_weights);
  return next;
}

}  // namespace vmed::mem
