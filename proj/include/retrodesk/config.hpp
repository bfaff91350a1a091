#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "retrodesk/common.hpp"

namespace retrodesk {

// Which halves of each retrieved [N, F] value the decoder may attend.
enum class NeighborMode { kBoth, kNeighborsOnly, kContinuationsOnly, kOff };

std::string to_string(NeighborMode mode);
NeighborMode neighbor_mode_from_string(const std::string& s);

struct ModelConfig {
  uint32_t vocab = kVocabSize;
  uint32_t n = 64;   // sequence length
  uint32_t m = 16;   // chunk length; retrieved values have length r = 2m
  uint32_t k = 2;    // neighbours per chunk at training time
  uint32_t d = 64;        // decoder width
  uint32_t d_prime = 64;  // encoder width
  uint32_t layers = 4;
  uint32_t enc_layers = 2;
  std::vector<uint32_t> cca_layers;     // P, 1-based decoder layers with CCA
  std::vector<uint32_t> enc_ca_layers;  // P_enc, 1-based
  uint32_t heads = 4;
  uint32_t head_dim = 16;
  uint32_t enc_heads = 4;
  uint32_t d_ffw = 256;
  uint32_t rel_basis = 32;  // cosine feature count for positional logits
  bool shared_embeddings = false;
  NeighborMode neighbor_mode = NeighborMode::kBoth;
  double dropout = 0.0;

  uint32_t l() const { return n / m; }
  uint32_t r() const { return 2 * m; }

  void validate() const {
    if (m == 0 || n == 0 || n % m != 0)
      throw std::invalid_argument("ModelConfig: n must be a multiple of m");
    if (layers == 0) throw std::invalid_argument("ModelConfig: layers == 0");
    for (uint32_t p : cca_layers)
      if (p < 1 || p > layers)
        throw std::invalid_argument("ModelConfig: cca layer out of [1, L]");
    for (uint32_t p : enc_ca_layers)
      if (p < 1 || p > enc_layers)
        throw std::invalid_argument("ModelConfig: enc ca layer out of range");
    if (neighbor_mode != NeighborMode::kOff && cca_layers.empty())
      throw std::invalid_argument("ModelConfig: retrieval on but P empty");
    if (shared_embeddings && d != d_prime)
      throw std::invalid_argument(
          "ModelConfig: shared embeddings need d == d_prime");
    if (rel_basis == 0 || rel_basis % 2 != 0)
      throw std::invalid_argument("ModelConfig: rel_basis must be even");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("ModelConfig: dropout out of [0, 1)");
  }

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Default cross-attention placement: every 3rd layer from 6 for deep stacks,
// shifted down proportionally for toy depths.
std::vector<uint32_t> default_cca_layers(uint32_t layers);

struct TrainConfig {
  uint32_t batch_size = 16;
  uint32_t max_steps = 800;
  uint32_t warmup_steps = 40;
  double lr_start = 1e-7;
  double lr_peak = 2e-3;
  double lr_min = 2e-4;
  uint32_t cosine_steps = 800;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  uint64_t seed = 42;
  uint32_t k_train = 2;
  uint32_t log_every = 10;

  void validate() const {
    if (warmup_steps > cosine_steps)
      throw std::invalid_argument("TrainConfig: warmup > cosine length");
    if (!(lr_peak >= lr_min && lr_min > 0.0))
      throw std::invalid_argument("TrainConfig: need peak >= min > 0");
  }
};

// Piecewise schedule: linear ramp over the warmup, then a cosine decay to
// lr_min at cosine_steps, constant afterwards.
double lr_at_step(const TrainConfig& cfg, uint32_t step);

}  // namespace retrodesk
