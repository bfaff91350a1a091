#include "retrodesk/config.hpp"

#include <json.hpp>

#include <cmath>

namespace retrodesk {

std::string to_string(NeighborMode mode) {
  switch (mode) {
    case NeighborMode::kBoth: return "both";
    case NeighborMode::kNeighborsOnly: return "neighbors_only";
    case NeighborMode::kContinuationsOnly: return "continuations_only";
    case NeighborMode::kOff: return "off";
  }
  return "both";
}

NeighborMode neighbor_mode_from_string(const std::string& s) {
  if (s == "both") return NeighborMode::kBoth;
  if (s == "neighbors_only") return NeighborMode::kNeighborsOnly;
  if (s == "continuations_only") return NeighborMode::kContinuationsOnly;
  if (s == "off") return NeighborMode::kOff;
  throw std::invalid_argument("unknown neighbor mode: " + s);
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["vocab"] = vocab;
  j["n"] = n;
  j["m"] = m;
  j["k"] = k;
  j["d"] = d;
  j["d_prime"] = d_prime;
  j["layers"] = layers;
  j["enc_layers"] = enc_layers;
  j["cca_layers"] = cca_layers;
  j["enc_ca_layers"] = enc_ca_layers;
  j["heads"] = heads;
  j["head_dim"] = head_dim;
  j["enc_heads"] = enc_heads;
  j["d_ffw"] = d_ffw;
  j["rel_basis"] = rel_basis;
  j["shared_embeddings"] = shared_embeddings;
  j["neighbor_mode"] = to_string(neighbor_mode);
  j["dropout"] = dropout;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config JSON: ") + e.what());
  }
  ModelConfig c;
  c.vocab = j.at("vocab").get<uint32_t>();
  c.n = j.at("n").get<uint32_t>();
  c.m = j.at("m").get<uint32_t>();
  c.k = j.at("k").get<uint32_t>();
  c.d = j.at("d").get<uint32_t>();
  c.d_prime = j.at("d_prime").get<uint32_t>();
  c.layers = j.at("layers").get<uint32_t>();
  c.enc_layers = j.at("enc_layers").get<uint32_t>();
  c.cca_layers = j.at("cca_layers").get<std::vector<uint32_t>>();
  c.enc_ca_layers = j.at("enc_ca_layers").get<std::vector<uint32_t>>();
  c.heads = j.at("heads").get<uint32_t>();
  c.head_dim = j.at("head_dim").get<uint32_t>();
  c.enc_heads = j.at("enc_heads").get<uint32_t>();
  c.d_ffw = j.at("d_ffw").get<uint32_t>();
  c.rel_basis = j.at("rel_basis").get<uint32_t>();
  c.shared_embeddings = j.at("shared_embeddings").get<bool>();
  c.neighbor_mode =
      neighbor_mode_from_string(j.at("neighbor_mode").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  return c;
}

std::vector<uint32_t> default_cca_layers(uint32_t layers) {
  std::vector<uint32_t> out;
  uint32_t start = layers >= 12 ? 6 : 2;
  for (uint32_t p = start; p <= layers; p += 3) out.push_back(p);
  if (out.empty()) out.push_back(layers);
  return out;
}

double lr_at_step(const TrainConfig& cfg, uint32_t step) {
  if (step < cfg.warmup_steps) {
    double t = static_cast<double>(step) / cfg.warmup_steps;
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * t;
  }
  if (cfg.cosine_steps <= cfg.warmup_steps) return cfg.lr_min;
  double t = static_cast<double>(step - cfg.warmup_steps) /
             (cfg.cosine_steps - cfg.warmup_steps);
  if (t >= 1.0) return cfg.lr_min;
  return cfg.lr_min +
         0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(3.141592653589793 * t));
}

}  // namespace retrodesk
