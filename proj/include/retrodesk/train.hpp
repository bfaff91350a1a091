#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "retrodesk/model.hpp"

namespace retrodesk {

// Decoupled weight decay Adam. Moment buffers follow store order; frozen
// parameters are skipped entirely, so their bytes never change.
template <typename S>
class AdamW {
 public:
  explicit AdamW(const ParameterStore<S>& ps) {
    m_.resize(ps.size());
    v_.resize(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
      m_[i].assign(ps.at(i).numel(), S(0));
      v_[i].assign(ps.at(i).numel(), S(0));
    }
  }

  void step(ParameterStore<S>& ps, const TrainConfig& cfg, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t_);
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps.at(i);
      // Moments advance even at lr == 0 so schedules can be probed; frozen
      // tensors are never touched.
      if (ps.is_frozen(i)) continue;
      S* w = p.ptr();
      const S* g = p.gptr();
      auto& m = m_[i];
      auto& v = v_[i];
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        const double gj = g[j];
        m[j] = static_cast<S>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
        v[j] = static_cast<S>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        const double upd =
            mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[j];
        w[j] = static_cast<S>(w[j] - lr * upd);
      }
    }
  }

  uint64_t steps_taken() const { return t_; }

 private:
  std::vector<std::vector<S>> m_, v_;
  uint64_t t_ = 0;
};

template <typename S>
struct BatchItem {
  const std::vector<TokenId>* tokens = nullptr;
  const RetrievedTokens* retrieved = nullptr;  // null in retrieval-off mode
};

// One optimizer step over a batch; returns the mean per-token loss in nats.
// Throws NumericError on a non-finite loss with (step, max |grad|) context.
template <typename S>
double train_step(RetroModel<S>& model, const std::vector<BatchItem<S>>& batch,
                  AdamW<S>& opt, const TrainConfig& cfg, uint32_t step,
                  std::optional<NeighborMode> mode = std::nullopt,
                  SplitMix64* dropout_rng = nullptr) {
  auto& ps = model.params();
  ps.zero_grads();
  double total = 0.0;
  const S inv_b = S(1.0 / batch.size());
  for (const auto& item : batch) {
    Graph<S> g;
    Tensor<S> loss =
        model.loss_graph(g, *item.tokens, item.retrieved, mode, dropout_rng);
    total += static_cast<double>(loss.item());
    Tensor<S> scaled = g.scale(loss, inv_b);
    g.backward(scaled);
  }
  const double mean_loss = total / batch.size();
  if (!std::isfinite(mean_loss)) {
    double max_grad = 0.0;
    for (size_t i = 0; i < ps.size(); ++i)
      for (S gv : *ps.at(i).grad)
        max_grad = std::max(max_grad, std::abs(static_cast<double>(gv)));
    throw NumericError("non-finite loss at step " + std::to_string(step) +
                       ", max |grad| = " + std::to_string(max_grad));
  }
  opt.step(ps, cfg, lr_at_step(cfg, step));
  return mean_loss;
}

struct RetrofitOptions {
  std::vector<uint32_t> cca_layers;     // empty -> default placement
  uint32_t enc_layers = 2;
  std::vector<uint32_t> enc_ca_layers = {1};
  uint32_t enc_heads = 0;  // 0 -> decoder head count
  uint32_t k = 2;
  uint64_t seed = 7;
};

// Extends a retrieval-off checkpoint with frozen base weights and fresh
// encoder/CCA weights (value projections zeroed). The returned model equals
// the base bit-for-bit until the new weights move.
inline std::pair<ModelConfig, ParameterStore<float>> retrofit(
    const ModelConfig& base_cfg, const ParameterStore<float>& base_params,
    const RetrofitOptions& opt = {}) {
  for (const auto& name : base_params.names())
    if (name.rfind("enc.", 0) == 0 || name.find(".cca.") != std::string::npos)
      throw std::invalid_argument(
          "retrofit: base checkpoint already contains retrieval weights");
  ModelConfig cfg = base_cfg;
  cfg.neighbor_mode = NeighborMode::kBoth;
  cfg.cca_layers =
      opt.cca_layers.empty() ? default_cca_layers(cfg.layers) : opt.cca_layers;
  cfg.enc_layers = opt.enc_layers;
  cfg.enc_ca_layers = opt.enc_ca_layers;
  cfg.enc_heads = opt.enc_heads == 0 ? cfg.heads : opt.enc_heads;
  cfg.k = opt.k;
  cfg.validate();

  ParameterStore<float> ps = base_params.clone();
  ps.freeze_all(true);
  RetroModel<float>::add_retrieval_params(cfg, ps, opt.seed);
  return {cfg, ps};
}

// Step-sampled training loop over precomputed windows. When `neighbors` is
// given its sequences must line up one-to-one with `windows`. Writes one
// JSONL record per log_every steps: {step, loss_nats, lr, tokens_seen}.
// `on_step`, when set, runs after every optimizer step (checkpoint cadence).
template <typename S>
double train_loop(RetroModel<S>& model, const std::vector<Window>& windows,
                  const NeighborFile* neighbors, const TrainConfig& cfg,
                  std::optional<NeighborMode> mode = std::nullopt,
                  std::ostream* log = nullptr,
                  const std::function<void(uint32_t)>& on_step = nullptr) {
  cfg.validate();
  if (windows.empty()) throw std::invalid_argument("train_loop: no windows");
  if (neighbors && neighbors->sequences.size() != windows.size())
    throw std::invalid_argument("train_loop: neighbour file misaligned");

  std::vector<RetrievedTokens> retrieved;
  if (neighbors) {
    retrieved.resize(windows.size());
    for (size_t i = 0; i < windows.size(); ++i)
      retrieved[i] = retrieved_from_file(*neighbors, i, cfg.k_train);
  }

  AdamW<S> opt(model.params());
  SplitMix64 pick(cfg.seed);
  SplitMix64 dropout_rng(cfg.seed ^ 0xd70b0d70ull);
  SplitMix64* drop =
      model.config().dropout > 0.0 ? &dropout_rng : nullptr;
  double last_loss = 0.0;
  for (uint32_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<BatchItem<S>> batch(cfg.batch_size);
    for (auto& item : batch) {
      size_t i = pick.next_below(windows.size());
      item.tokens = &windows[i].tokens;
      item.retrieved = neighbors ? &retrieved[i] : nullptr;
    }
    last_loss = train_step(model, batch, opt, cfg, step, mode, drop);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.max_steps)) {
      (*log) << "{\"step\":" << step << ",\"loss_nats\":" << last_loss
             << ",\"lr\":" << lr_at_step(cfg, step) << ",\"tokens_seen\":"
             << static_cast<uint64_t>(step + 1) * cfg.batch_size *
                    windows[0].tokens.size()
             << "}\n";
      log->flush();
    }
    if (on_step) on_step(step);
  }
  return last_loss;
}

}  // namespace retrodesk
