#include "retrodesk/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace retrodesk {

SuffixAutomaton::SuffixAutomaton() {
  states_.emplace_back();  // root
}

void SuffixAutomaton::extend(uint32_t symbol) {
  int32_t cur = static_cast<int32_t>(states_.size());
  states_.emplace_back();
  states_[cur].len = states_[last_].len + 1;
  int32_t p = last_;
  while (p != -1 && states_[p].find(symbol) == -1) {
    states_[p].next.emplace_back(symbol, cur);
    p = states_[p].link;
  }
  if (p == -1) {
    states_[cur].link = 0;
  } else {
    int32_t q = states_[p].find(symbol);
    if (states_[p].len + 1 == states_[q].len) {
      states_[cur].link = q;
    } else {
      int32_t clone = static_cast<int32_t>(states_.size());
      states_.push_back(states_[q]);
      states_[clone].len = states_[p].len + 1;
      while (p != -1) {
        auto& nx = states_[p].next;
        bool moved = false;
        for (auto& [sym, to] : nx)
          if (sym == symbol && to == q) {
            to = clone;
            moved = true;
            break;
          }
        if (!moved) break;
        p = states_[p].link;
      }
      states_[q].link = clone;
      states_[cur].link = clone;
    }
  }
  last_ = cur;
}

void SuffixAutomaton::reset_stream() {
  cur_ = 0;
  cur_len_ = 0;
}

uint32_t SuffixAutomaton::feed(uint32_t symbol) {
  while (cur_ != 0 && states_[cur_].find(symbol) == -1) {
    cur_ = states_[cur_].link;
    cur_len_ = states_[cur_].len;
  }
  int32_t to = states_[cur_].find(symbol);
  if (to == -1) {
    cur_ = 0;
    cur_len_ = 0;
  } else {
    cur_ = to;
    ++cur_len_;
  }
  return cur_len_;
}

uint32_t longest_common_run(
    const std::vector<TokenId>& chunk,
    const std::vector<std::vector<TokenId>>& neighbors) {
  SuffixAutomaton sa;
  uint32_t sep = 0x40000000u;
  for (const auto& nb : neighbors) {
    for (TokenId t : nb) sa.extend(t);
    sa.extend(sep++);  // unique separator, outside the token alphabet
  }
  sa.reset_stream();
  uint32_t best = 0;
  for (TokenId t : chunk) best = std::max(best, sa.feed(t));
  return best;
}

double chunk_overlap(const std::vector<TokenId>& chunk,
                     const std::vector<std::vector<TokenId>>& neighbors,
                     uint32_t norm_len) {
  if (chunk.empty() || norm_len == 0) return 0.0;
  uint32_t s = longest_common_run(chunk, neighbors);
  double r = static_cast<double>(s) / norm_len;
  return r > 1.0 ? 1.0 : r;
}

BpbPoint filtered_bpb(const std::vector<EvalRecord>& records, double alpha) {
  BpbPoint pt;
  pt.alpha = alpha;
  double bits = 0.0;
  for (const auto& r : records) {
    if (r.overlap <= alpha) {
      bits += r.loss_bits;
      pt.bytes += r.byte_count;
      ++pt.chunks;
    }
  }
  if (pt.bytes == 0) return pt;  // undefined; reported as a curve gap
  pt.bpb = bits / static_cast<double>(pt.bytes);
  pt.defined = true;
  return pt;
}

std::vector<uint64_t> overlap_histogram(
    const std::vector<EvalRecord>& records) {
  std::vector<uint64_t> bins(8, 0);
  for (const auto& r : records) {
    int b = static_cast<int>(r.overlap * 8.0);
    if (b > 7) b = 7;
    if (b < 0) b = 0;
    ++bins[static_cast<size_t>(b)];
  }
  return bins;
}

std::vector<double> knnlm_mix(
    const std::vector<double>& lm_probs,
    const std::vector<std::pair<TokenId, float>>& hits,
    const KnnLmParams& params, bool* fell_back) {
  if (fell_back) *fell_back = false;
  if (hits.empty() || params.lambda == 0.0) {
    if (fell_back && params.lambda > 0.0) *fell_back = true;
    return lm_probs;
  }
  std::vector<double> out(lm_probs.size(), 0.0);
  // Stable normalisation: subtract the min distance before exponentiating.
  double dmin = hits[0].second;
  for (const auto& [tok, d] : hits) dmin = std::min(dmin, double(d));
  double z = 0.0;
  for (const auto& [tok, d] : hits) {
    if (tok >= out.size())
      throw std::invalid_argument("knnlm_mix: hit token out of range");
    double w = std::exp(-params.alpha * (double(d) - dmin));
    out[tok] += w;
    z += w;
  }
  const double lam = params.lambda;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = lam * out[i] / z + (1.0 - lam) * lm_probs[i];
  return out;
}

double knnlm_perplexity(const std::vector<KnnPoint>& points, double lambda,
                        double alpha) {
  double total = 0.0;
  for (const auto& pt : points) {
    double p_knn = 0.0;
    if (!pt.hits.empty() && lambda > 0.0) {
      double dmin = pt.hits[0].second;
      for (const auto& [tok, d] : pt.hits) dmin = std::min(dmin, double(d));
      double z = 0.0, hit_mass = 0.0;
      for (const auto& [tok, d] : pt.hits) {
        double w = std::exp(-alpha * (double(d) - dmin));
        z += w;
        if (tok == pt.target) hit_mass += w;
      }
      p_knn = hit_mass / z;
    }
    double p = pt.hits.empty() ? pt.lm_prob_target
                               : lambda * p_knn + (1.0 - lambda) * pt.lm_prob_target;
    total += -std::log(std::max(p, 1e-300));
  }
  return std::exp(total / std::max<size_t>(points.size(), 1));
}

KnnLmParams tune_knnlm(const std::vector<KnnPoint>& points, uint32_t k,
                       double alpha0, std::ostream* trace) {
  if (alpha0 <= 0.0) {
    // Heuristic starting point: inverse standard deviation of the observed
    // distances.
    double sum = 0.0, sq = 0.0;
    size_t n = 0;
    for (const auto& pt : points)
      for (const auto& [tok, d] : pt.hits) {
        sum += d;
        sq += double(d) * d;
        ++n;
      }
    if (n > 1) {
      double mean = sum / n;
      double var = std::max(sq / n - mean * mean, 1e-12);
      alpha0 = 1.0 / std::sqrt(var);
    } else {
      alpha0 = 1.0;
    }
  }

  KnnLmParams best;
  best.k = k;
  best.alpha = alpha0;
  double best_ppl = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 40; ++i) {
    double lam = static_cast<double>(i) / 40.0;
    double ppl = knnlm_perplexity(points, lam, alpha0);
    if (trace)
      (*trace) << "{\"phase\":\"lambda\",\"lambda\":" << lam
               << ",\"alpha\":" << alpha0 << ",\"ppl\":" << ppl << "}\n";
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best.lambda = lam;
    }
  }
  double best_alpha = alpha0;
  for (int e = -6; e <= 6; ++e) {
    double a = alpha0 * std::pow(2.0, e);
    double ppl = knnlm_perplexity(points, best.lambda, a);
    if (trace)
      (*trace) << "{\"phase\":\"alpha\",\"lambda\":" << best.lambda
               << ",\"alpha\":" << a << ",\"ppl\":" << ppl << "}\n";
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best_alpha = a;
    }
  }
  best.alpha = best_alpha;
  return best;
}

TokenDatastore::TokenDatastore(const std::vector<Document>& docs,
                               const FrozenEmbedder& embedder, uint32_t stride,
                               uint32_t centroids)
    : dim_(embedder.spec().d_emb) {
  const uint32_t m = embedder.spec().m;
  if (stride == 0) stride = 1;
  // Collect (context window, next token) pairs.
  struct Slot {
    const Document* doc;
    size_t t;
  };
  std::vector<Slot> slots;
  for (const auto& doc : docs)
    for (size_t t = m - 1; t + 1 < doc.tokens.size(); t += stride)
      slots.push_back({&doc, t});
  if (slots.empty())
    throw std::invalid_argument("TokenDatastore: corpus too small");
  keys_.resize(slots.size() * dim_);
  values_.resize(slots.size());
  parallel_for(static_cast<int64_t>(slots.size()), [&](int64_t i) {
    const auto& s = slots[i];
    std::vector<TokenId> window(s.doc->tokens.begin() + (s.t + 1 - m),
                                s.doc->tokens.begin() + (s.t + 1));
    auto e = embedder.embed_chunk(window);
    std::copy(e.begin(), e.end(), keys_.begin() + i * dim_);
    values_[i] = s.doc->tokens[s.t + 1];
  });
  uint32_t c = centroids;
  if (c == 0)
    c = static_cast<uint32_t>(
        std::lround(std::sqrt(static_cast<double>(slots.size()))));
  if (c == 0) c = 1;
  auto km = kmeans(keys_, slots.size(), dim_, c, 25,
                   embedder.spec().seed ^ 0x70cced5ull);
  centroid_count_ = km.c;
  centroids_ = std::move(km.centroids);
  postings_.assign(km.c, {});
  for (size_t i = 0; i < slots.size(); ++i)
    postings_[km.assignment[i]].push_back(static_cast<uint32_t>(i));
}

std::vector<std::pair<TokenId, float>> TokenDatastore::query(
    const std::vector<float>& q, uint32_t k, uint32_t nprobe) const {
  if (q.size() != dim_)
    throw std::invalid_argument("TokenDatastore::query: dimension mismatch");
  if (nprobe == 0) nprobe = 1;
  if (nprobe > centroid_count_) nprobe = centroid_count_;
  struct Cand {
    double dist;
    uint32_t idx;
  };
  std::vector<Cand> cents(centroid_count_);
  for (uint32_t j = 0; j < centroid_count_; ++j)
    cents[j] = {squared_l2(q.data(),
                           centroids_.data() + static_cast<size_t>(j) * dim_,
                           dim_),
                j};
  std::sort(cents.begin(), cents.end(), [](const Cand& a, const Cand& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.idx < b.idx);
  });
  std::vector<Cand> cands;
  for (uint32_t p = 0; p < nprobe; ++p)
    for (uint32_t i : postings_[cents[p].idx])
      cands.push_back({squared_l2(q.data(), keys_.data() + i * dim_, dim_),
                       i});
  auto cmp = [](const Cand& a, const Cand& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.idx < b.idx);
  };
  if (cands.size() > k) {
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end(), cmp);
    cands.resize(k);
  } else {
    std::sort(cands.begin(), cands.end(), cmp);
  }
  std::vector<std::pair<TokenId, float>> out;
  out.reserve(cands.size());
  for (const auto& c : cands)
    out.emplace_back(values_[c.idx], static_cast<float>(c.dist));
  return out;
}

double TokenDatastore::key_norm_stddev() const {
  size_t n = values_.size();
  double sum = 0.0, sq = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (uint32_t j = 0; j < dim_; ++j) {
      double v = keys_[i * dim_ + j];
      norm += v * v;
    }
    norm = std::sqrt(norm);
    sum += norm;
    sq += norm * norm;
  }
  double mean = sum / n;
  return std::sqrt(std::max(sq / n - mean * mean, 0.0));
}

}  // namespace retrodesk
