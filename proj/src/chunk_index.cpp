#include "retrodesk/chunk_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace retrodesk {

KMeansResult kmeans(const std::vector<float>& points, size_t count,
                    uint32_t dim, uint32_t c, uint32_t max_iters,
                    uint64_t seed) {
  if (c == 0 || count == 0)
    throw std::invalid_argument("kmeans: empty input or zero centroids");
  if (c > count) c = static_cast<uint32_t>(count);

  KMeansResult res;
  res.c = c;
  res.centroids.resize(static_cast<size_t>(c) * dim);
  res.assignment.assign(count, 0);

  // Init: distinct random points.
  SplitMix64 rng(seed);
  std::vector<size_t> picks;
  picks.reserve(c);
  std::vector<char> used(count, 0);
  while (picks.size() < c) {
    size_t i = rng.next_below(count);
    if (!used[i]) {
      used[i] = 1;
      picks.push_back(i);
    }
  }
  std::sort(picks.begin(), picks.end());
  for (uint32_t j = 0; j < c; ++j)
    std::copy_n(points.data() + picks[j] * dim, dim,
                res.centroids.data() + static_cast<size_t>(j) * dim);

  std::vector<double> dist_to_centroid(count, 0.0);
  for (uint32_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    std::vector<char> changed_flags(count, 0);
    parallel_for(static_cast<int64_t>(count), [&](int64_t i) {
      const float* p = points.data() + static_cast<size_t>(i) * dim;
      double best = std::numeric_limits<double>::infinity();
      uint32_t best_j = 0;
      for (uint32_t j = 0; j < c; ++j) {
        double d = squared_l2(p, res.centroids.data() +
                                     static_cast<size_t>(j) * dim, dim);
        if (d < best) {
          best = d;
          best_j = j;
        }
      }
      if (res.assignment[i] != best_j) changed_flags[i] = 1;
      res.assignment[i] = best_j;
      dist_to_centroid[i] = best;
    });
    for (size_t i = 0; i < count; ++i)
      if (changed_flags[i]) {
        changed = true;
        break;
      }

    // Recompute means.
    std::vector<double> sums(static_cast<size_t>(c) * dim, 0.0);
    std::vector<uint64_t> counts(c, 0);
    for (size_t i = 0; i < count; ++i) {
      uint32_t j = res.assignment[i];
      const float* p = points.data() + i * dim;
      double* s = sums.data() + static_cast<size_t>(j) * dim;
      for (uint32_t t = 0; t < dim; ++t) s[t] += p[t];
      ++counts[j];
    }
    for (uint32_t j = 0; j < c; ++j) {
      if (counts[j] == 0) {
        // Reseed from the farthest point, deterministically.
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < count; ++i)
          if (dist_to_centroid[i] > far_d) {
            far_d = dist_to_centroid[i];
            far = i;
          }
        std::copy_n(points.data() + far * dim, dim,
                    res.centroids.data() + static_cast<size_t>(j) * dim);
        res.assignment[far] = j;
        dist_to_centroid[far] = 0.0;
        changed = true;
        continue;
      }
      float* cj = res.centroids.data() + static_cast<size_t>(j) * dim;
      for (uint32_t t = 0; t < dim; ++t)
        cj[t] = static_cast<float>(sums[static_cast<size_t>(j) * dim + t] /
                                   counts[j]);
    }
    if (!changed && iter > 0) break;
  }

  // Final assignment pass so assignment matches the returned centroids.
  parallel_for(static_cast<int64_t>(count), [&](int64_t i) {
    const float* p = points.data() + static_cast<size_t>(i) * dim;
    double best = std::numeric_limits<double>::infinity();
    uint32_t best_j = 0;
    for (uint32_t j = 0; j < c; ++j) {
      double d = squared_l2(
          p, res.centroids.data() + static_cast<size_t>(j) * dim, dim);
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    res.assignment[i] = best_j;
  });
  return res;
}

ChunkIndex ChunkIndex::build(const std::vector<Chunk>& chunks,
                             const FrozenEmbedder& embedder,
                             uint32_t centroids, uint32_t kmeans_iters,
                             uint32_t default_k) {
  if (chunks.empty())
    throw std::invalid_argument("build_index: empty chunk set");
  const auto& spec = embedder.spec();
  const uint32_t m = spec.m;
  for (const auto& c : chunks)
    if (c.tokens.size() != m)
      throw std::invalid_argument("build_index: chunk length != m");

  ChunkIndex idx;
  idx.embedder_spec_ = spec;
  idx.default_k_ = default_k;
  const size_t T = chunks.size();
  idx.keys_.resize(T * spec.d_emb);
  idx.n_tokens_.resize(T * m);
  idx.f_tokens_.resize(T * m);
  idx.doc_ids_.resize(T);
  idx.chunk_indices_.resize(T);

  parallel_for(static_cast<int64_t>(T), [&](int64_t i) {
    const Chunk& c = chunks[i];
    auto key = embedder.embed_chunk(c.tokens);
    std::copy(key.begin(), key.end(), idx.keys_.begin() + i * spec.d_emb);
    std::copy(c.tokens.begin(), c.tokens.end(),
              idx.n_tokens_.begin() + i * m);
    idx.doc_ids_[i] = c.doc_id;
    idx.chunk_indices_[i] = c.chunk_index;
    // Continuation: the next chunk of the same document, pad at the end.
    TokenId* f = idx.f_tokens_.data() + i * m;
    std::fill_n(f, m, kPadToken);
    size_t next = static_cast<size_t>(i) + 1;
    if (next < T && chunks[next].doc_id == c.doc_id &&
        chunks[next].chunk_index == c.chunk_index + 1)
      std::copy(chunks[next].tokens.begin(), chunks[next].tokens.end(), f);
  });

  uint32_t c = centroids;
  if (c == 0)
    c = static_cast<uint32_t>(
        std::lround(std::sqrt(static_cast<double>(T))));
  if (c == 0) c = 1;
  auto km = kmeans(idx.keys_, T, spec.d_emb, c, kmeans_iters,
                   spec.seed ^ 0xc10057e25ull);
  idx.centroid_count_ = km.c;
  idx.centroids_ = std::move(km.centroids);
  idx.postings_.assign(km.c, {});
  for (size_t i = 0; i < T; ++i)
    idx.postings_[km.assignment[i]].push_back(static_cast<uint32_t>(i));
  return idx;
}

namespace {
struct Cand {
  double dist;
  uint32_t idx;
};
}  // namespace

NeighborRecord ChunkIndex::entry(size_t i, float distance) const {
  NeighborRecord r;
  const uint32_t m_len = m();
  r.neighbor_tokens.assign(n_tokens_.begin() + i * m_len,
                           n_tokens_.begin() + (i + 1) * m_len);
  r.continuation_tokens.assign(f_tokens_.begin() + i * m_len,
                               f_tokens_.begin() + (i + 1) * m_len);
  r.source_doc_id = doc_ids_[i];
  r.source_chunk_index = chunk_indices_[i];
  r.distance = distance;
  return r;
}

QueryResult ChunkIndex::query(const std::vector<float>& q, uint32_t k,
                              std::optional<uint64_t> exclude_doc_id,
                              SearchMode mode, uint32_t nprobe) const {
  if (q.size() != dim())
    throw std::invalid_argument("query: dimension mismatch");
  if (k == 0) throw std::invalid_argument("query: k must be >= 1");

  std::vector<uint32_t> scan;
  const size_t T = size();
  if (mode == SearchMode::kExact) {
    scan.resize(T);
    for (size_t i = 0; i < T; ++i) scan[i] = static_cast<uint32_t>(i);
  } else {
    if (nprobe == 0) nprobe = 1;
    if (nprobe > centroid_count_) nprobe = centroid_count_;
    std::vector<Cand> cd(centroid_count_);
    for (uint32_t j = 0; j < centroid_count_; ++j)
      cd[j] = {squared_l2(q.data(),
                          centroids_.data() + static_cast<size_t>(j) * dim(),
                          dim()),
               j};
    std::sort(cd.begin(), cd.end(), [](const Cand& a, const Cand& b) {
      return a.dist < b.dist || (a.dist == b.dist && a.idx < b.idx);
    });
    for (uint32_t p = 0; p < nprobe; ++p)
      for (uint32_t e : postings_[cd[p].idx]) scan.push_back(e);
  }

  std::vector<Cand> cands;
  cands.reserve(scan.size());
  for (uint32_t i : scan) {
    if (exclude_doc_id && doc_ids_[i] == *exclude_doc_id) continue;
    cands.push_back({squared_l2(q.data(), key(i), dim()), i});
  }
  auto cmp = [&](const Cand& a, const Cand& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (doc_ids_[a.idx] != doc_ids_[b.idx])
      return doc_ids_[a.idx] < doc_ids_[b.idx];
    return chunk_indices_[a.idx] < chunk_indices_[b.idx];
  };
  QueryResult res;
  if (cands.size() > k) {
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end(), cmp);
    cands.resize(k);
  } else {
    std::sort(cands.begin(), cands.end(), cmp);
    res.short_of_k = cands.size() < k;
  }
  res.records.reserve(cands.size());
  for (const auto& cd : cands)
    res.records.push_back(entry(cd.idx, static_cast<float>(cd.dist)));
  return res;
}

NeighborFile precompute_neighbors(const std::vector<Window>& windows,
                                  const ChunkIndex& index,
                                  const FrozenEmbedder& embedder, uint32_t k,
                                  SearchMode mode, uint32_t nprobe) {
  const uint32_t m = index.m();
  NeighborFile file;
  file.k = k;
  file.m = m;
  file.sequences.resize(windows.size());
  for (const auto& win : windows)
    if (win.tokens.size() % m != 0)
      throw std::invalid_argument(
          "precompute_neighbors: window not chunked by m");
  parallel_for(static_cast<int64_t>(windows.size()), [&](int64_t w) {
    const Window& win = windows[w];
    auto& seq = file.sequences[w];
    seq.doc_id = win.doc_id;
    seq.window_index = win.window_index;
    uint32_t l = static_cast<uint32_t>(win.tokens.size() / m);
    seq.records.resize(static_cast<size_t>(l) * k);
    std::vector<TokenId> chunk(m);
    for (uint32_t u = 0; u < l; ++u) {
      std::copy_n(win.tokens.begin() + static_cast<size_t>(u) * m, m,
                  chunk.begin());
      auto q = embedder.embed_chunk(chunk);
      auto res = index.query(q, k, win.doc_id, mode, nprobe);
      for (uint32_t j = 0; j < k; ++j) {
        if (j < res.records.size())
          seq.records[static_cast<size_t>(u) * k + j] =
              std::move(res.records[j]);
        else {
          // Not enough eligible entries: pad with an empty record.
          NeighborRecord pad;
          pad.neighbor_tokens.assign(m, kPadToken);
          pad.continuation_tokens.assign(m, kPadToken);
          pad.source_doc_id = std::numeric_limits<uint64_t>::max();
          pad.source_chunk_index = 0;
          pad.distance = std::numeric_limits<float>::max();
          seq.records[static_cast<size_t>(u) * k + j] = std::move(pad);
        }
      }
    }
  });
  return file;
}

namespace {
constexpr char kIndexMagic[4] = {'R', 'C', 'H', 'X'};
constexpr char kNeighborMagic[4] = {'R', 'N', 'B', 'R'};
constexpr uint32_t kIndexVersion = 1;
constexpr uint32_t kNeighborVersion = 1;
}  // namespace

void ChunkIndex::save(const std::string& path) const {
  auto os = open_out(path);
  write_magic(os, kIndexMagic);
  write_pod<uint32_t>(os, kIndexVersion);
  write_pod<uint32_t>(os, embedder_spec_.m);
  write_pod<uint32_t>(os, default_k_);
  write_pod<uint32_t>(os, embedder_spec_.d_emb);
  write_pod<uint64_t>(os, embedder_spec_.seed);
  write_pod<uint64_t>(os, size());
  write_pod<uint32_t>(os, centroid_count_);
  write_vec(os, centroids_);
  for (const auto& p : postings_) {
    write_pod<uint64_t>(os, p.size());
    write_vec(os, p);
  }
  write_vec(os, keys_);
  write_vec(os, n_tokens_);
  write_vec(os, f_tokens_);
  write_vec(os, doc_ids_);
  write_vec(os, chunk_indices_);
  if (!os) throw FormatError("write failed: " + path);
}

ChunkIndex ChunkIndex::load(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, kIndexMagic, path);
  expect_version(is, kIndexVersion, path);
  ChunkIndex idx;
  idx.embedder_spec_.m = read_pod<uint32_t>(is, path + " m");
  idx.default_k_ = read_pod<uint32_t>(is, path + " default k");
  idx.embedder_spec_.d_emb = read_pod<uint32_t>(is, path + " d_emb");
  idx.embedder_spec_.seed = read_pod<uint64_t>(is, path + " seed");
  uint64_t T = read_pod<uint64_t>(is, path + " entry count");
  idx.centroid_count_ = read_pod<uint32_t>(is, path + " centroid count");
  read_vec(is, idx.centroids_,
           static_cast<size_t>(idx.centroid_count_) * idx.embedder_spec_.d_emb,
           path + " centroids");
  idx.postings_.resize(idx.centroid_count_);
  for (auto& p : idx.postings_) {
    uint64_t len = read_pod<uint64_t>(is, path + " posting length");
    read_vec(is, p, len, path + " posting list");
  }
  read_vec(is, idx.keys_, T * idx.embedder_spec_.d_emb, path + " keys");
  read_vec(is, idx.n_tokens_, T * idx.embedder_spec_.m, path + " N tokens");
  read_vec(is, idx.f_tokens_, T * idx.embedder_spec_.m, path + " F tokens");
  read_vec(is, idx.doc_ids_, T, path + " doc ids");
  read_vec(is, idx.chunk_indices_, T, path + " chunk indices");
  return idx;
}

void save_neighbors(const std::string& path, const NeighborFile& file) {
  auto os = open_out(path);
  write_magic(os, kNeighborMagic);
  write_pod<uint32_t>(os, kNeighborVersion);
  write_pod<uint32_t>(os, file.k);
  write_pod<uint32_t>(os, file.m);
  write_pod<uint64_t>(os, file.sequences.size());
  for (const auto& seq : file.sequences) {
    write_pod<uint64_t>(os, seq.doc_id);
    write_pod<uint32_t>(os, seq.window_index);
    write_pod<uint32_t>(os, static_cast<uint32_t>(seq.records.size()));
    for (const auto& r : seq.records) {
      write_vec(os, r.neighbor_tokens);
      write_vec(os, r.continuation_tokens);
      write_pod<uint64_t>(os, r.source_doc_id);
      write_pod<uint32_t>(os, r.source_chunk_index);
      write_pod<float>(os, r.distance);
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

NeighborFile load_neighbors(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, kNeighborMagic, path);
  expect_version(is, kNeighborVersion, path);
  NeighborFile file;
  file.k = read_pod<uint32_t>(is, path + " k");
  file.m = read_pod<uint32_t>(is, path + " m");
  uint64_t n_seq = read_pod<uint64_t>(is, path + " sequence count");
  file.sequences.resize(n_seq);
  for (auto& seq : file.sequences) {
    seq.doc_id = read_pod<uint64_t>(is, path + " doc id");
    seq.window_index = read_pod<uint32_t>(is, path + " window index");
    uint32_t n_rec = read_pod<uint32_t>(is, path + " record count");
    seq.records.resize(n_rec);
    for (auto& r : seq.records) {
      read_vec(is, r.neighbor_tokens, file.m, path + " N tokens");
      read_vec(is, r.continuation_tokens, file.m, path + " F tokens");
      r.source_doc_id = read_pod<uint64_t>(is, path + " source doc");
      r.source_chunk_index = read_pod<uint32_t>(is, path + " source chunk");
      r.distance = read_pod<float>(is, path + " distance");
    }
  }
  return file;
}

double recall_at_k(const ChunkIndex& index,
                   const std::vector<std::vector<float>>& queries, uint32_t k,
                   uint32_t nprobe) {
  if (queries.empty()) return 1.0;
  std::vector<uint64_t> hits(queries.size(), 0);
  parallel_for(static_cast<int64_t>(queries.size()), [&](int64_t qi) {
    auto exact = index.query(queries[qi], k, std::nullopt, SearchMode::kExact);
    auto approx =
        index.query(queries[qi], k, std::nullopt, SearchMode::kApproximate,
                    nprobe);
    uint64_t h = 0;
    for (const auto& e : exact.records)
      for (const auto& a : approx.records)
        if (e.source_doc_id == a.source_doc_id &&
            e.source_chunk_index == a.source_chunk_index) {
          ++h;
          break;
        }
    hits[qi] = h;
  });
  uint64_t total = 0;
  for (uint64_t h : hits) total += h;
  return static_cast<double>(total) /
         (static_cast<double>(k) * queries.size());
}

}  // namespace retrodesk
