#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "retrodesk/corpus.hpp"
#include "retrodesk/embedder.hpp"

namespace retrodesk {

// One retrieved value: the neighbour chunk N, its in-document continuation F
// (zero-padded past the document end), provenance, and squared L2 distance.
struct NeighborRecord {
  std::vector<TokenId> neighbor_tokens;      // m ids
  std::vector<TokenId> continuation_tokens;  // m ids
  uint64_t source_doc_id = 0;
  uint32_t source_chunk_index = 0;
  float distance = 0.0f;

  bool operator==(const NeighborRecord&) const = default;
};

struct QueryResult {
  std::vector<NeighborRecord> records;  // ascending (distance, doc, chunk)
  bool short_of_k = false;              // fewer eligible entries than k
};

enum class SearchMode { kExact, kApproximate };

// k-means coarse quantizer. Deterministic given the seed; empty clusters are
// reseeded from the point currently farthest from its centroid.
struct KMeansResult {
  std::vector<float> centroids;     // [c][dim]
  std::vector<uint32_t> assignment; // per point
  uint32_t c = 0;
};
KMeansResult kmeans(const std::vector<float>& points, size_t count,
                    uint32_t dim, uint32_t c, uint32_t max_iters = 25,
                    uint64_t seed = 17);

// The key-value retrieval database. Keys are frozen chunk embeddings, one
// entry per chunk. Immutable once built; concurrent queries are safe.
class ChunkIndex {
 public:
  // F is taken from the next chunk of the same document; chunks of one
  // document must arrive in order. centroid count 0 means round(sqrt(T)).
  // default_k is advisory metadata stored in the header.
  static ChunkIndex build(const std::vector<Chunk>& chunks,
                          const FrozenEmbedder& embedder,
                          uint32_t centroids = 0, uint32_t kmeans_iters = 25,
                          uint32_t default_k = 2);

  QueryResult query(const std::vector<float>& q, uint32_t k,
                    std::optional<uint64_t> exclude_doc_id = std::nullopt,
                    SearchMode mode = SearchMode::kExact,
                    uint32_t nprobe = 8) const;

  size_t size() const { return doc_ids_.size(); }
  uint32_t m() const { return embedder_spec_.m; }
  uint32_t dim() const { return embedder_spec_.d_emb; }
  uint32_t centroid_count() const { return centroid_count_; }
  uint32_t default_k() const { return default_k_; }
  const EmbedderSpec& embedder_spec() const { return embedder_spec_; }
  const std::vector<std::vector<uint32_t>>& posting_lists() const {
    return postings_;
  }
  const float* key(size_t i) const { return keys_.data() + i * dim(); }
  NeighborRecord entry(size_t i, float distance = 0.0f) const;

  void save(const std::string& path) const;
  static ChunkIndex load(const std::string& path);

 private:
  EmbedderSpec embedder_spec_;
  uint32_t centroid_count_ = 0;
  uint32_t default_k_ = 2;
  std::vector<float> keys_;        // [T][d_emb]
  std::vector<TokenId> n_tokens_;  // [T][m]
  std::vector<TokenId> f_tokens_;  // [T][m]
  std::vector<uint64_t> doc_ids_;
  std::vector<uint32_t> chunk_indices_;
  std::vector<float> centroids_;   // [c][d_emb]
  std::vector<std::vector<uint32_t>> postings_;
};

// Per-window, per-chunk neighbour sets, in window order.
struct NeighborFile {
  uint32_t k = 0;
  uint32_t m = 0;
  struct Sequence {
    uint64_t doc_id = 0;
    uint32_t window_index = 0;
    // chunk-major: records[u * k + j]
    std::vector<NeighborRecord> records;
  };
  std::vector<Sequence> sequences;

  const NeighborRecord& at(size_t seq, uint32_t chunk, uint32_t j) const {
    return sequences[seq].records[chunk * k + j];
  }
};

// Retrieves k neighbours for every chunk of every window, excluding the
// window's own document. Queries run in parallel; output order is fixed.
NeighborFile precompute_neighbors(const std::vector<Window>& windows,
                                  const ChunkIndex& index,
                                  const FrozenEmbedder& embedder, uint32_t k,
                                  SearchMode mode = SearchMode::kApproximate,
                                  uint32_t nprobe = 8);

void save_neighbors(const std::string& path, const NeighborFile& file);
NeighborFile load_neighbors(const std::string& path);

// |approx ∩ exact| / (k * |queries|) against the exact scan.
double recall_at_k(const ChunkIndex& index,
                   const std::vector<std::vector<float>>& queries, uint32_t k,
                   uint32_t nprobe);

}  // namespace retrodesk
