#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/embedding.hpp"
#include "qembed/quantizer.hpp"
#include "qembed/random.hpp"

namespace qembed {

enum class Dtype : std::uint8_t { Int8 = 0, Binary = 1 };

struct IndexBuildOptions {
  // Appendix-C-style symmetry breaking: jitter exact duplicate rows so that
  // tied corpus documents rank deterministically but distinctly.
  bool dedup_noise = false;
  std::uint64_t seed = 0;
};

/// Immutable quantized vector store with exact search. Binary rows are
/// bit-packed 8 per byte, LSB first, +1 encoded as bit 1, pad bits 0.
class Index {
 public:
  static Index build(const std::vector<QuantizedEmbedding>& rows,
                     std::vector<std::string> ids,
                     const IndexBuildOptions& opt = {}) {
    Index idx;
    idx.dtype_ = Dtype::Int8;
    idx.init_ids(rows.size(), std::move(ids));
    if (rows.empty()) throw std::invalid_argument("index: no vectors");
    idx.dim_ = rows.front().dim();
    idx.count_ = rows.size();
    idx.payload_.reserve(idx.count_ * idx.dim_);
    for (const auto& r : rows) {
      if (r.dim() != idx.dim_) throw std::invalid_argument("index: dimension mismatch");
      idx.payload_.insert(idx.payload_.end(), r.values.begin(), r.values.end());
    }
    if (opt.dedup_noise) idx.jitter_duplicates(opt.seed);
    idx.finish_int8();
    return idx;
  }

  static Index build(const std::vector<BinaryEmbedding>& rows,
                     std::vector<std::string> ids,
                     const IndexBuildOptions& opt = {}) {
    Index idx;
    idx.dtype_ = Dtype::Binary;
    idx.init_ids(rows.size(), std::move(ids));
    if (rows.empty()) throw std::invalid_argument("index: no vectors");
    idx.dim_ = rows.front().dim();
    idx.count_ = rows.size();
    const std::size_t rb = idx.row_bytes();
    idx.payload_.assign(idx.count_ * rb, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].dim() != idx.dim_) throw std::invalid_argument("index: dimension mismatch");
      for (std::size_t j = 0; j < idx.dim_; ++j) {
        if (rows[i].values[j] > 0) {
          idx.payload_[i * rb + j / 8] |= static_cast<std::int8_t>(1u << (j % 8));
        }
      }
    }
    if (opt.dedup_noise) idx.jitter_duplicates(opt.seed);
    return idx;
  }

  Dtype dtype() const { return dtype_; }
  std::size_t dim() const { return dim_; }
  std::size_t count() const { return count_; }
  const std::string& id(std::size_t row) const { return ids_[row]; }
  const std::vector<std::int8_t>& payload() const { return payload_; }

  std::size_t row_bytes() const {
    return dtype_ == Dtype::Int8 ? dim_ : (dim_ + 7) / 8;
  }

  QuantizedEmbedding int8_row(std::size_t i) const {
    QuantizedEmbedding e;
    e.values.assign(payload_.begin() + i * dim_, payload_.begin() + (i + 1) * dim_);
    return e;
  }

  BinaryEmbedding binary_row(std::size_t i) const {
    BinaryEmbedding e;
    e.values.resize(dim_);
    const std::size_t rb = row_bytes();
    for (std::size_t j = 0; j < dim_; ++j) {
      const auto byte = static_cast<std::uint8_t>(payload_[i * rb + j / 8]);
      e.values[j] = (byte >> (j % 8)) & 1u ? 1 : -1;
    }
    return e;
  }

 private:
  void init_ids(std::size_t count, std::vector<std::string> ids) {
    if (ids.empty()) {
      ids.reserve(count);
      for (std::size_t i = 0; i < count; ++i) ids.push_back(std::to_string(i));
    }
    if (ids.size() != count) throw std::invalid_argument("index: id count mismatch");
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size()) throw std::invalid_argument("index: duplicate ids");
    ids_ = std::move(ids);
  }

  void jitter_duplicates(std::uint64_t seed) {
    const std::size_t rb = row_bytes();
    std::map<std::vector<std::int8_t>, std::size_t> seen;
    for (std::size_t i = 0; i < count_; ++i) {
      std::vector<std::int8_t> row(payload_.begin() + i * rb,
                                   payload_.begin() + (i + 1) * rb);
      auto [it, fresh] = seen.emplace(std::move(row), 0);
      if (fresh) continue;
      ++it->second;
      Rng rng(seed ^ (0x9e3779b97f4a7c15ull * (i + 1)));
      const std::size_t j = static_cast<std::size_t>(uniform_index(rng, dim_));
      if (dtype_ == Dtype::Int8) {
        std::int8_t& v = payload_[i * rb + j];
        v = static_cast<std::int8_t>(v >= 127 ? v - 1 : v + 1);
      } else {
        payload_[i * rb + j / 8] ^= static_cast<std::int8_t>(1u << (j % 8));
      }
    }
  }

  void finish_int8() {
    norms_.resize(count_);
    for (std::size_t i = 0; i < count_; ++i) {
      std::int64_t n = 0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const std::int64_t v = payload_[i * dim_ + j];
        n += v * v;
      }
      norms_[i] = n;
    }
  }

  friend std::vector<struct ScoredDoc> search_rows(const Index&,
                                                   const QuantizedEmbedding&,
                                                   std::size_t);
  friend std::vector<struct ScoredDoc> search_rows(const Index&,
                                                   const BinaryEmbedding&,
                                                   std::size_t);

  Dtype dtype_ = Dtype::Int8;
  std::size_t dim_ = 0;
  std::size_t count_ = 0;
  std::vector<std::int8_t> payload_;
  std::vector<std::int64_t> norms_;  // int8 only
  std::vector<std::string> ids_;
};

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;
};

/// Ranked results per query, scores non-increasing within a query.
struct RunFile {
  std::map<std::string, std::vector<ScoredDoc>> queries;
};

/// Relevance judgments: query -> doc -> grade (>= 0).
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;
};

namespace detail {

template <typename Score>
std::vector<ScoredDoc> select_topk(const Index& index, std::size_t k, Score&& score) {
  std::vector<std::size_t> order(index.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> scores(index.count());
  for (std::size_t i = 0; i < index.count(); ++i) scores[i] = score(i);
  const std::size_t keep = std::min(k, index.count());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return index.id(a) < index.id(b);
  };
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), better);
  std::vector<ScoredDoc> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back({index.id(order[i]), scores[order[i]]});
  return out;
}

}  // namespace detail

/// Exact top-K by INT8 cosine; ties broken by ascending doc id.
inline std::vector<ScoredDoc> search_topk(const Index& index,
                                          const QuantizedEmbedding& query,
                                          std::size_t k) {
  if (k < 1) throw std::invalid_argument("search_topk: k must be >= 1");
  if (index.count() == 0) throw std::invalid_argument("search_topk: empty index");
  if (index.dtype() != Dtype::Int8) throw std::invalid_argument("search_topk: dtype mismatch");
  if (query.dim() != index.dim()) throw std::invalid_argument("search_topk: dimension mismatch");
  return search_rows(index, query, k);
}

inline std::vector<ScoredDoc> search_topk(const Index& index,
                                          const BinaryEmbedding& query,
                                          std::size_t k) {
  if (k < 1) throw std::invalid_argument("search_topk: k must be >= 1");
  if (index.count() == 0) throw std::invalid_argument("search_topk: empty index");
  if (index.dtype() != Dtype::Binary) throw std::invalid_argument("search_topk: dtype mismatch");
  if (query.dim() != index.dim()) throw std::invalid_argument("search_topk: dimension mismatch");
  return search_rows(index, query, k);
}

inline std::vector<ScoredDoc> search_rows(const Index& index,
                                          const QuantizedEmbedding& query,
                                          std::size_t k) {
  std::int64_t nq = 0;
  for (std::int64_t v : query.values) nq += v * v;
  if (nq == 0) throw std::invalid_argument("undefined cosine");
  return detail::select_topk(index, k, [&](std::size_t i) {
    if (index.norms_[i] == 0) throw std::invalid_argument("undefined cosine");
    std::int64_t dot = 0;
    const std::int8_t* row = index.payload_.data() + i * index.dim_;
    for (std::size_t j = 0; j < index.dim_; ++j) {
      dot += static_cast<std::int64_t>(row[j]) * query.values[j];
    }
    return static_cast<double>(dot) /
           std::sqrt(static_cast<double>(nq) * static_cast<double>(index.norms_[i]));
  });
}

inline std::vector<ScoredDoc> search_rows(const Index& index,
                                          const BinaryEmbedding& query,
                                          std::size_t k) {
  const std::size_t rb = index.row_bytes();
  std::vector<std::uint8_t> packed(rb, 0);
  for (std::size_t j = 0; j < index.dim_; ++j) {
    if (query.values[j] > 0) packed[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8));
  }
  return detail::select_topk(index, k, [&](std::size_t i) {
    std::size_t ham = 0;
    const auto* row = reinterpret_cast<const std::uint8_t*>(index.payload_.data()) + i * rb;
    for (std::size_t bjt = 0; bjt < rb; ++bjt) {
      ham += static_cast<std::size_t>(__builtin_popcount(
          static_cast<unsigned>(row[bjt] ^ packed[bjt])));
    }
    return 1.0 - 2.0 * static_cast<double>(ham) / static_cast<double>(index.dim_);
  });
}

/// Mean nDCG@K with gain 2^grade - 1 and discount log2(rank + 1). Queries
/// without any positive judgment are excluded.
inline double ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  double total = 0.0;
  std::size_t scored = 0;
  for (const auto& [qid, judged] : qrels.judgments) {
    std::vector<int> grades;
    for (const auto& [doc, grade] : judged) {
      if (grade > 0) grades.push_back(grade);
    }
    if (grades.empty()) continue;
    std::sort(grades.rbegin(), grades.rend());
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) {
      idcg += (std::pow(2.0, grades[r]) - 1.0) / std::log2(static_cast<double>(r + 2));
    }
    double dcg = 0.0;
    auto it = run.queries.find(qid);
    if (it != run.queries.end()) {
      const auto& ranked = it->second;
      for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
        auto jt = judged.find(ranked[r].doc_id);
        if (jt == judged.end() || jt->second <= 0) continue;
        dcg += (std::pow(2.0, jt->second) - 1.0) / std::log2(static_cast<double>(r + 2));
      }
    }
    total += dcg / idcg;
    ++scored;
  }
  if (scored == 0) throw std::invalid_argument("ndcg_at_k: no scoreable queries");
  return total / static_cast<double>(scored);
}

/// Mean fraction of a query's relevant documents retrieved in the top K.
inline double recall_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  double total = 0.0;
  std::size_t scored = 0;
  for (const auto& [qid, judged] : qrels.judgments) {
    std::set<std::string> relevant;
    for (const auto& [doc, grade] : judged) {
      if (grade > 0) relevant.insert(doc);
    }
    if (relevant.empty()) continue;
    std::size_t hits = 0;
    auto it = run.queries.find(qid);
    if (it != run.queries.end()) {
      const auto& ranked = it->second;
      for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
        if (relevant.count(ranked[r].doc_id)) ++hits;
      }
    }
    total += static_cast<double>(hits) / static_cast<double>(relevant.size());
    ++scored;
  }
  if (scored == 0) throw std::invalid_argument("recall_at_k: no scoreable queries");
  return total / static_cast<double>(scored);
}

namespace detail {

inline std::string normalize_ws_lower(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace detail

/// Fraction of answers containing at least one ground-truth label as a
/// case-insensitive substring after whitespace normalization.
inline double match_metric(const std::map<std::string, std::string>& answers,
                           const std::map<std::string, std::vector<std::string>>& labels) {
  if (answers.empty()) return 0.0;
  std::size_t matched = 0;
  for (const auto& [qid, answer] : answers) {
    const std::string norm_answer = detail::normalize_ws_lower(answer);
    auto it = labels.find(qid);
    if (it == labels.end() || norm_answer.empty()) continue;
    for (const auto& label : it->second) {
      const std::string norm_label = detail::normalize_ws_lower(label);
      if (!norm_label.empty() && norm_answer.find(norm_label) != std::string::npos) {
        ++matched;
        break;
      }
    }
  }
  return static_cast<double>(matched) / static_cast<double>(answers.size());
}

/// Reciprocal rank fusion: score(doc) = sum over runs of 1/(k_rrf + rank).
/// Per-document contributions are summed in a canonical order, so the result
/// is exactly invariant to the order of the input runs.
inline RunFile rrf_fuse(const std::vector<RunFile>& runs, double k_rrf = 60.0) {
  if (runs.empty()) throw std::invalid_argument("rrf_fuse: at least one run required");
  if (!(k_rrf > 0.0)) throw std::invalid_argument("rrf_fuse: k_rrf must be positive");
  std::map<std::string, std::map<std::string, std::vector<double>>> contrib;
  for (const auto& run : runs) {
    for (const auto& [qid, ranked] : run.queries) {
      auto& per_doc = contrib[qid];
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        per_doc[ranked[r].doc_id].push_back(1.0 / (k_rrf + static_cast<double>(r + 1)));
      }
    }
  }
  RunFile fused;
  for (auto& [qid, per_doc] : contrib) {
    std::vector<ScoredDoc> ranked;
    ranked.reserve(per_doc.size());
    for (auto& [doc, terms] : per_doc) {
      std::sort(terms.begin(), terms.end());
      double score = 0.0;
      for (double v : terms) score += v;
      ranked.push_back({doc, score});
    }
    std::sort(ranked.begin(), ranked.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.doc_id < b.doc_id;
    });
    fused.queries.emplace(qid, std::move(ranked));
  }
  return fused;
}

enum class StorageDtype { Int8, Binary, Float32 };

/// Document embeddings per megabyte (decimal, 10^6 bytes), floored.
/// INT8 takes dim bytes, binary dim/8, float32 4*dim.
inline long long storage_efficiency(std::size_t dim, StorageDtype dtype) {
  if (dim < 1) throw std::invalid_argument("storage_efficiency: dim must be >= 1");
  switch (dtype) {
    case StorageDtype::Int8:
      return static_cast<long long>(1000000 / dim);
    case StorageDtype::Binary:
      return static_cast<long long>(8000000 / dim);
    case StorageDtype::Float32:
      return static_cast<long long>(1000000 / (4 * dim));
  }
  throw std::logic_error("unknown dtype");
}

}  // namespace qembed
