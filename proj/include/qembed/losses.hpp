#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/embedding.hpp"
#include "qembed/quantizer.hpp"

namespace qembed {

/// Chunk embeddings of one document plus the index of its gold chunk.
/// Exactly one gold chunk per document.
struct DocumentChunks {
  std::vector<RawEmbedding> embeddings;
  std::size_t gold = 0;
};

/// Inputs to the contrastive losses. `hard_negatives`, `chunks` and
/// `doc_hashes` are optional (empty when absent); each loss states which of
/// them it requires.
struct ContrastiveBatch {
  std::vector<RawEmbedding> queries;
  std::vector<RawEmbedding> docs;
  std::vector<std::vector<RawEmbedding>> hard_negatives;  // N x K
  std::vector<DocumentChunks> chunks;                     // N documents
  std::vector<std::uint64_t> doc_hashes;                  // N
  double temperature = 0.02;
  double margin = 0.1;
};

/// Scalar loss plus gradients with respect to the raw embeddings under the
/// straight-through convention. Gradient buffers always match the batch
/// shapes; entries a loss does not touch stay zero.
struct LossResult {
  double value = 0.0;
  std::vector<std::vector<double>> grad_queries;
  std::vector<std::vector<double>> grad_docs;
  std::vector<std::vector<std::vector<double>>> grad_negatives;
  std::vector<std::vector<std::vector<double>>> grad_chunks;
};

struct MaskMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> entries;  // row-major, 0 or 1

  std::uint8_t at(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }
  void set(std::size_t i, std::size_t j, std::uint8_t v) { entries[i * cols + j] = v; }
};

/// Entry (i, j) = 1 iff sims[i][j] <= pos_sims[i] + margin. A negative whose
/// similarity exceeds the positive's by more than the margin is a likely
/// false negative and gets masked out (entry 0).
inline MaskMatrix false_negative_mask(const std::vector<std::vector<double>>& sims,
                                      const std::vector<double>& pos_sims,
                                      double margin) {
  MaskMatrix m;
  m.rows = sims.size();
  m.cols = m.rows == 0 ? 0 : sims.front().size();
  if (pos_sims.size() != m.rows) {
    throw std::invalid_argument("false_negative_mask: shape mismatch");
  }
  m.entries.assign(m.rows * m.cols, 0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    if (sims[i].size() != m.cols) {
      throw std::invalid_argument("false_negative_mask: shape mismatch");
    }
    for (std::size_t j = 0; j < m.cols; ++j) {
      m.set(i, j, sims[i][j] <= pos_sims[i] + margin ? 1 : 0);
    }
  }
  return m;
}

/// Duplicate-document mask: entry (i, j) = 0 iff the hashes match and i != j.
/// The diagonal is always 1.
inline MaskMatrix dup_mask(const std::vector<std::uint64_t>& doc_hashes) {
  const std::size_t n = doc_hashes.size();
  MaskMatrix m;
  m.rows = m.cols = n;
  m.entries.assign(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && doc_hashes[i] == doc_hashes[j]) m.set(i, j, 0);
    }
  }
  return m;
}

/// Cosine ramp from beta_start (step 0) to beta_end (step = total).
inline double beta_schedule(std::size_t step, std::size_t total,
                            double beta_start = 0.2, double beta_end = 0.5) {
  if (total < 1) throw std::invalid_argument("beta_schedule: total must be >= 1");
  if (step > total) throw std::invalid_argument("beta_schedule: step > total");
  const double phase = static_cast<double>(step) / static_cast<double>(total);
  return beta_end - (beta_end - beta_start) * (1.0 + std::cos(M_PI * phase)) / 2.0;
}

namespace detail {

// One embedding as seen by a loss. The forward vector feeds the loss value
// and the masks; the backward vector is the smooth surrogate the gradient
// differentiates. Float path: both are the raw values and the chain factor
// is 1. Quantized path: the forward is the exact INT8 quantization, the
// backward is 127*tanh(raw) with the rounding removed, and the chain factor
// is the ste_backward derivative 127*(1 - tanh^2).
struct View {
  const RawEmbedding* raw = nullptr;
  bool quantized = false;
  QuantizedEmbedding q;
  std::vector<double> bwd;
  std::vector<double> chain;
  double bwd_norm = 0.0;
  double raw_norm = 0.0;
  std::vector<double> grad;  // accumulated against bwd, chained at the end

  void init(const RawEmbedding& r, bool quantize) {
    raw = &r;
    quantized = quantize;
    const std::size_t d = r.values.size();
    bwd.resize(d);
    chain.resize(d);
    grad.assign(d, 0.0);
    double nb = 0.0, nr = 0.0;
    if (quantize) {
      q = quantize_int8(r);
      for (std::size_t j = 0; j < d; ++j) {
        const double th = std::tanh(r.values[j]);
        bwd[j] = 127.0 * th;
        chain[j] = 127.0 * (1.0 - th * th);
        nb += bwd[j] * bwd[j];
      }
    } else {
      for (std::size_t j = 0; j < d; ++j) {
        bwd[j] = r.values[j];
        chain[j] = 1.0;
        nb += bwd[j] * bwd[j];
      }
    }
    for (double v : r.values) nr += v * v;
    bwd_norm = std::sqrt(nb);
    raw_norm = std::sqrt(nr);
    if (raw_norm == 0.0) throw std::invalid_argument("undefined cosine");
  }

  // Chained gradient with respect to the raw embedding.
  std::vector<double> raw_grad() const {
    std::vector<double> out(grad.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = grad[j] * chain[j];
    return out;
  }
};

inline double sim_fwd(const View& a, const View& b) {
  if (a.quantized) return similarity_int8(a.q, b.q);
  double dot = 0.0;
  for (std::size_t j = 0; j < a.raw->values.size(); ++j) {
    dot += a.raw->values[j] * b.raw->values[j];
  }
  return dot / (a.raw_norm * b.raw_norm);
}

inline double sim_bwd(const View& a, const View& b) {
  double dot = 0.0;
  for (std::size_t j = 0; j < a.bwd.size(); ++j) dot += a.bwd[j] * b.bwd[j];
  if (a.bwd_norm == 0.0 || b.bwd_norm == 0.0) {
    throw std::invalid_argument("undefined cosine");
  }
  return dot / (a.bwd_norm * b.bwd_norm);
}

// Accumulate coeff * d cos(a, b) into both grads (bwd space).
inline void add_cosine_grad(View& a, View& b, double s, double coeff) {
  const double inv = 1.0 / (a.bwd_norm * b.bwd_norm);
  const double sa = s / (a.bwd_norm * a.bwd_norm);
  const double sb = s / (b.bwd_norm * b.bwd_norm);
  for (std::size_t j = 0; j < a.bwd.size(); ++j) {
    a.grad[j] += coeff * (b.bwd[j] * inv - sa * a.bwd[j]);
    b.grad[j] += coeff * (a.bwd[j] * inv - sb * b.bwd[j]);
  }
}

// One InfoNCE term list: the anchor contrasted against `others`, of which
// exactly one is the positive; masked terms drop out of the denominator.
struct Term {
  View* other = nullptr;
  bool positive = false;
  bool masked_out = false;
};

// Adds -log softmax(positive | surviving terms) for one anchor. The value
// comes from the forward similarities, the gradient from the backward ones;
// masks are part of the term list and are never differentiated.
inline double anchored_softmax(View& anchor, std::vector<Term>& terms, double tau,
                               double grad_scale) {
  std::vector<double> z_fwd, z_bwd, s_bwd;
  std::vector<Term*> live;
  double z_pos_fwd = 0.0;
  bool saw_positive = false;
  for (Term& t : terms) {
    const double sf = sim_fwd(anchor, *t.other);
    if (t.positive) {
      z_pos_fwd = sf / tau;
      saw_positive = true;
    }
    if (t.masked_out && !t.positive) continue;
    const double sb = sim_bwd(anchor, *t.other);
    live.push_back(&t);
    z_fwd.push_back(sf / tau);
    z_bwd.push_back(sb / tau);
    s_bwd.push_back(sb);
  }
  if (!saw_positive) throw std::logic_error("anchored_softmax: no positive term");

  double max_fwd = z_fwd.front(), max_bwd = z_bwd.front();
  for (double z : z_fwd) max_fwd = std::max(max_fwd, z);
  for (double z : z_bwd) max_bwd = std::max(max_bwd, z);
  double sum_fwd = 0.0, sum_bwd = 0.0;
  for (double z : z_fwd) sum_fwd += std::exp(z - max_fwd);
  for (double z : z_bwd) sum_bwd += std::exp(z - max_bwd);
  const double value = (max_fwd - z_pos_fwd) + std::log(sum_fwd);

  if (grad_scale != 0.0) {
    for (std::size_t t = 0; t < live.size(); ++t) {
      const double w = std::exp(z_bwd[t] - max_bwd) / sum_bwd;
      const double coeff = grad_scale * (w - (live[t]->positive ? 1.0 : 0.0)) / tau;
      add_cosine_grad(anchor, *live[t]->other, s_bwd[t], coeff);
    }
  }
  return value;
}

inline std::size_t checked_dim(const ContrastiveBatch& b) {
  if (b.queries.empty()) throw std::invalid_argument("batch must contain at least one pair");
  if (b.docs.size() != b.queries.size()) {
    throw std::invalid_argument("queries and docs must have equal count");
  }
  if (b.temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
  const std::size_t d = b.queries.front().values.size();
  auto check = [d](const RawEmbedding& e) {
    if (e.values.size() != d) throw std::invalid_argument("dimension mismatch");
  };
  for (const auto& e : b.queries) check(e);
  for (const auto& e : b.docs) check(e);
  if (!b.hard_negatives.empty()) {
    if (b.hard_negatives.size() != b.queries.size()) {
      throw std::invalid_argument("hard_negatives must cover every query");
    }
    const std::size_t k = b.hard_negatives.front().size();
    for (const auto& negs : b.hard_negatives) {
      if (negs.size() != k) {
        throw std::invalid_argument("inconsistent hard-negative count across queries");
      }
      for (const auto& e : negs) check(e);
    }
  }
  if (!b.chunks.empty()) {
    if (b.chunks.size() != b.queries.size()) {
      throw std::invalid_argument("chunks must cover every document");
    }
    for (const auto& doc : b.chunks) {
      if (doc.embeddings.empty()) throw std::invalid_argument("document without chunks");
      if (doc.gold >= doc.embeddings.size()) {
        throw std::invalid_argument("gold chunk index out of range");
      }
      for (const auto& e : doc.embeddings) check(e);
    }
  }
  if (!b.doc_hashes.empty() && b.doc_hashes.size() != b.queries.size()) {
    throw std::invalid_argument("doc_hashes must cover every document");
  }
  return d;
}

inline LossResult make_result(const ContrastiveBatch& b, std::size_t d) {
  LossResult r;
  const std::size_t n = b.queries.size();
  r.grad_queries.assign(n, std::vector<double>(d, 0.0));
  r.grad_docs.assign(n, std::vector<double>(d, 0.0));
  r.grad_negatives.resize(n);
  for (std::size_t i = 0; i < b.hard_negatives.size(); ++i) {
    r.grad_negatives[i].assign(b.hard_negatives[i].size(), std::vector<double>(d, 0.0));
  }
  r.grad_chunks.resize(n);
  for (std::size_t i = 0; i < b.chunks.size(); ++i) {
    r.grad_chunks[i].assign(b.chunks[i].embeddings.size(), std::vector<double>(d, 0.0));
  }
  return r;
}

// Shared body of the pair and global losses; they differ only in the extra
// duplicate-document mask applied to the doc negatives.
inline LossResult pairwise_loss(const ContrastiveBatch& b, bool quantize,
                                bool with_dup_mask) {
  const std::size_t d = checked_dim(b);
  const std::size_t n = b.queries.size();
  if (with_dup_mask && b.doc_hashes.empty()) {
    throw std::invalid_argument("global_loss: missing doc hashes");
  }

  std::vector<View> qv(n), dv(n);
  for (std::size_t i = 0; i < n; ++i) {
    qv[i].init(b.queries[i], quantize);
    dv[i].init(b.docs[i], quantize);
  }
  const MaskMatrix dup = with_dup_mask ? dup_mask(b.doc_hashes) : MaskMatrix{};

  LossResult r = make_result(b, d);
  const double grad_scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = sim_fwd(qv[i], dv[i]);
    std::vector<Term> terms;
    terms.reserve(2 * n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      Term t;
      t.other = &dv[j];
      t.positive = j == i;
      if (j != i) {
        const bool kept = sim_fwd(qv[i], dv[j]) <= pos + b.margin &&
                          (!with_dup_mask || dup.at(i, j) == 1);
        t.masked_out = !kept;
      }
      terms.push_back(t);
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      Term t;
      t.other = &qv[j];
      t.masked_out = sim_fwd(qv[i], qv[j]) > pos + b.margin;
      terms.push_back(t);
    }
    r.value += anchored_softmax(qv[i], terms, b.temperature, grad_scale);
  }
  r.value /= static_cast<double>(n);

  for (std::size_t i = 0; i < n; ++i) {
    r.grad_queries[i] = qv[i].raw_grad();
    r.grad_docs[i] = dv[i].raw_grad();
  }
  return r;
}

// Softmax of the gold chunk against a per-query candidate set: either the
// chunks of the query's own document or every chunk in the batch.
inline LossResult chunkwise_loss(const ContrastiveBatch& b, bool quantize,
                                 bool in_batch) {
  const std::size_t d = checked_dim(b);
  const std::size_t n = b.queries.size();
  if (b.chunks.empty()) throw std::invalid_argument("missing chunks");

  std::vector<View> qv(n);
  std::vector<std::vector<View>> cv(n);
  for (std::size_t i = 0; i < n; ++i) {
    qv[i].init(b.queries[i], quantize);
    cv[i].resize(b.chunks[i].embeddings.size());
    for (std::size_t k = 0; k < cv[i].size(); ++k) {
      cv[i][k].init(b.chunks[i].embeddings[k], quantize);
    }
  }

  LossResult r = make_result(b, d);
  const double grad_scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Term> terms;
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_batch && j != i) continue;
      for (std::size_t k = 0; k < cv[j].size(); ++k) {
        Term t;
        t.other = &cv[j][k];
        t.positive = j == i && k == b.chunks[i].gold;
        terms.push_back(t);
      }
    }
    r.value += anchored_softmax(qv[i], terms, b.temperature, grad_scale);
  }
  r.value /= static_cast<double>(n);

  for (std::size_t i = 0; i < n; ++i) {
    r.grad_queries[i] = qv[i].raw_grad();
    for (std::size_t k = 0; k < cv[i].size(); ++k) {
      r.grad_chunks[i][k] = cv[i][k].raw_grad();
    }
  }
  return r;
}

inline void axpy(double a, const LossResult& x, LossResult& y) {
  y.value += a * x.value;
  auto add2 = [a](const std::vector<std::vector<double>>& src,
                  std::vector<std::vector<double>>& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      for (std::size_t j = 0; j < src[i].size(); ++j) dst[i][j] += a * src[i][j];
    }
  };
  add2(x.grad_queries, y.grad_queries);
  add2(x.grad_docs, y.grad_docs);
  for (std::size_t i = 0; i < x.grad_negatives.size(); ++i) {
    add2(x.grad_negatives[i], y.grad_negatives[i]);
  }
  for (std::size_t i = 0; i < x.grad_chunks.size(); ++i) {
    add2(x.grad_chunks[i], y.grad_chunks[i]);
  }
}

}  // namespace detail

/// InfoNCE over query-document pairs with in-batch document and query
/// negatives, both filtered by the false-negative mask at `margin`. Masks are
/// computed from the same similarities that enter the loss and are constants
/// in the backward pass.
inline LossResult pair_loss(const ContrastiveBatch& batch, bool quantize = false) {
  return detail::pairwise_loss(batch, quantize, false);
}

/// In-sequence chunk contrast: per query, softmax of the gold chunk over that
/// document's chunks only.
inline LossResult seq_loss(const ContrastiveBatch& batch, bool quantize = false) {
  return detail::chunkwise_loss(batch, quantize, false);
}

/// In-batch chunk contrast: per query, softmax of the gold chunk over every
/// chunk in the batch, including the other chunks of its own document.
inline LossResult batch_loss(const ContrastiveBatch& batch, bool quantize = false) {
  return detail::chunkwise_loss(batch, quantize, true);
}

/// alpha * seq + (1 - alpha) * batch.
inline LossResult local_loss(const ContrastiveBatch& batch, double alpha = 0.2,
                             bool quantize = false) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha out of [0, 1]");
  LossResult r = detail::make_result(batch, detail::checked_dim(batch));
  detail::axpy(alpha, seq_loss(batch, quantize), r);
  detail::axpy(1.0 - alpha, batch_loss(batch, quantize), r);
  return r;
}

/// Pair-style InfoNCE over documents with duplicate-document masking on top
/// of the false-negative mask; the j = i term always survives.
inline LossResult global_loss(const ContrastiveBatch& batch, bool quantize = false) {
  return detail::pairwise_loss(batch, quantize, true);
}

/// beta * global + (1 - beta) * local.
inline LossResult context_loss(const ContrastiveBatch& batch, double beta,
                               double alpha = 0.2, bool quantize = false) {
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta out of [0, 1]");
  LossResult g = global_loss(batch, quantize);
  LossResult l = local_loss(batch, alpha, quantize);
  LossResult r = detail::make_result(batch, detail::checked_dim(batch));
  detail::axpy(beta, g, r);
  detail::axpy(1.0 - beta, l, r);
  return r;
}

/// InfoNCE with every in-batch document plus every query's mined hard
/// negatives in the denominator. No masking.
inline LossResult triplet_loss(const ContrastiveBatch& batch, bool quantize = false) {
  const std::size_t d = detail::checked_dim(batch);
  const std::size_t n = batch.queries.size();

  std::vector<detail::View> qv(n), dv(n);
  std::vector<std::vector<detail::View>> hv(n);
  for (std::size_t i = 0; i < n; ++i) {
    qv[i].init(batch.queries[i], quantize);
    dv[i].init(batch.docs[i], quantize);
    if (!batch.hard_negatives.empty()) {
      hv[i].resize(batch.hard_negatives[i].size());
      for (std::size_t k = 0; k < hv[i].size(); ++k) {
        hv[i][k].init(batch.hard_negatives[i][k], quantize);
      }
    }
  }

  LossResult r = detail::make_result(batch, d);
  const double grad_scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<detail::Term> terms;
    for (std::size_t j = 0; j < n; ++j) {
      detail::Term t;
      t.other = &dv[j];
      t.positive = j == i;
      terms.push_back(t);
    }
    for (std::size_t j = 0; j < n; ++j) {
      for (auto& neg : hv[j]) {
        detail::Term t;
        t.other = &neg;
        terms.push_back(t);
      }
    }
    r.value += detail::anchored_softmax(qv[i], terms, batch.temperature, grad_scale);
  }
  r.value /= static_cast<double>(n);

  for (std::size_t i = 0; i < n; ++i) {
    r.grad_queries[i] = qv[i].raw_grad();
    r.grad_docs[i] = dv[i].raw_grad();
    for (std::size_t k = 0; k < hv[i].size(); ++k) {
      r.grad_negatives[i][k] = hv[i][k].raw_grad();
    }
  }
  return r;
}

enum class LossKind { Pair, Seq, Batch, Local, Global, Context, Triplet };

struct LossOptions {
  bool quantize = false;
  double alpha = 0.2;
  double beta = 0.2;
};

inline LossResult evaluate_loss(LossKind kind, const ContrastiveBatch& batch,
                                const LossOptions& opt = {}) {
  switch (kind) {
    case LossKind::Pair: return pair_loss(batch, opt.quantize);
    case LossKind::Seq: return seq_loss(batch, opt.quantize);
    case LossKind::Batch: return batch_loss(batch, opt.quantize);
    case LossKind::Local: return local_loss(batch, opt.alpha, opt.quantize);
    case LossKind::Global: return global_loss(batch, opt.quantize);
    case LossKind::Context: return context_loss(batch, opt.beta, opt.alpha, opt.quantize);
    case LossKind::Triplet: return triplet_loss(batch, opt.quantize);
  }
  throw std::logic_error("unknown loss kind");
}

/// Evaluate the inner loss on every prefix width in `dims` (ascending, each
/// <= d). Embeddings are truncated first and quantized after truncation.
/// Value is the unweighted mean; gradients are scattered into full-width
/// buffers and divided by |dims|.
inline LossResult matryoshka_wrap(LossKind kind, const ContrastiveBatch& batch,
                                  const std::vector<std::size_t>& dims,
                                  const LossOptions& opt = {}) {
  const std::size_t d = detail::checked_dim(batch);
  if (dims.empty()) throw std::invalid_argument("matryoshka_wrap: empty dims");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i] > d) {
      throw std::invalid_argument("matryoshka dim out of range");
    }
    if (i > 0 && dims[i] <= dims[i - 1]) {
      throw std::invalid_argument("matryoshka dims must be sorted ascending");
    }
  }

  auto truncate = [](const RawEmbedding& e, std::size_t dim) {
    RawEmbedding out;
    out.values.assign(e.values.begin(), e.values.begin() + dim);
    return out;
  };

  LossResult total = detail::make_result(batch, d);
  for (std::size_t dim : dims) {
    ContrastiveBatch sub;
    sub.temperature = batch.temperature;
    sub.margin = batch.margin;
    sub.doc_hashes = batch.doc_hashes;
    for (const auto& e : batch.queries) sub.queries.push_back(truncate(e, dim));
    for (const auto& e : batch.docs) sub.docs.push_back(truncate(e, dim));
    for (const auto& negs : batch.hard_negatives) {
      sub.hard_negatives.emplace_back();
      for (const auto& e : negs) sub.hard_negatives.back().push_back(truncate(e, dim));
    }
    for (const auto& doc : batch.chunks) {
      DocumentChunks dc;
      dc.gold = doc.gold;
      for (const auto& e : doc.embeddings) dc.embeddings.push_back(truncate(e, dim));
      sub.chunks.push_back(std::move(dc));
    }

    const LossResult part = evaluate_loss(kind, sub, opt);
    total.value += part.value;
    // Scatter prefix gradients into the full-width buffers.
    auto scatter2 = [](const std::vector<std::vector<double>>& src,
                       std::vector<std::vector<double>>& dst) {
      for (std::size_t i = 0; i < src.size(); ++i) {
        for (std::size_t j = 0; j < src[i].size(); ++j) dst[i][j] += src[i][j];
      }
    };
    scatter2(part.grad_queries, total.grad_queries);
    scatter2(part.grad_docs, total.grad_docs);
    for (std::size_t i = 0; i < part.grad_negatives.size(); ++i) {
      scatter2(part.grad_negatives[i], total.grad_negatives[i]);
    }
    for (std::size_t i = 0; i < part.grad_chunks.size(); ++i) {
      scatter2(part.grad_chunks[i], total.grad_chunks[i]);
    }
  }

  const double inv = 1.0 / static_cast<double>(dims.size());
  total.value *= inv;
  for (auto& g : total.grad_queries) for (double& v : g) v *= inv;
  for (auto& g : total.grad_docs) for (double& v : g) v *= inv;
  for (auto& negs : total.grad_negatives) for (auto& g : negs) for (double& v : g) v *= inv;
  for (auto& doc : total.grad_chunks) for (auto& g : doc) for (double& v : g) v *= inv;
  return total;
}

}  // namespace qembed
