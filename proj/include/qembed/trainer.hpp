#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/embedding.hpp"
#include "qembed/hash.hpp"
#include "qembed/losses.hpp"
#include "qembed/merge.hpp"
#include "qembed/quantizer.hpp"
#include "qembed/random.hpp"
#include "qembed/retrieval.hpp"

namespace qembed {

/// Linear toy backbone: an embedding table followed by a projection. It
/// stands in for the encoder so the loss kernels can be trained end to end
/// with hand-derived gradients.
struct ToyEncoder {
  std::size_t vocab = 0;
  std::size_t d_in = 0;
  std::size_t d = 0;
  std::vector<double> embedding;   // vocab x d_in, row-major
  std::vector<double> projection;  // d_in x d, row-major

  static ToyEncoder random_init(std::size_t vocab, std::size_t d_in, std::size_t d,
                                std::uint64_t seed) {
    ToyEncoder enc;
    enc.vocab = vocab;
    enc.d_in = d_in;
    enc.d = d;
    enc.embedding.resize(vocab * d_in);
    enc.projection.resize(d_in * d);
    Rng rng(seed);
    for (double& v : enc.embedding) v = normal01(rng);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (double& v : enc.projection) v = normal01(rng) * scale;
    return enc;
  }
};

/// Per-token vector = projection applied to the token's embedding-table row.
inline TokenMatrix encode(const ToyEncoder& enc, const std::vector<int>& token_ids) {
  TokenMatrix out;
  out.rows.reserve(token_ids.size());
  for (int id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= enc.vocab) {
      throw std::out_of_range("encode: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(enc.vocab));
    }
    std::vector<double> row(enc.d, 0.0);
    const double* e = enc.embedding.data() + static_cast<std::size_t>(id) * enc.d_in;
    for (std::size_t m = 0; m < enc.d_in; ++m) {
      const double em = e[m];
      const double* p = enc.projection.data() + m * enc.d;
      for (std::size_t j = 0; j < enc.d; ++j) row[j] += em * p[j];
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline ParamVector to_params(const ToyEncoder& enc) {
  ParamVector p;
  p.layout = {{"embedding", {enc.vocab, enc.d_in}}, {"projection", {enc.d_in, enc.d}}};
  p.values.reserve(enc.embedding.size() + enc.projection.size());
  p.values.insert(p.values.end(), enc.embedding.begin(), enc.embedding.end());
  p.values.insert(p.values.end(), enc.projection.begin(), enc.projection.end());
  return p;
}

inline ToyEncoder from_params(const ParamVector& p) {
  if (p.layout.size() != 2 || p.layout[0].name != "embedding" ||
      p.layout[1].name != "projection" || p.layout[0].shape.size() != 2 ||
      p.layout[1].shape.size() != 2 || p.layout[0].shape[1] != p.layout[1].shape[0]) {
    throw std::invalid_argument("from_params: unexpected checkpoint layout");
  }
  ToyEncoder enc;
  enc.vocab = p.layout[0].shape[0];
  enc.d_in = p.layout[0].shape[1];
  enc.d = p.layout[1].shape[1];
  const std::size_t ne = enc.vocab * enc.d_in;
  if (p.values.size() != ne + enc.d_in * enc.d) {
    throw std::invalid_argument("from_params: value count does not match layout");
  }
  enc.embedding.assign(p.values.begin(), p.values.begin() + ne);
  enc.projection.assign(p.values.begin() + ne, p.values.end());
  return enc;
}

/// Warmup-stable-decay schedule: linear 0 -> peak over [0, warmup), constant
/// peak on [warmup, stable_until), cosine peak -> 0 on [stable_until, total].
inline double lr_schedule(std::size_t step, std::size_t warmup,
                          std::size_t stable_until, std::size_t total, double peak) {
  if (!(warmup <= stable_until && stable_until <= total)) {
    throw std::invalid_argument("lr_schedule: require warmup <= stable_until <= total");
  }
  if (step > total) throw std::invalid_argument("lr_schedule: step > total");
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step < stable_until || stable_until == total) return peak;
  const double phase = static_cast<double>(step - stable_until) /
                       static_cast<double>(total - stable_until);
  return peak * (1.0 + std::cos(M_PI * phase)) / 2.0;
}

/// One training example. `doc_ids` always holds the full document token
/// sequence; for contextual data the chunk spans carve it up and exactly one
/// span is the gold chunk.
struct BatchRecord {
  std::vector<int> query_ids;
  std::vector<int> doc_ids;
  std::vector<Span> chunk_spans;
  std::size_t gold_chunk = 0;
  std::vector<std::vector<int>> hard_negative_ids;
  std::uint64_t doc_hash = 0;  // 0: derive from doc_ids at batch time
};

struct Dataset {
  std::string name;
  std::vector<BatchRecord> records;
};

struct DatasetPool {
  std::vector<Dataset> datasets;
};

/// Dataset name drawn with probability proportional to dataset size.
inline std::string sample_source(const DatasetPool& pool, Rng& rng) {
  if (pool.datasets.empty()) throw std::invalid_argument("sample_source: empty pool");
  std::vector<double> weights;
  weights.reserve(pool.datasets.size());
  for (const auto& ds : pool.datasets) {
    if (ds.records.empty()) throw std::invalid_argument("sample_source: empty dataset " + ds.name);
    weights.push_back(static_cast<double>(ds.records.size()));
  }
  return pool.datasets[categorical(rng, weights)].name;
}

enum class StageKind { Pair, Contextual, Triplet };

/// One curriculum phase of the pair stage: only the named datasets are
/// eligible for the given number of steps.
struct Phase {
  std::vector<std::string> datasets;
  std::size_t steps = 0;
};

constexpr std::size_t kAutoSteps = std::numeric_limits<std::size_t>::max();

struct StageConfig {
  StageKind kind = StageKind::Pair;
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  std::size_t warmup_steps = kAutoSteps;   // default: 10% of steps
  std::size_t stable_until = kAutoSteps;   // default: 80% of steps
  double temperature = 0.02;
  double margin = 0.1;
  double alpha = 0.2;
  double beta_start = 0.2;
  double beta_end = 0.5;
  std::size_t hard_negatives = 3;
  std::vector<std::size_t> matryoshka_dims;  // empty: single full-width loss
  bool quantize = true;
  double clip_norm = 1.0;
  std::uint64_t seed = 42;
  std::vector<Phase> phases;  // empty: all datasets for all steps
  // Recorded for provenance only; the update rule is plain clipped gradient
  // descent.
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double beta = 0.0;
  std::string dataset;
};

struct StageResult {
  ToyEncoder encoder;
  std::vector<TraceRow> trace;
};

/// Exponential-moving-average smoothing of a loss trace.
inline std::vector<double> ema_smooth(const std::vector<TraceRow>& trace,
                                      double alpha = 0.02) {
  std::vector<double> out;
  out.reserve(trace.size());
  double ema = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    ema = i == 0 ? trace[i].loss : alpha * trace[i].loss + (1.0 - alpha) * ema;
    out.push_back(ema);
  }
  return out;
}

struct BatchGradients {
  double loss = 0.0;
  std::vector<double> grad_embedding;
  std::vector<double> grad_projection;
};

namespace detail {

// Chain rule through mean pooling over [begin, end) and the linear encoder:
// every token in the range receives grad/span_len on its token vector, which
// splits into projection and embedding-table contributions.
inline void accumulate_span_grad(const ToyEncoder& enc, const std::vector<int>& ids,
                                 std::size_t begin, std::size_t end,
                                 const std::vector<double>& grad,
                                 std::vector<double>& d_embedding,
                                 std::vector<double>& d_projection) {
  const double inv = 1.0 / static_cast<double>(end - begin);
  std::vector<double> g(enc.d);
  for (std::size_t j = 0; j < enc.d; ++j) g[j] = grad[j] * inv;

  // u = P * g, shared by every token in the span.
  std::vector<double> u(enc.d_in, 0.0);
  for (std::size_t m = 0; m < enc.d_in; ++m) {
    const double* p = enc.projection.data() + m * enc.d;
    double acc = 0.0;
    for (std::size_t j = 0; j < enc.d; ++j) acc += p[j] * g[j];
    u[m] = acc;
  }
  std::vector<double> sum_e(enc.d_in, 0.0);
  for (std::size_t l = begin; l < end; ++l) {
    const auto id = static_cast<std::size_t>(ids[l]);
    const double* e = enc.embedding.data() + id * enc.d_in;
    double* de = d_embedding.data() + id * enc.d_in;
    for (std::size_t m = 0; m < enc.d_in; ++m) {
      sum_e[m] += e[m];
      de[m] += u[m];
    }
  }
  for (std::size_t m = 0; m < enc.d_in; ++m) {
    double* dp = d_projection.data() + m * enc.d;
    const double s = sum_e[m];
    for (std::size_t j = 0; j < enc.d; ++j) dp[j] += s * g[j];
  }
}

inline LossKind loss_kind_for(StageKind kind) {
  switch (kind) {
    case StageKind::Pair: return LossKind::Pair;
    case StageKind::Contextual: return LossKind::Context;
    case StageKind::Triplet: return LossKind::Triplet;
  }
  throw std::logic_error("unknown stage kind");
}

}  // namespace detail

/// Loss and parameter gradients for one assembled batch: encode, pool
/// (chunk-pool for contextual data), quantize when flagged, evaluate the
/// stage loss and push the embedding gradients back through pooling and the
/// encoder.
inline BatchGradients compute_batch_gradients(const ToyEncoder& enc,
                                              const std::vector<const BatchRecord*>& records,
                                              const StageConfig& cfg, double beta) {
  if (records.empty()) throw std::invalid_argument("empty batch");
  ContrastiveBatch batch;
  batch.temperature = cfg.temperature;
  batch.margin = cfg.margin;

  for (const BatchRecord* rec : records) {
    batch.queries.push_back(mean_pool(encode(enc, rec->query_ids)));
    TokenMatrix doc = encode(enc, rec->doc_ids);
    batch.docs.push_back(mean_pool(doc));
    if (cfg.kind == StageKind::Contextual) {
      if (rec->chunk_spans.empty()) {
        throw std::invalid_argument("contextual stage requires chunked records");
      }
      doc.spans = rec->chunk_spans;
      DocumentChunks chunks;
      chunks.embeddings = chunk_pool(doc);
      chunks.gold = rec->gold_chunk;
      batch.chunks.push_back(std::move(chunks));
      batch.doc_hashes.push_back(rec->doc_hash != 0 ? rec->doc_hash
                                                    : fnv1a64(rec->doc_ids));
    }
    if (cfg.kind == StageKind::Triplet) {
      batch.hard_negatives.emplace_back();
      for (const auto& neg : rec->hard_negative_ids) {
        batch.hard_negatives.back().push_back(mean_pool(encode(enc, neg)));
      }
    }
  }

  LossOptions opt;
  opt.quantize = cfg.quantize;
  opt.alpha = cfg.alpha;
  opt.beta = beta;
  const LossKind kind = detail::loss_kind_for(cfg.kind);
  const LossResult loss = cfg.matryoshka_dims.empty()
                              ? evaluate_loss(kind, batch, opt)
                              : matryoshka_wrap(kind, batch, cfg.matryoshka_dims, opt);

  BatchGradients out;
  out.loss = loss.value;
  out.grad_embedding.assign(enc.embedding.size(), 0.0);
  out.grad_projection.assign(enc.projection.size(), 0.0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BatchRecord& rec = *records[i];
    detail::accumulate_span_grad(enc, rec.query_ids, 0, rec.query_ids.size(),
                                 loss.grad_queries[i], out.grad_embedding,
                                 out.grad_projection);
    detail::accumulate_span_grad(enc, rec.doc_ids, 0, rec.doc_ids.size(),
                                 loss.grad_docs[i], out.grad_embedding,
                                 out.grad_projection);
    if (i < loss.grad_chunks.size()) {
      for (std::size_t k = 0; k < loss.grad_chunks[i].size(); ++k) {
        const Span& span = rec.chunk_spans[k];
        detail::accumulate_span_grad(enc, rec.doc_ids, span.begin, span.end,
                                     loss.grad_chunks[i][k], out.grad_embedding,
                                     out.grad_projection);
      }
    }
    if (i < loss.grad_negatives.size()) {
      for (std::size_t k = 0; k < loss.grad_negatives[i].size(); ++k) {
        detail::accumulate_span_grad(enc, rec.hard_negative_ids[k], 0,
                                     rec.hard_negative_ids[k].size(),
                                     loss.grad_negatives[i][k], out.grad_embedding,
                                     out.grad_projection);
      }
    }
  }
  return out;
}

/// One curriculum stage: sample a source dataset, assemble a batch, encode,
/// pool, evaluate the stage loss, backpropagate and apply a clipped
/// gradient-descent update on the schedule. Single-threaded and fully
/// deterministic under the stage seed.
inline StageResult run_stage(ToyEncoder encoder, const StageConfig& cfg,
                             const DatasetPool& pool) {
  if (pool.datasets.empty()) throw std::invalid_argument("run_stage: empty pool");
  if (cfg.batch_size == 0) throw std::invalid_argument("run_stage: batch_size must be positive");
  const std::size_t warmup = cfg.warmup_steps == kAutoSteps ? cfg.steps / 10 : cfg.warmup_steps;
  const std::size_t stable =
      cfg.stable_until == kAutoSteps ? (cfg.steps * 4) / 5 : cfg.stable_until;
  if (!cfg.phases.empty()) {
    std::size_t phase_total = 0;
    for (const auto& ph : cfg.phases) phase_total += ph.steps;
    if (phase_total != cfg.steps) {
      throw std::invalid_argument("run_stage: phase steps must sum to stage steps");
    }
  }

  Rng rng(cfg.seed);
  StageResult result;
  result.trace.reserve(cfg.steps);

  std::size_t phase_idx = 0, phase_used = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const DatasetPool* active = &pool;
    DatasetPool filtered;
    if (!cfg.phases.empty()) {
      while (phase_used >= cfg.phases[phase_idx].steps) {
        phase_used = 0;
        ++phase_idx;
      }
      ++phase_used;
      for (const auto& name : cfg.phases[phase_idx].datasets) {
        bool found = false;
        for (const auto& ds : pool.datasets) {
          if (ds.name == name) {
            filtered.datasets.push_back(ds);
            found = true;
            break;
          }
        }
        if (!found) throw std::invalid_argument("run_stage: unknown dataset " + name);
      }
      active = &filtered;
    }

    const std::string source = sample_source(*active, rng);
    const Dataset* ds = nullptr;
    for (const auto& candidate : active->datasets) {
      if (candidate.name == source) ds = &candidate;
    }

    // Without-replacement draw of up to batch_size records.
    std::vector<std::size_t> order(ds->records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(rng, order);
    const std::size_t take = std::min(cfg.batch_size, order.size());
    std::vector<const BatchRecord*> batch;
    batch.reserve(take);
    for (std::size_t i = 0; i < take; ++i) batch.push_back(&ds->records[order[i]]);

    const double beta = cfg.kind == StageKind::Contextual
                            ? beta_schedule(step, std::max<std::size_t>(cfg.steps, 1),
                                            cfg.beta_start, cfg.beta_end)
                            : 0.0;
    BatchGradients grads = compute_batch_gradients(encoder, batch, cfg, beta);
    if (!std::isfinite(grads.loss)) {
      throw std::runtime_error("run_stage: non-finite loss at step " + std::to_string(step));
    }

    double norm2 = 0.0;
    for (double v : grads.grad_embedding) norm2 += v * v;
    for (double v : grads.grad_projection) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    const double scale = norm > cfg.clip_norm && norm > 0.0 ? cfg.clip_norm / norm : 1.0;

    const double lr = lr_schedule(step, warmup, stable, cfg.steps, cfg.learning_rate);
    for (std::size_t i = 0; i < encoder.embedding.size(); ++i) {
      encoder.embedding[i] -= lr * scale * grads.grad_embedding[i];
    }
    for (std::size_t i = 0; i < encoder.projection.size(); ++i) {
      encoder.projection[i] -= lr * scale * grads.grad_projection[i];
    }
    result.trace.push_back({step, grads.loss, lr, beta, source});
  }
  result.encoder = std::move(encoder);
  return result;
}

/// Held-out pairs plus distractor documents for recall evaluation.
struct HeldoutSet {
  std::vector<BatchRecord> pairs;
  std::vector<std::vector<int>> distractors;
};

/// Recall@K of each pair's own document against pairs + distractors, scored
/// through the retrieval index at the given quantization.
inline double eval_recall_at_k(const ToyEncoder& enc, const HeldoutSet& heldout,
                               std::size_t k, Dtype dtype) {
  if (heldout.pairs.empty()) throw std::invalid_argument("eval_recall_at_k: no pairs");
  std::vector<std::string> ids;
  std::vector<RawEmbedding> raw;
  for (std::size_t i = 0; i < heldout.pairs.size(); ++i) {
    ids.push_back("p" + std::to_string(i));
    raw.push_back(mean_pool(encode(enc, heldout.pairs[i].doc_ids)));
  }
  for (std::size_t i = 0; i < heldout.distractors.size(); ++i) {
    ids.push_back("x" + std::to_string(i));
    raw.push_back(mean_pool(encode(enc, heldout.distractors[i])));
  }

  Index index = [&] {
    if (dtype == Dtype::Int8) {
      std::vector<QuantizedEmbedding> rows;
      rows.reserve(raw.size());
      for (const auto& e : raw) rows.push_back(quantize_int8(e));
      return Index::build(rows, ids);
    }
    std::vector<BinaryEmbedding> rows;
    rows.reserve(raw.size());
    for (const auto& e : raw) rows.push_back(quantize_binary(e));
    return Index::build(rows, ids);
  }();

  std::size_t hits = 0;
  for (std::size_t i = 0; i < heldout.pairs.size(); ++i) {
    const RawEmbedding q = mean_pool(encode(enc, heldout.pairs[i].query_ids));
    const std::string want = "p" + std::to_string(i);
    const auto ranked = dtype == Dtype::Int8
                            ? search_topk(index, quantize_int8(q), k)
                            : search_topk(index, quantize_binary(q), k);
    for (const auto& scored : ranked) {
      if (scored.doc_id == want) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(heldout.pairs.size());
}

/// Fraction of held-out chunked records whose gold chunk ranks first among
/// the chunks of its own document (late chunking, INT8 similarities).
inline double eval_gold_chunk_accuracy(const ToyEncoder& enc,
                                       const std::vector<BatchRecord>& records) {
  if (records.empty()) throw std::invalid_argument("eval_gold_chunk_accuracy: no records");
  std::size_t correct = 0;
  for (const auto& rec : records) {
    TokenMatrix doc = encode(enc, rec.doc_ids);
    doc.spans = rec.chunk_spans;
    const std::vector<RawEmbedding> chunks = chunk_pool(doc);
    const QuantizedEmbedding q = quantize_int8(mean_pool(encode(enc, rec.query_ids)));
    double best = -2.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < chunks.size(); ++k) {
      const double s = similarity_int8(q, quantize_int8(chunks[k]));
      if (s > best) {
        best = s;
        best_k = k;
      }
    }
    if (best_k == rec.gold_chunk) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

struct CurriculumConfig {
  StageConfig pair;
  StageConfig contextual;
  StageConfig triplet;
  std::vector<double> merge_candidates = {0.0, 0.25, 0.5, 0.75, 1.0};
  bool triplet_from_pair = false;  // default: branch from the contextual checkpoint
  std::size_t eval_k = 10;
};

struct CurriculumResult {
  ToyEncoder pair_encoder;
  ToyEncoder context_encoder;
  ToyEncoder triplet_encoder;
  ToyEncoder merged_encoder;
  double merge_t = 0.5;
  double selection_recall = 0.0;
  std::map<std::string, std::vector<TraceRow>> traces;
};

/// pair -> contextual -> triplet -> merge. The contextual checkpoint is the
/// context model; the final model is the slerp of the contextual and triplet
/// checkpoints at the candidate weight with the best held-out Recall@K.
inline CurriculumResult run_curriculum(ToyEncoder init, const CurriculumConfig& cfg,
                                       const DatasetPool& pair_pool,
                                       const DatasetPool& contextual_pool,
                                       const DatasetPool& triplet_pool,
                                       const HeldoutSet& selection_set) {
  if (cfg.pair.kind != StageKind::Pair || cfg.contextual.kind != StageKind::Contextual ||
      cfg.triplet.kind != StageKind::Triplet) {
    throw std::invalid_argument("run_curriculum: stages must be pair, contextual, triplet");
  }
  if (cfg.merge_candidates.empty()) {
    throw std::invalid_argument("run_curriculum: no merge candidates");
  }

  CurriculumResult result;
  StageResult pair_stage = run_stage(std::move(init), cfg.pair, pair_pool);
  result.pair_encoder = pair_stage.encoder;
  result.traces["pair"] = std::move(pair_stage.trace);

  StageResult ctx_stage = run_stage(pair_stage.encoder, cfg.contextual, contextual_pool);
  result.context_encoder = ctx_stage.encoder;
  result.traces["contextual"] = std::move(ctx_stage.trace);

  const ToyEncoder& triplet_base =
      cfg.triplet_from_pair ? result.pair_encoder : result.context_encoder;
  StageResult trip_stage = run_stage(triplet_base, cfg.triplet, triplet_pool);
  result.triplet_encoder = trip_stage.encoder;
  result.traces["triplet"] = std::move(trip_stage.trace);

  const ParamVector ctx_params = to_params(result.context_encoder);
  const ParamVector trip_params = to_params(result.triplet_encoder);
  double best_recall = -1.0;
  for (double t : cfg.merge_candidates) {
    const ToyEncoder candidate = from_params(slerp(ctx_params, trip_params, t));
    const double recall = eval_recall_at_k(candidate, selection_set, cfg.eval_k, Dtype::Int8);
    if (recall > best_recall) {
      best_recall = recall;
      result.merge_t = t;
      result.merged_encoder = candidate;
    }
  }
  result.selection_recall = best_recall;
  return result;
}

}  // namespace qembed
