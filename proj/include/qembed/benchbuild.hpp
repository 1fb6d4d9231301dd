#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/random.hpp"
#include "qembed/retrieval.hpp"

namespace qembed {

struct LogRecord {
  std::string query;
  std::string url;
  std::int64_t timestamp = 0;
  std::string language;
  bool pii = false;
};

struct Q2QBenchmark {
  std::vector<std::pair<std::string, std::string>> queries;  // (qid, text)
  std::vector<std::pair<std::string, std::string>> corpus;   // (docid, text)
  Qrels qrels;
};

/// Lowercased host + path, scheme, query string, fragment and trailing slash
/// stripped.
inline std::string normalize_url(const std::string& url) {
  std::string u = url;
  const auto scheme = u.find("://");
  if (scheme != std::string::npos) u = u.substr(scheme + 3);
  const auto cut = u.find_first_of("?#");
  if (cut != std::string::npos) u = u.substr(0, cut);
  while (!u.empty() && u.back() == '/') u.pop_back();
  for (char& c : u) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return u;
}

/// Cluster queries by destination URL, drop PII-flagged records and exact
/// duplicate strings, require >= 2 distinct queries per cluster, and promote
/// the temporally first query to evaluation query; the rest become pseudo
/// documents, all relevant to that query.
inline Q2QBenchmark build_q2q(const std::vector<LogRecord>& logs) {
  std::map<std::string, std::vector<const LogRecord*>> clusters;
  for (const auto& rec : logs) {
    if (rec.pii) continue;
    if (rec.url.empty()) throw std::invalid_argument("build_q2q: empty url");
    clusters[normalize_url(rec.url)].push_back(&rec);
  }

  Q2QBenchmark bench;
  std::size_t qid_counter = 0, doc_counter = 0;
  for (auto& [url_key, members] : clusters) {
    // Timestamp order, ties broken lexicographically by query text.
    std::stable_sort(members.begin(), members.end(),
                     [](const LogRecord* a, const LogRecord* b) {
                       if (a->timestamp != b->timestamp) return a->timestamp < b->timestamp;
                       return a->query < b->query;
                     });
    std::vector<const LogRecord*> distinct;
    std::set<std::string> seen;
    for (const LogRecord* rec : members) {
      if (seen.insert(rec->query).second) distinct.push_back(rec);
    }
    if (distinct.size() < 2) continue;

    const std::string qid = "q" + std::to_string(++qid_counter);
    bench.queries.emplace_back(qid, distinct.front()->query);
    for (std::size_t i = 1; i < distinct.size(); ++i) {
      const std::string docid = "d" + std::to_string(++doc_counter);
      bench.corpus.emplace_back(docid, distinct[i]->query);
      bench.qrels.judgments[qid][docid] = 1;
    }
  }
  return bench;
}

/// Boolean relevance labels from thresholded RRF scores over the given runs.
/// Only documents of the per-query candidate pool are labeled; every pooled
/// document must be ranked by at least one run. Qrels contain only label-1
/// entries.
inline Qrels label_q2d(const std::map<std::string, std::vector<std::string>>& pools,
                       const std::vector<RunFile>& runs, double threshold,
                       double k_rrf = 60.0) {
  if (std::isnan(threshold)) throw std::invalid_argument("label_q2d: threshold is NaN");
  const RunFile fused = rrf_fuse(runs, k_rrf);
  Qrels qrels;
  for (const auto& [qid, docs] : pools) {
    std::map<std::string, double> scores;
    auto it = fused.queries.find(qid);
    if (it != fused.queries.end()) {
      for (const auto& scored : it->second) scores[scored.doc_id] = scored.score;
    }
    for (const auto& doc : docs) {
      auto st = scores.find(doc);
      if (st == scores.end()) {
        throw std::invalid_argument("label_q2d: pooled doc " + doc + " for query " +
                                    qid + " appears in no run");
      }
      if (st->second >= threshold) qrels.judgments[qid][doc] = 1;
    }
  }
  return qrels;
}

enum class QueryIntent { Informational, Navigational, Transactional, Factual, Exploratory };
enum class QueryForm { Keyword, NaturalQuestion, Telegraphic, LongForm };
enum class LengthClass { Short, Medium, Long };

struct QueryMeta {
  QueryIntent intent = QueryIntent::Informational;
  QueryForm form = QueryForm::Keyword;
  LengthClass length = LengthClass::Short;
  std::string language = "en";
};

/// Whitespace-token count buckets: short 1-2, medium 3-11, long 12+.
inline LengthClass length_class_of(const std::string& query) {
  std::istringstream ss(query);
  std::string tok;
  std::size_t n = 0;
  while (ss >> tok) ++n;
  if (n <= 2) return LengthClass::Short;
  if (n <= 11) return LengthClass::Medium;
  return LengthClass::Long;
}

/// Builds a QueryMeta whose length class is derived from the text, keeping
/// the type invariant by construction.
inline QueryMeta make_query_meta(const std::string& query, QueryIntent intent,
                                 QueryForm form, std::string language) {
  QueryMeta meta;
  meta.intent = intent;
  meta.form = form;
  meta.length = length_class_of(query);
  meta.language = std::move(language);
  return meta;
}

inline std::string to_string(QueryIntent v) {
  switch (v) {
    case QueryIntent::Informational: return "informational";
    case QueryIntent::Navigational: return "navigational";
    case QueryIntent::Transactional: return "transactional";
    case QueryIntent::Factual: return "factual";
    case QueryIntent::Exploratory: return "exploratory";
  }
  return "?";
}

inline std::string to_string(QueryForm v) {
  switch (v) {
    case QueryForm::Keyword: return "keyword";
    case QueryForm::NaturalQuestion: return "natural-question";
    case QueryForm::Telegraphic: return "telegraphic";
    case QueryForm::LongForm: return "long-form";
  }
  return "?";
}

inline std::string to_string(LengthClass v) {
  switch (v) {
    case LengthClass::Short: return "short";
    case LengthClass::Medium: return "medium";
    case LengthClass::Long: return "long";
  }
  return "?";
}

enum class StratumDim { Intent, Form, Length, Language };

inline StratumDim stratum_dim_from_string(const std::string& name) {
  if (name == "intent") return StratumDim::Intent;
  if (name == "form") return StratumDim::Form;
  if (name == "length") return StratumDim::Length;
  if (name == "language") return StratumDim::Language;
  throw std::invalid_argument("unknown stratum dimension: " + name);
}

inline std::string stratum_key(const QueryMeta& meta, const std::vector<StratumDim>& dims) {
  std::string key;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i > 0) key += '|';
    switch (dims[i]) {
      case StratumDim::Intent: key += to_string(meta.intent); break;
      case StratumDim::Form: key += to_string(meta.form); break;
      case StratumDim::Length: key += to_string(meta.length); break;
      case StratumDim::Language: key += meta.language; break;
    }
  }
  return key;
}

struct StratifyOptions {
  std::vector<StratumDim> dims = {StratumDim::Intent};
  bool strict = true;  // strict: quotas met exactly; otherwise best effort
};

/// Per-stratum sampling with exact (strict) or maximal (best-effort) quota
/// satisfaction. Candidates outside every quota stratum are ignored. Returns
/// selected candidate indices in ascending order.
inline std::vector<std::size_t> stratified_sample(
    const std::vector<std::pair<std::string, QueryMeta>>& candidates,
    const std::map<std::string, std::size_t>& quotas, const StratifyOptions& opt,
    Rng& rng) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    groups[stratum_key(candidates[i].second, opt.dims)].push_back(i);
  }
  std::vector<std::size_t> selected;
  for (const auto& [key, quota] : quotas) {
    auto it = groups.find(key);
    const std::size_t available = it == groups.end() ? 0 : it->second.size();
    if (opt.strict && available < quota) {
      throw std::invalid_argument("stratified_sample: stratum '" + key + "' has " +
                                  std::to_string(available) + " candidates, quota " +
                                  std::to_string(quota));
    }
    if (available == 0) continue;
    std::vector<std::size_t> pool = it->second;
    shuffle(rng, pool);
    const std::size_t take = std::min(quota, available);
    selected.insert(selected.end(), pool.begin(), pool.begin() + take);
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

}  // namespace qembed
