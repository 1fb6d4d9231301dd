#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qembed/embedding.hpp"
#include "qembed/merge.hpp"
#include "qembed/retrieval.hpp"

#include "json.hpp"

namespace qembed {

namespace detail {

inline void write_bytes(std::ostream& os, const void* data, std::size_t size) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

template <typename T>
void write_le(std::ostream& os, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  }
  return static_cast<T>(v);
}

inline void write_f32_le(std::ostream& os, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  write_le<std::uint32_t>(os, bits);
}

inline float read_f32_le(std::istream& is) {
  const std::uint32_t bits = read_le<std::uint32_t>(is);
  float value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode) {
  std::ifstream is(path, mode);
  if (!is) throw std::runtime_error("cannot open " + path);
  return is;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode) {
  std::ofstream os(path, mode);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// QEMB: quantized embedding file.
// Little-endian header {magic "QEMB", version u16, dtype u8 (0 = int8,
// 1 = binary-packed), dim u32, count u64} followed by the row-major payload.
// Binary vectors are bit-packed 8 per byte, LSB first, +1 encoded as bit 1.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kQembVersion = 1;

struct QembFile {
  Dtype dtype = Dtype::Int8;
  std::size_t dim = 0;
  std::vector<QuantizedEmbedding> int8_rows;
  std::vector<BinaryEmbedding> binary_rows;

  std::size_t count() const {
    return dtype == Dtype::Int8 ? int8_rows.size() : binary_rows.size();
  }
};

inline void write_qemb(const std::string& path, const QembFile& file) {
  auto os = detail::open_out(path, std::ios::binary);
  detail::write_bytes(os, "QEMB", 4);
  detail::write_le<std::uint16_t>(os, kQembVersion);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(file.dtype));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.dim));
  detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(file.count()));
  if (file.dtype == Dtype::Int8) {
    for (const auto& row : file.int8_rows) {
      if (row.dim() != file.dim) throw std::invalid_argument("write_qemb: dimension mismatch");
      detail::write_bytes(os, row.values.data(), row.values.size());
    }
  } else {
    const std::size_t rb = (file.dim + 7) / 8;
    for (const auto& row : file.binary_rows) {
      if (row.dim() != file.dim) throw std::invalid_argument("write_qemb: dimension mismatch");
      std::vector<std::uint8_t> packed(rb, 0);
      for (std::size_t j = 0; j < file.dim; ++j) {
        if (row.values[j] > 0) packed[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8));
      }
      detail::write_bytes(os, packed.data(), packed.size());
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline QembFile read_qemb(const std::string& path) {
  auto is = detail::open_in(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "QEMB", 4) != 0) {
    throw std::runtime_error(path + ": not a QEMB file");
  }
  const auto version = detail::read_le<std::uint16_t>(is);
  if (version != kQembVersion) {
    throw std::runtime_error(path + ": unsupported QEMB version " + std::to_string(version));
  }
  const auto dtype = detail::read_le<std::uint8_t>(is);
  if (dtype > 1) throw std::runtime_error(path + ": unknown dtype");
  QembFile file;
  file.dtype = static_cast<Dtype>(dtype);
  file.dim = detail::read_le<std::uint32_t>(is);
  const auto count = detail::read_le<std::uint64_t>(is);
  if (file.dtype == Dtype::Int8) {
    file.int8_rows.resize(count);
    for (auto& row : file.int8_rows) {
      row.values.resize(file.dim);
      is.read(reinterpret_cast<char*>(row.values.data()),
              static_cast<std::streamsize>(file.dim));
      if (!is) throw std::runtime_error(path + ": truncated payload");
    }
  } else {
    const std::size_t rb = (file.dim + 7) / 8;
    std::vector<std::uint8_t> packed(rb);
    file.binary_rows.resize(count);
    for (auto& row : file.binary_rows) {
      is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(rb));
      if (!is) throw std::runtime_error(path + ": truncated payload");
      row.values.resize(file.dim);
      for (std::size_t j = 0; j < file.dim; ++j) {
        row.values[j] = (packed[j / 8] >> (j % 8)) & 1u ? 1 : -1;
      }
    }
  }
  return file;
}

inline Index index_from_qemb(const QembFile& file, std::vector<std::string> ids = {},
                             const IndexBuildOptions& opt = {}) {
  if (file.dtype == Dtype::Int8) return Index::build(file.int8_rows, std::move(ids), opt);
  return Index::build(file.binary_rows, std::move(ids), opt);
}

// ---------------------------------------------------------------------------
// QCKP: checkpoint file.
// Little-endian header {magic "QCKP", version u16, tensor count u32, per
// tensor: name (u16 length + bytes), ndim u8, dims u64 each, offset u64 in
// float units} followed by the contiguous float32 payload.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kQckpVersion = 1;

inline void write_qckp(const std::string& path, const ParamVector& params) {
  std::size_t expect = 0;
  for (const auto& tensor : params.layout) expect += tensor.element_count();
  if (expect != params.values.size()) {
    throw std::invalid_argument("write_qckp: layout does not cover the value vector");
  }
  auto os = detail::open_out(path, std::ios::binary);
  detail::write_bytes(os, "QCKP", 4);
  detail::write_le<std::uint16_t>(os, kQckpVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.layout.size()));
  std::uint64_t offset = 0;
  for (const auto& tensor : params.layout) {
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(tensor.name.size()));
    detail::write_bytes(os, tensor.name.data(), tensor.name.size());
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(tensor.shape.size()));
    for (std::size_t s : tensor.shape) detail::write_le<std::uint64_t>(os, s);
    detail::write_le<std::uint64_t>(os, offset);
    offset += tensor.element_count();
  }
  for (double v : params.values) detail::write_f32_le(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline ParamVector read_qckp(const std::string& path) {
  auto is = detail::open_in(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "QCKP", 4) != 0) {
    throw std::runtime_error(path + ": not a QCKP file");
  }
  const auto version = detail::read_le<std::uint16_t>(is);
  if (version != kQckpVersion) {
    throw std::runtime_error(path + ": unsupported QCKP version " + std::to_string(version));
  }
  const auto tensors = detail::read_le<std::uint32_t>(is);
  ParamVector params;
  std::uint64_t total = 0;
  for (std::uint32_t t = 0; t < tensors; ++t) {
    TensorLayout layout;
    const auto name_len = detail::read_le<std::uint16_t>(is);
    layout.name.resize(name_len);
    is.read(layout.name.data(), name_len);
    const auto ndim = detail::read_le<std::uint8_t>(is);
    for (std::uint8_t d = 0; d < ndim; ++d) {
      layout.shape.push_back(static_cast<std::size_t>(detail::read_le<std::uint64_t>(is)));
    }
    const auto offset = detail::read_le<std::uint64_t>(is);
    if (offset != total) throw std::runtime_error(path + ": non-contiguous tensor table");
    total += layout.element_count();
    params.layout.push_back(std::move(layout));
  }
  params.values.resize(total);
  for (auto& v : params.values) v = static_cast<double>(detail::read_f32_le(is));
  return params;
}

// ---------------------------------------------------------------------------
// TREC text formats: six-column runs, three-column qrels.
// ---------------------------------------------------------------------------

inline void write_run(const std::string& path, const RunFile& run,
                      const std::string& tag = "qembed") {
  auto os = detail::open_out(path, std::ios::out);
  os << std::setprecision(10);
  for (const auto& [qid, ranked] : run.queries) {
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      os << qid << " Q0 " << ranked[r].doc_id << ' ' << r + 1 << ' '
         << ranked[r].score << ' ' << tag << '\n';
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline RunFile read_run(const std::string& path) {
  auto is = detail::open_in(path, std::ios::in);
  RunFile run;
  std::map<std::string, std::vector<std::pair<long, ScoredDoc>>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid, q0, doc, tag;
    long rank = 0;
    double score = 0.0;
    if (!(ss >> qid >> q0 >> doc >> rank >> score >> tag)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed run line");
    }
    rows[qid].push_back({rank, {doc, score}});
  }
  for (auto& [qid, entries] : rows) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& ranked = run.queries[qid];
    for (auto& [rank, scored] : entries) {
      if (!ranked.empty() && ranked.back().score < scored.score) {
        throw std::runtime_error(path + ": scores must be non-increasing for query " + qid);
      }
      for (const auto& prev : ranked) {
        if (prev.doc_id == scored.doc_id) {
          throw std::runtime_error(path + ": duplicate doc " + scored.doc_id +
                                   " for query " + qid);
        }
      }
      ranked.push_back(scored);
    }
  }
  return run;
}

inline void write_qrels(const std::string& path, const Qrels& qrels) {
  auto os = detail::open_out(path, std::ios::out);
  for (const auto& [qid, judged] : qrels.judgments) {
    for (const auto& [doc, grade] : judged) {
      os << qid << ' ' << doc << ' ' << grade << '\n';
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

/// Accepts both the three-column form written here and the classic
/// four-column TREC layout with the unused iteration field.
inline Qrels read_qrels(const std::string& path) {
  auto is = detail::open_in(path, std::ios::in);
  Qrels qrels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> cols;
    std::string tok;
    while (ss >> tok) cols.push_back(tok);
    if (cols.size() != 3 && cols.size() != 4) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed qrels line");
    }
    const std::string& qid = cols.front();
    const std::string& doc = cols[cols.size() - 2];
    int grade = 0;
    try {
      grade = std::stoi(cols.back());
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad relevance grade");
    }
    if (grade < 0) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": negative grade");
    }
    qrels.judgments[qid][doc] = grade;
  }
  return qrels;
}

// ---------------------------------------------------------------------------
// JSONL and plain-text helpers.
// ---------------------------------------------------------------------------

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  auto is = detail::open_in(path, std::ios::in);
  std::vector<nlohmann::json> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  auto is = detail::open_in(path, std::ios::in);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  auto os = detail::open_out(path, std::ios::out);
  for (const auto& line : lines) os << line << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace qembed
