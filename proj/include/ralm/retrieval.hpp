#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/model.hpp"

namespace ralm {

// Byte-level tokenizer: one token per byte.
inline Tokens tokenize_bytes(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(TokenId(c));
  return out;
}

inline std::string detokenize_bytes(std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens) {
    if (t < 256) out.push_back(char(t));
  }
  return out;
}

struct Document {
  std::string id;
  Tokens tokens;
  std::string source;
};

class Corpus {
 public:
  // Empty documents are dropped; duplicate ids are rejected.
  void add(Document doc) {
    if (doc.tokens.empty()) return;
    if (!ids_.insert(doc.id).second) throw DataError("corpus: duplicate doc id '" + doc.id + "'");
    docs_.push_back(std::move(doc));
  }

  const std::vector<Document>& documents() const { return docs_; }
  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }

 private:
  std::vector<Document> docs_;
  std::set<std::string> ids_;
};

// One document per regular file, id = file name, files visited in sorted
// order. Ids listed in `exclude` are skipped.
inline Corpus ingest_text_dir(const std::filesystem::path& dir,
                              const std::set<std::string>& exclude = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("corpus: '" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Corpus corpus;
  for (const auto& f : files) {
    const std::string id = f.filename().string();
    if (exclude.count(id)) continue;
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    corpus.add({id, tokenize_bytes(ss.str()), f.string()});
  }
  return corpus;
}

// JSON-lines with fields "id" (string or integer) and "text".
inline Corpus ingest_jsonl(const std::filesystem::path& file,
                           const std::set<std::string>& exclude = {}) {
  std::ifstream in(file);
  if (!in) throw DataError("corpus: cannot open '" + file.string() + "'");
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("corpus: " + file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("id") || !j.contains("text") || !j["text"].is_string())
      throw DataError("corpus: " + file.string() + ":" + std::to_string(lineno) +
                      ": expected fields id and text");
    const std::string id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    if (exclude.count(id)) continue;
    corpus.add({id, tokenize_bytes(j["text"].get<std::string>()),
                file.string() + ":" + std::to_string(lineno)});
  }
  return corpus;
}

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct ScoredDoc {
  std::size_t index = 0;  // position in the index's document list
  std::string id;
  double score = 0.0;
};

// Query tokens -> ranked documents. Implementations must be deterministic.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::vector<ScoredDoc> retrieve(std::span<const TokenId> query, std::size_t top_k) const = 0;
  virtual const Tokens& document_tokens(std::size_t index) const = 0;
  virtual std::size_t size() const = 0;
};

// Okapi BM25 over token ids:
//   idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//   score(D, Q) = sum over distinct t in Q, ascending id, of
//                 idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |D| / avgdl))
class Bm25Index : public Retriever {
 public:
  using TermFreqs = std::vector<std::pair<TokenId, std::uint32_t>>;  // sorted by term

  Bm25Index() = default;

  static Bm25Index build(const Corpus& corpus, Bm25Params params = {}) {
    if (corpus.empty()) throw DataError("bm25: empty corpus");
    Bm25Index idx;
    idx.params_ = params;
    for (const auto& d : corpus.documents()) {
      std::map<TokenId, std::uint32_t> tf;
      for (TokenId t : d.tokens) ++tf[t];
      idx.ids_.push_back(d.id);
      idx.tokens_.push_back(d.tokens);
      idx.doc_tf_.emplace_back(tf.begin(), tf.end());
      idx.doc_len_.push_back(d.tokens.size());
      for (const auto& [t, c] : tf) ++idx.df_[t];
    }
    idx.finish();
    return idx;
  }

  std::size_t size() const override { return ids_.size(); }
  const Bm25Params& params() const { return params_; }
  double avgdl() const { return avgdl_; }
  std::uint32_t df(TokenId t) const {
    auto it = df_.find(t);
    return it == df_.end() ? 0 : it->second;
  }
  const std::map<TokenId, std::uint32_t>& document_frequencies() const { return df_; }
  const TermFreqs& term_frequencies(std::size_t doc) const { return doc_tf_[doc]; }
  std::size_t doc_length(std::size_t doc) const { return doc_len_[doc]; }
  const std::string& doc_id(std::size_t doc) const { return ids_[doc]; }
  const Tokens& document_tokens(std::size_t doc) const override { return tokens_[doc]; }

  std::vector<double> scores(std::span<const TokenId> query) const {
    std::vector<double> out(size(), 0.0);
    const std::set<TokenId> terms(query.begin(), query.end());
    const double n = double(size());
    for (TokenId t : terms) {
      auto it = postings_.find(t);
      if (it == postings_.end()) continue;
      const double df = double(it->second.size());
      const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
      for (const auto& [doc, tf_count] : it->second) {
        const double tf = double(tf_count);
        const double norm = params_.k1 * (1.0 - params_.b + params_.b * double(doc_len_[doc]) / avgdl_);
        out[doc] += idf * (tf * (params_.k1 + 1.0)) / (tf + norm);
      }
    }
    return out;
  }

  // Descending score, ties by ascending doc id; min(top_k, size()) results.
  std::vector<ScoredDoc> retrieve(std::span<const TokenId> query, std::size_t top_k) const override {
    const auto sc = scores(query);
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t k = std::min(top_k, order.size());
    auto better = [&](std::size_t a, std::size_t b) {
      if (sc[a] != sc[b]) return sc[a] > sc[b];
      return ids_[a] < ids_[b];
    };
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(), better);
    std::vector<ScoredDoc> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], ids_[order[i]], sc[order[i]]});
    return out;
  }

  // Binary layout (all integers little-endian):
  //   "RALMBM25" u32 version=1, f64 k1, f64 b, u64 num_docs
  //   per doc: u32 id_len, id bytes, u64 num_tokens, u32 tokens[],
  //            u64 num_terms, (u32 term, u32 tf)[]
  //   u64 num_df, (u32 term, u32 df)[]
  void save(std::ostream& out) const {
    out.write("RALMBM25", 8);
    put<std::uint32_t>(out, kVersion);
    put<double>(out, params_.k1);
    put<double>(out, params_.b);
    put<std::uint64_t>(out, size());
    for (std::size_t d = 0; d < size(); ++d) {
      put<std::uint32_t>(out, std::uint32_t(ids_[d].size()));
      out.write(ids_[d].data(), std::streamsize(ids_[d].size()));
      put<std::uint64_t>(out, tokens_[d].size());
      for (TokenId t : tokens_[d]) put<std::uint32_t>(out, t);
      put<std::uint64_t>(out, doc_tf_[d].size());
      for (const auto& [t, c] : doc_tf_[d]) {
        put<std::uint32_t>(out, t);
        put<std::uint32_t>(out, c);
      }
    }
    put<std::uint64_t>(out, df_.size());
    for (const auto& [t, c] : df_) {
      put<std::uint32_t>(out, t);
      put<std::uint32_t>(out, c);
    }
    if (!out) throw DataError("bm25: write failed");
  }

  static Bm25Index load(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string_view(magic, 8) != "RALMBM25") throw DataError("bm25: bad magic");
    if (get<std::uint32_t>(in) != kVersion) throw DataError("bm25: unsupported index version");
    Bm25Index idx;
    idx.params_.k1 = get<double>(in);
    idx.params_.b = get<double>(in);
    const auto ndocs = get<std::uint64_t>(in);
    for (std::uint64_t d = 0; d < ndocs; ++d) {
      std::string id(get<std::uint32_t>(in), '\0');
      in.read(id.data(), std::streamsize(id.size()));
      Tokens toks(get<std::uint64_t>(in));
      for (auto& t : toks) t = get<std::uint32_t>(in);
      TermFreqs tf(get<std::uint64_t>(in));
      for (auto& [t, c] : tf) {
        t = get<std::uint32_t>(in);
        c = get<std::uint32_t>(in);
      }
      idx.ids_.push_back(std::move(id));
      idx.doc_len_.push_back(toks.size());
      idx.tokens_.push_back(std::move(toks));
      idx.doc_tf_.push_back(std::move(tf));
    }
    const auto nterms = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < nterms; ++i) {
      const auto t = get<std::uint32_t>(in);
      idx.df_[t] = get<std::uint32_t>(in);
    }
    if (!in) throw DataError("bm25: truncated index file");
    if (idx.ids_.empty()) throw DataError("bm25: index has no documents");
    idx.finish();
    return idx;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    save(out);
  }
  static Bm25Index load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open index '" + path + "'");
    return load(in);
  }

 private:
  static constexpr std::uint32_t kVersion = 1;

  template <class V>
  static void put(std::ostream& out, V v) {
    unsigned char b[sizeof(V)];
    std::uint64_t bits = 0;
    if constexpr (std::is_same_v<V, double>) {
      bits = std::bit_cast<std::uint64_t>(v);
    } else {
      bits = std::uint64_t(v);
    }
    for (std::size_t i = 0; i < sizeof(V); ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), sizeof(V));
  }

  template <class V>
  static V get(std::istream& in) {
    unsigned char b[sizeof(V)] = {};
    in.read(reinterpret_cast<char*>(b), sizeof(V));
    if (!in) throw DataError("bm25: truncated index file");
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(V); ++i) bits |= std::uint64_t(b[i]) << (8 * i);
    if constexpr (std::is_same_v<V, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<V>(bits);
    }
  }

  void finish() {
    double total = 0.0;
    for (auto len : doc_len_) total += double(len);
    avgdl_ = total / double(doc_len_.size());
    postings_.clear();
    for (std::size_t d = 0; d < doc_tf_.size(); ++d)
      for (const auto& [t, c] : doc_tf_[d]) postings_[t].emplace_back(d, c);
    for (const auto& [t, list] : postings_) {
      auto it = df_.find(t);
      if (it == df_.end() || it->second != list.size())
        throw DataError("bm25: document frequency table inconsistent with term frequencies");
    }
  }

  Bm25Params params_;
  std::vector<std::string> ids_;
  std::vector<Tokens> tokens_;
  std::vector<TermFreqs> doc_tf_;
  std::vector<std::size_t> doc_len_;
  std::map<TokenId, std::uint32_t> df_;
  std::unordered_map<TokenId, std::vector<std::pair<std::size_t, std::uint32_t>>> postings_;
  double avgdl_ = 0.0;
};

inline Bm25Index build_index(const Corpus& corpus, Bm25Params params = {}) {
  return Bm25Index::build(corpus, params);
}

// True when generation step n (sequence length n, prompt length t) is a
// retrieval boundary: (n - t) mod s == 0, so the first step retrieves.
inline bool should_retrieve(std::size_t n, std::size_t prompt_len, std::size_t stride) {
  if (n < prompt_len) throw std::invalid_argument("should_retrieve: n < prompt length");
  if (stride == 0) throw std::invalid_argument("should_retrieve: stride must be >= 1");
  return (n - prompt_len) % stride == 0;
}

struct RetrievalConfig {
  std::size_t stride = 16;
  std::size_t query_len = 16;
  std::size_t top_k = 1;
  std::size_t evidence_budget = 128;  // retrieved docs are truncated to this many tokens

  void validate() const {
    if (stride == 0 || query_len == 0 || top_k == 0)
      throw std::invalid_argument("retrieval config: stride, query_len and top_k must be >= 1");
  }
};

}  // namespace ralm
