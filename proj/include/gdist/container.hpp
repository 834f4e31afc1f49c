#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/datagen.hpp"

namespace gdist::io {

// Layout (all integers little-endian):
//   "GDST" | u32 version | u32 kind | u64 header_len | header (JSON text)
//   u64 block_count | blocks...        block = u32 name_len | name | u8 dtype | u8 rank | u64 dims[rank] | payload
//   "ANNO" | u64 row_count | rows...   row = u64 item | i64 start | i64 end | i64 label
//   "END!"
inline constexpr char kMagic[4] = {'G', 'D', 'S', 'T'};
inline constexpr char kAnnoMagic[4] = {'A', 'N', 'N', 'O'};
inline constexpr char kEndMagic[4] = {'E', 'N', 'D', '!'};
inline constexpr std::uint32_t kVersion = 1;

enum class ContainerKind : std::uint32_t { classification_corpus = 1, detection_corpus = 2, checkpoint = 3 };
enum class DType : std::uint8_t { f64 = 1 };

struct Block {
  std::string name;
  DType dtype = DType::f64;
  Tensor tensor;
  friend bool operator==(const Block&, const Block&) = default;
};

struct Annotation {
  std::uint64_t item = 0;
  std::int64_t start = 0, end = 0, label = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Container {
  ContainerKind kind = ContainerKind::checkpoint;
  nlohmann::json header = nlohmann::json::object();
  std::vector<Block> blocks;
  std::vector<Annotation> annotations;
};

namespace detail {

class Writer {
public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    buf_.insert(buf_.end(), b, b + sizeof(T));
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<unsigned char>& bytes() { return buf_; }

private:
  std::vector<unsigned char> buf_;
};

class Reader {
public:
  explicit Reader(const std::vector<unsigned char>& buf) : buf_(buf) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char b[sizeof(T)];
    std::memcpy(b, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char (&m)[4], const char* what) {
    const std::size_t at = pos_;
    if (string(4, what) != std::string(m, 4)) throw ParseError(std::string("bad ") + what, at);
  }
  void need(std::size_t n, const char* what) const {
    if (n > buf_.size() - pos_) throw ParseError(std::string("truncated ") + what, pos_);
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

private:
  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode(const Container& c) {
  detail::Writer w;
  w.raw(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.kind));
  const std::string header = c.header.dump();
  w.put<std::uint64_t>(header.size());
  w.raw(header.data(), header.size());
  w.put<std::uint64_t>(c.blocks.size());
  for (const auto& b : c.blocks) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.raw(b.name.data(), b.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.tensor.rank()));
    for (auto d : b.tensor.shape()) w.put<std::uint64_t>(d);
    for (double v : b.tensor.values()) w.put<double>(v);
  }
  w.raw(kAnnoMagic, 4);
  w.put<std::uint64_t>(c.annotations.size());
  for (const auto& a : c.annotations) {
    w.put<std::uint64_t>(a.item);
    w.put<std::int64_t>(a.start);
    w.put<std::int64_t>(a.end);
    w.put<std::int64_t>(a.label);
  }
  w.raw(kEndMagic, 4);
  return std::move(w.bytes());
}

inline Container decode(const std::vector<unsigned char>& bytes) {
  detail::Reader r(bytes);
  Container c;
  r.expect_magic(kMagic, "magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw VersionError(version, kVersion);
  const std::size_t kind_at = r.pos();
  const auto kind = r.get<std::uint32_t>("kind");
  if (kind < 1 || kind > 3) throw ParseError("unknown container kind " + std::to_string(kind), kind_at);
  c.kind = static_cast<ContainerKind>(kind);

  const auto header_len = r.get<std::uint64_t>("header length");
  const std::size_t header_at = r.pos();
  const std::string header = r.string(header_len, "header");
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed header: ") + e.what(), header_at);
  }

  const auto nblocks = r.get<std::uint64_t>("block count");
  for (std::uint64_t i = 0; i < nblocks; ++i) {
    Block b;
    const auto name_len = r.get<std::uint32_t>("block name length");
    b.name = r.string(name_len, "block name");
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("block dtype");
    if (dtype != static_cast<std::uint8_t>(DType::f64))
      throw ParseError("unsupported dtype " + std::to_string(dtype), dtype_at);
    const auto rank = r.get<std::uint8_t>("block rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("block dims");
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / sizeof(double)) throw ParseError("truncated block payload", r.pos());
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>("block payload");
    b.tensor = Tensor(std::move(shape), std::move(data));
    c.blocks.push_back(std::move(b));
  }

  r.expect_magic(kAnnoMagic, "annotation table marker");
  const auto nrows = r.get<std::uint64_t>("annotation count");
  if (nrows > r.remaining() / 32) throw ParseError("truncated annotation table", r.pos());
  for (std::uint64_t i = 0; i < nrows; ++i) {
    Annotation a;
    a.item = r.get<std::uint64_t>("annotation");
    a.start = r.get<std::int64_t>("annotation");
    a.end = r.get<std::int64_t>("annotation");
    a.label = r.get<std::int64_t>("annotation");
    c.annotations.push_back(a);
  }
  r.expect_magic(kEndMagic, "trailer");
  if (r.remaining() != 0) throw ParseError("trailing bytes after container end", r.pos());
  return c;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_container(const Container& c, const std::filesystem::path& path) { write_file(path, encode(c)); }
inline Container read_container(const std::filesystem::path& path) { return decode(read_file(path)); }

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

inline Container to_container(const ClassificationCorpus& corpus) {
  Container c;
  c.kind = ContainerKind::classification_corpus;
  c.header = {{"spec", corpus.spec}, {"seed", corpus.seed}, {"train", corpus.train.size()},
              {"test", corpus.test.size()}};
  std::uint64_t item = 0;
  for (const auto* split : {&corpus.train, &corpus.test}) {
    const char* tag = split == &corpus.train ? "train" : "test";
    for (std::size_t i = 0; i < split->size(); ++i, ++item) {
      const auto& ex = (*split)[i];
      for (std::size_t m = 0; m < ex.clips.size(); ++m)
        c.blocks.push_back({std::string(tag) + "/" + std::to_string(i) + "/" + corpus.spec.modalities[m].name,
                            DType::f64, ex.clips[m]});
      c.annotations.push_back({item, 0, static_cast<std::int64_t>(ex.length()), ex.label});
    }
  }
  return c;
}

inline Container to_container(const DetectionCorpus& corpus) {
  Container c;
  c.kind = ContainerKind::detection_corpus;
  c.header = {{"spec", corpus.spec}, {"seed", corpus.seed}, {"train", corpus.train.size()},
              {"test", corpus.test.size()}};
  std::uint64_t item = 0;
  for (const auto* split : {&corpus.train, &corpus.test}) {
    const char* tag = split == &corpus.train ? "train" : "test";
    for (std::size_t i = 0; i < split->size(); ++i, ++item) {
      const auto& v = (*split)[i];
      for (std::size_t m = 0; m < v.frames.size(); ++m)
        c.blocks.push_back({std::string(tag) + "/" + std::to_string(i) + "/" + corpus.spec.modalities[m].name,
                            DType::f64, v.frames[m]});
      for (const auto& s : v.segments)
        c.annotations.push_back({item, static_cast<std::int64_t>(s.start), static_cast<std::int64_t>(s.end), s.label});
    }
  }
  return c;
}

namespace detail {
template <typename Corpus>
void read_common(const Container& c, ContainerKind kind, Corpus& out, std::size_t& ntrain, std::size_t& ntest) {
  if (c.kind != kind) throw ParseError("container holds a different kind of payload", 8);
  try {
    out.spec = c.header.at("spec").get<CorpusSpec>();
    out.seed = c.header.at("seed").get<std::uint64_t>();
    ntrain = c.header.at("train").get<std::size_t>();
    ntest = c.header.at("test").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corpus header: ") + e.what(), 16);
  }
  const std::size_t M = out.spec.modalities.size();
  if (c.blocks.size() != (ntrain + ntest) * M) throw ParseError("block count does not match corpus header", 16);
}
}  // namespace detail

inline ClassificationCorpus classification_from_container(const Container& c) {
  ClassificationCorpus corpus;
  std::size_t ntrain = 0, ntest = 0;
  detail::read_common(c, ContainerKind::classification_corpus, corpus, ntrain, ntest);
  const std::size_t M = corpus.spec.modalities.size();
  if (c.annotations.size() != ntrain + ntest) throw ParseError("annotation count does not match corpus header", 16);
  for (std::size_t item = 0; item < ntrain + ntest; ++item) {
    MultimodalExample ex;
    for (std::size_t m = 0; m < M; ++m) ex.clips.push_back(c.blocks[item * M + m].tensor);
    ex.label = static_cast<int>(c.annotations[item].label);
    (item < ntrain ? corpus.train : corpus.test).push_back(std::move(ex));
  }
  return corpus;
}

inline DetectionCorpus detection_from_container(const Container& c) {
  DetectionCorpus corpus;
  std::size_t ntrain = 0, ntest = 0;
  detail::read_common(c, ContainerKind::detection_corpus, corpus, ntrain, ntest);
  const std::size_t M = corpus.spec.modalities.size();
  std::vector<DetectionVideo> videos(ntrain + ntest);
  for (std::size_t item = 0; item < videos.size(); ++item)
    for (std::size_t m = 0; m < M; ++m) videos[item].frames.push_back(c.blocks[item * M + m].tensor);
  for (const auto& a : c.annotations) {
    if (a.item >= videos.size()) throw ParseError("annotation refers to a missing video", 16);
    videos[a.item].segments.push_back(
        {static_cast<std::size_t>(a.start), static_cast<std::size_t>(a.end), static_cast<int>(a.label)});
  }
  for (std::size_t i = 0; i < videos.size(); ++i)
    (i < ntrain ? corpus.train : corpus.test).push_back(std::move(videos[i]));
  return corpus;
}

inline void write_corpus(const ClassificationCorpus& corpus, const std::filesystem::path& path) {
  write_container(to_container(corpus), path);
}
inline void write_corpus(const DetectionCorpus& corpus, const std::filesystem::path& path) {
  write_container(to_container(corpus), path);
}
inline ClassificationCorpus read_classification_corpus(const std::filesystem::path& path) {
  return classification_from_container(read_container(path));
}
inline DetectionCorpus read_detection_corpus(const std::filesystem::path& path) {
  return detection_from_container(read_container(path));
}

}  // namespace gdist::io
