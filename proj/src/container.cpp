#include "cptrd/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cptrd {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void put(T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s.data(), s.size()); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated container while reading ") + what, pos_);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor& Container::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("container has no tensor named " + name, 0);
}

std::string serialize(const Container& c) {
  Writer w;
  w.bytes(kContainerMagic);
  w.put<std::uint32_t>(kContainerVersion);
  for (const int v : {c.config.vocab_size, c.config.d, c.config.layers, c.config.heads, c.config.prompt_length,
                      c.config.max_seq, c.config.ffn_dim})
    w.put<std::int32_t>(v);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.config.injection_mode));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.config.head_mode));
  const std::string meta = c.metadata.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    std::uint64_t count = 1;
    for (const auto dim : t.shape) count *= dim;
    if (count != static_cast<std::uint64_t>(t.values.size()))
      throw std::invalid_argument("tensor " + t.name + " shape does not match its values");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (const auto dim : t.shape) w.put<std::uint64_t>(dim);
    const Scalar* data = t.values.data();
    for (Eigen::Index i = 0; i < t.values.size(); ++i) {
      if (t.dtype == DType::f32)
        w.put<float>(static_cast<float>(data[i]));
      else
        w.put<double>(data[i]);
    }
  }
  return w.take();
}

Container deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(kContainerMagic.size(), "magic") != kContainerMagic) throw FormatError("bad magic", 0);
  const std::size_t version_pos = r.position();
  if (r.get<std::uint32_t>("version") != kContainerVersion) throw FormatError("unsupported version", version_pos);

  Container c;
  const std::size_t config_pos = r.position();
  c.config.vocab_size = r.get<std::int32_t>("config");
  c.config.d = r.get<std::int32_t>("config");
  c.config.layers = r.get<std::int32_t>("config");
  c.config.heads = r.get<std::int32_t>("config");
  c.config.prompt_length = r.get<std::int32_t>("config");
  c.config.max_seq = r.get<std::int32_t>("config");
  c.config.ffn_dim = r.get<std::int32_t>("config");
  const auto injection = r.get<std::uint8_t>("config");
  const auto head = r.get<std::uint8_t>("config");
  if (injection > 1 || head > 1) throw FormatError("bad mode field", config_pos);
  c.config.injection_mode = static_cast<InjectionMode>(injection);
  c.config.head_mode = static_cast<HeadMode>(head);
  try {
    c.config.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid config: ") + e.what(), config_pos);
  }

  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::size_t meta_pos = r.position();
  const auto meta = r.bytes(meta_len, "metadata");
  try {
    c.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception&) {
    throw FormatError("metadata is not valid JSON", meta_pos);
  }

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    t.name = std::string(r.bytes(name_len, "tensor name"));
    const std::size_t dtype_pos = r.position();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("unknown dtype in tensor " + t.name, dtype_pos);
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank < 1) throw FormatError("tensor " + t.name + " has rank 0", dtype_pos + 1);
    std::uint64_t total = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::size_t dim_pos = r.position();
      const auto dim = r.get<std::uint64_t>("dims");
      if (dim == 0 || dim > (std::uint64_t{1} << 32)) throw FormatError("bad dimension in " + t.name, dim_pos);
      t.shape.push_back(dim);
      total *= dim;
    }
    const std::size_t elem = t.dtype == DType::f32 ? 4 : 8;
    const std::size_t payload_pos = r.position();
    if (total > (bytes.size() - payload_pos) / elem)
      throw FormatError("truncated payload for tensor " + t.name, payload_pos);
    const auto cols = static_cast<Eigen::Index>(t.shape.back());
    t.values.resize(static_cast<Eigen::Index>(total) / cols, cols);
    Scalar* data = t.values.data();
    for (std::uint64_t k = 0; k < total; ++k)
      data[k] = t.dtype == DType::f32 ? static_cast<Scalar>(r.get<float>("payload")) : r.get<double>("payload");
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor", r.position());
  return c;
}

void write_container(const std::string& path, const Container& container) {
  const std::string bytes = serialize(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

Container backbone_container(const Backbone& backbone) {
  Container c;
  c.config = backbone.config();
  c.metadata = {{"kind", "backbone"}, {"digest", hex_digest(backbone.digest())}};
  backbone.weights().for_each([&](const std::string& name, const Matrix& m) {
    if (m != m.cast<float>().cast<Scalar>())
      throw std::invalid_argument("backbone tensor " + name + " is not float32-representable");
    NamedTensor t;
    t.name = name;
    t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    t.values = m;
    t.dtype = DType::f32;
    c.tensors.push_back(std::move(t));
  });
  return c;
}

Backbone backbone_from_container(const Container& c) {
  if (c.metadata.value("kind", "") != "backbone") throw FormatError("container is not a backbone checkpoint", 0);
  BackboneWeights w = BackboneWeights::zeros(c.config);
  w.for_each([&](const std::string& name, Matrix& m) {
    const NamedTensor& t = c.get(name);
    if (t.shape.size() != 2 || t.shape[0] != static_cast<std::uint64_t>(m.rows()) ||
        t.shape[1] != static_cast<std::uint64_t>(m.cols()))
      throw FormatError("tensor " + name + " has the wrong shape for the header config", 0);
    m = t.values;
  });
  Backbone backbone(c.config, std::move(w));
  if (c.metadata.contains("digest") && c.metadata.at("digest").get<std::string>() != hex_digest(backbone.digest()))
    throw FormatError("backbone digest mismatch", 0);
  return backbone;
}

void save_backbone(const std::string& path, const Backbone& backbone) {
  write_container(path, backbone_container(backbone));
}

Backbone load_backbone(const std::string& path) { return backbone_from_container(read_container(path)); }

}  // namespace cptrd
