#include "qaa/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace qaa {

static_assert(std::endian::native == std::endian::little, "containers are written in host order");

namespace {

class Writer {
 public:
  explicit Writer(const char* magic, std::uint32_t version) {
    buf_.append(magic, 4);
    u32(version);
  }

  template <typename T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void u8(std::uint8_t v) { pod(v); }
  void u32(std::uint32_t v) { pod(v); }
  void i64(std::int64_t v) { pod(v); }
  void f32(float v) { pod(v); }
  void f64(double v) { pod(v); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }

  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (Index d : s) i64(d);
  }

  void tensor(const Tensor32& t) {
    shape(t.shape());
    buf_.append(reinterpret_cast<const char*>(t.ptr()), static_cast<std::size_t>(t.size()) * sizeof(float));
  }

  void ints(const std::vector<int>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (int x : v) pod(static_cast<std::int32_t>(x));
  }

  std::string finish() {
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size()));
    u32(static_cast<std::uint32_t>(crc));
    return std::move(buf_);
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, const char* magic, std::uint32_t version, const std::string& what)
      : b_(bytes), what_(what) {
    if (b_.size() < 4 || std::memcmp(b_.data(), magic, 4) != 0)
      throw FormatError(what + ": wrong magic, expected '" + std::string(magic, 4) + "'", 0);
    if (b_.size() < 12) throw ChecksumError(what + ": file too short for header and checksum", b_.size());
    end_ = b_.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, b_.data() + end_, 4);
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(b_.data()), static_cast<uInt>(end_));
    if (static_cast<std::uint32_t>(crc) != stored) throw ChecksumError(what + ": CRC-32 mismatch", end_);
    pos_ = 4;
    const auto v = u32();
    if (v != version)
      throw VersionError(what + ": format version " + std::to_string(v) + ", this build reads " +
                             std::to_string(version),
                         4);
  }

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  float f32() { return pod<float>(); }
  double f64() { return pod<double>(); }

  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  Shape shape() {
    const auto rank = u32();
    if (rank > 8) throw FormatError(what_ + ": implausible tensor rank", pos_);
    Shape s(rank);
    for (auto& d : s) d = i64();
    return s;
  }

  Tensor32 tensor() {
    const Shape s = shape();
    if (s.empty()) return {};
    for (Index d : s)
      if (d <= 0) throw FormatError(what_ + ": non-positive tensor dimension", pos_);
    const auto bytes = static_cast<std::size_t>(shape_size(s)) * sizeof(float);
    need(bytes);
    Tensor32 t(s);
    std::memcpy(t.ptr(), b_.data() + pos_, bytes);
    pos_ += bytes;
    return t;
  }

  std::vector<int> ints() {
    const auto n = u32();
    need(std::size_t{n} * 4);
    std::vector<int> v(n);
    for (auto& x : v) x = pod<std::int32_t>();
    return v;
  }

  void done() const {
    if (pos_ != end_) throw FormatError(what_ + ": trailing bytes before checksum", pos_);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError(what_ + ": payload ends early", pos_);
  }

  const std::string& b_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

void write_quant(Writer& w, const std::vector<QuantParams>& ps) {
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    w.u32(static_cast<std::uint32_t>(p.bitwidth));
    w.f32(p.scale);
    w.f32(p.bias);
    w.u8(p.is_signed);
  }
}

std::vector<QuantParams> read_quant(Reader& r) {
  std::vector<QuantParams> ps(r.u32());
  for (auto& p : ps) {
    p.bitwidth = static_cast<int>(r.u32());
    p.scale = r.f32();
    p.bias = r.f32();
    p.is_signed = r.u8() != 0;
  }
  return ps;
}

// Empty tensors are written as rank 0.
void write_optional(Writer& w, const Tensor32& t) {
  if (t.empty())
    w.u32(0);
  else
    w.tensor(t);
}

std::string quant_state_code(QuantState s) {
  return std::string(s.weights_quantized() ? "q" : "f") + (s.activations_quantized() ? "q" : "f");
}

QuantState quant_state_decode(const std::string& c) {
  if (c.size() != 2) throw ValidationError("bad quantization state code '" + c + "'");
  return {c[0] == 'q' ? QuantMode::quantized : QuantMode::full_precision,
          c[1] == 'q' ? QuantMode::quantized : QuantMode::full_precision};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

std::string read_text(const std::string& path) { return slurp(path); }

std::string encode_model(const LayerGraph& m) {
  Writer w("QAAM", kModelFormatVersion);
  w.str(m.architecture_id);
  w.shape(m.input_shape);
  w.i64(m.classes);
  w.u8(static_cast<std::uint8_t>(m.scheme));
  w.u8(static_cast<std::uint8_t>(m.head));
  w.u32(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.str(l.name);
    w.i64(l.in_features);
    w.i64(l.out_features);
    w.i64(l.kernel);
    w.pod(static_cast<std::int32_t>(l.quant_site));
    w.pod(static_cast<std::int32_t>(l.tap));
    write_optional(w, l.weight);
    write_optional(w, l.bias);
    write_optional(w, l.running_mean);
    write_optional(w, l.running_var);
  }
  write_quant(w, m.weight_quant);
  write_quant(w, m.act_quant);
  return w.finish();
}

LayerGraph decode_model(const std::string& bytes) {
  Reader r(bytes, "QAAM", kModelFormatVersion, "model container");
  LayerGraph m;
  m.architecture_id = r.str();
  m.input_shape = r.shape();
  m.classes = r.i64();
  const auto scheme = r.u8();
  if (scheme > static_cast<std::uint8_t>(QuantScheme::ptq)) throw FormatError("unknown quant scheme", 0);
  m.scheme = static_cast<QuantScheme>(scheme);
  const auto head = r.u8();
  if (head > static_cast<std::uint8_t>(LossHead::logit_sum)) throw FormatError("unknown loss head", 0);
  m.head = static_cast<LossHead>(head);
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Layer<float> l;
    const auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::flatten)) throw FormatError("unknown layer kind", 0);
    l.kind = static_cast<LayerKind>(kind);
    l.name = r.str();
    l.in_features = r.i64();
    l.out_features = r.i64();
    l.kernel = r.i64();
    l.quant_site = r.pod<std::int32_t>();
    l.tap = r.pod<std::int32_t>();
    l.weight = r.tensor();
    l.bias = r.tensor();
    l.running_mean = r.tensor();
    l.running_var = r.tensor();
    m.layers.push_back(std::move(l));
  }
  m.weight_quant = read_quant(r);
  m.act_quant = read_quant(r);
  r.done();
  m.validate();
  return m;
}

void save_model(const LayerGraph& model, const std::string& path) { write_text(path, encode_model(model)); }

LayerGraph load_model(const std::string& path) { return decode_model(slurp(path)); }

namespace {

enum class Payload : std::uint8_t { dataset = 0, adversarial = 1 };

void write_dataset_body(Writer& w, const Dataset& d) {
  w.i64(d.classes);
  w.str(d.split);
  w.str(d.provenance);
  w.ints(d.labels);
  w.tensor(d.images);
}

Dataset read_dataset_body(Reader& r) {
  Dataset d;
  d.classes = r.i64();
  d.split = r.str();
  d.provenance = r.str();
  d.labels = r.ints();
  d.images = r.tensor();
  return d;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& path) {
  data.validate();
  Writer w("QAAD", kDataFormatVersion);
  w.u8(static_cast<std::uint8_t>(Payload::dataset));
  write_dataset_body(w, data);
  write_text(path, w.finish());
}

Dataset load_dataset(const std::string& path) {
  const std::string bytes = slurp(path);
  Reader r(bytes, "QAAD", kDataFormatVersion, "data container");
  if (r.u8() != static_cast<std::uint8_t>(Payload::dataset))
    throw ValidationError("'" + path + "' holds an adversarial set, not a dataset");
  Dataset d = read_dataset_body(r);
  r.done();
  d.validate();
  return d;
}

void save_adversarial(const AdversarialSet& adv, const std::string& path) {
  Writer w("QAAD", kDataFormatVersion);
  w.u8(static_cast<std::uint8_t>(Payload::adversarial));
  w.str(nlohmann::json(adv.spec).dump());
  w.ints(adv.labels);
  w.tensor(adv.clean);
  w.tensor(adv.adversarial);
  w.i64(adv.loss_trace.rows());
  w.i64(adv.loss_trace.cols());
  for (Index i = 0; i < adv.loss_trace.size(); ++i) w.f32(adv.loss_trace.data()[i]);
  w.ints(adv.zero_gradient_steps);
  w.u32(static_cast<std::uint32_t>(adv.schedule.size()));
  for (auto s : adv.schedule) w.str(quant_state_code(s));
  w.ints(adv.model_sequence);
  write_text(path, w.finish());
}

AdversarialSet load_adversarial(const std::string& path) {
  const std::string bytes = slurp(path);
  Reader r(bytes, "QAAD", kDataFormatVersion, "data container");
  if (r.u8() != static_cast<std::uint8_t>(Payload::adversarial))
    throw ValidationError("'" + path + "' holds a plain dataset, not an adversarial set");
  AdversarialSet a;
  a.spec = nlohmann::json::parse(r.str()).get<AttackSpec>();
  a.labels = r.ints();
  a.clean = r.tensor();
  a.adversarial = r.tensor();
  const auto rows = r.i64(), cols = r.i64();
  a.loss_trace.resize(rows, cols);
  for (Index i = 0; i < a.loss_trace.size(); ++i) a.loss_trace.data()[i] = r.f32();
  a.zero_gradient_steps = r.ints();
  const auto steps = r.u32();
  for (std::uint32_t i = 0; i < steps; ++i) a.schedule.push_back(quant_state_decode(r.str()));
  a.model_sequence = r.ints();
  r.done();
  if (a.clean.shape() != a.adversarial.shape() || a.clean.batch() != a.size())
    throw ValidationError("adversarial set shapes are inconsistent in '" + path + "'");
  return a;
}

}  // namespace qaa
