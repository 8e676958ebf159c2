#include "qaa/dataset.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace qaa {

Dataset Dataset::slice(Index begin, Index end) const {
  Dataset d;
  d.images = images.slice(begin, end);
  d.labels.assign(labels.begin() + begin, labels.begin() + end);
  d.classes = classes;
  d.split = split;
  d.provenance = provenance + "[" + std::to_string(begin) + ":" + std::to_string(end) + "]";
  return d;
}

Dataset Dataset::gather(const std::vector<Index>& idx) const {
  Dataset d;
  d.images = images.gather(idx);
  d.labels.reserve(idx.size());
  for (Index i : idx) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
  d.classes = classes;
  d.split = split;
  d.provenance = provenance + "[gather]";
  return d;
}

void Dataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset is empty");
  if (images.rank() != 4 || images.batch() != size())
    throw ValidationError("dataset images must be [N,C,H,W] with N = label count");
  for (int y : labels)
    if (y < 0 || y >= classes) throw ValidationError("label " + std::to_string(y) + " outside [0, classes)");
  if (images.data().minCoeff() < 0.0f || images.data().maxCoeff() > 1.0f)
    throw ValidationError("dataset pixels must lie in [0, 1]");
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size()) throw FormatError("truncated " + what + " header", off);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  os.write(bytes, 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index classes) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, "image");
  if (img_magic != kIdxImagesMagic) throw FormatError("wrong IDX image magic in '" + images_path + "'", 0);
  const std::uint32_t n = read_be32(img, 4, "image");
  const std::uint32_t rows = read_be32(img, 8, "image");
  const std::uint32_t cols = read_be32(img, 12, "image");
  const std::size_t payload = std::size_t{n} * rows * cols;
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX image file declares an empty dimension", 4);
  if (img.size() < 16 + payload)
    throw FormatError("truncated IDX image payload: expected " + std::to_string(payload) + " bytes", img.size());

  const std::uint32_t lab_magic = read_be32(lab, 0, "label");
  if (lab_magic != kIdxLabelsMagic) throw FormatError("wrong IDX label magic in '" + labels_path + "'", 0);
  const std::uint32_t nl = read_be32(lab, 4, "label");
  if (nl != n) throw FormatError("image/label count mismatch: " + std::to_string(n) + " vs " + std::to_string(nl), 4);
  if (lab.size() < 8 + std::size_t{nl}) throw FormatError("truncated IDX label payload", lab.size());

  Dataset d;
  d.images = Tensor32({static_cast<Index>(n), 1, static_cast<Index>(rows), static_cast<Index>(cols)});
  for (std::size_t i = 0; i < payload; ++i) d.images[static_cast<Index>(i)] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(nl);
  int max_label = 0;
  for (std::size_t i = 0; i < nl; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = classes > 0 ? classes : max_label + 1;
  d.split = "idx";
  d.provenance = "idx:" + sha256_bytes(img.data(), img.size()).substr(0, 16) + ":" +
                 sha256_bytes(lab.data(), lab.size()).substr(0, 16);
  d.validate();
  return d;
}

void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  data.validate();
  if (data.images.dim(1) != 1) throw ValidationError("IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw ValidationError("cannot write IDX files");
  write_be32(img, kIdxImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(data.size()));
  write_be32(img, static_cast<std::uint32_t>(data.images.dim(2)));
  write_be32(img, static_cast<std::uint32_t>(data.images.dim(3)));
  std::vector<char> px(static_cast<std::size_t>(data.images.size()));
  for (Index i = 0; i < data.images.size(); ++i)
    px[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(std::lround(data.images[i] * 255.0f)));
  img.write(px.data(), static_cast<std::streamsize>(px.size()));
  write_be32(lab, kIdxLabelsMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) lab.put(static_cast<char>(y));
  if (!img || !lab) throw Error("failed writing IDX files");
}

Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw ValidationError("synthetic dataset needs at least 2 classes");
  if (cfg.count < 1 || cfg.image_size < 1 || cfg.channels < 1) throw ValidationError("bad synthetic dataset size");
  const Index s = cfg.image_size, c = cfg.channels;

  struct Bump {
    double cx, cy, radius, amplitude;
  };
  std::mt19937_64 prng(cfg.pattern_seed);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(s - 1));
  std::uniform_real_distribution<double> rad(0.1 * s, 0.2 * s);
  std::uniform_real_distribution<double> amp(0.5, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<std::vector<std::vector<Bump>>> bumps(static_cast<std::size_t>(cfg.classes));
  for (auto& per_class : bumps) {
    per_class.resize(static_cast<std::size_t>(c));
    for (auto& per_channel : per_class)
      for (int j = 0; j < cfg.bumps; ++j)
        per_channel.push_back({pos(prng), pos(prng), rad(prng), (sign(prng) ? 1.0 : -1.0) * amp(prng) * cfg.contrast});
  }

  Dataset d;
  d.images = Tensor32({cfg.count, c, s, s});
  d.labels.resize(static_cast<std::size_t>(cfg.count));
  d.classes = cfg.classes;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-cfg.max_shift, cfg.max_shift);
  for (Index i = 0; i < cfg.count; ++i) {
    const int y = static_cast<int>(i % cfg.classes);
    d.labels[static_cast<std::size_t>(i)] = y;
    const int dx = cfg.max_shift > 0 ? shift(rng) : 0;
    const int dy = cfg.max_shift > 0 ? shift(rng) : 0;
    for (Index ch = 0; ch < c; ++ch)
      for (Index py = 0; py < s; ++py)
        for (Index px = 0; px < s; ++px) {
          double v = 0.5;
          for (const Bump& b : bumps[static_cast<std::size_t>(y)][static_cast<std::size_t>(ch)]) {
            const double ex = static_cast<double>(px) - b.cx - dx, ey = static_cast<double>(py) - b.cy - dy;
            v += b.amplitude * std::exp(-(ex * ex + ey * ey) / (2.0 * b.radius * b.radius));
          }
          if (cfg.noise > 0) v += cfg.noise * noise(rng);
          d.images[((i * c + ch) * s + py) * s + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
  }
  d.split = "synthetic";
  std::ostringstream prov;
  prov << "synth:seed=" << cfg.seed << ",pattern_seed=" << cfg.pattern_seed << ",classes=" << cfg.classes
       << ",n=" << cfg.count << ",size=" << s << ",noise=" << cfg.noise << ",contrast=" << cfg.contrast
       << ",shift=" << cfg.max_shift;
  d.provenance = prov.str();
  return d;
}

std::string sha256_bytes(const void* data, std::size_t size) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, md.data(), &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return os.str();
}

std::string sha256_file(const std::string& path) {
  const auto bytes = read_file(path);
  return sha256_bytes(bytes.data(), bytes.size());
}

std::string dataset_hash(const Dataset& data) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(data.images.size()) * sizeof(float) +
                                 data.labels.size() * sizeof(int));
  std::memcpy(buf.data(), data.images.ptr(), static_cast<std::size_t>(data.images.size()) * sizeof(float));
  std::memcpy(buf.data() + static_cast<std::size_t>(data.images.size()) * sizeof(float), data.labels.data(),
              data.labels.size() * sizeof(int));
  return sha256_bytes(buf.data(), buf.size());
}

}  // namespace qaa
