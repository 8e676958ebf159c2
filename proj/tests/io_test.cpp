#include <gtest/gtest.h>

#include <zlib.h>

#include <cstring>
#include <filesystem>

#include "qaa/engine.hpp"
#include "qaa/io.hpp"
#include "qaa/training.hpp"

namespace qaa {
namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "qaa_io_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

Dataset small_data() {
  SynthConfig sc;
  sc.classes = 3;
  sc.count = 96;
  sc.image_size = 8;
  sc.seed = 4;
  return synth_dataset(sc);
}

LayerGraph quantized_model() {
  const auto d = small_data();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.bitwidth = 3;
  return qat_train("convnet-b", d, tc);
}

void reseal(std::string& bytes) {
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4));
  const auto c = static_cast<std::uint32_t>(crc);
  std::memcpy(bytes.data() + bytes.size() - 4, &c, 4);
}

TEST(ModelContainer, RoundTripIsBitExactOnProbeBatch) {
  const auto m = quantized_model();
  const auto path = temp_path("model.qaam");
  save_model(m, path);
  const auto r = load_model(path);
  EXPECT_EQ(parameter_hash(r), parameter_hash(m));
  EXPECT_EQ(r.architecture_id, m.architecture_id);
  EXPECT_EQ(r.scheme, m.scheme);
  EXPECT_EQ(r.weight_quant, m.weight_quant);
  EXPECT_EQ(r.act_quant, m.act_quant);
  const auto probe = small_data().images.slice(0, 16);
  for (auto s : {QuantState::full(), QuantState::quantized(), QuantState::weights_only()})
    EXPECT_EQ(forward(r, probe, s).logits, forward(m, probe, s).logits);
  EXPECT_EQ(encode_model(r), encode_model(m));
}

TEST(ModelContainer, ReloadedModelReproducesAccuracy) {
  const auto m = quantized_model();
  const auto path = temp_path("acc.qaam");
  save_model(m, path);
  const auto d = small_data();
  EXPECT_EQ(accuracy(load_model(path), d, deployed_state(m)), accuracy(m, d, deployed_state(m)));
}

TEST(ModelContainer, TruncationAndCorruptionFailTheChecksum) {
  const auto bytes = encode_model(quantized_model());
  EXPECT_THROW(decode_model(bytes.substr(0, bytes.size() - 1)), ChecksumError);
  EXPECT_THROW(decode_model(bytes.substr(0, bytes.size() / 2)), ChecksumError);
  EXPECT_THROW(decode_model(bytes.substr(0, 9)), ChecksumError);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_model(flipped), ChecksumError);
}

TEST(ModelContainer, WrongMagicAndVersionMismatch) {
  std::string bytes = encode_model(quantized_model());
  std::string magic = bytes;
  magic[0] = 'X';
  try {
    decode_model(magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  const std::uint32_t v = kModelFormatVersion + 1;
  std::memcpy(bytes.data() + 4, &v, 4);
  reseal(bytes);
  EXPECT_THROW(decode_model(bytes), VersionError);
  EXPECT_THROW(load_model(temp_path("missing.qaam")), ValidationError);
}

TEST(DataContainer, DatasetRoundTrip) {
  const auto d = small_data();
  const auto path = temp_path("data.qaad");
  save_dataset(d, path);
  const auto r = load_dataset(path);
  EXPECT_EQ(r.images, d.images);
  EXPECT_EQ(r.labels, d.labels);
  EXPECT_EQ(r.classes, d.classes);
  EXPECT_EQ(r.provenance, d.provenance);
  EXPECT_EQ(dataset_hash(r), dataset_hash(d));
  EXPECT_THROW(load_adversarial(path), ValidationError);
}

TEST(DataContainer, AdversarialRoundTripKeepsEveryField) {
  const auto m = quantized_model();
  const auto d = small_data().slice(0, 12);
  AttackSpec spec;
  spec.family = AttackFamily::qaa;
  spec.iterations = 4;
  spec.seed = 9;
  const auto adv = qaa_attack(m, d.images, d.labels, spec, QaaVariant::qat);
  const auto path = temp_path("adv.qaad");
  save_adversarial(adv, path);
  const auto r = load_adversarial(path);
  EXPECT_EQ(r.clean, adv.clean);
  EXPECT_EQ(r.adversarial, adv.adversarial);
  EXPECT_EQ(r.labels, adv.labels);
  EXPECT_EQ(r.loss_trace, adv.loss_trace);
  EXPECT_EQ(r.zero_gradient_steps, adv.zero_gradient_steps);
  EXPECT_EQ(r.schedule, adv.schedule);
  EXPECT_EQ(r.model_sequence, adv.model_sequence);
  EXPECT_EQ(nlohmann::json(r.spec), nlohmann::json(adv.spec));
  EXPECT_THROW(load_dataset(path), ValidationError);
}

}  // namespace
}  // namespace qaa
