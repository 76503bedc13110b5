#include "volage/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "volage/config.hpp"

namespace volage {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T v;
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw CorruptArtifactError(std::string("checkpoint truncated while reading ") + what);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const nlohmann::json& meta) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  nlohmann::ordered_json doc;
  doc["model"] = model_config_to_json(model.config());
  doc["meta"] = meta;
  const std::string text = doc.dump();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  model.params().for_each([&](const std::string&, const Tensorf& t) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index e : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (Index i = 0; i < t.size(); ++i) put_le<float>(out, t[i]);
  });
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CorruptArtifactError("checkpoint magic is not VOLAGE01");
  Reader r(bytes);
  r.get_string(sizeof kCheckpointMagic, "magic");
  const auto doc_len = r.get_le<std::uint32_t>("document length");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(r.get_string(doc_len, "config document"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptArtifactError(std::string("checkpoint config document: ") + e.what());
  }
  ModelConfig config;
  try {
    config = model_config_from_json(doc.at("model"));
  } catch (const std::exception& e) {
    throw CorruptArtifactError(std::string("checkpoint model config: ") + e.what());
  }

  // Build a zero-initialized template for the expected layout, then overwrite.
  ModelParams<float> params;
  try {
    params = build<float>(config, 0).params();
  } catch (const std::exception& e) {
    throw CorruptArtifactError(std::string("checkpoint model config: ") + e.what());
  }
  params.for_each([&](const std::string& name, Tensorf& t) {
    const auto rank = r.get_le<std::uint32_t>("tensor rank");
    if (rank != t.rank()) throw CorruptArtifactError("checkpoint tensor " + name + ": wrong rank");
    for (std::size_t a = 0; a < rank; ++a)
      if (r.get_le<std::uint32_t>("tensor extent") != static_cast<std::uint32_t>(t.dim(a)))
        throw CorruptArtifactError("checkpoint tensor " + name + ": wrong extent");
    for (Index i = 0; i < t.size(); ++i) t[i] = r.get_le<float>("tensor values");
  });
  if (!r.at_end()) throw CorruptArtifactError("checkpoint has trailing bytes");
  nlohmann::json meta = doc.contains("meta") ? doc.at("meta") : nlohmann::json::object();
  return {Model(config, std::move(params)), std::move(meta)};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& meta) {
  const auto bytes = serialize_checkpoint(model, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace volage
