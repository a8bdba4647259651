#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "mtv/model.hpp"

namespace mtv {

static_assert(std::endian::native == std::endian::little, "weights format assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'V', 'W'};
constexpr std::size_t kConfigFields = 8;

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace

std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <class Scalar>
std::vector<unsigned char> serialize_weights(const ModelConfig& cfg, const Weights<Scalar>& w) {
  std::vector<unsigned char> buf;
  put_u32(buf, kWeightsFormatVersion);
  put_u32(buf, cfg.n_layers);
  put_u32(buf, cfg.n_heads);
  put_u32(buf, cfg.embed_dim);
  put_u32(buf, cfg.vocab_size);
  put_u32(buf, cfg.max_context);
  put_u32(buf, cfg.mlp_hidden);
  put_u32(buf, static_cast<std::uint32_t>(cfg.activation));
  put_u32(buf, static_cast<std::uint32_t>(cfg.positional));
  for_each_tensor(w, [&](const std::string&, const auto& t) {
    // Row-major traversal regardless of the tensor's own storage order.
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        const float f = static_cast<float>(t(r, c));
        put_u32(buf, std::bit_cast<std::uint32_t>(f));
      }
  });
  return buf;
}

template <class Scalar>
void save_weights(const Model<Scalar>& model, const std::filesystem::path& path) {
  const auto body = serialize_weights(model.config(), model.weights());
  std::vector<unsigned char> crc;
  put_u32(crc, crc32_of(body.data(), body.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("io", "cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(body.data()), std::streamsize(body.size()));
  out.write(reinterpret_cast<const char*>(crc.data()), 4);
  if (!out) throw FormatError("io", "write failed for " + path.string());
}

template <class Scalar>
Model<Scalar> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("io", "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic", path.string());
  const std::size_t header = 4 + 4 * (1 + kConfigFields);
  if (bytes.size() < header) throw FormatError("truncated", "header incomplete");
  const unsigned char* p = bytes.data() + 4;
  const std::uint32_t version = get_u32(p);
  if (version != kWeightsFormatVersion)
    throw FormatError("version mismatch",
                      "file version " + std::to_string(version) + ", expected " + std::to_string(kWeightsFormatVersion));

  ModelConfig cfg;
  cfg.n_layers = int(get_u32(p + 4));
  cfg.n_heads = int(get_u32(p + 8));
  cfg.embed_dim = int(get_u32(p + 12));
  cfg.vocab_size = int(get_u32(p + 16));
  cfg.max_context = int(get_u32(p + 20));
  cfg.mlp_hidden = int(get_u32(p + 24));
  cfg.activation = static_cast<Activation>(get_u32(p + 28));
  cfg.positional = static_cast<PositionalEncoding>(get_u32(p + 32));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError("config invariant", e.what());
  }

  Weights<Scalar> w = Weights<Scalar>::zeros(cfg);
  std::size_t n_floats = 0;
  for_each_tensor(w, [&](const std::string&, const auto& t) { n_floats += std::size_t(t.size()); });
  const std::size_t expected = header + 4 * n_floats + 4;
  if (bytes.size() < expected)
    throw FormatError("truncated", "expected " + std::to_string(expected) + " bytes, found " +
                                       std::to_string(bytes.size()));
  if (bytes.size() > expected)
    throw FormatError("shape mismatch", "trailing " + std::to_string(bytes.size() - expected) +
                                            " bytes beyond the tensors the config declares");

  const std::uint32_t stored = get_u32(bytes.data() + expected - 4);
  const std::uint32_t actual = crc32_of(bytes.data() + 4, expected - 8);
  if (stored != actual) throw FormatError("crc mismatch", path.string());

  const unsigned char* q = bytes.data() + header;
  for_each_tensor(w, [&](const std::string&, auto& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        t(r, c) = static_cast<Scalar>(std::bit_cast<float>(get_u32(q)));
        q += 4;
      }
  });
  return Model<Scalar>(cfg, std::move(w));
}

template std::vector<unsigned char> serialize_weights<float>(const ModelConfig&, const Weights<float>&);
template std::vector<unsigned char> serialize_weights<double>(const ModelConfig&, const Weights<double>&);
template void save_weights<float>(const Model<float>&, const std::filesystem::path&);
template void save_weights<double>(const Model<double>&, const std::filesystem::path&);
template Model<float> load_weights<float>(const std::filesystem::path&);
template Model<double> load_weights<double>(const std::filesystem::path&);

}  // namespace mtv
