#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtv/numerics.hpp"

namespace mtv {

enum class Activation : std::uint32_t { relu = 0, gelu_tanh = 1 };
enum class PositionalEncoding : std::uint32_t { learned_absolute = 0 };

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int embed_dim = 64;
  int vocab_size = 128;
  int max_context = 64;
  int mlp_hidden = 256;
  Activation activation = Activation::gelu_tanh;
  PositionalEncoding positional = PositionalEncoding::learned_absolute;

  int head_dim() const { return embed_dim / n_heads; }
  int n_locations() const { return n_layers * n_heads; }
  /// Throws ConfigError when the shape invariants do not hold (e.g. d mod H != 0).
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// One attention head: (layer, head). Ordered by layer, then head.
struct HeadLocation {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadLocation&) const = default;
};

/// Flat index layer * H + head, the row order used by every L*H table.
inline int flat_index(const HeadLocation& loc, int n_heads) { return loc.layer * n_heads + loc.head; }
inline HeadLocation location_at(int flat, int n_heads) { return {flat / n_heads, flat % n_heads}; }

/// Token ids plus optional continuous "soft token" embeddings that replace the
/// token embedding at given positions (positional encoding is still added).
struct ModelInput {
  struct SoftSegment {
    std::size_t position = 0;
    Matrix<double> embeddings;  // rows = consecutive positions, cols = embed_dim
  };
  std::vector<int> tokens;
  std::vector<SoftSegment> soft;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const ModelInput& o) const;
};

enum class PatchScope {
  last_prompt_token,  // only the final prompt position
  every_step,         // the final prompt position and every generated position after it
  all_positions,      // every position of the sequence (ablation studies)
};

std::string to_string(PatchScope s);
PatchScope patch_scope_from_string(const std::string& s);

template <class Scalar>
struct PatchSet {
  std::map<HeadLocation, Vector<Scalar>> values;
  PatchScope scope = PatchScope::every_step;

  bool empty() const { return values.empty(); }
};

class CaptureSpec {
 public:
  static CaptureSpec none() { return CaptureSpec{}; }
  static CaptureSpec all() {
    CaptureSpec c;
    c.all_ = true;
    return c;
  }
  static CaptureSpec of(std::vector<HeadLocation> locs) {
    CaptureSpec c;
    c.locs_ = std::move(locs);
    return c;
  }
  bool wants(const HeadLocation& l) const;
  bool any() const { return all_ || !locs_.empty(); }

 private:
  bool all_ = false;
  std::vector<HeadLocation> locs_;
};

template <class Scalar>
struct ForwardResult {
  Matrix<Scalar> logits;  // positions x vocab
  /// Head output at the final input position, before the output projection.
  /// Always the value the head computed, even where a patch replaced it downstream.
  std::map<HeadLocation, Vector<Scalar>> captures;
};

template <class Scalar>
struct LayerWeights {
  Vector<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> wq, wk, wv;  // d x d, head m owns columns [m*dh, (m+1)*dh)
  Matrix<Scalar> wo;          // d x d, head m owns rows [m*dh, (m+1)*dh)
  Vector<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> w1;  // d x hidden
  Vector<Scalar> b1;
  Matrix<Scalar> w2;  // hidden x d
  Vector<Scalar> b2;
};

template <class Scalar>
struct Weights {
  Matrix<Scalar> token_embedding;     // V x d
  Matrix<Scalar> position_embedding;  // C x d
  std::vector<LayerWeights<Scalar>> layers;
  Vector<Scalar> lnf_gain, lnf_bias;
  Matrix<Scalar> unembedding;  // d x V

  static Weights zeros(const ModelConfig& cfg);
};

/// Visits every tensor in the canonical file order. `f(name, tensor)` receives
/// either a Matrix or a Vector (use a generic lambda).
template <class W, class F>
void for_each_tensor(W& w, F&& f) {
  f("token_embedding", w.token_embedding);
  f("position_embedding", w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1_gain", L.ln1_gain);
    f(p + "ln1_bias", L.ln1_bias);
    f(p + "wq", L.wq);
    f(p + "wk", L.wk);
    f(p + "wv", L.wv);
    f(p + "wo", L.wo);
    f(p + "ln2_gain", L.ln2_gain);
    f(p + "ln2_bias", L.ln2_bias);
    f(p + "w1", L.w1);
    f(p + "b1", L.b1);
    f(p + "w2", L.w2);
    f(p + "b2", L.b2);
  }
  f("lnf_gain", w.lnf_gain);
  f("lnf_bias", w.lnf_bias);
  f("unembedding", w.unembedding);
}

template <class Scalar>
class Model {
 public:
  using scalar_type = Scalar;

  /// Validates config and every tensor shape; weights are immutable afterwards.
  Model(ModelConfig config, Weights<Scalar> weights);

  const ModelConfig& config() const noexcept { return config_; }
  const Weights<Scalar>& weights() const noexcept { return weights_; }
  /// Identifies config + f32 weight bytes; artifacts are bound to it.
  const std::string& fingerprint() const noexcept { return fingerprint_; }

  template <class Other>
  Model<Other> cast() const {
    std::vector<Matrix<double>> flat;
    for_each_tensor(weights_, [&](const std::string&, const auto& t) { flat.push_back(t.template cast<double>()); });
    std::size_t i = 0;
    Weights<Other> dst = Weights<Other>::zeros(config_);
    for_each_tensor(dst, [&](const std::string&, auto& t) { t = flat[i++].template cast<Other>(); });
    return Model<Other>(config_, std::move(dst));
  }

 private:
  ModelConfig config_;
  Weights<Scalar> weights_;
  std::string fingerprint_;
};

constexpr double kLayerNormEps = 1e-5;

template <class Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const ModelInput& input,
                              const CaptureSpec& capture = CaptureSpec::none());

/// `prompt_length` anchors the patch window (0 = the whole input is prompt);
/// teacher-forced continuations pass the original prompt length.
template <class Scalar>
ForwardResult<Scalar> forward_patched(const Model<Scalar>& model, const ModelInput& input,
                                      const PatchSet<Scalar>& patch,
                                      const CaptureSpec& capture = CaptureSpec::none(),
                                      std::size_t prompt_length = 0);

struct GenerateOptions {
  bool use_cache = true;
};

/// Greedy decoding of exactly `max_new_tokens` tokens. Throws TruncatedOutput
/// (with the tokens produced so far) when the context fills up first.
template <class Scalar>
std::vector<int> generate(const Model<Scalar>& model, const ModelInput& input, int max_new_tokens,
                          const PatchSet<Scalar>* patch = nullptr, GenerateOptions opts = {});

/// Checks vocabulary range, soft-segment placement and context length.
template <class Scalar>
void validate_input(const Model<Scalar>& model, const ModelInput& input);

// Weights file: "MTVW", u32 version, config as u32s, tensors f32 row-major, CRC32.
inline constexpr std::uint32_t kWeightsFormatVersion = 1;

template <class Scalar>
void save_weights(const Model<Scalar>& model, const std::filesystem::path& path);
template <class Scalar>
Model<Scalar> load_weights(const std::filesystem::path& path);

/// Serialized body (config header + tensors) without magic/CRC; fingerprint input.
template <class Scalar>
std::vector<unsigned char> serialize_weights(const ModelConfig& cfg, const Weights<Scalar>& w);
std::uint32_t crc32_of(const unsigned char* data, std::size_t n);

}  // namespace mtv
