#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "headsvd/types.hpp"

namespace headsvd {

/// Raw float32 tensor as stored in a bundle container.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;  // row-major

  std::size_t numel() const;
};

/// Length-prefixed JSON header followed by a raw little-endian payload.
/// Tensor names are kept in lexicographic order, which fixes the header key
/// order and the payload layout on write.
struct TensorFile {
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> tensors;
};

TensorFile read_tensor_file(const std::filesystem::path& path);
TensorFile parse_tensor_file(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> serialize_tensor_file(const TensorFile& file);
void write_tensor_file(const TensorFile& file, const std::filesystem::path& path);

struct ModelMeta {
  int embed_dim = 0;   // D
  int shared_dim = 0;  // d
  int layers = 0;      // L
  int heads = 0;       // H

  int head_dim() const { return heads > 0 ? embed_dim / heads : 0; }
  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

/// Attention weights of one block, row-vector convention y = x * W,
/// every weight stored as (input_dim x output_dim).
struct LayerWeights {
  Matrix q_weight, k_weight, v_weight, o_weight;
  std::optional<Vector> q_bias, k_bias, v_bias, o_bias;
  Vector ln1_weight, ln1_bias;
};

struct WeightBundle {
  ModelMeta meta;
  std::vector<LayerWeights> layers;
  Vector final_ln_weight, final_ln_bias;
  Matrix proj;  // D x d
  bool folded = false;
  std::vector<int> folded_layers;
};

/// Tensor names used by the bundle container.
namespace tensor_names {
std::string layer(int l, const std::string& suffix);
inline constexpr const char* final_ln_weight = "visual.ln_post.weight";
inline constexpr const char* final_ln_bias = "visual.ln_post.bias";
inline constexpr const char* proj = "visual.proj";
}  // namespace tensor_names

/// Checks every WeightBundle invariant; throws ValidationError naming the
/// offending tensor.
void validate(const WeightBundle& bundle);

WeightBundle bundle_from_tensor_file(const TensorFile& file);
TensorFile bundle_to_tensor_file(const WeightBundle& bundle);

WeightBundle load_weight_bundle(const std::filesystem::path& path);
void save_weight_bundle(const WeightBundle& bundle, const std::filesystem::path& path);

/// First 16 hex chars of SHA-256 over the canonical tensor payload.
std::string model_id(const WeightBundle& bundle);

struct ConceptDictionary {
  std::vector<std::string> concepts;
  Matrix embeddings;  // C x d, unit rows
  Vector text_mean;
  Vector image_mean;

  std::size_t size() const { return concepts.size(); }
  int dim() const { return static_cast<int>(embeddings.cols()); }
};

void validate(const ConceptDictionary& dict);

ConceptDictionary load_concept_dictionary(const std::filesystem::path& tensor_path,
                                          const std::filesystem::path& vocab_path);

void save_concept_dictionary(const ConceptDictionary& dict,
                             const std::filesystem::path& tensor_path,
                             const std::filesystem::path& vocab_path);

std::vector<std::string> read_vocab(const std::filesystem::path& path);

Matrix tensor_to_matrix(const Tensor& t, const std::string& name);
Vector tensor_to_vector(const Tensor& t, const std::string& name);
Tensor matrix_to_tensor(const Matrix& m);
Tensor vector_to_tensor(const Vector& v);

}  // namespace headsvd
