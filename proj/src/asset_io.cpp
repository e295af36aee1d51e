#include "headsvd/asset_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

namespace headsvd {

using json = nlohmann::json;

namespace {

constexpr const char* kMetadataKey = "__metadata__";

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void write_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

float load_f32_le(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) |
                       (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void store_f32_le(unsigned char* p, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  p[0] = bits & 0xff;
  p[1] = (bits >> 8) & 0xff;
  p[2] = (bits >> 16) & 0xff;
  p[3] = (bits >> 24) & 0xff;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

const Tensor& require(const TensorFile& file, const std::string& name) {
  auto it = file.tensors.find(name);
  if (it == file.tensors.end()) throw ValidationError("missing required tensor " + name);
  return it->second;
}

void expect_shape(const Tensor& t, const std::string& name, std::vector<std::size_t> expected) {
  if (t.shape != expected)
    throw ValidationError("shape mismatch for " + name + ": got " + shape_str(t.shape) +
                          ", expected " + shape_str(expected));
}

int meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ValidationError("metadata missing key " + key);
  try {
    std::size_t pos = 0;
    int v = std::stoi(it->second, &pos);
    if (pos != it->second.size() || v <= 0) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("metadata " + key + " must be a positive integer, got '" + it->second + "'");
  }
}

void check_finite(const Matrix& m, const std::string& name) {
  if (!m.allFinite()) throw ValidationError("non-finite values in " + name);
}

void check_finite(const Vector& v, const std::string& name) {
  if (!v.allFinite()) throw ValidationError("non-finite values in " + name);
}

void check_dims(const Matrix& m, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() != rows || m.cols() != cols)
    throw ValidationError("shape mismatch for " + name + ": got [" + std::to_string(m.rows()) + "," +
                          std::to_string(m.cols()) + "], expected [" + std::to_string(rows) + "," +
                          std::to_string(cols) + "]");
  check_finite(m, name);
}

void check_dims(const Vector& v, const std::string& name, Eigen::Index size) {
  if (v.size() != size)
    throw ValidationError("shape mismatch for " + name + ": got [" + std::to_string(v.size()) +
                          "], expected [" + std::to_string(size) + "]");
  check_finite(v, name);
}

}  // namespace

Side side_from_string(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw ValidationError("side must be 'left' or 'right', got '" + s + "'");
}

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

TensorFile parse_tensor_file(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw ValidationError("malformed header: file shorter than 8 bytes");
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8)
    throw ValidationError("malformed header: declared length " + std::to_string(header_len) +
                          " exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw ValidationError("malformed header: not a JSON object");

  const unsigned char* payload = bytes.data() + 8 + header_len;
  const std::size_t payload_size = bytes.size() - 8 - header_len;

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == kMetadataKey) {
      if (!entry.is_object()) throw ValidationError("malformed header: __metadata__ must be an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw ValidationError("malformed header: metadata value for " + k + " is not a string");
        file.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets"))
      throw ValidationError("malformed header entry for tensor " + name);
    if (entry["dtype"] != "F32")
      throw ValidationError("unsupported dtype for tensor " + name + ": " + entry["dtype"].dump());
    Tensor t;
    std::uint64_t begin = 0, end = 0;
    try {
      t.shape = entry["shape"].get<std::vector<std::size_t>>();
      auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2) throw std::invalid_argument("offsets");
      begin = offsets[0];
      end = offsets[1];
    } catch (const std::exception&) {
      throw ValidationError("malformed shape or data_offsets for tensor " + name);
    }
    if (begin > end || end > payload_size)
      throw ValidationError("data_offsets out of range for tensor " + name);
    const std::size_t n = t.numel();
    if (end - begin != n * sizeof(float))
      throw ValidationError("shape mismatch for " + name + ": shape " + shape_str(t.shape) + " needs " +
                            std::to_string(n * sizeof(float)) + " bytes, data_offsets span " +
                            std::to_string(end - begin));
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = load_f32_le(payload + begin + 4 * i);
    file.tensors.emplace(name, std::move(t));
  }
  return file;
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  return parse_tensor_file(read_all(path));
}

std::vector<unsigned char> serialize_tensor_file(const TensorFile& file) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    if (name == kMetadataKey) throw ValidationError("reserved tensor name " + name);
    if (t.data.size() != t.numel())
      throw ValidationError("tensor " + name + " has " + std::to_string(t.data.size()) +
                            " values for shape " + shape_str(t.shape));
    const std::uint64_t bytes = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!file.metadata.empty()) header[kMetadataKey] = file.metadata;

  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::vector<unsigned char> out;
  out.reserve(8 + text.size() + offset);
  write_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  out.resize(payload_start + offset);
  unsigned char* p = out.data() + payload_start;
  for (const auto& [name, t] : file.tensors)
    for (float f : t.data) {
      store_f32_le(p, f);
      p += 4;
    }
  return out;
}

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
  write_all(serialize_tensor_file(file), path);
}

Matrix tensor_to_matrix(const Tensor& t, const std::string& name) {
  if (t.shape.size() != 2) throw ValidationError("shape mismatch for " + name + ": expected 2-D, got " + shape_str(t.shape));
  Matrix m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.data[static_cast<std::size_t>(i * m.cols() + j)];
  return m;
}

Vector tensor_to_vector(const Tensor& t, const std::string& name) {
  if (t.shape.size() != 1) throw ValidationError("shape mismatch for " + name + ": expected 1-D, got " + shape_str(t.shape));
  Vector v(static_cast<Eigen::Index>(t.shape[0]));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = t.data[static_cast<std::size_t>(i)];
  return v;
}

Tensor matrix_to_tensor(const Matrix& m) {
  Tensor t;
  t.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  t.data.reserve(t.numel());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.data.push_back(static_cast<float>(m(i, j)));
  return t;
}

Tensor vector_to_tensor(const Vector& v) {
  Tensor t;
  t.shape = {static_cast<std::size_t>(v.size())};
  t.data.reserve(t.numel());
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<float>(v(i)));
  return t;
}

std::string tensor_names::layer(int l, const std::string& suffix) {
  return "visual.blocks." + std::to_string(l) + "." + suffix;
}

void validate(const WeightBundle& b) {
  const auto& m = b.meta;
  if (m.embed_dim <= 0 || m.shared_dim <= 0 || m.layers <= 0 || m.heads <= 0)
    throw ValidationError("model metadata must be positive");
  if (m.embed_dim % m.heads != 0)
    throw ValidationError("embed_dim " + std::to_string(m.embed_dim) + " is not divisible by heads " +
                          std::to_string(m.heads));
  if (static_cast<int>(b.layers.size()) != m.layers)
    throw ValidationError("bundle has " + std::to_string(b.layers.size()) + " layers, metadata says " +
                          std::to_string(m.layers));
  const Eigen::Index D = m.embed_dim;
  for (int l = 0; l < m.layers; ++l) {
    const auto& lw = b.layers[static_cast<std::size_t>(l)];
    using tensor_names::layer;
    check_dims(lw.q_weight, layer(l, "attn.q.weight"), D, D);
    check_dims(lw.k_weight, layer(l, "attn.k.weight"), D, D);
    check_dims(lw.v_weight, layer(l, "attn.v.weight"), D, D);
    check_dims(lw.o_weight, layer(l, "attn.o.weight"), D, D);
    if (lw.q_bias) check_dims(*lw.q_bias, layer(l, "attn.q.bias"), D);
    if (lw.k_bias) check_dims(*lw.k_bias, layer(l, "attn.k.bias"), D);
    if (lw.v_bias) check_dims(*lw.v_bias, layer(l, "attn.v.bias"), D);
    if (lw.o_bias) check_dims(*lw.o_bias, layer(l, "attn.o.bias"), D);
    check_dims(lw.ln1_weight, layer(l, "ln_1.weight"), D);
    check_dims(lw.ln1_bias, layer(l, "ln_1.bias"), D);
  }
  check_dims(b.final_ln_weight, tensor_names::final_ln_weight, D);
  check_dims(b.final_ln_bias, tensor_names::final_ln_bias, D);
  check_dims(b.proj, tensor_names::proj, D, m.shared_dim);
  for (int l : b.folded_layers)
    if (l < 0 || l >= m.layers) throw ValidationError("folded layer index out of range: " + std::to_string(l));
}

WeightBundle bundle_from_tensor_file(const TensorFile& file) {
  WeightBundle b;
  b.meta.embed_dim = meta_int(file.metadata, "D");
  b.meta.shared_dim = meta_int(file.metadata, "d");
  b.meta.layers = meta_int(file.metadata, "L");
  b.meta.heads = meta_int(file.metadata, "H");
  if (b.meta.embed_dim % b.meta.heads != 0)
    throw ValidationError("embed_dim " + std::to_string(b.meta.embed_dim) + " is not divisible by heads " +
                          std::to_string(b.meta.heads));
  const auto D = static_cast<std::size_t>(b.meta.embed_dim);
  const auto d = static_cast<std::size_t>(b.meta.shared_dim);

  std::set<std::string> known;
  auto matrix = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const Tensor& t = require(file, name);
    expect_shape(t, name, {rows, cols});
    known.insert(name);
    Matrix m = tensor_to_matrix(t, name);
    check_finite(m, name);
    return m;
  };
  auto vector = [&](const std::string& name) {
    const Tensor& t = require(file, name);
    expect_shape(t, name, {D});
    known.insert(name);
    Vector v = tensor_to_vector(t, name);
    check_finite(v, name);
    return v;
  };
  auto optional_vector = [&](const std::string& name) -> std::optional<Vector> {
    if (!file.tensors.count(name)) return std::nullopt;
    return vector(name);
  };

  using tensor_names::layer;
  for (int l = 0; l < b.meta.layers; ++l) {
    LayerWeights lw;
    lw.q_weight = matrix(layer(l, "attn.q.weight"), D, D);
    lw.k_weight = matrix(layer(l, "attn.k.weight"), D, D);
    lw.v_weight = matrix(layer(l, "attn.v.weight"), D, D);
    lw.o_weight = matrix(layer(l, "attn.o.weight"), D, D);
    lw.q_bias = optional_vector(layer(l, "attn.q.bias"));
    lw.k_bias = optional_vector(layer(l, "attn.k.bias"));
    lw.v_bias = optional_vector(layer(l, "attn.v.bias"));
    lw.o_bias = optional_vector(layer(l, "attn.o.bias"));
    lw.ln1_weight = vector(layer(l, "ln_1.weight"));
    lw.ln1_bias = vector(layer(l, "ln_1.bias"));
    b.layers.push_back(std::move(lw));
  }
  b.final_ln_weight = vector(tensor_names::final_ln_weight);
  b.final_ln_bias = vector(tensor_names::final_ln_bias);
  b.proj = matrix(tensor_names::proj, D, d);

  for (const auto& [name, t] : file.tensors)
    if (!known.count(name)) throw ValidationError("unexpected tensor " + name);

  if (auto it = file.metadata.find("folded"); it != file.metadata.end()) b.folded = it->second == "true";
  if (auto it = file.metadata.find("folded_layers"); it != file.metadata.end() && !it->second.empty()) {
    std::istringstream is(it->second);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      try {
        b.folded_layers.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw ValidationError("malformed folded_layers metadata: " + it->second);
      }
    }
  }
  validate(b);
  return b;
}

TensorFile bundle_to_tensor_file(const WeightBundle& b) {
  validate(b);
  TensorFile f;
  f.metadata["D"] = std::to_string(b.meta.embed_dim);
  f.metadata["d"] = std::to_string(b.meta.shared_dim);
  f.metadata["L"] = std::to_string(b.meta.layers);
  f.metadata["H"] = std::to_string(b.meta.heads);
  if (b.folded) {
    f.metadata["folded"] = "true";
    std::string layers;
    for (int l : b.folded_layers) layers += (layers.empty() ? "" : ",") + std::to_string(l);
    f.metadata["folded_layers"] = layers;
  }
  using tensor_names::layer;
  for (int l = 0; l < b.meta.layers; ++l) {
    const auto& lw = b.layers[static_cast<std::size_t>(l)];
    f.tensors[layer(l, "attn.q.weight")] = matrix_to_tensor(lw.q_weight);
    f.tensors[layer(l, "attn.k.weight")] = matrix_to_tensor(lw.k_weight);
    f.tensors[layer(l, "attn.v.weight")] = matrix_to_tensor(lw.v_weight);
    f.tensors[layer(l, "attn.o.weight")] = matrix_to_tensor(lw.o_weight);
    if (lw.q_bias) f.tensors[layer(l, "attn.q.bias")] = vector_to_tensor(*lw.q_bias);
    if (lw.k_bias) f.tensors[layer(l, "attn.k.bias")] = vector_to_tensor(*lw.k_bias);
    if (lw.v_bias) f.tensors[layer(l, "attn.v.bias")] = vector_to_tensor(*lw.v_bias);
    if (lw.o_bias) f.tensors[layer(l, "attn.o.bias")] = vector_to_tensor(*lw.o_bias);
    f.tensors[layer(l, "ln_1.weight")] = vector_to_tensor(lw.ln1_weight);
    f.tensors[layer(l, "ln_1.bias")] = vector_to_tensor(lw.ln1_bias);
  }
  f.tensors[tensor_names::final_ln_weight] = vector_to_tensor(b.final_ln_weight);
  f.tensors[tensor_names::final_ln_bias] = vector_to_tensor(b.final_ln_bias);
  f.tensors[tensor_names::proj] = matrix_to_tensor(b.proj);
  return f;
}

WeightBundle load_weight_bundle(const std::filesystem::path& path) {
  return bundle_from_tensor_file(read_tensor_file(path));
}

void save_weight_bundle(const WeightBundle& bundle, const std::filesystem::path& path) {
  write_tensor_file(bundle_to_tensor_file(bundle), path);
}

std::string model_id(const WeightBundle& bundle) {
  TensorFile f = bundle_to_tensor_file(bundle);
  // Metadata is excluded so the id depends on tensor values only.
  f.metadata.clear();
  const auto bytes = serialize_tensor_file(f);
  const std::uint64_t header_len = read_u64_le(bytes.data());
  const unsigned char* payload = bytes.data() + 8 + header_len;
  const std::size_t payload_size = bytes.size() - 8 - header_len;

  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  if (EVP_Digest(payload, payload_size, digest, &digest_len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < 8; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::vector<std::string> read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open vocab file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void validate(const ConceptDictionary& dict) {
  if (dict.concepts.empty()) throw ValidationError("concept dictionary is empty");
  if (static_cast<Eigen::Index>(dict.concepts.size()) != dict.embeddings.rows())
    throw ValidationError("concept count mismatch: " + std::to_string(dict.concepts.size()) +
                          " vocab lines vs " + std::to_string(dict.embeddings.rows()) + " embedding rows");
  const Eigen::Index d = dict.embeddings.cols();
  check_finite(dict.embeddings, "embeddings");
  check_dims(dict.text_mean, "text_mean", d);
  check_dims(dict.image_mean, "image_mean", d);
  for (std::size_t i = 0; i < dict.concepts.size(); ++i) {
    if (dict.concepts[i].empty()) throw ValidationError("empty concept string at line " + std::to_string(i + 1));
    const double n = dict.embeddings.row(static_cast<Eigen::Index>(i)).norm();
    if (std::abs(n - 1.0) > 1e-4)
      throw ValidationError("embedding row " + std::to_string(i) + " ('" + dict.concepts[i] +
                            "') is not unit norm: " + std::to_string(n));
  }
}

ConceptDictionary load_concept_dictionary(const std::filesystem::path& tensor_path,
                                          const std::filesystem::path& vocab_path) {
  const TensorFile f = read_tensor_file(tensor_path);
  ConceptDictionary dict;
  dict.concepts = read_vocab(vocab_path);
  dict.embeddings = tensor_to_matrix(require(f, "embeddings"), "embeddings");
  dict.text_mean = tensor_to_vector(require(f, "text_mean"), "text_mean");
  dict.image_mean = tensor_to_vector(require(f, "image_mean"), "image_mean");

  std::unordered_set<std::string> seen;
  std::size_t duplicates = 0;
  for (const auto& c : dict.concepts)
    if (!seen.insert(c).second) ++duplicates;
  if (duplicates > 0) spdlog::warn("vocab {} contains {} duplicate concept lines", vocab_path.string(), duplicates);

  validate(dict);
  return dict;
}

void save_concept_dictionary(const ConceptDictionary& dict, const std::filesystem::path& tensor_path,
                             const std::filesystem::path& vocab_path) {
  validate(dict);
  TensorFile f;
  f.tensors["embeddings"] = matrix_to_tensor(dict.embeddings);
  f.tensors["text_mean"] = vector_to_tensor(dict.text_mean);
  f.tensors["image_mean"] = vector_to_tensor(dict.image_mean);
  write_tensor_file(f, tensor_path);
  std::ofstream out(vocab_path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + vocab_path.string() + " for writing");
  for (const auto& c : dict.concepts) out << c << '\n';
}

}  // namespace headsvd
