#include "headsvd/editing.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <tuple>

#include "headsvd/projection.hpp"

namespace headsvd {

using json = nlohmann::json;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string where(const EditEntry& e) {
  return "(layer " + std::to_string(e.layer) + ", head " + std::to_string(e.head) + ", index " +
         std::to_string(e.index) + ")";
}

}  // namespace

void validate(const EditManifest& manifest, const ModelMeta* meta) {
  std::set<std::tuple<int, int, int>> seen;
  for (const auto& e : manifest.entries) {
    if (e.multiplier.has_value() == e.set_value.has_value())
      throw ValidationError("manifest entry " + where(e) + " needs exactly one of multiplier/set_value");
    const double v = e.multiplier ? *e.multiplier : *e.set_value;
    if (!std::isfinite(v)) throw ValidationError("non-finite manifest value at " + where(e));
    if (e.layer < 0 || e.head < 0 || e.index < 0) throw ValidationError("negative manifest index at " + where(e));
    if (meta && (e.layer >= meta->layers || e.head >= meta->heads || e.index >= meta->head_dim()))
      throw ValidationError("manifest entry " + where(e) + " out of bounds");
    if (!seen.insert({e.layer, e.head, e.index}).second)
      throw ValidationError("duplicate manifest entry " + where(e));
  }
  if (manifest.tau && !std::isfinite(*manifest.tau)) throw ValidationError("non-finite tau");
}

json to_json(const EditManifest& manifest) {
  json j;
  j["model_id"] = manifest.model_id;
  if (manifest.tau) j["tau"] = *manifest.tau;
  j["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    json je{{"layer", e.layer}, {"head", e.head}, {"index", e.index}};
    if (e.multiplier) je["multiplier"] = *e.multiplier;
    if (e.set_value) je["set_value"] = *e.set_value;
    j["entries"].push_back(je);
  }
  return j;
}

EditManifest manifest_from_json(const json& j) {
  EditManifest m;
  try {
    m.model_id = j.at("model_id").get<std::string>();
    if (j.contains("tau") && !j["tau"].is_null()) m.tau = j["tau"].get<double>();
    for (const auto& je : j.at("entries")) {
      EditEntry e;
      e.layer = je.at("layer").get<int>();
      e.head = je.at("head").get<int>();
      e.index = je.at("index").get<int>();
      if (je.contains("multiplier")) e.multiplier = je["multiplier"].get<double>();
      if (je.contains("set_value")) e.set_value = je["set_value"].get<double>();
      m.entries.push_back(e);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  validate(m);
  return m;
}

EditManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  return manifest_from_json(j);
}

void save_manifest(const EditManifest& manifest, const std::filesystem::path& path) {
  validate(manifest);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_json(manifest).dump(2) << '\n';
}

std::vector<int> edited_layers(const EditManifest& manifest) {
  std::set<int> layers;
  for (const auto& e : manifest.entries) layers.insert(e.layer);
  return {layers.begin(), layers.end()};
}

std::vector<int> build_task_pool(const std::vector<std::string>& class_names, const Matrix& class_embeddings,
                                 const ConceptDictionary& dict, const Matrix& centered_dict, int k, double lambda) {
  if (class_names.empty()) throw ValidationError("no class names given");
  if (static_cast<Eigen::Index>(class_names.size()) != class_embeddings.rows())
    throw ValidationError("class name count does not match class embedding rows");
  if (class_embeddings.cols() != centered_dict.cols())
    throw ValidationError("class embedding dim does not match dictionary dim");

  std::set<std::string> names;
  for (const auto& n : class_names) names.insert(lower(n));
  std::vector<std::uint8_t> excluded(dict.concepts.size(), 0);
  for (std::size_t i = 0; i < dict.concepts.size(); ++i)
    if (names.count(lower(dict.concepts[i]))) excluded[i] = 1;

  const Matrix centered_classes = center_text_embeddings(class_embeddings, dict.text_mean);
  std::set<int> pool;
  for (Eigen::Index m = 0; m < centered_classes.rows(); ++m) {
    const Decomposition d = decompose(centered_classes.row(m).transpose(), centered_dict, Method::comp, k, lambda,
                                      excluded);
    for (std::size_t i = 0; i < d.support.size(); ++i)
      if (d.coefficients[i] > 0.0) pool.insert(d.support[i]);
  }
  if (pool.empty()) throw ValidationError("task concept pool is empty");
  return {pool.begin(), pool.end()};
}

std::vector<RelevanceScore> relevance_scale_factors(const std::vector<Decomposition>& decomps,
                                                    const std::vector<int>& pool, const Matrix& centered_dict,
                                                    double tau) {
  if (decomps.empty()) throw ValidationError("no decompositions to score");
  if (pool.empty()) throw ValidationError("task concept pool is empty");
  Matrix pool_rows(static_cast<Eigen::Index>(pool.size()), centered_dict.cols());
  for (std::size_t j = 0; j < pool.size(); ++j) pool_rows.row(static_cast<Eigen::Index>(j)) = centered_dict.row(pool[j]);

  std::vector<RelevanceScore> out;
  out.reserve(decomps.size());
  for (const auto& d : decomps) {
    double r = 0.0;
    for (std::size_t i = 0; i < d.support.size(); ++i) {
      const double best = (pool_rows * centered_dict.row(d.support[i]).transpose()).maxCoeff();
      r += d.coefficients[i] * best;
    }
    out.push_back({d.target, r, std::max(kMinRelevanceScale, r + tau)});
  }
  return out;
}

JudgmentMode judgment_mode_from_string(const std::string& s) {
  if (s == "spurious") return JudgmentMode::spurious;
  if (s == "nsfw") return JudgmentMode::nsfw;
  throw ValidationError("mode must be 'spurious' or 'nsfw', got '" + s + "'");
}

EditManifest manifest_from_judgments(const std::vector<Judgment>& judgments, JudgmentMode mode) {
  EditManifest m;
  for (const auto& j : judgments) {
    if (j.score < 1 || j.score > 5) throw ValidationError("judge score out of range 1..5: " + std::to_string(j.score));
    EditEntry e{j.target.layer, j.target.head, j.target.index, std::nullopt, std::nullopt};
    if (mode == JudgmentMode::spurious) {
      if (j.score >= 3) e.multiplier = 0.0;
    } else {
      if (j.score >= 4)
        e.multiplier = 0.0;
      else if (j.score == 3)
        e.set_value = -1.0;
    }
    if (e.multiplier || e.set_value) m.entries.push_back(e);
  }
  validate(m);
  return m;
}

EditManifest manifest_from_relevance(const std::vector<RelevanceScore>& scores) {
  EditManifest m;
  for (const auto& s : scores)
    m.entries.push_back({s.target.layer, s.target.head, s.target.index, s.alpha, std::nullopt});
  validate(m);
  return m;
}

Vector edited_sigma(const HeadSVD& svd, const EditManifest& manifest) {
  Vector sigma = svd.sigma;
  for (const auto& e : manifest.entries) {
    if (e.layer != svd.layer || e.head != svd.head) continue;
    if (e.index < 0 || e.index >= svd.rank())
      throw ValidationError("manifest index " + std::to_string(e.index) + " out of range for rank " +
                            std::to_string(svd.rank()) + " " + where(e));
    if (e.multiplier)
      sigma(e.index) *= *e.multiplier;
    else
      sigma(e.index) = *e.set_value;
  }
  return sigma;
}

std::pair<Matrix, Matrix> apply_edit(const HeadSVD& svd, const EditManifest& manifest) {
  const Vector sigma = edited_sigma(svd, manifest);
  return {svd.u * sigma.asDiagonal(), svd.v_t};
}

WeightBundle apply_manifest(const WeightBundle& bundle, const EditManifest& manifest) {
  validate(manifest, &bundle.meta);
  WeightBundle out = bundle;
  const int heads = bundle.meta.heads;
  const Eigen::Index dh = bundle.meta.head_dim();
  const Eigen::Index D = bundle.meta.embed_dim;

  std::set<int> folded(out.folded_layers.begin(), out.folded_layers.end());
  for (int l : edited_layers(manifest)) {
    const FoldedLayer f = fold_layer(bundle, l);
    auto& lw = out.layers[static_cast<std::size_t>(l)];
    lw.q_weight = f.q_weight;
    lw.k_weight = f.k_weight;
    lw.q_bias = f.q_bias;
    lw.k_bias = f.k_bias;
    lw.o_bias = f.o_bias + f.o_weight.transpose() * f.v_bias;
    lw.v_bias = Vector::Zero(D);
    lw.ln1_weight = Vector::Ones(D);
    lw.ln1_bias = Vector::Zero(D);
    for (int h = 0; h < heads; ++h) {
      const HeadSVD svd = svd_head_factored(head_value_weight(f, h), head_output_weight(f, h), l, h);
      auto [wv, wo] = apply_edit(svd, manifest);
      lw.v_weight.middleCols(h * dh, dh) = wv;
      lw.o_weight.middleRows(h * dh, dh) = wo;
    }
    folded.insert(l);
  }
  out.folded = true;
  out.folded_layers.assign(folded.begin(), folded.end());
  validate(out);
  return out;
}

}  // namespace headsvd
