#include "headsvd/pipeline.hpp"

#include <cmath>
#include <functional>
#include <regex>

#include "headsvd/head_algebra.hpp"
#include "headsvd/parallel.hpp"
#include "headsvd/projection.hpp"

namespace headsvd {

using json = nlohmann::json;

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const JudgeError*>(&e)) return 4;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const NumericalError*>(&e)) return 3;
  return 1;
}

template <typename Fn>
auto stage(const char* name, const TargetId& where, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, where, e.what(), exit_code_for(e));
  }
}

double round4(double x) { return std::round(x * 1e4) / 1e4; }

std::vector<int> range_layers(const LayerRange& r) {
  std::vector<int> out;
  for (int l = r.first; l <= r.last; ++l) out.push_back(l);
  return out;
}

// Runs fn(i) in parallel and rethrows the failure of the lowest index, so
// error reports do not depend on scheduling.
void run_ordered(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  parallel_for(n, threads, [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

LayerRange parse_layer_range(const std::string& text) {
  static const std::regex re(R"(^\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw UsageError("layer range must look like a..b, got '" + text + "'");
  LayerRange r{std::stoi(m[1].str()), std::stoi(m[2].str())};
  if (r.last < r.first) throw UsageError("empty layer range '" + text + "'");
  return r;
}

LayerRange default_layer_range(int layers, int count) {
  return {std::max(0, layers - count), layers - 1};
}

void validate(const RunConfig& cfg, const ModelMeta& meta, std::size_t dict_size) {
  if (cfg.layers) {
    if (cfg.layers->last < cfg.layers->first) throw UsageError("empty layer range");
    if (cfg.layers->first < 0 || cfg.layers->last >= meta.layers)
      throw UsageError("layer range " + std::to_string(cfg.layers->first) + ".." + std::to_string(cfg.layers->last) +
                       " outside [0, " + std::to_string(meta.layers) + ")");
  }
  if (cfg.k < 1) throw UsageError("K must be at least 1");
  if (dict_size > 0 && static_cast<std::size_t>(cfg.k) > dict_size)
    throw UsageError("K = " + std::to_string(cfg.k) + " exceeds dictionary size " + std::to_string(dict_size));
  if (!(cfg.lambda >= 0)) throw UsageError("lambda must be nonnegative");
  if (cfg.threads < 1) throw UsageError("threads must be at least 1");
}

PreparedDictionary prepare_dictionary(ConceptDictionary dict) {
  PreparedDictionary p;
  p.centered = center_text_embeddings(dict);
  p.dict = std::move(dict);
  return p;
}

ExplainResult explain_heads(const WeightBundle& bundle, const PreparedDictionary& dict, const LayerRange& layers,
                            Side side, Method method, int k, double lambda, int threads) {
  ExplainResult result;
  result.layers = layers;
  result.model_id = model_id(bundle);
  const TargetId nowhere{layers.first, 0, side, 0};
  const ProjectionContext ctx =
      stage("context", nowhere, [&] { return make_projection_context(bundle, dict.dict); });

  const int heads = bundle.meta.heads;
  const int r = bundle.meta.head_dim();
  const auto layer_list = range_layers(layers);

  std::vector<FoldedLayer> folded;
  for (int l : layer_list)
    folded.push_back(stage("fold", {l, 0, side, 0}, [&] { return fold_layer(bundle, l); }));

  const std::size_t n_heads = layer_list.size() * static_cast<std::size_t>(heads);
  result.heads.resize(n_heads);
  result.entries.resize(n_heads * static_cast<std::size_t>(r));

  run_ordered(n_heads, threads, [&](std::size_t item) {
    const auto li = item / static_cast<std::size_t>(heads);
    const int l = layer_list[li];
    const int h = static_cast<int>(item % static_cast<std::size_t>(heads));
    const FoldedLayer& f = folded[li];
    const TargetId head_id{l, h, side, 0};
    const Matrix w_v = stage("vo", head_id, [&] { return head_value_weight(f, h); });
    const Matrix w_o = stage("vo", head_id, [&] { return head_output_weight(f, h); });
    result.heads[item] = stage("svd", head_id, [&] { return svd_head_factored(w_v, w_o, l, h); });
    const HeadSVD& svd = result.heads[item];

    for (int i = 0; i < r; ++i) {
      const TargetId id{l, h, side, i};
      const Vector vec = svd.vector(side, i);
      const Vector target = stage("project", id, [&] { return to_multimodal(vec, ctx); });
      Decomposition d = stage("decompose", id, [&] { return decompose(target, dict.centered, method, k, lambda); });
      d.target = id;
      const Fidelity fid = stage("fidelity", id, [&] { return fidelity(d, dict.centered, ctx, vec); });
      d.fidelity_multimodal = fid.multimodal;
      d.fidelity_residual = fid.residual;
      result.entries[item * static_cast<std::size_t>(r) + static_cast<std::size_t>(i)] = std::move(d);
    }
  });
  return result;
}

json explain_report(const ExplainResult& result, const ConceptDictionary& dict, Side side, Method method, int k,
                    double lambda) {
  json j;
  j["model_id"] = result.model_id;
  j["method"] = to_string(method);
  j["K"] = k;
  j["lambda"] = method == Method::comp ? lambda : 0.0;
  j["side"] = to_string(side);
  j["layers"] = range_layers(result.layers);
  j["entries"] = json::array();
  const int r = result.heads.empty() ? 0 : result.heads.front().rank();
  for (std::size_t e = 0; e < result.entries.size(); ++e) {
    const Decomposition& d = result.entries[e];
    const HeadSVD& svd = result.heads[e / static_cast<std::size_t>(r)];
    json concepts = json::array();
    for (std::size_t i = 0; i < d.support.size(); ++i)
      concepts.push_back({{"index", d.support[i]},
                          {"text", dict.concepts[static_cast<std::size_t>(d.support[i])]},
                          {"coefficient", round4(d.coefficients[i])}});
    j["entries"].push_back({{"layer", d.target.layer},
                            {"head", d.target.head},
                            {"side", to_string(d.target.side)},
                            {"index", d.target.index},
                            {"sigma", svd.sigma(d.target.index)},
                            {"orientation", d.orientation},
                            {"concepts", concepts},
                            {"residual_norm", d.residual_norm},
                            {"fidelity_multimodal", d.fidelity_multimodal},
                            {"fidelity_residual", d.fidelity_residual}});
  }
  return j;
}

json fidelity_summary(const ExplainResult& result, const Matrix& centered_dict, Method method, int k, double lambda) {
  json j;
  j["model_id"] = result.model_id;
  j["method"] = to_string(method);
  j["K"] = k;
  j["lambda"] = method == Method::comp ? lambda : 0.0;
  j["layers"] = json::array();
  for (int l : range_layers(result.layers)) {
    double fr = 0.0, fr2 = 0.0, fm = 0.0, coh = 0.0;
    std::size_t n = 0, n_coh = 0;
    for (const auto& d : result.entries) {
      if (d.target.layer != l) continue;
      fr += d.fidelity_residual;
      fr2 += d.fidelity_residual * d.fidelity_residual;
      fm += d.fidelity_multimodal;
      ++n;
      if (d.support.size() >= 2) {
        coh += proxy_coherence(d.support, centered_dict);
        ++n_coh;
      }
    }
    const double mean = n ? fr / static_cast<double>(n) : 0.0;
    const double var = n ? std::max(0.0, fr2 / static_cast<double>(n) - mean * mean) : 0.0;
    j["layers"].push_back({{"layer", l},
                           {"count", n},
                           {"mean_fidelity_residual", mean},
                           {"std_fidelity_residual", std::sqrt(var)},
                           {"mean_fidelity_multimodal", n ? fm / static_cast<double>(n) : 0.0},
                           {"mean_proxy_coherence", n_coh ? coh / static_cast<double>(n_coh) : 0.0}});
  }
  return j;
}

json inspect_bundle(const WeightBundle& bundle) {
  json j;
  j["model_id"] = model_id(bundle);
  j["embed_dim"] = bundle.meta.embed_dim;
  j["shared_dim"] = bundle.meta.shared_dim;
  j["layers"] = bundle.meta.layers;
  j["heads"] = bundle.meta.heads;
  j["head_dim"] = bundle.meta.head_dim();
  j["folded"] = bundle.folded;
  j["folded_layers"] = bundle.folded_layers;
  json per_layer = json::array();
  for (int l = 0; l < bundle.meta.layers; ++l) {
    json sig = json::array();
    for (const auto& svd : analyze_layer(bundle, l)) sig.push_back(svd.sigma(0));
    per_layer.push_back({{"layer", l}, {"top_sigma", sig}});
  }
  j["heads_top_sigma"] = per_layer;
  return j;
}

json compare_bundles(const WeightBundle& pre, const WeightBundle& ft, const PreparedDictionary* dict,
                     const CompareOptions& options) {
  if (!(pre.meta == ft.meta)) throw ValidationError("model metadata of the two bundles differs");
  const auto layer_list = range_layers(options.layers);
  const int heads = pre.meta.heads;
  const std::size_t n = layer_list.size() * static_cast<std::size_t>(heads);

  std::optional<ProjectionContext> ctx;
  if (dict) ctx = make_projection_context(pre, dict->dict);

  std::vector<FoldedLayer> f_pre, f_ft;
  for (int l : layer_list) {
    f_pre.push_back(fold_layer(pre, l));
    f_ft.push_back(fold_layer(ft, l));
  }

  std::vector<SpectralEntry> entries(n);
  std::vector<json> task_json(n);
  run_ordered(n, options.threads, [&](std::size_t item) {
    const auto li = item / static_cast<std::size_t>(heads);
    const int l = layer_list[li];
    const int h = static_cast<int>(item % static_cast<std::size_t>(heads));
    const HeadSVD a = svd_head_factored(head_value_weight(f_pre[li], h), head_output_weight(f_pre[li], h), l, h);
    const HeadSVD b = svd_head_factored(head_value_weight(f_ft[li], h), head_output_weight(f_ft[li], h), l, h);
    entries[item] = greedy_spectral_match(a, b);

    json tj = json::array();
    const auto tsv = task_singular_vectors(a.w_vo, b.w_vo, options.top_k);
    for (std::size_t t = 0; t < tsv.size(); ++t) {
      json e{{"layer", l}, {"head", h}, {"rank", t}, {"sigma", tsv[t].sigma}};
      if (dict && tsv[t].sigma > 1e-9) {
        const TargetId id{l, h, Side::right, static_cast<int>(t)};
        const Decomposition d =
            explain_vector(tsv[t].v, id, *ctx, dict->centered, options.method, options.k, options.lambda);
        json concepts = json::array();
        for (std::size_t i = 0; i < d.support.size(); ++i)
          concepts.push_back({{"index", d.support[i]},
                              {"text", dict->dict.concepts[static_cast<std::size_t>(d.support[i])]},
                              {"coefficient", round4(d.coefficients[i])}});
        e["orientation"] = d.orientation;
        e["concepts"] = concepts;
        e["residual_norm"] = d.residual_norm;
        e["fidelity_multimodal"] = d.fidelity_multimodal;
        e["fidelity_residual"] = d.fidelity_residual;
      }
      tj.push_back(e);
    }
    task_json[item] = std::move(tj);
  });

  SpectralReport report;
  report.dataset_label = options.dataset_label;
  report.method_label = options.method_label;
  report.layers = layer_list;
  for (std::size_t li = 0; li < layer_list.size(); ++li)
    report.grid.emplace_back(entries.begin() + static_cast<std::ptrdiff_t>(li * static_cast<std::size_t>(heads)),
                             entries.begin() + static_cast<std::ptrdiff_t>((li + 1) * static_cast<std::size_t>(heads)));

  json j = to_json(report);
  j["model_id_pre"] = model_id(pre);
  j["model_id_ft"] = model_id(ft);
  j["heads"] = json::array();
  for (const auto& e : entries) {
    json pairs = json::array();
    for (const auto& p : e.pairs)
      pairs.push_back({{"pre", p.pre_index}, {"ft", p.ft_index}, {"abs_cosine", p.abs_cosine}, {"score", p.score}});
    j["heads"].push_back({{"layer", e.layer}, {"head", e.head}, {"similarity", e.similarity}, {"pairs", pairs}});
  }
  j["task_vectors"] = json::array();
  for (auto& tj : task_json)
    for (auto& e : tj) j["task_vectors"].push_back(std::move(e));
  j["top_k"] = options.top_k;
  j["method"] = to_string(options.method);
  j["K"] = options.k;
  j["lambda"] = options.method == Method::comp ? options.lambda : 0.0;
  return j;
}

}  // namespace headsvd
