#include "headsvd/cli.hpp"

#include <fstream>
#include <iomanip>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "headsvd/editing.hpp"
#include "headsvd/pipeline.hpp"

namespace headsvd {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Args {
  std::string bundle, bundle_ft, dict_emb, dict_vocab, layers, side = "right", method = "comp";
  int k = kDefaultSparsity;
  double lambda = kDefaultLambda;
  double tau = 0.0;
  std::string manifest, out;
  int threads = 1;
  std::string judge_endpoint, judge_model;
  bool offline_judge = false;
  int judge_concurrency = 4;
  int judge_retries = 3;
  double judge_timeout = 60.0;
  std::string mode = "spurious", judgments, anchors;
  std::string classes_emb, classes_vocab;
  int top_k = 5;
  std::string dataset_label, method_label;
};

void add_bundle(CLI::App* app, Args& a) { app->add_option("--bundle", a.bundle, "Weight bundle file")->required(); }

void add_dictionary(CLI::App* app, Args& a, bool required) {
  auto* e = app->add_option("--dict-emb", a.dict_emb, "Concept embedding tensor file");
  auto* v = app->add_option("--dict-vocab", a.dict_vocab, "Concept vocabulary (one per line)");
  if (required) {
    e->required();
    v->required();
  }
}

void add_decomposition(CLI::App* app, Args& a) {
  app->add_option("--layers", a.layers, "Inclusive layer range a..b (default: last 4 layers)");
  app->add_option("-K", a.k, "Sparsity budget")->capture_default_str();
  app->add_option("--lambda", a.lambda, "Coherence weight for comp")->capture_default_str();
  app->add_option("--method", a.method, "topk | nnomp | comp")->capture_default_str();
  app->add_option("--threads", a.threads, "Worker threads")->capture_default_str();
}

void add_out(CLI::App* app, Args& a) { app->add_option("--out", a.out, "Output directory")->required(); }

void add_judge(CLI::App* app, Args& a) {
  app->add_option("--judge-endpoint", a.judge_endpoint, "OpenAI-compatible base URL");
  app->add_option("--judge-model", a.judge_model, "Judge model name");
  app->add_option("--judge-concurrency", a.judge_concurrency, "Maximum concurrent judge requests")
      ->capture_default_str();
  app->add_option("--judge-retries", a.judge_retries, "Retry budget per request")->capture_default_str();
  app->add_option("--judge-timeout", a.judge_timeout, "Request timeout in seconds")->capture_default_str();
  app->add_flag("--offline-judge", a.offline_judge, "Use the embedding-similarity proxy instead of a remote judge");
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

fs::path ensure_out_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error("cannot create output directory " + dir + ": " + ec.message());
  return p;
}

RunConfig make_config(const Args& a) {
  RunConfig cfg;
  cfg.bundle_path = a.bundle;
  cfg.bundle_ft_path = a.bundle_ft;
  cfg.dict_emb_path = a.dict_emb;
  cfg.dict_vocab_path = a.dict_vocab;
  if (!a.layers.empty()) cfg.layers = parse_layer_range(a.layers);
  try {
    cfg.side = side_from_string(a.side);
    cfg.method = method_from_string(a.method);
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
  cfg.k = a.k;
  cfg.lambda = a.lambda;
  cfg.tau = a.tau;
  cfg.out_dir = a.out;
  cfg.manifest_path = a.manifest;
  cfg.threads = a.threads;
  cfg.offline_judge = a.offline_judge;
  if (!a.judge_endpoint.empty() || !a.judge_model.empty()) {
    JudgeConfig j = judge_config_from_env(a.judge_endpoint, a.judge_model);
    j.max_concurrency = a.judge_concurrency;
    j.retry_budget = a.judge_retries;
    j.timeout_seconds = a.judge_timeout;
    cfg.judge = j;
  }
  return cfg;
}

struct Loaded {
  WeightBundle bundle;
  std::optional<PreparedDictionary> dict;
  LayerRange layers;
};

Loaded load_inputs(const RunConfig& cfg, bool need_dict) {
  Loaded in;
  in.bundle = load_weight_bundle(cfg.bundle_path);
  if (need_dict || (!cfg.dict_emb_path.empty() && !cfg.dict_vocab_path.empty()))
    in.dict = prepare_dictionary(load_concept_dictionary(cfg.dict_emb_path, cfg.dict_vocab_path));
  validate(cfg, in.bundle.meta, in.dict ? in.dict->dict.size() : 0);
  in.layers = cfg.layers.value_or(default_layer_range(in.bundle.meta.layers));
  return in;
}

void print_edit_summary(const EditManifest& m, std::ostream& out) {
  std::set<std::pair<int, int>> heads;
  for (const auto& e : m.entries) heads.insert({e.layer, e.head});
  out << "edited " << m.entries.size() << " singular values across " << heads.size() << " heads\n";
}

int cmd_inspect(const Args& a, std::ostream& out) {
  const WeightBundle bundle = load_weight_bundle(a.bundle);
  const json j = inspect_bundle(bundle);
  out << j.dump(2) << '\n';
  if (!a.out.empty()) write_json(j, ensure_out_dir(a.out) / "inspect.json");
  return kExitOk;
}

int cmd_explain(const Args& a, std::ostream& out) {
  const RunConfig cfg = make_config(a);
  const Loaded in = load_inputs(cfg, true);
  const ExplainResult r =
      explain_heads(in.bundle, *in.dict, in.layers, cfg.side, cfg.method, cfg.k, cfg.lambda, cfg.threads);
  const fs::path path = ensure_out_dir(a.out) / "explain_report.json";
  write_json(explain_report(r, in.dict->dict, cfg.side, cfg.method, cfg.k, cfg.lambda), path);
  out << "wrote " << r.entries.size() << " explanations to " << path.string() << '\n';
  return kExitOk;
}

int cmd_fidelity(const Args& a, std::ostream& out) {
  const RunConfig cfg = make_config(a);
  const Loaded in = load_inputs(cfg, true);
  const ExplainResult r =
      explain_heads(in.bundle, *in.dict, in.layers, cfg.side, cfg.method, cfg.k, cfg.lambda, cfg.threads);
  const json j = fidelity_summary(r, in.dict->centered, cfg.method, cfg.k, cfg.lambda);
  write_json(j, ensure_out_dir(a.out) / "fidelity_report.json");
  out << "layer  count  fidelity_residual  fidelity_multimodal  proxy_coherence\n";
  for (const auto& row : j["layers"]) {
    out << std::setw(5) << row["layer"].get<int>() << "  " << std::setw(5) << row["count"].get<int>() << "  "
        << std::fixed << std::setprecision(4) << std::setw(17) << row["mean_fidelity_residual"].get<double>()
        << "  " << std::setw(19) << row["mean_fidelity_multimodal"].get<double>() << "  " << std::setw(15)
        << row["mean_proxy_coherence"].get<double>() << '\n';
  }
  return kExitOk;
}

int cmd_edit(const Args& a, std::ostream& out) {
  const RunConfig cfg = make_config(a);
  const WeightBundle bundle = load_weight_bundle(cfg.bundle_path);
  const EditManifest manifest = load_manifest(cfg.manifest_path);
  const std::string id = model_id(bundle);
  if (manifest.model_id != id)
    throw ValidationError("manifest model_id " + manifest.model_id + " does not match bundle " + id);
  const WeightBundle edited = apply_manifest(bundle, manifest);
  const fs::path path = ensure_out_dir(a.out) / "edited_bundle.safetensors";
  save_weight_bundle(edited, path);
  print_edit_summary(manifest, out);
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

std::vector<int> lookup_concepts(const std::vector<std::string>& names, const ConceptDictionary& dict) {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < dict.concepts.size(); ++i) index.emplace(dict.concepts[i], static_cast<int>(i));
  std::vector<int> out;
  for (const auto& n : names) {
    if (n.empty()) continue;
    auto it = index.find(n);
    if (it == index.end()) throw ValidationError("anchor concept '" + n + "' not found in dictionary");
    out.push_back(it->second);
  }
  return out;
}

std::vector<Judgment> read_judgments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open judgments file " + path.string());
  std::vector<Judgment> out;
  try {
    for (const auto& j : json::parse(in))
      out.push_back({{j.at("layer").get<int>(), j.at("head").get<int>(), Side::right, j.at("index").get<int>()},
                     j.at("score").get<int>()});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed judgments file: ") + e.what());
  }
  return out;
}

int cmd_suppress(const Args& a, std::ostream& out) {
  RunConfig cfg = make_config(a);
  cfg.side = Side::right;
  const JudgmentMode mode = [&] {
    try {
      return judgment_mode_from_string(a.mode);
    } catch (const ValidationError& e) {
      throw UsageError(e.what());
    }
  }();
  const int sources = static_cast<int>(!a.judgments.empty()) + static_cast<int>(cfg.offline_judge) +
                      static_cast<int>(cfg.judge.has_value());
  if (sources != 1)
    throw UsageError("suppress needs exactly one of --judgments, --offline-judge, or --judge-endpoint/--judge-model");
  if (cfg.offline_judge && a.anchors.empty()) throw UsageError("--offline-judge needs --anchors for suppress");

  std::vector<Judgment> judgments;
  Loaded in = load_inputs(cfg, a.judgments.empty());
  if (!a.judgments.empty()) {
    judgments = read_judgments(a.judgments);
  } else {
    const ExplainResult r =
        explain_heads(in.bundle, *in.dict, in.layers, Side::right, cfg.method, cfg.k, cfg.lambda, cfg.threads);
    if (cfg.offline_judge) {
      const auto anchors = lookup_concepts(read_vocab(a.anchors), in.dict->dict);
      for (const auto& d : r.entries)
        judgments.push_back({d.target, d.support.empty() ? 1 : proxy_anchor_score(d.support, anchors, in.dict->centered)});
    } else {
      std::vector<std::vector<std::string>> sets;
      for (const auto& d : r.entries) {
        std::vector<std::string> texts;
        for (int c : d.support) texts.push_back(in.dict->dict.concepts[static_cast<std::size_t>(c)]);
        sets.push_back(std::move(texts));
      }
      const auto kind = mode == JudgmentMode::spurious ? PromptKind::spurious : PromptKind::nsfw;
      const auto scores = judge_many(sets, kind, std::nullopt, *cfg.judge);
      for (std::size_t i = 0; i < scores.size(); ++i) judgments.push_back({r.entries[i].target, scores[i]});
    }
  }

  EditManifest manifest = manifest_from_judgments(judgments, mode);
  manifest.model_id = model_id(in.bundle);
  const fs::path dir = ensure_out_dir(a.out);
  json jj = json::array();
  for (const auto& j : judgments)
    jj.push_back({{"layer", j.target.layer}, {"head", j.target.head}, {"index", j.target.index}, {"score", j.score}});
  write_json(jj, dir / "judgments.json");
  save_manifest(manifest, dir / "manifest.json");
  save_weight_bundle(apply_manifest(in.bundle, manifest), dir / "edited_bundle.safetensors");
  print_edit_summary(manifest, out);
  return kExitOk;
}

int cmd_boost(const Args& a, std::ostream& out) {
  RunConfig cfg = make_config(a);
  cfg.side = Side::right;
  const Loaded in = load_inputs(cfg, true);
  const auto class_names = read_vocab(a.classes_vocab);
  const TensorFile class_file = read_tensor_file(a.classes_emb);
  const auto emb = class_file.tensors.find("embeddings");
  if (emb == class_file.tensors.end()) throw ValidationError("missing required tensor embeddings in " + a.classes_emb);
  const Matrix class_emb = tensor_to_matrix(emb->second, "embeddings");
  const auto pool = build_task_pool(class_names, class_emb, in.dict->dict, in.dict->centered, cfg.k, cfg.lambda);

  const ExplainResult r =
      explain_heads(in.bundle, *in.dict, in.layers, Side::right, cfg.method, cfg.k, cfg.lambda, cfg.threads);
  const auto scores = relevance_scale_factors(r.entries, pool, in.dict->centered, cfg.tau);
  EditManifest manifest = manifest_from_relevance(scores);
  manifest.model_id = r.model_id;
  manifest.tau = cfg.tau;

  const fs::path dir = ensure_out_dir(a.out);
  json pj = json::array();
  for (int c : pool) pj.push_back({{"index", c}, {"text", in.dict->dict.concepts[static_cast<std::size_t>(c)]}});
  write_json(pj, dir / "task_pool.json");
  save_manifest(manifest, dir / "manifest.json");
  save_weight_bundle(apply_manifest(in.bundle, manifest), dir / "edited_bundle.safetensors");
  out << "task pool: " << pool.size() << " concepts\n";
  print_edit_summary(manifest, out);
  return kExitOk;
}

int cmd_compare(const Args& a, std::ostream& out) {
  const RunConfig cfg = make_config(a);
  const Loaded in = load_inputs(cfg, false);
  const WeightBundle ft = load_weight_bundle(cfg.bundle_ft_path);
  CompareOptions opt;
  opt.layers = in.layers;
  opt.top_k = a.top_k;
  opt.method = cfg.method;
  opt.k = cfg.k;
  opt.lambda = cfg.lambda;
  opt.dataset_label = a.dataset_label;
  opt.method_label = a.method_label;
  opt.threads = cfg.threads;
  const json j = compare_bundles(in.bundle, ft, in.dict ? &*in.dict : nullptr, opt);
  const fs::path path = ensure_out_dir(a.out) / "compare_report.json";
  write_json(j, path);
  for (const auto& row : j["grid"]) out << row.dump() << '\n';
  return kExitOk;
}

void report_error(std::ostream& err, const std::string& stage, const std::string& message,
                  const std::optional<TargetId>& where = std::nullopt) {
  json e{{"stage", stage}, {"message", message}};
  if (where) {
    e["layer"] = where->layer;
    e["head"] = where->head;
    e["side"] = to_string(where->side);
    e["index"] = where->index;
  }
  err << json{{"error", e}}.dump() << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight-space interpretation and editing of vision-transformer attention heads"};
  app.require_subcommand(1);
  Args a;

  auto* inspect = app.add_subcommand("inspect", "Summarize a weight bundle");
  add_bundle(inspect, a);
  inspect->add_option("--out", a.out, "Optional output directory");

  auto* explain = app.add_subcommand("explain", "Explain every singular vector of the selected heads");
  add_bundle(explain, a);
  add_dictionary(explain, a, true);
  add_decomposition(explain, a);
  explain->add_option("--side", a.side, "left | right")->capture_default_str();
  add_out(explain, a);

  auto* fid = app.add_subcommand("fidelity", "Per-layer fidelity and coherence summary");
  add_bundle(fid, a);
  add_dictionary(fid, a, true);
  add_decomposition(fid, a);
  fid->add_option("--side", a.side, "left | right")->capture_default_str();
  add_out(fid, a);

  auto* edit = app.add_subcommand("edit", "Apply a singular-value edit manifest");
  add_bundle(edit, a);
  edit->add_option("--manifest", a.manifest, "Edit manifest JSON")->required();
  add_out(edit, a);

  auto* suppress = app.add_subcommand("suppress", "Judge singular vectors and zero/invert flagged ones");
  add_bundle(suppress, a);
  add_dictionary(suppress, a, false);
  add_decomposition(suppress, a);
  add_judge(suppress, a);
  suppress->add_option("--mode", a.mode, "spurious | nsfw")->capture_default_str();
  suppress->add_option("--judgments", a.judgments, "Precomputed judgments JSON [{layer, head, index, score}]");
  suppress->add_option("--anchors", a.anchors, "Anchor concepts for the offline judge (one per line)");
  add_out(suppress, a);

  auto* boost = app.add_subcommand("boost", "Scale singular values by task relevance");
  add_bundle(boost, a);
  add_dictionary(boost, a, true);
  add_decomposition(boost, a);
  boost->add_option("--tau", a.tau, "Relevance offset")->capture_default_str();
  boost->add_option("--classes-emb", a.classes_emb, "Class-name embedding tensor file")->required();
  boost->add_option("--classes-vocab", a.classes_vocab, "Class names (one per line)")->required();
  add_out(boost, a);

  auto* compare = app.add_subcommand("compare", "Compare a fine-tuned checkpoint against its base");
  add_bundle(compare, a);
  compare->add_option("--bundle-ft", a.bundle_ft, "Fine-tuned weight bundle")->required();
  add_dictionary(compare, a, false);
  add_decomposition(compare, a);
  compare->add_option("--top-k", a.top_k, "Task singular vectors per head")->capture_default_str();
  compare->add_option("--dataset-label", a.dataset_label, "Label stored in the report");
  compare->add_option("--method-label", a.method_label, "Label stored in the report");
  add_out(compare, a);

  std::vector<std::string> argv_store{"headsvd"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "inspect") return cmd_inspect(a, out);
    if (command == "explain") return cmd_explain(a, out);
    if (command == "fidelity") return cmd_fidelity(a, out);
    if (command == "edit") return cmd_edit(a, out);
    if (command == "suppress") return cmd_suppress(a, out);
    if (command == "boost") return cmd_boost(a, out);
    if (command == "compare") return cmd_compare(a, out);
  } catch (const UsageError& e) {
    report_error(err, "usage", e.what());
    return kExitUsage;
  } catch (const StageError& e) {
    report_error(err, e.stage(), e.message(), e.where());
    return e.exit_code();
  } catch (const JudgeError& e) {
    report_error(err, "judge", e.what());
    return kExitJudge;
  } catch (const ValidationError& e) {
    report_error(err, "validate", e.what());
    return kExitValidation;
  } catch (const NumericalError& e) {
    report_error(err, "numeric", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    report_error(err, command, e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace headsvd
