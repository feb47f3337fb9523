#pragma once

// Experiment configuration and the end-to-end stages shared by the CLI and
// the acceptance suite: synthesize, morph, train, embed, evaluate, compare.

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "morphquad/common.hpp"
#include "morphquad/data_model.hpp"
#include "morphquad/losses.hpp"
#include "morphquad/metrics.hpp"
#include "morphquad/morphgen.hpp"
#include "morphquad/sampler.hpp"
#include "morphquad/trainer.hpp"

namespace morphquad {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "MORPHQUAD_OUTPUT_ROOT";

struct DatasetSection {
  std::optional<SyntheticConfig> train, benchmark;
  // Alternatively, directories holding manifest.csv + images/.
  std::string train_dir, benchmark_dir;
};

struct MorphSection {
  MorphMethod method{MorphMethod::Kind::latent_blend, 0.5};
  std::size_t train_count = 200;
  std::size_t benchmark_count = 200;
  int selfmorphs_per_identity = 1;
  std::uint64_t seed = 0;
};

struct EvalSection {
  std::vector<double> fnmr_grid{0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2};
  double target_fnmr = 0.01;
  Modality probe_modality = Modality::reference;
  VerificationConfig verification;
};

struct RunConfig {
  std::string name = "run";
  std::string output_dir = "run";
  DatasetSection dataset;
  MorphSection morph;
  TrainConfig train;
  EvalSection eval;
  json raw;  // the document this was parsed from

  void validate() const {
    if (!dataset.train && dataset.train_dir.empty()) throw ValidationError("dataset.train is required");
    if (!dataset.benchmark && dataset.benchmark_dir.empty()) throw ValidationError("dataset.benchmark is required");
    if (dataset.train) dataset.train->validate();
    if (dataset.benchmark) dataset.benchmark->validate();
    if (morph.method.kind == MorphMethod::Kind::latent_blend && (!dataset.train || !dataset.benchmark))
      throw ValidationError("latent_blend morphs need synthetic dataset sections");
    morph.method.validate();
    train.validate();
    if (dataset.train && dataset.train->image_size != train.backbone.input_size)
      throw ValidationError("train.backbone.input_size must match dataset image_size");
    if (dataset.benchmark && dataset.benchmark->image_size != train.backbone.input_size)
      throw ValidationError("benchmark image_size must match train.backbone.input_size");
    if (!(eval.target_fnmr > 0.0 && eval.target_fnmr < 1.0)) throw ValidationError("eval.target_fnmr must lie in (0,1)");
    if (eval.fnmr_grid.empty()) throw ValidationError("eval.fnmr_grid must not be empty");
    for (double f : eval.fnmr_grid)
      if (!(f > 0.0 && f < 1.0)) throw ValidationError("eval.fnmr_grid values must lie in (0,1)");
  }

  // Hash of the experiment-defining content (output location excluded).
  std::string hash() const {
    json j = raw;
    j.erase("output_dir");
    return hex64(Fnv1a().update(j.dump()).digest());
  }

  // Table-row label, e.g. "Quadruplet+Self STG".
  std::string label() const {
    std::string s = train.loss == LossKind::quadruplet ? "Quadruplet" : "Triplet";
    if (train.sampler.include_selfmorphs) s += "+Self";
    return s + " " + (morph.method.kind == MorphMethod::Kind::pixel_blend ? "LDM" : "STG");
  }
};

namespace detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ValidationError("unknown key '" + where + "." + k + "'");
  }
}

inline SyntheticConfig parse_synthetic(const json& j, const std::string& where) {
  check_keys(j,
             {"num_identities", "samples_per_identity_enroll", "samples_per_identity_ref", "image_size", "latent_dim",
              "intra_class_noise", "seed", "renderer_seed", "id_prefix"},
             where);
  SyntheticConfig c;
  read_opt(j, "num_identities", c.num_identities);
  read_opt(j, "samples_per_identity_enroll", c.samples_per_identity_enroll);
  read_opt(j, "samples_per_identity_ref", c.samples_per_identity_ref);
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "latent_dim", c.latent_dim);
  read_opt(j, "intra_class_noise", c.intra_class_noise);
  read_opt(j, "seed", c.seed);
  read_opt(j, "renderer_seed", c.renderer_seed);
  read_opt(j, "id_prefix", c.id_prefix);
  return c;
}

}  // namespace detail

inline RunConfig parse_run_config(const json& doc) {
  using detail::read_opt;
  detail::check_keys(doc, {"name", "output_dir", "dataset", "morph", "train", "eval"}, "config");
  RunConfig c;
  c.raw = doc;
  read_opt(doc, "name", c.name);
  read_opt(doc, "output_dir", c.output_dir);
  try {
    if (doc.contains("dataset")) {
      const auto& d = doc.at("dataset");
      detail::check_keys(d, {"train", "benchmark", "train_dir", "benchmark_dir"}, "dataset");
      if (d.contains("train")) c.dataset.train = detail::parse_synthetic(d.at("train"), "dataset.train");
      if (d.contains("benchmark")) c.dataset.benchmark = detail::parse_synthetic(d.at("benchmark"), "dataset.benchmark");
      read_opt(d, "train_dir", c.dataset.train_dir);
      read_opt(d, "benchmark_dir", c.dataset.benchmark_dir);
    }
    if (doc.contains("morph")) {
      const auto& m = doc.at("morph");
      detail::check_keys(m, {"method", "coeff", "train_count", "benchmark_count", "selfmorphs_per_identity", "seed"},
                         "morph");
      if (m.contains("method")) c.morph.method.kind = parse_morph_kind(m.at("method").get<std::string>());
      read_opt(m, "coeff", c.morph.method.coeff);
      read_opt(m, "train_count", c.morph.train_count);
      read_opt(m, "benchmark_count", c.morph.benchmark_count);
      read_opt(m, "selfmorphs_per_identity", c.morph.selfmorphs_per_identity);
      read_opt(m, "seed", c.morph.seed);
    }
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      detail::check_keys(t,
                         {"backbone", "epochs", "learning_rate", "batch_size", "loss", "margin", "weights",
                          "normalize_embeddings", "sampler", "seed"},
                         "train");
      if (t.contains("backbone")) {
        const auto& b = t.at("backbone");
        detail::check_keys(b, {"architecture", "input_size", "embedding_dim", "in_channels"}, "train.backbone");
        if (b.contains("architecture"))
          c.train.backbone.architecture = parse_architecture(b.at("architecture").get<std::string>());
        read_opt(b, "input_size", c.train.backbone.input_size);
        read_opt(b, "embedding_dim", c.train.backbone.embedding_dim);
        read_opt(b, "in_channels", c.train.backbone.in_channels);
      }
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "learning_rate", c.train.learning_rate);
      read_opt(t, "batch_size", c.train.batch_size);
      if (t.contains("loss")) c.train.loss = parse_loss_kind(t.at("loss").get<std::string>());
      read_opt(t, "margin", c.train.loss_config.margin);
      if (t.contains("weights")) {
        const auto& w = t.at("weights");
        detail::check_keys(w, {"an", "am", "nm", "pm"}, "train.weights");
        read_opt(w, "an", c.train.loss_config.weights.an);
        read_opt(w, "am", c.train.loss_config.weights.am);
        read_opt(w, "nm", c.train.loss_config.weights.nm);
        read_opt(w, "pm", c.train.loss_config.weights.pm);
      }
      read_opt(t, "normalize_embeddings", c.train.loss_config.normalize_embeddings);
      if (t.contains("sampler")) {
        const auto& s = t.at("sampler");
        detail::check_keys(s, {"include_selfmorphs", "selfmorph_as_positive", "seed"}, "train.sampler");
        read_opt(s, "include_selfmorphs", c.train.sampler.include_selfmorphs);
        read_opt(s, "selfmorph_as_positive", c.train.sampler.selfmorph_as_positive);
        read_opt(s, "seed", c.train.sampler.seed);
      }
      read_opt(t, "seed", c.train.seed);
    }
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      detail::check_keys(e, {"fnmr_grid", "target_fnmr", "probe_modality", "max_nonmatch", "max_match", "seed"},
                         "eval");
      read_opt(e, "fnmr_grid", c.eval.fnmr_grid);
      read_opt(e, "target_fnmr", c.eval.target_fnmr);
      if (e.contains("probe_modality")) {
        const auto m = parse_modality(e.at("probe_modality").get<std::string>());
        if (!m) throw ValidationError("eval.probe_modality must be enrollment or reference");
        c.eval.probe_modality = *m;
      }
      read_opt(e, "max_nonmatch", c.eval.verification.max_nonmatch);
      read_opt(e, "max_match", c.eval.verification.max_match);
      read_opt(e, "seed", c.eval.verification.seed);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config type error: ") + e.what());
  }
  c.train.sampler.batch_size = c.train.batch_size;
  c.validate();
  return c;
}

// Applies `key.path=value` overrides; the value is parsed as JSON when
// possible and taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override must look like key.path=value: " + assignment);
  std::string pointer;
  for (const auto& part : split(assignment.substr(0, eq), '.')) pointer += "/" + part;
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  doc[json::json_pointer(pointer)] = value;
}

inline json load_config_document(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json doc = json::parse(read_text_file(path), nullptr, false);
  if (doc.is_discarded()) throw ValidationError("config " + path + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  return doc;
}

// The bundled smoke-test experiment: 20 identities, latent-blend morphs.
inline json demo_config_document() {
  return json::parse(R"({
  "name": "demo",
  "output_dir": "demo",
  "dataset": {
    "train": {"num_identities": 20, "samples_per_identity_enroll": 3, "samples_per_identity_ref": 3,
              "image_size": 32, "latent_dim": 16, "intra_class_noise": 0.35, "seed": 101, "id_prefix": "trn"},
    "benchmark": {"num_identities": 20, "samples_per_identity_enroll": 3, "samples_per_identity_ref": 3,
                  "image_size": 32, "latent_dim": 16, "intra_class_noise": 0.35, "seed": 202, "id_prefix": "bmk"}
  },
  "morph": {"method": "latent_blend", "coeff": 0.5, "train_count": 40, "benchmark_count": 40,
            "selfmorphs_per_identity": 1, "seed": 7},
  "train": {"backbone": {"architecture": "tiny_cnn", "input_size": 32, "embedding_dim": 64},
            "epochs": 3, "learning_rate": 0.001, "batch_size": 8, "loss": "quadruplet", "margin": 0.2,
            "sampler": {"include_selfmorphs": false, "selfmorph_as_positive": true, "seed": 3}, "seed": 5},
  "eval": {"fnmr_grid": [0.01, 0.02, 0.05, 0.1, 0.2], "target_fnmr": 0.01, "probe_modality": "reference",
           "max_nonmatch": 5000, "seed": 9}
})");
}

// ---------------------------------------------------------------------------
// In-memory stages

// A dataset split with its morphs and selfmorphs materialized.
struct PreparedSplit {
  SyntheticDataset data;
  MorphPairProtocol protocol;
};

inline PreparedSplit prepare_split(SyntheticDataset base, const MorphMethod& method, std::size_t morph_count,
                                   int selfmorphs_per_identity, std::uint64_t seed,
                                   const BlobRenderer* renderer) {
  PreparedSplit out;
  const MorphInputs in{base.images, &base.sample_latents, renderer};
  out.protocol = gen_morph_pair_protocol(base.manifest, morph_count, mix_seed(seed, 1));
  auto morphed = materialize_morphs(out.protocol, method, base.manifest, in);
  auto selfed = generate_selfmorphs(morphed.manifest, selfmorphs_per_identity, method, mix_seed(seed, 2), in);
  base.manifest = std::move(selfed.manifest);
  for (auto& [id, img] : morphed.new_images) base.images.emplace(id, std::move(img));
  for (auto& [id, img] : selfed.new_images) base.images.emplace(id, std::move(img));
  out.data = std::move(base);
  return out;
}

inline PreparedSplit prepare_synthetic_split(const SyntheticConfig& cfg, const MorphSection& morph, std::size_t count,
                                             std::uint64_t salt) {
  const BlobRenderer renderer = make_renderer(cfg);
  return prepare_split(synth_generate(cfg), morph.method, count, morph.selfmorphs_per_identity,
                       mix_seed(morph.seed, salt), &renderer);
}

struct EvalReport {
  std::string label;
  ThresholdResult threshold;
  double minmax = 0.0;
  double prodavg = 0.0;
  double fmr_at_threshold = 0.0;
  std::vector<CurveRow> curve;
  MorphScoreSet scores;
  std::size_t num_genuine = 0, num_impostor = 0;
  SeparationStats separation;
};

inline EvalReport evaluate_store(const EmbeddingStore& store, const DatasetManifest& manifest, const EvalSection& cfg) {
  const auto protocol = gen_verification_protocol(manifest, cfg.verification);
  const auto genuine = pair_scores(store, protocol.match_pairs);
  const auto impostor = pair_scores(store, protocol.nonmatch_pairs);
  EvalReport r;
  r.scores = collect_morph_scores(store, manifest, cfg.probe_modality);
  r.threshold = solve_threshold(genuine, cfg.target_fnmr);
  const MmpmrEvaluator eval(r.scores);
  r.minmax = eval.minmax(r.threshold.tau);
  r.prodavg = eval.prodavg(r.threshold.tau);
  r.fmr_at_threshold = impostor.empty() ? 0.0 : fmr(impostor, r.threshold.tau);
  r.curve = mmpmr_curve(r.scores, genuine, cfg.fnmr_grid);
  r.num_genuine = genuine.size();
  r.num_impostor = impostor.size();
  r.separation = separation_stats(genuine, impostor, r.scores);
  return r;
}

struct ExperimentResult {
  TrainResult training;
  EvalReport report;
};

// Whole experiment without touching the filesystem.
inline ExperimentResult run_experiment(const RunConfig& cfg) {
  cfg.validate();
  if (!cfg.dataset.train || !cfg.dataset.benchmark) throw ValidationError("in-memory runs need synthetic datasets");
  const auto train_split = prepare_synthetic_split(*cfg.dataset.train, cfg.morph, cfg.morph.train_count, 1);
  const auto bench_split = prepare_synthetic_split(*cfg.dataset.benchmark, cfg.morph, cfg.morph.benchmark_count, 2);
  auto model = build_model(cfg.train.backbone, cfg.train.seed, cfg.train.loss_config.normalize_embeddings);
  ExperimentResult out;
  out.training = train(model, train_split.data.manifest, train_split.data.images, cfg.train);
  const auto store = embed_all(model, bench_split.data.manifest, bench_split.data.images);
  out.report = evaluate_store(store, bench_split.data.manifest, cfg.eval);
  out.report.label = cfg.label();
  return out;
}

// ---------------------------------------------------------------------------
// On-disk stages

struct RunPaths {
  fs::path root;

  fs::path split_dir(const std::string& split) const { return root / "data" / split; }
  fs::path morph_manifest(const std::string& split) const { return split_dir(split) / "morph_manifest.csv"; }
  fs::path morph_protocol(const std::string& split) const { return split_dir(split) / "morph_protocol.csv"; }
  fs::path checkpoint() const { return root / "model" / "checkpoint.mqc"; }
  fs::path history() const { return root / "model" / "history.csv"; }
  fs::path embeddings() const { return root / "embed" / "embeddings.csv"; }
  fs::path curve() const { return root / "eval" / "curve.csv"; }
  fs::path scores() const { return root / "eval" / "scores.csv"; }
  fs::path summary() const { return root / "eval" / "summary.json"; }
  fs::path plot() const { return root / "eval" / "curve.svg"; }
};

inline RunPaths resolve_paths(const RunConfig& cfg) {
  fs::path out(cfg.output_dir);
  if (out.is_relative())
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) out = fs::path(root) / out;
  return {out};
}

inline const SyntheticConfig* synthetic_for(const RunConfig& cfg, const std::string& split) {
  const auto& s = split == "train" ? cfg.dataset.train : cfg.dataset.benchmark;
  return s ? &*s : nullptr;
}

inline void cmd_synth(const RunConfig& cfg) {
  const auto paths = resolve_paths(cfg);
  for (const std::string split : {"train", "benchmark"}) {
    if (const auto* sc = synthetic_for(cfg, split)) {
      save_dataset(paths.split_dir(split), synth_generate(*sc), cfg.hash());
    } else {
      const fs::path src = split == "train" ? cfg.dataset.train_dir : cfg.dataset.benchmark_dir;
      auto ds = load_dataset(src);
      save_dataset(paths.split_dir(split), ds, cfg.hash());
    }
  }
}

inline void cmd_morph(const RunConfig& cfg) {
  const auto paths = resolve_paths(cfg);
  std::uint64_t salt = 1;
  for (const std::string split : {"train", "benchmark"}) {
    const fs::path dir = paths.split_dir(split);
    if (!fs::exists(dir / "manifest.csv")) throw Error("missing " + (dir / "manifest.csv").string() + "; run synth first");
    auto ds = load_dataset(dir);
    std::optional<BlobRenderer> renderer;
    if (const auto* sc = synthetic_for(cfg, split)) renderer.emplace(make_renderer(*sc));
    const std::size_t count = split == "train" ? cfg.morph.train_count : cfg.morph.benchmark_count;
    const auto prepared = prepare_split(std::move(ds), cfg.morph.method, count, cfg.morph.selfmorphs_per_identity,
                                        mix_seed(cfg.morph.seed, salt++), renderer ? &*renderer : nullptr);
    for (const auto& r : prepared.data.manifest.records)
      if (r.kind != SampleKind::bona_fide) save_image((dir / r.image_ref).string(), prepared.data.images.at(r.sample_id));
    save_manifest(paths.morph_manifest(split).string(), prepared.data.manifest, cfg.hash());
    write_text_file(paths.morph_protocol(split).string(), protocol_to_csv(prepared.protocol, cfg.hash()));
  }
}

inline SyntheticDataset load_morphed_split(const RunPaths& paths, const std::string& split) {
  const fs::path dir = paths.split_dir(split);
  if (!fs::exists(paths.morph_manifest(split))) throw Error("missing " + paths.morph_manifest(split).string() + "; run morph first");
  SyntheticDataset ds;
  ds.manifest = load_manifest(paths.morph_manifest(split).string());
  ds.images = load_images(dir, ds.manifest);
  return ds;
}

inline void cmd_train(const RunConfig& cfg) {
  const auto paths = resolve_paths(cfg);
  const auto ds = load_morphed_split(paths, "train");
  auto model = build_model(cfg.train.backbone, cfg.train.seed, cfg.train.loss_config.normalize_embeddings);
  const auto result = train(model, ds.manifest, ds.images, cfg.train);
  fs::create_directories(paths.checkpoint().parent_path());
  save_checkpoint(paths.checkpoint().string(), result.checkpoint, cfg.hash());
  write_text_file(paths.history().string(), history_to_csv(result.history, cfg.hash()));
}

inline void cmd_embed(const RunConfig& cfg) {
  const auto paths = resolve_paths(cfg);
  if (!fs::exists(paths.checkpoint())) throw Error("missing " + paths.checkpoint().string() + "; run train first");
  auto model = restore_model(load_checkpoint(paths.checkpoint().string()));
  const auto ds = load_morphed_split(paths, "benchmark");
  const auto store = embed_all(model, ds.manifest, ds.images);
  fs::create_directories(paths.embeddings().parent_path());
  write_text_file(paths.embeddings().string(), store_to_csv(store, cfg.hash()));
}

inline std::string render_curve_svg(const std::vector<CurveRow>& rows, const std::string& title) {
  const double W = 480, H = 320, L = 60, R = 20, T = 30, B = 50;
  double fmin = rows.front().fnmr, fmax = rows.back().fnmr;
  const bool logx = fmin > 0 && fmax / fmin > 20;
  const auto fx = [&](double f) {
    const double a = logx ? std::log10(f) : f, lo = logx ? std::log10(fmin) : fmin, hi = logx ? std::log10(fmax) : fmax;
    return L + (hi > lo ? (a - lo) / (hi - lo) : 0.5) * (W - L - R);
  };
  const auto fy = [&](double v) { return T + (1.0 - v) * (H - T - B); };
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << fy(0) << "\" x2=\"" << W - R << "\" y2=\"" << fy(0) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << fy(0) << "\" x2=\"" << L << "\" y2=\"" << fy(1) << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (W / 2) << "\" y=\"" << H - 12 << "\" font-size=\"12\">FNMR" << (logx ? " (log)" : "") << "</text>\n";
  s << "<text x=\"8\" y=\"" << fy(1) << "\" font-size=\"11\">1.0</text><text x=\"8\" y=\"" << fy(0) << "\" font-size=\"11\">0.0</text>\n";
  const auto line = [&](auto get, const char* color, const char* name, double ly) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : rows) s << fx(r.fnmr) << ',' << fy(get(r)) << ' ';
    s << "\"/>\n<text x=\"" << W - R - 130 << "\" y=\"" << ly << "\" font-size=\"11\" fill=\"" << color << "\">" << name
      << "</text>\n";
  };
  line([](const CurveRow& r) { return r.minmax; }, "#1f77b4", "MinMax-MMPMR", T + 12);
  line([](const CurveRow& r) { return r.prodavg; }, "#d62728", "ProdAvg-MMPMR", T + 26);
  s << "</svg>\n";
  return s.str();
}

inline json summary_json(const RunConfig& cfg, const EvalReport& r) {
  return {{"label", r.label},
          {"config_hash", cfg.hash()},
          {"tool_version", kToolVersion},
          {"target_fnmr", r.threshold.target_fnmr},
          {"tau", r.threshold.tau},
          {"achieved_fnmr", r.threshold.achieved_fnmr},
          {"threshold_undersampled", r.threshold.undersampled},
          {"fmr", r.fmr_at_threshold},
          {"minmax_mmpmr", r.minmax},
          {"prodavg_mmpmr", r.prodavg},
          {"num_morphs", r.scores.morphs.size()},
          {"excluded_morphs", r.scores.excluded.size()},
          {"num_genuine", r.num_genuine},
          {"num_impostor", r.num_impostor},
          {"separation",
           {{"mean_genuine", r.separation.mean_genuine},
            {"mean_impostor", r.separation.mean_impostor},
            {"mean_morph_to_source", r.separation.mean_morph_to_source}}}};
}

inline EvalReport cmd_eval(const RunConfig& cfg, bool plot = false) {
  const auto paths = resolve_paths(cfg);
  if (!fs::exists(paths.embeddings())) throw Error("missing " + paths.embeddings().string() + "; run embed first");
  const auto store = parse_store(read_text_file(paths.embeddings().string()), paths.embeddings().string());
  const auto ds = load_manifest(paths.morph_manifest("benchmark").string());
  auto report = evaluate_store(store, ds, cfg.eval);
  report.label = cfg.label();
  fs::create_directories(paths.curve().parent_path());
  write_text_file(paths.curve().string(), curve_to_csv(report.curve, cfg.hash()));
  write_text_file(paths.scores().string(), scores_to_csv(report.scores, cfg.hash()));
  write_text_file(paths.summary().string(), summary_json(cfg, report).dump(2) + "\n");
  if (plot) write_text_file(paths.plot().string(), render_curve_svg(report.curve, report.label));
  return report;
}

struct CompareRow {
  std::string label;
  double minmax = 0.0, prodavg = 0.0;
  double target_fnmr = 0.0;
};

inline std::vector<CompareRow> cmd_compare(const std::vector<RunConfig>& configs) {
  std::vector<CompareRow> rows;
  for (const auto& cfg : configs) {
    const auto path = resolve_paths(cfg).summary();
    if (!fs::exists(path)) throw Error("missing " + path.string() + "; run eval first");
    const auto j = json::parse(read_text_file(path.string()));
    rows.push_back({j.at("label").get<std::string>(), j.at("minmax_mmpmr").get<double>(),
                    j.at("prodavg_mmpmr").get<double>(), j.at("target_fnmr").get<double>()});
  }
  return rows;
}

inline std::string compare_table(const std::vector<CompareRow>& rows) {
  std::ostringstream s;
  const double f = rows.empty() ? 0.01 : rows.front().target_fnmr;
  s << std::left << std::setw(26) << "Model & Protocol" << std::setw(16) << "MinMax-MMPMR" << "ProdAvg-MMPMR"
    << "   (rate @ FNMR=" << fmt9(f) << ")\n";
  for (const auto& r : rows) s << std::setw(26) << r.label << std::setw(16) << fmt9(r.minmax) << fmt9(r.prodavg) << "\n";
  return s.str();
}

inline std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::ostringstream s;
  s << "model_protocol,target_fnmr,minmax_mmpmr,prodavg_mmpmr\n";
  for (const auto& r : rows) s << r.label << ',' << fmt9(r.target_fnmr) << ',' << fmt9(r.minmax) << ',' << fmt9(r.prodavg) << "\n";
  return s.str();
}

inline void write_resolved_config(const RunConfig& cfg) {
  const auto paths = resolve_paths(cfg);
  fs::create_directories(paths.root);
  write_text_file((paths.root / "config.json").string(), cfg.raw.dump(2) + "\n");
}

inline EvalReport run_all_stages(const RunConfig& cfg, bool plot = false) {
  write_resolved_config(cfg);
  cmd_synth(cfg);
  cmd_morph(cfg);
  cmd_train(cfg);
  cmd_embed(cfg);
  return cmd_eval(cfg, plot);
}

}  // namespace morphquad
