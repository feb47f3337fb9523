// morphquad command line: synthetic data, morph generation, training, embedding, MMPMR evaluation.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "morphquad/pipeline.hpp"

using namespace morphquad;

namespace {

// Exit codes: 1 runtime failure, 2 usage, 3 invalid config or input, 4 unparseable file.
int report(const char* kind, const std::string& msg, int code) {
  std::cerr << "error: " << kind << ": " << msg << "\n";
  return code;
}

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, CommonOpts& o, bool config_required) {
  auto* c = app->add_option("-c,--config", o.config, "experiment config (JSON)");
  if (config_required) c->required()->check(CLI::ExistingFile);
  else c->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "override a config value, e.g. --set train.epochs=3")->take_all();
}

RunConfig resolve(const CommonOpts& o) {
  json doc = o.config.empty() ? demo_config_document() : load_config_document(o.config);
  for (const auto& s : o.sets) apply_override(doc, s);
  return parse_run_config(doc);
}

void print_summary(const RunConfig& cfg, const EvalReport& r) {
  std::cout << r.label << ": MinMax-MMPMR=" << fmt9(r.minmax) << " ProdAvg-MMPMR=" << fmt9(r.prodavg)
            << " at FNMR=" << fmt9(cfg.eval.target_fnmr) << " (tau=" << fmt9(r.threshold.tau)
            << ", achieved FNMR=" << fmt9(r.threshold.achieved_fnmr) << ")\n";
  if (r.threshold.undersampled)
    std::cout << "warning: " << r.num_genuine << " genuine pairs cannot resolve FNMR=" << fmt9(cfg.eval.target_fnmr)
              << "\n";
  if (!r.scores.excluded.empty()) std::cout << "note: " << r.scores.excluded.size() << " morphs excluded (no probes for a subject)\n";
  std::cout << "outputs in " << resolve_paths(cfg).root.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Morph-aware metric learning toolkit with MMPMR evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  CommonOpts synth_o, morph_o, train_o, embed_o, eval_o, demo_o;
  bool eval_plot = false, demo_plot = false;

  auto* synth = app.add_subcommand("synth", "generate the synthetic train and benchmark datasets");
  add_common(synth, synth_o, true);
  auto* morph = app.add_subcommand("morph", "build morph protocols and materialize morphs and selfmorphs");
  add_common(morph, morph_o, true);
  auto* train = app.add_subcommand("train", "train the embedding model");
  add_common(train, train_o, true);
  auto* embed = app.add_subcommand("embed", "embed every benchmark image with the trained model");
  add_common(embed, embed_o, true);
  auto* eval = app.add_subcommand("eval", "solve the FNMR threshold and compute MinMax/ProdAvg MMPMR");
  add_common(eval, eval_o, true);
  eval->add_flag("--plot", eval_plot, "also write eval/curve.svg");

  std::vector<std::string> compare_configs, compare_sets;
  std::string compare_csv_path;
  auto* compare = app.add_subcommand("compare", "tabulate evaluated runs side by side");
  compare->add_option("configs", compare_configs, "configs of evaluated runs")->required()->check(CLI::ExistingFile);
  compare->add_option("--set", compare_sets, "override applied to every config")->take_all();
  compare->add_option("--csv", compare_csv_path, "also write the table as CSV");

  auto* demo = app.add_subcommand("demo", "run every stage on the bundled small experiment");
  add_common(demo, demo_o, false);
  demo->add_flag("--plot", demo_plot, "also write eval/curve.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 2);
  }

  try {
    if (*synth) {
      const auto cfg = resolve(synth_o);
      write_resolved_config(cfg);
      cmd_synth(cfg);
      std::cout << "wrote datasets to " << (resolve_paths(cfg).root / "data").string() << "\n";
    } else if (*morph) {
      const auto cfg = resolve(morph_o);
      cmd_morph(cfg);
      std::cout << "wrote morph manifests to " << (resolve_paths(cfg).root / "data").string() << "\n";
    } else if (*train) {
      const auto cfg = resolve(train_o);
      cmd_train(cfg);
      std::cout << "wrote " << resolve_paths(cfg).checkpoint().string() << "\n";
    } else if (*embed) {
      const auto cfg = resolve(embed_o);
      cmd_embed(cfg);
      std::cout << "wrote " << resolve_paths(cfg).embeddings().string() << "\n";
    } else if (*eval) {
      const auto cfg = resolve(eval_o);
      print_summary(cfg, cmd_eval(cfg, eval_plot));
    } else if (*compare) {
      std::vector<RunConfig> cfgs;
      for (const auto& path : compare_configs) cfgs.push_back(resolve({path, compare_sets}));
      const auto rows = cmd_compare(cfgs);
      std::cout << compare_table(rows);
      if (!compare_csv_path.empty()) write_text_file(compare_csv_path, morphquad::compare_csv(rows));
    } else if (*demo) {
      const auto cfg = resolve(demo_o);
      print_summary(cfg, run_all_stages(cfg, demo_plot));
    }
  } catch (const ParseError& e) {
    return report("parse", e.what(), 4);
  } catch (const ValidationError& e) {
    return report("validation", e.what(), 3);
  } catch (const DimensionError& e) {
    return report("dimension", e.what(), 3);
  } catch (const json::exception& e) {
    return report("config", e.what(), 3);
  } catch (const std::exception& e) {
    return report("runtime", e.what(), 1);
  }
  return 0;
}
