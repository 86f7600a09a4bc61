// dalab: command-line front end for the synthetic domain-adaptation benchmark.

#include <malloc.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dalab/experiment.hpp"

namespace fs = std::filesystem;
using namespace dalab;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> variants;
  std::string setting;
  std::optional<std::size_t> shots;
  bool force = false;
  std::string checkpoint;
  std::vector<std::string> splits;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.master_seed = *o.seed;
  if (!o.variants.empty()) cfg.variants = o.variants;
  if (!o.setting.empty()) cfg.setting = parse_setting(o.setting);
  if (o.shots) cfg.shots = *o.shots;
  const auto errors = validation_errors(cfg);
  if (!errors.empty()) {
    std::string msg = "invalid config: ";
    for (std::size_t i = 0; i < errors.size(); ++i) msg += (i ? "; " : "") + errors[i];
    throw Error(msg);
  }
  return cfg;
}

fs::path checkpoint_path(const Options& o, const OutputDir& out) {
  return o.checkpoint.empty() ? out.path(kPretrainedCheckpoint) : fs::path(o.checkpoint);
}

std::string checkpoint_tag(const fs::path& p) {
  std::string tag;
  for (const auto& part : p.lexically_normal().parent_path()) {
    const std::string s = part.string();
    if (s == "/" || s == "." || s.empty()) continue;
    tag += s + "_";
  }
  return tag + p.stem().string();
}

const Dataset& split_named(const ExperimentData& d, const std::string& name) {
  if (name == "source_train") return d.source_train;
  if (name == "target_train") return d.target_train;
  if (name == "source_test") return d.source_test;
  if (name == "target_test") return d.target_test;
  throw Error("unknown split '" + name +
              "' (expected source_train, target_train, source_test or target_test)");
}

void write_eval(const ExperimentConfig& cfg, const OutputDir& out, const Checkpoint& ck,
                const ExperimentData& data, const std::string& tag) {
  for (const auto& [name, ds] : {std::pair<const char*, const Dataset*>{"source_test", &data.source_test},
                                 {"target_test", &data.target_test}}) {
    const DetectionEval e = evaluate_detector(ck.params, *ds, cfg.eval);
    json report = eval_report_json(e.report, cfg.eval);
    report["checkpoint_digest"] = ck.digest();
    report["config_digest"] = config_digest(cfg);
    report["split"] = name;
    const fs::path dir = fs::path("eval") / tag;
    out.write(dir / (std::string(name) + ".json"), report.dump(2) + "\n");
    out.write(dir / (std::string(name) + "_detections.csv"), detections_csv(e.detections));
    std::cout << tag << ' ' << name << " mAP " << e.report.map << '\n';
  }
}

void write_hdist(const ExperimentConfig& cfg, const OutputDir& out, const Checkpoint& ck,
                 const ExperimentData& data, const std::string& tag) {
  const HdistReport r = measure_hdist(ck.params, data.source_test, data.target_test, cfg.hdist,
                                      fan_out(cfg.master_seed, "hdist", 0));
  json j = to_json(r);
  j["checkpoint_digest"] = ck.digest();
  j["config_digest"] = config_digest(cfg);
  out.write(fs::path("hdist") / (tag + ".json"), j.dump(2) + "\n");
  std::cout << tag << " marginal d ";
  if (r.marginal.estimate) {
    std::cout << r.marginal.estimate->d << '\n';
  } else {
    std::cout << "null (" << r.marginal.reason << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Marginal and conditional domain adaptation on a synthetic detection benchmark"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", o.seed, "Master seed (overrides master_seed)");
    sub->add_option("--variant", o.variants, "Variant name, repeatable (baseline, M, C, WC, M+C, M+WC)")
        ->take_all();
    sub->add_option("--setting", o.setting, "uda or ufda")->check(CLI::IsMember({"uda", "ufda"}));
    sub->add_option("--shots", o.shots, "Target images per class for ufda")
        ->check(CLI::IsMember({1, 2, 3}));
    sub->add_flag("--force", o.force, "Overwrite existing outputs");
  };
  auto with_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint,
                    "Checkpoint file (default: the pretrained checkpoint)");
  };

  CLI::App* generate = app.add_subcommand("generate", "Generate and cache the four dataset splits");
  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "Train the detector on the source split");
  CLI::App* adapt = app.add_subcommand("adapt", "Adapt every variant and repeat from the pretrained checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on both test splits");
  CLI::App* ablate = app.add_subcommand("ablate", "Six-variant ablation table from one pretrained checkpoint");
  CLI::App* hdist = app.add_subcommand("hdist", "Marginal and per-class H-divergence of a checkpoint");
  CLI::App* features = app.add_subcommand("export-features", "Dump alignment-layer features as CSV");
  CLI::App* run = app.add_subcommand("run", "Generate, pretrain, adapt, evaluate, measure and ablate");
  for (CLI::App* s : {generate, pretrain_cmd, adapt, eval, ablate, hdist, features, run}) common(s);
  for (CLI::App* s : {eval, hdist, features}) with_checkpoint(s);
  features->add_option("--split", o.splits, "Splits to export (default: source_test target_test)")
      ->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const ExperimentConfig cfg = resolve(o);
    const OutputDir out(cfg.output_dir, o.force);
    write_config_snapshot(cfg, out);

    if (generate->parsed()) {
      const ExperimentData d = prepare_data(cfg, out);
      std::cout << "datasets in " << out.path("data") << ": " << d.source_train.size() << '/'
                << d.target_train.size() << '/' << d.source_test.size() << '/'
                << d.target_test.size() << " images\n";
    } else if (pretrain_cmd->parsed()) {
      const ExperimentData d = prepare_data(cfg, out);
      const Checkpoint ck = prepare_pretrained(cfg, out, d);
      std::cout << "pretrained checkpoint " << ck.digest() << '\n';
    } else if (adapt->parsed()) {
      const ExperimentData d = prepare_data(cfg, out);
      const ExperimentOutput r = run_variants(cfg, out, d, load_pretrained(cfg, out), &std::cout);
      std::cout << "aggregate written to " << r.aggregate_file.string() << '\n';
    } else if (eval->parsed() || hdist->parsed() || features->parsed()) {
      const ExperimentData d = prepare_data(cfg, out);
      const fs::path path = checkpoint_path(o, out);
      const Checkpoint ck = Checkpoint::load(path);
      const std::string tag =
          o.checkpoint.empty() ? std::string("pretrained") : checkpoint_tag(o.checkpoint);
      if (eval->parsed()) write_eval(cfg, out, ck, d, tag);
      if (hdist->parsed()) write_hdist(cfg, out, ck, d, tag);
      if (features->parsed()) {
        const std::vector<std::string> splits =
            o.splits.empty() ? std::vector<std::string>{"source_test", "target_test"} : o.splits;
        for (const std::string& s : splits) {
          const fs::path p = out.write(fs::path("features") / (tag + "_" + s + ".csv"),
                                       feature_csv(ck.params, split_named(d, s)));
          std::cout << "wrote " << p.string() << '\n';
        }
      }
    } else if (ablate->parsed()) {
      std::cout << ablation_text(run_ablation(cfg, out, &std::cout));
    } else if (run->parsed()) {
      const ExperimentData d = prepare_data(cfg, out);
      const Checkpoint ck = prepare_pretrained(cfg, out, d);
      write_eval(cfg, out, ck, d, "pretrained");
      if (cfg.hdist.enabled) write_hdist(cfg, out, ck, d, "pretrained");
      const ExperimentOutput r = run_variants(cfg, out, d, ck, &std::cout);
      std::cout << "aggregate written to " << r.aggregate_file.string() << '\n';
      std::cout << ablation_text(run_ablation(cfg, out, d, ck, &std::cout));
    }
  } catch (const std::exception& e) {
    std::cerr << "dalab: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
