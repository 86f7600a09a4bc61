// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exits nonzero when any criterion fails.
//
//   acceptance [path/to/dalab] [--only N,N,...]

#include <malloc.h>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "dalab/experiment.hpp"
#include "gradcheck_suite.hpp"
#include "map_oracle.hpp"

using namespace dalab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string num(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

std::string list(const std::vector<double>& xs, int digits = 3) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? " " : "") + num(xs[i], digits);
  return s + "]";
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

fs::path work_root() { return fs::temp_directory_path() / "dalab_acceptance"; }

// 1 ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  Stopwatch sw;
  std::size_t checks = 0;
  std::vector<std::string> failures;
  auto record = [&](const std::string& what, std::uint64_t seed, const GradCheckReport& r) {
    ++checks;
    if (!r.passed) failures.push_back(what + "@" + std::to_string(seed));
  };
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& c : checks::primitive_cases()) record(c.name, seed, checks::check_primitive(c, seed));
    record("detection_loss", seed, checks::check_detection_loss(seed));
    record("marginal_loss", seed, checks::check_marginal_loss(seed));
    const auto cond = checks::check_conditional_losses(seed);
    for (std::size_t k = 0; k < cond.size(); ++k) {
      record("conditional_loss_" + std::to_string(k + 1), seed, cond[k]);
    }
  }
  const double secs = sw.seconds();
  Outcome o;
  o.passed = failures.empty() && secs < 60.0;
  o.detail = std::to_string(checks - failures.size()) + "/" + std::to_string(checks) +
             " gradchecks pass over 20 seeds in " + num(secs, 1) + " s";
  for (std::size_t i = 0; i < failures.size() && i < 5; ++i) o.detail += "; failed " + failures[i];
  return o;
}

// 2 ---------------------------------------------------------------------------

Outcome grl_contract() {
  const std::size_t K = 3;
  const ParamSet params = init_adaptation_params(K, 7);
  Rng rng(7);
  Tensor fs_ = Tensor::matrix(16, kFeatureWidth), ft = Tensor::matrix(16, kFeatureWidth);
  for (double& v : fs_.values()) v = rng.normal();
  for (double& v : ft.values()) v = rng.normal() + 0.5;
  fs_.set_requires_grad(true);
  ft.set_requires_grad(true);

  auto grads = [&](std::optional<double> lambda) {
    Graph g;
    NodeId s = g.input("fs"), t = g.input("ft");
    if (lambda) {
      s = g.grl(s, *lambda);
      t = g.grl(t, *lambda);
    }
    const NodeId loss = marginal_domain_loss(g, s, t);
    Feeds f;
    params.bind(f);
    f.bind("fs", fs_).bind("ft", ft);
    g.evaluate(f, loss);
    const auto all = g.backward(Tensor::scalar(1.0));
    return std::make_pair(all.at("fs"), all.at("ft"));
  };
  const auto plain = grads(std::nullopt);
  std::size_t mismatches = 0, compared = 0;
  for (double lambda : {0.5, 1.0, 2.0}) {
    const auto rev = grads(lambda);
    for (const auto& [a, b] : {std::pair{&plain.first, &rev.first}, {&plain.second, &rev.second}}) {
      for (std::size_t i = 0; i < a->size(); ++i) {
        ++compared;
        if ((*b)[i] != -lambda * (*a)[i]) ++mismatches;
      }
    }
  }
  return {mismatches == 0, std::to_string(compared - mismatches) + "/" + std::to_string(compared) +
                               " gradient entries equal -lambda x plain for lambda in {0.5, 1, 2}"};
}

// 3 ---------------------------------------------------------------------------

Tensor gaussian(std::size_t n, std::size_t d, double shift, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(n, d);
  for (double& v : t.values()) v = rng.normal() + shift;
  return t;
}

Outcome h_divergence_endpoints() {
  Tensor a = Tensor::matrix(100, 4), b = Tensor::matrix(100, 4);
  for (std::size_t i = 0; i < 100; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      a.at(i, j) = -1.0 - 0.01 * static_cast<double>((i * 7 + j) % 13);
      b.at(i, j) = 1.0 + 0.01 * static_cast<double>((i * 5 + j) % 11);
    }
  }
  const HDivergenceEstimate sep = estimate_h_divergence(a, b, ProbeConfig{}, 0);
  std::vector<double> same;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    same.push_back(estimate_h_divergence(gaussian(1000, kFeatureWidth, 0.0, 2 * seed),
                                         gaussian(1000, kFeatureWidth, 0.0, 2 * seed + 1),
                                         ProbeConfig{}, seed)
                       .d);
  }
  const double same_mean = mean(same);
  const double mid = h_divergence_from_errors(0.3, 0.2);
  const bool ok = sep.eps_source == 0.0 && sep.eps_target == 0.0 && sep.d == 2.0 &&
                  std::abs(same_mean) < 0.3 && mid == 1.0;
  return {ok, "separable d=" + num(sep.d, 6) + " from (" + num(sep.eps_source, 3) + ", " +
                  num(sep.eps_target, 3) + "); same-distribution mean d=" + num(same_mean) +
                  " over 10 seeds " + list(same) + "; (0.3, 0.2) gives d=" + num(mid, 6)};
}

// 4, 5, 6, 7, 8, 9 share the default benchmark -----------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  double base_target = 0.0, base_source = 0.0;
  double m_target = 0.0;
  double wc_target = 0.0, wc_source = 0.0;
  std::optional<double> d_before, d_after;
  std::vector<double> s_final;
  std::uint64_t label_reads = 0;
};

struct Benchmark {
  ExperimentConfig cfg;
  ExperimentData data;
  PretrainedSummary pre;
};

Benchmark load_benchmark(std::uint64_t seed, bool hdist) {
  Benchmark b;
  b.cfg.master_seed = seed;
  b.cfg.hdist.enabled = hdist;
  const OutputDir out(work_root() / ("seed" + std::to_string(seed)), true);
  b.data = prepare_data(b.cfg, out);
  const Checkpoint ck = prepare_pretrained(b.cfg, out, b.data);
  b.pre = summarize_pretrained(b.cfg, ck, b.data);
  return b;
}

/// Seeds 0..4 run baseline, M and M+WC with H-divergence; seeds 5..9 run
/// M+WC only.
std::vector<SeedResult> run_seeds(std::size_t full, std::size_t total,
                                  std::optional<Checkpoint>* adapted_seed0) {
  std::vector<SeedResult> out;
  for (std::uint64_t seed = 0; seed < total; ++seed) {
    Stopwatch sw;
    const bool with_all = seed < full;
    const Benchmark b = load_benchmark(seed, with_all);
    SeedResult r;
    r.seed = seed;
    r.base_target = b.pre.target.report.map;
    r.base_source = b.pre.source.report.map;
    if (with_all) {
      ExperimentConfig no_h = b.cfg;
      no_h.hdist.enabled = false;
      r.m_target = run_one(no_h, b.pre, b.data, "M", Setting::kUda, 0, 0).record.map_target;
    }
    RunOutcome wc = run_one(b.cfg, b.pre, b.data, "M+WC", Setting::kUda, 0, 0);
    r.wc_target = wc.record.map_target;
    r.wc_source = wc.record.map_source;
    r.d_before = wc.record.d_marginal_before;
    r.d_after = wc.record.d_marginal_after;
    r.s_final = wc.record.s_final;
    r.label_reads = wc.record.target_label_reads;
    if (seed == 0 && adapted_seed0) *adapted_seed0 = wc.adapted;
    std::cerr << "seed " << seed << ": baseline " << num(r.base_target) << " M "
              << num(r.m_target) << " M+WC " << num(r.wc_target) << " source "
              << num(r.base_source) << " -> " << num(r.wc_source) << " s " << list(r.s_final)
              << " d " << (r.d_before ? num(*r.d_before) : "-") << " -> "
              << (r.d_after ? num(*r.d_after) : "-") << " (" << num(sw.seconds(), 0) << " s)\n";
    out.push_back(std::move(r));
  }
  return out;
}

Outcome ablation_ordering(const std::vector<SeedResult>& rs) {
  std::vector<double> base, m, wc;
  for (std::size_t i = 0; i < 5; ++i) {
    base.push_back(rs[i].base_target);
    m.push_back(rs[i].m_target);
    wc.push_back(rs[i].wc_target);
  }
  const double gap1 = 100.0 * (mean(m) - mean(base));
  const double gap2 = 100.0 * (mean(wc) - mean(m));
  return {gap1 >= 2.0 && gap2 >= 2.0,
          "mean target mAP baseline " + num(mean(base)) + ", M " + num(mean(m)) + ", M+WC " +
              num(mean(wc)) + " over 5 seeds; gaps " + num(gap1, 2) + " and " + num(gap2, 2) +
              " points (need >= 2)"};
}

Outcome transferability_tracks_gap(const std::vector<SeedResult>& rs) {
  std::size_t hits = 0;
  std::string pairs;
  for (const SeedResult& r : rs) {
    const bool hit = r.s_final.size() >= 3 && r.s_final[0] > r.s_final[2];
    hits += hit;
    pairs += (pairs.empty() ? "" : " ") + num(r.s_final.at(0), 3) + "/" + num(r.s_final.at(2), 3);
  }
  return {hits >= 8, "final s_1 > s_3 in " + std::to_string(hits) + " of " +
                         std::to_string(rs.size()) + " seeds (need >= 8); s_1/s_3 " + pairs};
}

Outcome h_distance_reduction(const std::vector<SeedResult>& rs) {
  std::size_t decreased = 0, measured = 0;
  std::vector<double> rel;
  for (std::size_t i = 0; i < 5; ++i) {
    if (!rs[i].d_before || !rs[i].d_after) continue;
    ++measured;
    decreased += *rs[i].d_after < *rs[i].d_before;
    rel.push_back(*rs[i].d_before > 0.0 ? (*rs[i].d_before - *rs[i].d_after) / *rs[i].d_before
                                        : 0.0);
  }
  const double mean_rel = mean(rel);
  return {measured == 5 && decreased >= 4 && mean_rel >= 0.2,
          "marginal d decreased in " + std::to_string(decreased) + " of " +
              std::to_string(measured) + " seeds (need >= 4); mean relative decrease " +
              num(100.0 * mean_rel, 1) + "% (need >= 20%) " + list(rel)};
}

Outcome source_retention(const std::vector<SeedResult>& rs) {
  std::vector<double> drops;
  for (std::size_t i = 0; i < 5; ++i) drops.push_back(100.0 * (rs[i].base_source - rs[i].wc_source));
  const double d = mean(drops);
  return {d <= 3.0, "mean source mAP drop after M+WC " + num(d, 2) +
                        " points over 5 seeds (need <= 3); per seed " + list(drops, 2)};
}

bool same_detections(const DetectionEval& a, const DetectionEval& b) {
  if (a.detections.size() != b.detections.size()) return false;
  for (std::size_t i = 0; i < a.detections.size(); ++i) {
    const auto& x = a.detections[i];
    const auto& y = b.detections[i];
    if (x.size() != y.size()) return false;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double xv[] = {x[j].score, x[j].box.cx, x[j].box.cy, x[j].box.w, x[j].box.h};
      const double yv[] = {y[j].score, y[j].box.cx, y[j].box.cy, y[j].box.w, y[j].box.h};
      if (x[j].label != y[j].label || std::memcmp(xv, yv, sizeof xv) != 0) return false;
    }
  }
  return std::memcmp(&a.report.map, &b.report.map, sizeof(double)) == 0;
}

Outcome inference_purity(const std::optional<Checkpoint>& adapted) {
  if (!adapted) return {false, "no adapted checkpoint was produced"};
  const Benchmark b = load_benchmark(0, false);
  const Checkpoint stripped = adapted->stripped();
  std::size_t adaptation_params = 0;
  for (const auto& [name, t] : adapted->params) adaptation_params += is_adaptation_param(name);
  bool ok = adaptation_params > 0;
  for (const Dataset* ds : {&b.data.target_test, &b.data.source_test}) {
    ok = ok && same_detections(evaluate_detector(adapted->params, *ds, b.cfg.eval),
                               evaluate_detector(stripped.params, *ds, b.cfg.eval));
  }
  return {ok, "adapted M+WC checkpoint with " + std::to_string(adaptation_params) +
                  " adaptation tensors vs stripped: detections and mAP " +
                  (ok ? "bit-identical" : "differ") + " on both test splits"};
}

Outcome ufda_monotonicity() {
  const Benchmark b = load_benchmark(0, false);
  std::vector<double> means;
  std::uint64_t reads = 0;
  std::vector<std::string> labels = {"1-shot", "2-shot", "3-shot", "UDA"};
  for (std::size_t shots = 1; shots <= 4; ++shots) {
    Stopwatch sw;
    const Setting setting = shots <= 3 ? Setting::kUfda : Setting::kUda;
    std::vector<double> maps;
    for (std::size_t rep = 0; rep < 10; ++rep) {
      const RunOutcome r = run_one(b.cfg, b.pre, b.data, "M+WC", setting, shots, rep);
      maps.push_back(r.record.map_target);
      reads += r.record.target_label_reads;
    }
    means.push_back(mean(maps));
    std::cerr << labels[shots - 1] << ": " << list(maps) << " mean " << num(means.back())
              << " (" << num(sw.seconds(), 0) << " s)\n";
  }
  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] >= means[i - 1];
  std::string detail = "mean target mAP of M+WC over 10 repeats:";
  for (std::size_t i = 0; i < means.size(); ++i) detail += " " + labels[i] + " " + num(means[i]);
  detail += "; target label reads " + std::to_string(reads);
  return {monotone && reads == 0, detail};
}

// 10 --------------------------------------------------------------------------

const char* kTinyConfig = R"({
  "generator": {"grid_size": 4, "objects_max": 2},
  "data": {"source_train": 24, "target_train": 24, "source_test": 12, "target_test": 12},
  "schedule": {"pretrain_iterations": 30, "pretrain_decay": [20], "pretrain_batch": 4,
               "adapt_iterations": 40, "adapt_decay": [20], "source_batch": 4,
               "target_batch": 4, "norm_images": 8},
  "hdist": {"images": 12, "steps": 50}
})";

Outcome cli_determinism(const std::string& cli) {
  if (cli.empty()) return {false, "no CLI path given (argument or DALAB_CLI)"};
  const fs::path dir = work_root() / "cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "tiny.json") << kTinyConfig;
  std::vector<std::string> outputs;
  for (const char* name : {"a", "b"}) {
    const std::string cmd = "cd '" + dir.string() + "' && '" + cli +
                            "' run --config tiny.json --seed 3 --out " + name + " > " + name +
                            ".log 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      return {false, "CLI run exited with status " + std::to_string(status)};
    }
  }
  std::size_t compared = 0, identical = 0;
  for (const char* rel : {"runs/uda/aggregate.csv", "ablation.csv"}) {
    ++compared;
    identical += read_file(dir / "a" / rel) == read_file(dir / "b" / rel);
  }
  return {identical == compared, std::to_string(identical) + "/" + std::to_string(compared) +
                                     " CSV outputs byte-identical across two runs of `dalab run`"};
}

// 11 --------------------------------------------------------------------------

Outcome map_oracle() {
  std::size_t exact = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const oracle::Instance inst = oracle::random_instance(1000 + seed);
    const MapReport got = evaluate_map(inst.dets, inst.gts, inst.classes);
    const oracle::Result want = oracle::evaluate(inst.dets, inst.gts, inst.classes);
    exact += got.map == want.map && got.ap == want.ap;
  }
  return {exact == 100, std::to_string(exact) + "/100 random instances match the brute-force oracle exactly"};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  std::string cli = std::getenv("DALAB_CLI") ? std::getenv("DALAB_CLI") : "";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string x; std::getline(ss, x, ',');) only.insert(std::stoi(x));
    } else {
      cli = argv[i];
    }
  }
  auto wanted = [&](int n) { return only.empty() || only.contains(n); };

  std::map<int, Outcome> results;
  auto run = [&](int n, const std::function<Outcome()>& f) {
    if (!wanted(n)) return;
    Stopwatch sw;
    try {
      results[n] = f();
    } catch (const std::exception& e) {
      results[n] = {false, std::string("error: ") + e.what()};
    }
    std::cerr << "criterion " << n << " took " << num(sw.seconds(), 1) << " s\n";
  };

  run(1, gradient_correctness);
  run(2, grl_contract);
  run(3, h_divergence_endpoints);
  run(11, map_oracle);
  run(10, [&] { return cli_determinism(cli); });

  if (wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    std::optional<Checkpoint> adapted;
    std::vector<SeedResult> seeds;
    Stopwatch sw;
    try {
      seeds = run_seeds(5, wanted(5) ? 10 : 5, &adapted);
    } catch (const std::exception& e) {
      for (int n : {4, 5, 6, 7, 8}) {
        if (wanted(n)) results[n] = {false, std::string("error: ") + e.what()};
      }
    }
    std::cerr << "benchmark seeds took " << num(sw.seconds(), 0) << " s\n";
    if (!seeds.empty()) {
      run(4, [&] { return ablation_ordering(seeds); });
      run(5, [&] { return transferability_tracks_gap(seeds); });
      run(6, [&] { return h_distance_reduction(seeds); });
      run(7, [&] { return source_retention(seeds); });
      run(8, [&] { return inference_purity(adapted); });
    }
  }
  run(9, ufda_monotonicity);

  bool all = true;
  for (int n = 1; n <= 11; ++n) {
    const auto it = results.find(n);
    if (it == results.end()) continue;
    all = all && it->second.passed;
    std::cout << "criterion " << n << ": " << (it->second.passed ? "PASS" : "FAIL") << " - "
              << it->second.detail << std::endl;
  }
  return all ? 0 : 1;
}
