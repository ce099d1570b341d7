// maskanneal command line: train / eval / project / inspect-mask / verify /
// ablate. Exit codes: 0 success, 1 config error, 2 run failure,
// 3 verification failure.

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "maskanneal/eval.hpp"
#include "maskanneal/trainer.hpp"

namespace fs = std::filesystem;
using namespace maskanneal;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRun = 2;
constexpr int kExitVerify = 3;

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  json j;
  f >> j;
  return j;
}

TrainConfig resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  json j = config_path.empty() ? json::object() : load_json_file(config_path);
  for (const auto& ov : overrides) apply_override(j, ov);
  TrainConfig cfg = config_from_json(j);
  cfg.resolve_defaults();
  return cfg;
}

std::string default_run_id(std::uint64_t seed) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-seed" << seed;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

/// Dense 0/1 byte export: u32 rows, u32 cols (little-endian), then row-major
/// bytes.
std::string serialize_dense_mask(const Mat& m) {
  std::string out;
  auto put_u32 = [&](std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
  };
  put_u32(std::uint32_t(m.rows()));
  put_u32(std::uint32_t(m.cols()));
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back(m[i] == 1.0 ? char(1) : char(0));
  return out;
}

struct RunArtifacts {
  fs::path dir;
  RunResult result;
};

template <class Task>
RunArtifacts run_to_directory(const TrainConfig& cfg, const fs::path& dir,
                              const std::string& run_id, const std::string& mask_format,
                              bool quiet) {
  fs::create_directories(dir);
  json manifest;
  manifest["run_id"] = run_id;
  manifest["tool_version"] = kToolVersion;
  manifest["seed"] = cfg.seed;
  manifest["config"] = to_json(cfg);
  manifest["artifacts"] = {{"metrics", "metrics.jsonl"},
                           {"checkpoint", "ckpt-final.bin"},
                           {"summary", "summary.json"}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream metrics(dir / "metrics.jsonl");
  Trainer<Task> trainer(cfg);
  RunResult res = trainer.run(&metrics);

  save_checkpoint_file(trainer.checkpoint(cfg.steps), (dir / "ckpt-final.bin").string());

  if (cfg.mode == "sparse") {
    if (mask_format == "packed") {
      auto packed = trainer.packed_masks();
      std::size_t i = 0;
      for (auto& [name, p] : packed)
        save_packed24(p, (dir / ("masks-" + std::to_string(i++) + "-" + name + ".nm24")).string());
    } else {
      std::size_t i = 0;
      for (auto* l : trainer.model().masked_layers())
        write_text(dir / ("masks-" + std::to_string(i++) + "-" + l->name + ".mask"),
                   serialize_dense_mask(l->mask.m));
    }
  }

  json summary;
  summary["run_id"] = run_id;
  summary["steps"] = res.steps;
  summary["mask_updates"] = res.mask_updates;
  summary["freeze_step"] = res.freeze_step;
  summary["final_train_loss"] = res.final_train_loss;
  summary["final_eval_loss"] = res.final_eval_loss;
  summary["final_perplexity"] = res.final_perplexity;
  summary["final_accuracy"] = res.final_accuracy;
  summary["loss_before_freeze"] = res.loss_before_freeze;
  summary["loss_after_freeze"] = res.loss_after_freeze;
  summary["projection_spike"] = res.projection_spike();
  summary["mid_fraction_at_harden_end"] = res.mid_fraction_at_harden_end;
  summary["projection_error_at_harden_end"] = res.projection_error_at_harden_end;
  summary["all_masks_feasible"] = res.all_masks_feasible;
  write_text(dir / "summary.json", summary.dump(2) + "\n");

  if (!quiet)
    std::cout << "run " << run_id << ": eval_loss=" << res.final_eval_loss
              << " ppl=" << res.final_perplexity << " feasible=" << res.all_masks_feasible
              << " -> " << dir.string() << "\n";
  return {dir, std::move(res)};
}

RunArtifacts run_any(const TrainConfig& cfg, const fs::path& dir, const std::string& run_id,
                     const std::string& mask_format, bool quiet) {
  if (cfg.task == "lm") return run_to_directory<LmTask>(cfg, dir, run_id, mask_format, quiet);
  return run_to_directory<ClassifyTask>(cfg, dir, run_id, mask_format, quiet);
}

// ---- checkpoint-based commands ----

struct LoadedLm {
  TrainConfig cfg;
  LmTask task;
  LmModel model;

  explicit LoadedLm(const Checkpoint& ck)
      : cfg(make_cfg(ck)), task(cfg), model(build(ck, cfg, task)) {}

 private:
  static TrainConfig make_cfg(const Checkpoint& ck) {
    TrainConfig c = config_from_json(ck.meta.at("config"));
    c.resolve_defaults();
    return c;
  }
  static LmModel build(const Checkpoint& ck, const TrainConfig& cfg, LmTask& task) {
    RngStream init_rng(cfg.seed, "init");
    LmModel m = task.build_model(init_rng, cfg.mode == "sparse" && cfg.slorb.enabled);
    load_params_by_name(m, ck);
    load_mask_state(m, ck);
    return m;
  }
};

struct LoadedMlp {
  TrainConfig cfg;
  ClassifyTask task;
  MlpModel model;

  explicit LoadedMlp(const Checkpoint& ck)
      : cfg(make_cfg(ck)), task(cfg), model(build(ck, cfg, task)) {}

 private:
  static TrainConfig make_cfg(const Checkpoint& ck) {
    TrainConfig c = config_from_json(ck.meta.at("config"));
    c.resolve_defaults();
    return c;
  }
  static MlpModel build(const Checkpoint& ck, const TrainConfig& cfg, ClassifyTask& task) {
    RngStream init_rng(cfg.seed, "init");
    MlpModel m = task.build_model(init_rng, cfg.mode == "sparse" && cfg.slorb.enabled);
    load_params_by_name(m, ck);
    load_mask_state(m, ck);
    return m;
  }
};

std::string task_of(const Checkpoint& ck) {
  return ck.meta.at("config").at("task").get<std::string>();
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_path,
             const std::string& out_path) {
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  json report;
  if (task_of(ck) == "lm") {
    LoadedLm lm(ck);
    if (!corpus_path.empty()) {
      std::vector<int> tokens = load_text_corpus(corpus_path, lm.cfg.model.vocab);
      auto ev = lm_window_eval(lm.model, tokens, lm.cfg.model.seq_len);
      report["corpus"] = corpus_path;
      report["eval_loss"] = ev.mean_nll;
      report["perplexity"] = ev.perplexity;
    } else {
      auto ev = lm.task.evaluate(lm.model);
      report["corpus"] = "builtin-heldout";
      report["eval_loss"] = ev.eval_loss;
      report["perplexity"] = ev.perplexity;
    }
  } else {
    LoadedMlp mlp(ck);
    auto ev = mlp.task.evaluate(mlp.model);
    report["eval_loss"] = ev.eval_loss;
    report["accuracy"] = ev.accuracy;
  }
  std::cout << report.dump(2) << "\n";
  if (!out_path.empty()) write_text(out_path, report.dump(2) + "\n");
  return kExitOk;
}

template <class Loaded>
int project_loaded(Loaded& loaded, const Checkpoint& ck, const std::string& pattern_str,
                   const std::string& ranking, const std::string& out_path) {
  SparsityPattern pattern =
      pattern_str.empty() ? loaded.cfg.resolved_pattern() : SparsityPattern::parse(pattern_str);
  json report = json::array();
  bool all_ok = true;
  for (auto* l : loaded.model.masked_layers()) {
    l->mask.pattern = pattern;
    Mat key;
    if (ranking == "magnitude") {
      HessianDiagState empty(l->w.rows(), l->w.cols());
      key = compute_score(l->w.to_mat(), empty).standardized;
    } else if (ranking == "by-score") {
      key = compute_score(l->w.to_mat(), l->hess, loaded.cfg.importance.std_epsilon).standardized;
    } else {
      key = l->mask.m;
    }
    l->mask.hardening_x = 0.0;
    l->mask.frozen = false;
    finalize(l->mask, key, ranking == "by-m" ? FinalizeRanking::by_m : FinalizeRanking::by_score);
    auto rep = check_feasible(l->mask.m, pattern);
    all_ok = all_ok && rep.ok;
    report.push_back({{"layer", l->name}, {"feasible", rep.ok}});
  }
  TrainConfig cfg_out = loaded.cfg;
  cfg_out.pattern = pattern.to_string();
  Checkpoint out = make_checkpoint(loaded.model, cfg_out, ck.meta.at("step").get<long>(),
                                   ck.meta.value("update_index", 0L), nullptr);
  save_checkpoint_file(out, out_path);
  std::cout << json({{"ranking", ranking},
                     {"pattern", pattern.to_string()},
                     {"feasible", all_ok},
                     {"layers", report},
                     {"output", out_path}})
                   .dump(2)
            << "\n";
  return all_ok ? kExitOk : kExitVerify;
}

int cmd_project(const std::string& ckpt_path, const std::string& pattern_str,
                const std::string& ranking, const std::string& out_path) {
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  if (task_of(ck) == "lm") {
    LoadedLm lm(ck);
    return project_loaded(lm, ck, pattern_str, ranking, out_path);
  }
  LoadedMlp mlp(ck);
  return project_loaded(mlp, ck, pattern_str, ranking, out_path);
}

template <class Loaded>
int inspect_loaded(Loaded& loaded, const std::string& json_out) {
  json out = json::array();
  std::printf("%-14s %-10s %-8s %12s %14s %10s %10s\n", "layer", "pattern", "frozen",
              "mid_fraction", "dist_to_binary", "thr_feas", "proj_err");
  for (auto* l : loaded.model.masked_layers()) {
    MaskStats st = mask_stats(l->mask.m, l->mask.pattern, l->mask.hard_threshold);
    std::printf("%-14s %-10s %-8s %12.6f %14.6f %10s %10.6f\n", l->name.c_str(),
                l->mask.pattern.to_string().c_str(), l->mask.frozen ? "yes" : "no",
                st.mid_fraction, st.mean_distance_to_binary,
                st.threshold_mask_feasible ? "yes" : "no", st.projection_error);
    out.push_back({{"layer", l->name},
                   {"pattern", l->mask.pattern.to_string()},
                   {"frozen", l->mask.frozen},
                   {"mid_fraction", st.mid_fraction},
                   {"dist_to_binary", st.mean_distance_to_binary},
                   {"threshold_feasible", st.threshold_mask_feasible},
                   {"projection_error", st.projection_error}});
  }
  if (!json_out.empty()) write_text(json_out, out.dump(2) + "\n");
  return kExitOk;
}

int cmd_inspect(const std::string& ckpt_path, const std::string& json_out) {
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  if (task_of(ck) == "lm") {
    LoadedLm lm(ck);
    return inspect_loaded(lm, json_out);
  }
  LoadedMlp mlp(ck);
  return inspect_loaded(mlp, json_out);
}

template <class Loaded>
int verify_loaded(Loaded& loaded) {
  const SparsityPattern p24 = SparsityPattern::nofm(2, 4);
  bool all_ok = true;
  RngStream rng(7, "verify-x");
  for (auto* l : loaded.model.masked_layers()) {
    std::string status = "ok";
    auto rep = check_feasible(l->mask.m, l->mask.pattern);
    if (!rep.ok) {
      status = "infeasible: " + rep.message;
    } else if (l->mask.pattern == p24) {
      const Mat w = l->w.to_mat();
      Packed24Matrix packed = pack_24(w, l->mask.m);
      Mat back = unpack_24(packed);
      for (std::size_t i = 0; i < w.size() && status == "ok"; ++i) {
        const double expect = double(float(l->mask.m[i] * w[i]));
        if (back[i] != expect) status = "packed round-trip mismatch";
      }
      if (status == "ok") {
        Mat x(4, w.cols());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
        Mat y = spmm_24(packed, x);
        for (std::size_t b = 0; b < x.rows() && status == "ok"; ++b)
          for (std::size_t d = 0; d < w.rows(); ++d) {
            double ref = 0.0;
            for (std::size_t c = 0; c < w.cols(); ++c) ref += x(b, c) * l->mask.m(d, c) * w(d, c);
            if (std::abs(y(b, d) - ref) > 1e-6 * std::max(1.0, std::abs(ref))) {
              status = "spmm mismatch vs dense reference";
              break;
            }
          }
      }
    }
    std::printf("%-14s %s\n", l->name.c_str(), status.c_str());
    all_ok = all_ok && status == "ok";
  }
  std::printf("verify: %s\n", all_ok ? "PASS" : "FAIL");
  return all_ok ? kExitOk : kExitVerify;
}

int cmd_verify(const std::string& ckpt_path) {
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  if (task_of(ck) == "lm") {
    LoadedLm lm(ck);
    return verify_loaded(lm);
  }
  LoadedMlp mlp(ck);
  return verify_loaded(mlp);
}

// ---- ablate ----

TrainConfig apply_variant(TrainConfig cfg, const std::string& variant) {
  if (variant == "full") return cfg;
  if (variant == "abrupt") {
    cfg.anneal_mode = "abrupt";
  } else if (variant == "magnitude") {
    cfg.importance.backend = "magnitude";
  } else if (variant == "no-slorb") {
    cfg.slorb.enabled = false;
  } else if (variant == "no-distill") {
    cfg.distill.enabled = false;
  } else if (variant == "half-steps") {
    cfg.steps = std::max(2L, cfg.steps / 2);
  } else {
    throw ConfigError("unknown ablation variant: " + variant);
  }
  return cfg;
}

int cmd_ablate(const std::string& grid_path, const std::string& out_root_str, long parallelism) {
  json grid = load_json_file(grid_path);
  detail::check_keys(grid, "", {"base", "seeds", "variants", "parallelism"});
  TrainConfig base = config_from_json(grid.value("base", json::object()));
  base.resolve_defaults();
  std::vector<std::uint64_t> seeds = grid.value("seeds", std::vector<std::uint64_t>{1, 2, 3});
  std::vector<std::string> variants = grid.value(
      "variants", std::vector<std::string>{"full", "abrupt", "magnitude", "no-slorb",
                                           "no-distill", "half-steps"});
  if (grid.contains("parallelism")) parallelism = grid.at("parallelism").get<long>();
  {
    std::set<std::uint64_t> unique_seeds(seeds.begin(), seeds.end());
    if (unique_seeds.size() != seeds.size()) throw ConfigError("seed collision in grid");
  }

  const fs::path out_root = out_root_str;
  fs::create_directories(out_root);

  struct Job {
    std::string variant;
    std::uint64_t seed;
    TrainConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (const auto& variant : variants)
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = apply_variant(base, variant);
      cfg.seed = seed;
      jobs.push_back({variant, seed, cfg, out_root / (variant + "-s" + std::to_string(seed))});
    }

  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size() || failed.load()) return;
      try {
        const Job& job = jobs[i];
        auto art = run_any(job.cfg, job.dir, job.variant + "-s" + std::to_string(job.seed),
                           "packed", true);
        results[i] = std::move(art.result);
        std::printf("[ablate] done %-12s seed %llu  eval_loss=%.6f\n", job.variant.c_str(),
                    (unsigned long long)job.seed, results[i].final_eval_loss);
        std::fflush(stdout);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "[ablate] job failed: %s\n", e.what());
        failed.store(true);
      }
    }
  };
  const long workers = std::max(1L, std::min<long>(parallelism, long(jobs.size())));
  std::vector<std::future<void>> futs;
  for (long w = 0; w < workers; ++w) futs.push_back(std::async(std::launch::async, worker));
  for (auto& f : futs) f.get();
  if (failed.load()) return kExitRun;

  // summary: per variant, seed-mean metrics and delta vs the full pipeline
  json machine = json::array();
  std::map<std::string, std::vector<const RunResult*>> by_variant;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    by_variant[jobs[i].variant].push_back(&results[i]);
  auto mean_of = [](const std::vector<const RunResult*>& rs, auto get) {
    double s = 0.0;
    for (const auto* r : rs) s += get(*r);
    return s / double(rs.size());
  };
  double full_mean = 0.0;
  if (by_variant.count("full"))
    full_mean = mean_of(by_variant["full"], [](const RunResult& r) { return r.final_eval_loss; });

  std::ostringstream table;
  table << std::left << std::setw(14) << "variant" << std::right << std::setw(8) << "seeds"
        << std::setw(16) << "eval_loss" << std::setw(16) << "perplexity" << std::setw(12)
        << "spike" << std::setw(14) << "vs full" << "\n";
  for (const auto& variant : variants) {
    const auto& rs = by_variant[variant];
    const double loss = mean_of(rs, [](const RunResult& r) { return r.final_eval_loss; });
    const double ppl = mean_of(rs, [](const RunResult& r) { return r.final_perplexity; });
    const double spike = mean_of(rs, [](const RunResult& r) { return r.projection_spike(); });
    table << std::left << std::setw(14) << variant << std::right << std::setw(8) << rs.size()
          << std::setw(16) << std::fixed << std::setprecision(6) << loss << std::setw(16) << ppl
          << std::setw(12) << std::setprecision(4) << spike << std::setw(14)
          << std::setprecision(6) << (loss - full_mean) << "\n";
    machine.push_back({{"variant", variant},
                       {"seeds", rs.size()},
                       {"mean_eval_loss", loss},
                       {"mean_perplexity", ppl},
                       {"mean_projection_spike", spike},
                       {"delta_vs_full", loss - full_mean}});
  }
  std::cout << table.str();
  write_text(out_root / "summary.txt", table.str());
  write_text(out_root / "summary.json", machine.dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mask-annealing trainer for N:M and block semi-structured sparsity"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "run training per a config file");
  std::string config_path, out_root = "runs", run_id, mask_format = "packed";
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "JSON config file (defaults when omitted)");
  train->add_option("--set", overrides, "dotted-path override, e.g. schedules.gamma=0.99");
  train->add_option("--out", out_root, "output root directory");
  train->add_option("--run-id", run_id, "run directory name (default: timestamp-seed)");
  train->add_option("--mask-format", mask_format, "final mask export: packed | dense")
      ->check(CLI::IsMember({"packed", "dense"}));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path, corpus_path, eval_out;
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--corpus", corpus_path, "text file replacing the builtin held-out corpus");
  eval->add_option("--out", eval_out, "also write the report to this file");

  auto* project = app.add_subcommand("project", "one-shot structured projection of a checkpoint");
  std::string prj_ckpt, prj_pattern, prj_ranking = "magnitude", prj_out;
  project->add_option("--checkpoint", prj_ckpt, "checkpoint file")->required();
  project->add_option("--pattern", prj_pattern, "pattern override, e.g. 2:4 or block16x16");
  project->add_option("--ranking", prj_ranking, "by-m | by-score | magnitude")
      ->check(CLI::IsMember({"by-m", "by-score", "magnitude"}));
  project->add_option("--out", prj_out, "projected checkpoint path")->required();

  auto* inspect = app.add_subcommand("inspect-mask", "per-layer mask statistics");
  std::string ins_ckpt, ins_json;
  inspect->add_option("--checkpoint", ins_ckpt, "checkpoint file")->required();
  inspect->add_option("--json", ins_json, "also write machine-readable stats to this file");

  auto* verify = app.add_subcommand(
      "verify", "feasibility + packed round-trip + spmm equivalence for every layer");
  std::string ver_ckpt;
  verify->add_option("--checkpoint", ver_ckpt, "checkpoint file")->required();

  auto* ablate = app.add_subcommand("ablate", "run the paired ablation grid");
  std::string grid_path, ablate_out = "runs/ablate";
  long parallelism = 2;
  ablate->add_option("--config", grid_path, "grid config JSON")->required();
  ablate->add_option("--out", ablate_out, "output root");
  ablate->add_option("--parallelism", parallelism, "concurrent runs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      TrainConfig cfg = resolve_config(config_path, overrides);
      const std::string id = run_id.empty() ? default_run_id(cfg.seed) : run_id;
      try {
        run_any(cfg, fs::path(out_root) / id, id, mask_format, false);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        std::fprintf(stderr, "run failed: %s\n", e.what());
        return kExitRun;
      }
      return kExitOk;
    }
    if (eval->parsed()) return cmd_eval(ckpt_path, corpus_path, eval_out);
    if (project->parsed()) return cmd_project(prj_ckpt, prj_pattern, prj_ranking, prj_out);
    if (inspect->parsed()) return cmd_inspect(ins_ckpt, ins_json);
    if (verify->parsed()) return cmd_verify(ver_ckpt);
    if (ablate->parsed()) return cmd_ablate(grid_path, ablate_out, parallelism);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRun;
  }
  return kExitOk;
}
