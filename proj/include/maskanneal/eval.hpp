#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "maskanneal/trainer.hpp"

namespace maskanneal {

struct BaselineReport {
  std::string name;
  double eval_loss = 0.0;
  double perplexity = -1.0;
  double accuracy = -1.0;
  bool feasible = false;
};

/// One-shot structured projection of a trained dense checkpoint with no
/// retraining: the floor every annealed run is compared against. ranking is
/// "magnitude" (eps*W^2, i.e. weight magnitude) or "hessian" (curvature
/// scores from `probes` Hutchinson samples on training batches).
template <class Task>
BaselineReport one_shot_baseline(const TrainConfig& ckpt_cfg, const Checkpoint& ck,
                                 const std::string& ranking, long probes = 16) {
  require(ranking == "magnitude" || ranking == "hessian",
          "one_shot_baseline: ranking must be magnitude or hessian");
  TrainConfig cfg = ckpt_cfg;
  cfg.mode = "sparse";
  cfg.slorb.enabled = false;
  cfg.distill.enabled = false;
  cfg.resolve_defaults();

  Task task(cfg);
  RngStream init_rng(cfg.seed, "init");
  auto model = task.build_model(init_rng, false);
  load_params_by_name(model, ck);

  if (ranking == "hessian") {
    RngStream hutch_rng(cfg.seed, "oneshot-hutchinson");
    RngStream batch_rng(cfg.seed, "oneshot-batches");
    std::vector<TensorD> ws;
    for (auto* l : model.masked_layers()) {
      ws.push_back(l->w);
      l->hess.averaging = HessianDiagState::Averaging::uniform;
    }
    for (long p = 0; p < probes; ++p) {
      auto batch = task.sample(batch_rng);
      auto builder = [&](TapeD& t) {
        auto [task_l, kl_l] = task.losses(t, model, nullptr, batch);
        (void)kl_l;
        return task_l;
      };
      std::vector<double> v(ad::total_param_size(ws));
      for (auto& z : v) z = hutch_rng.rademacher();
      auto hv = ad::hessian_vector_product<double>(builder, ws, v,
                                                   ad::HvpBackend::finite_difference);
      std::size_t off = 0;
      for (auto* l : model.masked_layers()) {
        const std::size_t n = l->w.size();
        hutchinson_update(l->hess,
                          std::vector<double>(hv.begin() + long(off), hv.begin() + long(off + n)),
                          std::vector<double>(v.begin() + long(off), v.begin() + long(off + n)));
        off += n;
      }
    }
  }

  BaselineReport rep;
  rep.name = ranking + "-one-shot";
  rep.feasible = true;
  for (auto* l : model.masked_layers()) {
    ImportanceScore score = compute_score(l->w.to_mat(), l->hess, cfg.importance.std_epsilon);
    l->mask.hardening_x = 0.0;
    finalize(l->mask, score.standardized, FinalizeRanking::by_score);
    rep.feasible = rep.feasible && check_feasible(l->mask.m, l->mask.pattern).ok;
  }
  auto ev = task.evaluate(model);
  rep.eval_loss = ev.eval_loss;
  rep.perplexity = ev.perplexity;
  rep.accuracy = ev.accuracy;
  return rep;
}

/// Paired comparison on identical seeds and budgets: arm A runs the full
/// anneal, arm B freezes to the structured target at the first mask update
/// and retrains for the same remaining budget.
struct PairedArms {
  RunResult annealed;
  RunResult abrupt;
};

template <class Task>
PairedArms abrupt_vs_annealed(const TrainConfig& base, std::ostream* metrics_a = nullptr,
                              std::ostream* metrics_b = nullptr) {
  TrainConfig cfg_a = base;
  cfg_a.anneal_mode = "full";
  TrainConfig cfg_b = base;
  cfg_b.anneal_mode = "abrupt";
  PairedArms out;
  {
    Trainer<Task> tr(cfg_a);
    out.annealed = tr.run(metrics_a);
  }
  {
    Trainer<Task> tr(cfg_b);
    out.abrupt = tr.run(metrics_b);
  }
  return out;
}

}  // namespace maskanneal
