#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "maskanneal/checkpoint.hpp"
#include "maskanneal/config.hpp"
#include "maskanneal/data.hpp"
#include "maskanneal/hvp.hpp"
#include "maskanneal/importance.hpp"
#include "maskanneal/mask.hpp"
#include "maskanneal/model.hpp"
#include "maskanneal/optimizer.hpp"
#include "maskanneal/packed24.hpp"
#include "maskanneal/schedule.hpp"

namespace maskanneal {

// ---------------------------------------------------------------------------
// Task adapters: data plumbing and loss assembly for the two student kinds.
// ---------------------------------------------------------------------------

struct LmWindowEval {
  double mean_nll = 0.0;
  double perplexity = 0.0;
};

/// Mean next-token NLL over disjoint (seq_len+1)-token windows, and its exp.
inline LmWindowEval lm_window_eval(LmModel& model, const std::vector<int>& tokens, long seq_len) {
  const std::size_t span = std::size_t(seq_len) + 1;
  require(tokens.size() >= span, "corpus shorter than one evaluation window");
  double total_nll = 0.0;
  long count = 0;
  for (std::size_t start = 0; start + span <= tokens.size(); start += span) {
    std::vector<int> inputs(tokens.begin() + long(start), tokens.begin() + long(start + span - 1));
    std::vector<int> targets(tokens.begin() + long(start + 1), tokens.begin() + long(start + span));
    TapeD t;
    TensorD ce = t.cross_entropy(model.forward(t, inputs), targets);
    total_nll += ce.item() * double(targets.size());
    count += long(targets.size());
  }
  LmWindowEval out;
  out.mean_nll = total_nll / double(count);
  out.perplexity = std::exp(out.mean_nll);
  return out;
}

/// Reads a text file as a token stream: distinct bytes are sorted and mapped
/// to consecutive ids, which must fit the model vocabulary.
inline std::vector<int> load_text_corpus(const std::string& path, long vocab) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), "cannot open corpus file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(!text.empty(), "corpus file is empty: " + path);
  std::vector<int> map(256, -1);
  for (unsigned char ch : text) map[ch] = 0;
  int next = 0;
  for (int b = 0; b < 256; ++b)
    if (map[std::size_t(b)] == 0) map[std::size_t(b)] = next++;
  require(next <= vocab, "corpus has " + std::to_string(next) +
                             " distinct bytes, model vocab is " + std::to_string(vocab));
  std::vector<int> tokens;
  tokens.reserve(text.size());
  for (unsigned char ch : text) tokens.push_back(map[ch]);
  return tokens;
}

class LmTask {
 public:
  using Model = LmModel;
  struct Batch {
    std::vector<std::vector<int>> windows;  // each seq_len+1 tokens
  };

  explicit LmTask(const TrainConfig& cfg)
      : cfg_(cfg),
        data_(LmData::make(cfg.data.alphabet, std::size_t(cfg.data.corpus_chars),
                           std::size_t(cfg.data.heldout_chars), cfg.seed)) {}

  Model build_model(RngStream& init_rng, bool with_slorb) const {
    LmConfig mc;
    mc.dim = cfg_.model.dim;
    mc.layers = cfg_.model.layers;
    mc.heads = cfg_.model.heads;
    mc.mlp_ratio = cfg_.model.mlp_ratio;
    mc.vocab = cfg_.model.vocab;
    mc.seq_len = cfg_.model.seq_len;
    require(mc.vocab >= cfg_.data.alphabet, "model vocab smaller than data alphabet");
    return build_lm_model(mc, cfg_.resolved_pattern(), with_slorb,
                          int(cfg_.slorb.rank_divisor), cfg_.mask_defaults(), init_rng,
                          cfg_.seed);
  }

  Batch sample(RngStream& rng) const {
    Batch b;
    b.windows = data_.sample_batch(rng, std::size_t(cfg_.batch_size),
                                   std::size_t(cfg_.model.seq_len));
    return b;
  }

  /// (task CE, distillation KL) for one batch; KL is zero when no teacher.
  std::pair<TensorD, TensorD> losses(TapeD& t, Model& model, Model* teacher,
                                     const Batch& b) const {
    TensorD task_acc, kl_acc;
    const double inv = 1.0 / double(b.windows.size());
    for (const auto& w : b.windows) {
      std::vector<int> inputs(w.begin(), w.end() - 1);
      std::vector<int> targets(w.begin() + 1, w.end());
      TensorD logits = model.forward(t, inputs);
      TensorD ce = t.scale(t.cross_entropy(logits, targets), inv);
      task_acc = task_acc.defined() ? t.add(task_acc, ce) : ce;
      if (teacher) {
        TensorD tlogits = teacher->forward(t, inputs);
        TensorD kl = t.scale(t.kl_divergence(logits, tlogits, cfg_.loss.kl_temperature,
                                             cfg_.loss.kl_direction == "teacher_leading"),
                             inv);
        kl_acc = kl_acc.defined() ? t.add(kl_acc, kl) : kl;
      }
    }
    if (!kl_acc.defined()) kl_acc = TensorD::zeros(1, 1);
    return {task_acc, kl_acc};
  }

  struct EvalOut {
    double eval_loss = 0.0;  // held-out mean NLL per token
    double perplexity = 0.0;
    double accuracy = -1.0;  // unused for lm
  };

  EvalOut evaluate(Model& model) const {
    LmWindowEval ev = lm_window_eval(model, data_.heldout_tokens, cfg_.model.seq_len);
    EvalOut out;
    out.eval_loss = ev.mean_nll;
    out.perplexity = ev.perplexity;
    return out;
  }

  const LmData& data() const { return data_; }

 private:
  const TrainConfig& cfg_;
  LmData data_;
};

class ClassifyTask {
 public:
  using Model = MlpModel;
  struct Batch {
    Mat x;
    std::vector<int> y;
  };

  explicit ClassifyTask(const TrainConfig& cfg)
      : cfg_(cfg),
        data_(ClassifyData::make(cfg.data.classify_dim, cfg.data.classes, cfg.data.class_sep,
                                 cfg.seed)) {
    RngStream eval_rng(cfg.seed, "eval-data");
    data_.sample(eval_rng, std::size_t(cfg.data.eval_examples), eval_x_, eval_y_);
  }

  Model build_model(RngStream& init_rng, bool with_slorb) const {
    MlpConfig mc;
    mc.dims = cfg_.model.mlp_dims;
    require(mc.dims.front() == cfg_.data.classify_dim && mc.dims.back() == cfg_.data.classes,
            "mlp dims must match the data dimensions");
    return build_mlp_model(mc, cfg_.resolved_pattern(), with_slorb,
                           int(cfg_.slorb.rank_divisor), cfg_.mask_defaults(), init_rng,
                           cfg_.seed);
  }

  Batch sample(RngStream& rng) const {
    Batch b;
    data_.sample(rng, std::size_t(cfg_.batch_size), b.x, b.y);
    return b;
  }

  std::pair<TensorD, TensorD> losses(TapeD& t, Model& model, Model* teacher,
                                     const Batch& b) const {
    TensorD logits = model.forward(t, TensorD::constant(b.x));
    TensorD ce = t.cross_entropy(logits, b.y);
    TensorD kl;
    if (teacher) {
      TensorD tlogits = teacher->forward(t, TensorD::constant(b.x));
      kl = t.kl_divergence(logits, tlogits, cfg_.loss.kl_temperature,
                           cfg_.loss.kl_direction == "teacher_leading");
    } else {
      kl = TensorD::zeros(1, 1);
    }
    return {ce, kl};
  }

  struct EvalOut {
    double eval_loss = 0.0;  // CE on the fixed eval set
    double perplexity = -1.0;
    double accuracy = 0.0;
  };

  EvalOut evaluate(Model& model) const {
    TapeD t;
    TensorD logits = model.forward(t, TensorD::constant(eval_x_));
    EvalOut out;
    out.eval_loss = t.cross_entropy(logits, eval_y_).item();
    long hits = 0;
    for (std::size_t r = 0; r < eval_x_.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      hits += int(best) == eval_y_[r] ? 1 : 0;
    }
    out.accuracy = double(hits) / double(eval_x_.rows());
    return out;
  }

 private:
  const TrainConfig& cfg_;
  ClassifyData data_;
  Mat eval_x_;
  std::vector<int> eval_y_;
};

// ---------------------------------------------------------------------------
// Trainer: the dual-track loop. Weights and SLoRB factors update every step;
// masks update on the T_update cadence via the gate pipeline; the hardening
// window interpolates the forward mask to binary; at x=0 masks freeze and the
// remaining steps finetune under the fixed pattern.
// ---------------------------------------------------------------------------

struct RunResult {
  std::vector<std::string> metrics;  // header line + one JSON line per step
  long steps = 0;
  long mask_updates = 0;
  long freeze_step = -1;
  double loss_before_freeze = std::numeric_limits<double>::quiet_NaN();
  double loss_after_freeze = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
  double final_perplexity = std::numeric_limits<double>::quiet_NaN();
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  double mid_fraction_at_harden_end = std::numeric_limits<double>::quiet_NaN();
  double projection_error_at_harden_end = std::numeric_limits<double>::quiet_NaN();
  bool all_masks_feasible = false;
  std::vector<std::pair<std::string, MaskStats>> final_mask_stats;

  double projection_spike() const { return std::abs(loss_after_freeze - loss_before_freeze); }
};

template <class Task>
class Trainer {
 public:
  using Model = typename Task::Model;
  using Batch = typename Task::Batch;

  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.resolve_defaults();
    cfg_.validate();
    task_ = std::make_unique<Task>(cfg_);
    data_rng_ = RngStream(cfg_.seed, "data");
    hutch_rng_ = RngStream(cfg_.seed, "hutchinson");
    init_model();
  }

  const TrainConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  Task& task() { return *task_; }
  long update_index() const { return update_index_; }

  RunResult run(std::ostream* metrics_stream = nullptr) {
    RunResult res;
    const bool sparse = cfg_.mode == "sparse";
    AnnealPlan plan;
    if (sparse) plan = cfg_.resolved_plan();

    {
      json header;
      header["type"] = "header";
      header["tool_version"] = kToolVersion;
      header["config"] = to_json(cfg_);
      emit(res, metrics_stream, header.dump());
    }

    for (long t = 1; t <= cfg_.steps; ++t) {
      double x = 1.0, beta = 0.0, lambda_mid = 0.0, temperature = 0.0;
      if (sparse) {
        x = frozen_ ? 0.0 : hardening_x_at(plan, t);
        beta = beta_at(plan, t);
        lambda_mid = lambda_mid_at(plan, t);
        temperature = temperature_at(plan, update_index_);
        if (!frozen_)
          for (auto* l : model_.masked_layers()) l->mask.hardening_x = x;
      }

      Batch batch = task_->sample(data_rng_);

      // full-anneal freeze: the hardening window ends here
      if (sparse && cfg_.anneal_mode == "full" && !frozen_ && t >= plan.harden_end_step) {
        freeze_masks(res, batch, /*assign_hard_target=*/false, t);
      }

      double task_loss = 0.0, kl_loss = 0.0;
      try {
        tape_.reset();
        auto [task_l, kl_l] = task_->losses(tape_, model_, teacher_ ? &*teacher_ : nullptr, batch);
        TensorD train_loss = tape_.scale(task_l, cfg_.loss.lambda_task);
        if (teacher_ && cfg_.loss.lambda_kl > 0)
          train_loss = tape_.add(train_loss, tape_.scale(kl_l, cfg_.loss.lambda_kl));
        task_loss = task_l.item();
        kl_loss = kl_l.item();
        tape_.backward(train_loss);
        opt_.step(params_);
      } catch (const std::exception& e) {
        throw std::runtime_error("training aborted at step " + std::to_string(t) + ": " +
                                 e.what());
      }

      bool updated = false;
      if (sparse && !frozen_ && is_mask_update_step(plan, t)) {
        if (cfg_.anneal_mode == "abrupt" && update_index_ == 0) {
          freeze_masks(res, batch, /*assign_hard_target=*/true, t);
        } else {
          mask_update(plan, t, batch);
          ++res.mask_updates;
        }
        updated = true;
      }

      const double total_loss = cfg_.loss.lambda_task * task_loss +
                                cfg_.loss.lambda_kl * kl_loss + lambda_mid * mid_loss_cache_;

      json rec;
      rec["step"] = t;
      rec["task_loss"] = task_loss;
      rec["kl_loss"] = kl_loss;
      rec["mid_loss"] = mid_loss_cache_;
      rec["total_loss"] = total_loss;
      if (sparse) {
        rec["T"] = temperature;
        rec["beta"] = beta;
        rec["lambda_mid"] = lambda_mid;
        rec["x"] = x;
        rec["frozen"] = frozen_;
        if (updated) rec["mask_stats"] = mask_stats_json();
      }
      if (t % cfg_.eval.cadence == 0 || t == cfg_.steps) {
        auto ev = task_->evaluate(model_);
        rec["eval"] = {{"eval_loss", ev.eval_loss},
                       {"perplexity", ev.perplexity},
                       {"accuracy", ev.accuracy}};
        res.final_eval_loss = ev.eval_loss;
        res.final_perplexity = ev.perplexity;
        res.final_accuracy = ev.accuracy;
      }
      emit(res, metrics_stream, rec.dump());
      res.final_train_loss = total_loss;
    }

    res.steps = cfg_.steps;
    res.freeze_step = freeze_step_;
    res.loss_before_freeze = loss_before_freeze_;
    res.loss_after_freeze = loss_after_freeze_;
    res.mid_fraction_at_harden_end = mid_fraction_at_freeze_;
    res.projection_error_at_harden_end = projection_error_at_freeze_;

    res.all_masks_feasible = true;
    for (auto* l : model_.masked_layers()) {
      MaskStats st = mask_stats(l->mask.m, l->mask.pattern, l->mask.hard_threshold);
      res.final_mask_stats.emplace_back(l->name, st);
      if (cfg_.mode == "sparse")
        res.all_masks_feasible =
            res.all_masks_feasible && check_feasible(l->mask.m, l->mask.pattern).ok;
    }
    return res;
  }

  Checkpoint checkpoint(long step) {
    return make_checkpoint(model_, cfg_, step, update_index_, &opt_);
  }

  /// Final binary masks exported in the packed format (2:4 patterns only).
  std::vector<std::pair<std::string, Packed24Matrix>> packed_masks() {
    std::vector<std::pair<std::string, Packed24Matrix>> out;
    const SparsityPattern p24 = SparsityPattern::nofm(2, 4);
    for (auto* l : model_.masked_layers()) {
      if (!(l->mask.pattern == p24) || !l->mask.frozen) continue;
      out.emplace_back(l->name, pack_24(l->w.to_mat(), l->mask.m));
    }
    return out;
  }

 private:
  void emit(RunResult& res, std::ostream* stream, std::string line) {
    if (stream) (*stream) << line << '\n' << std::flush;
    res.metrics.push_back(std::move(line));
  }

  void init_model() {
    RngStream init_rng(cfg_.seed, "init");
    const bool sparse = cfg_.mode == "sparse";
    const bool with_slorb = sparse && cfg_.slorb.enabled;
    model_ = task_->build_model(init_rng, with_slorb);
    if (!cfg_.init_from.empty()) {
      Checkpoint ck = load_checkpoint_file(cfg_.init_from);
      load_params_by_name(model_, ck);
    }
    if (!sparse) model_.set_dense_mode();
    for (auto* l : model_.masked_layers()) l->ste = cfg_.ste;

    if (sparse && cfg_.distill.enabled) {
      if (cfg_.distill.teacher == "self") {
        teacher_ = clone_as_teacher(model_);
      } else {
        Checkpoint ck = load_checkpoint_file(cfg_.distill.teacher);
        TrainConfig tcfg = config_from_json(ck.meta.at("config"));
        require(tcfg.task == cfg_.task, "teacher checkpoint is for a different task");
        Task teacher_task(tcfg);
        RngStream trng(tcfg.seed, "init");
        Model tm = teacher_task.build_model(trng, false);
        load_params_by_name(tm, ck);
        teacher_ = clone_as_teacher(tm);
      }
    }
    params_ = model_.parameters();
    opt_ = Optimizer(Optimizer::parse_kind(cfg_.optimizer.kind), cfg_.optimizer.lr,
                     cfg_.optimizer.momentum, cfg_.optimizer.beta1, cfg_.optimizer.beta2,
                     cfg_.optimizer.eps);
    refresh_mid_loss();
  }

  double batch_model_loss(const Batch& batch) {
    TapeD t;
    auto [task_l, kl_l] = task_->losses(t, model_, teacher_ ? &*teacher_ : nullptr, batch);
    double loss = cfg_.loss.lambda_task * task_l.item();
    if (teacher_) loss += cfg_.loss.lambda_kl * kl_l.item();
    return loss;
  }

  void refresh_mid_loss() {
    double acc = 0.0;
    std::size_t count = 0;
    for (auto* l : model_.masked_layers()) {
      acc += mid_loss(l->mask.m) * double(l->mask.m.size());
      count += l->mask.m.size();
    }
    mid_loss_cache_ = count ? acc / double(count) : 0.0;
  }

  json mask_stats_json() {
    json out = json::object();
    std::size_t i = 0;
    for (auto* l : model_.masked_layers()) {
      MaskStats st = mask_stats(l->mask.m, l->mask.pattern, l->mask.hard_threshold);
      out[std::to_string(i) + ":" + l->name] = {
          {"mid_fraction", st.mid_fraction},
          {"dist_to_binary", st.mean_distance_to_binary},
          {"threshold_feasible", st.threshold_mask_feasible},
          {"projection_error", st.projection_error}};
      ++i;
    }
    return out;
  }

  /// One Hutchinson probe event over all masked weights, then the per-layer
  /// gate pipeline, in the loop's line order.
  void mask_update(const AnnealPlan& plan, long t, const Batch& batch) {
    if (cfg_.importance.backend == "hessian") {
      std::vector<TensorD> ws;
      for (auto* l : model_.masked_layers()) ws.push_back(l->w);
      auto builder = [&](TapeD& tp) {
        auto [task_l, kl_l] = task_->losses(tp, model_, teacher_ ? &*teacher_ : nullptr, batch);
        TensorD loss = tp.scale(task_l, cfg_.loss.lambda_task);
        if (cfg_.importance.probe_loss == "composite" && teacher_ && cfg_.loss.lambda_kl > 0)
          loss = tp.add(loss, tp.scale(kl_l, cfg_.loss.lambda_kl));
        return loss;
      };
      const std::size_t total = ad::total_param_size(ws);
      const auto backend = cfg_.importance.hvp_backend == "fd"
                               ? ad::HvpBackend::finite_difference
                               : ad::HvpBackend::double_backward;
      for (long probe = 0; probe < cfg_.importance.probes; ++probe) {
        std::vector<double> v(total);
        for (auto& z : v) z = hutch_rng_.rademacher();
        std::vector<double> hv =
            ad::hessian_vector_product<double>(builder, ws, v, backend);
        std::size_t off = 0;
        for (auto* l : model_.masked_layers()) {
          const std::size_t n = l->w.size();
          std::vector<double> hv_l(hv.begin() + long(off), hv.begin() + long(off + n));
          std::vector<double> v_l(v.begin() + long(off), v.begin() + long(off + n));
          hutchinson_update(l->hess, hv_l, v_l);
          off += n;
        }
      }
    }

    const double beta = beta_at(plan, t);
    const double lambda_mid = lambda_mid_at(plan, t);
    const double temperature = temperature_at(plan, update_index_);
    for (auto* l : model_.masked_layers()) {
      ImportanceScore score =
          compute_score(l->w.to_mat(), l->hess, cfg_.importance.std_epsilon);
      Mat tau = group_threshold(score.standardized, l->mask.pattern);
      Mat gate = soft_gate(score.standardized, tau, temperature);
      Mat target = hard_target(score.standardized, l->mask.pattern);
      Mat blended = blend(gate, target, beta);
      Mat injected =
          mid_penalty_inject(blended, l->mask.m, target, l->mask.pen_step, lambda_mid);
      ema_update(l->mask, injected);
      l->mask.temperature = temperature;
      l->mask.blend = beta;
      l->mask.mid_weight = lambda_mid;
    }
    ++update_index_;
    refresh_mid_loss();
  }

  /// Projection event: measures the loss on this step's batch before and
  /// after the masks turn binary, then freezes. With assign_hard_target the
  /// mask is overwritten by the current structured target first (the abrupt
  /// ablation arm); otherwise survivors are ranked per config.
  void freeze_masks(RunResult& res, const Batch& batch, bool assign_hard_target, long t) {
    double mid_frac_acc = 0.0, proj_err_acc = 0.0;
    std::size_t entries = 0;
    for (auto* l : model_.masked_layers()) {
      MaskStats st = mask_stats(l->mask.m, l->mask.pattern, l->mask.hard_threshold);
      mid_frac_acc += st.mid_fraction * double(l->mask.m.size());
      proj_err_acc += st.projection_error * double(l->mask.m.size());
      entries += l->mask.m.size();
    }
    mid_fraction_at_freeze_ = entries ? mid_frac_acc / double(entries) : 0.0;
    projection_error_at_freeze_ = entries ? proj_err_acc / double(entries) : 0.0;

    loss_before_freeze_ = batch_model_loss(batch);
    for (auto* l : model_.masked_layers()) {
      Mat ranking;
      if (assign_hard_target || cfg_.mask.finalize_ranking == "by_score") {
        ImportanceScore score =
            compute_score(l->w.to_mat(), l->hess, cfg_.importance.std_epsilon);
        ranking = score.standardized;
      }
      if (assign_hard_target) {
        l->mask.m = hard_target(ranking, l->mask.pattern);
        ++l->mask.version;
      }
      l->mask.hardening_x = 0.0;
      if (assign_hard_target || cfg_.mask.finalize_ranking == "by_m")
        finalize(l->mask, l->mask.m, FinalizeRanking::by_m);
      else
        finalize(l->mask, ranking, FinalizeRanking::by_score);
      FeasibilityReport rep = check_feasible(l->mask.m, l->mask.pattern);
      if (!rep.ok)
        throw std::logic_error("infeasible mask after finalize in layer " + l->name + ": " +
                               rep.message);
    }
    frozen_ = true;
    freeze_step_ = t;
    loss_after_freeze_ = batch_model_loss(batch);
    refresh_mid_loss();
  }

  TrainConfig cfg_;
  std::unique_ptr<Task> task_;
  Model model_;
  std::optional<Model> teacher_;
  std::vector<TensorD> params_;
  Optimizer opt_;
  TapeD tape_;
  RngStream data_rng_, hutch_rng_;
  long update_index_ = 0;
  bool frozen_ = false;
  long freeze_step_ = -1;
  double loss_before_freeze_ = std::numeric_limits<double>::quiet_NaN();
  double loss_after_freeze_ = std::numeric_limits<double>::quiet_NaN();
  double mid_fraction_at_freeze_ = std::numeric_limits<double>::quiet_NaN();
  double projection_error_at_freeze_ = std::numeric_limits<double>::quiet_NaN();
  double mid_loss_cache_ = 0.0;
};

}  // namespace maskanneal
