#pragma once

#include <json.hpp>
#include <set>
#include <string>

#include "maskanneal/mask.hpp"
#include "maskanneal/model.hpp"
#include "maskanneal/schedule.hpp"

namespace maskanneal {

using nlohmann::json;

inline constexpr const char* kToolVersion = "0.3.0";

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& ok) {
  if (!j.is_object()) throw ConfigError("config: expected object at " + path);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key()))
      throw ConfigError("config: unknown key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
}

template <class T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

/// Full run configuration. The key hierarchy mirrors the module layout;
/// unknown keys are errors so hyperparameter typos cannot pass silently.
struct TrainConfig {
  std::string task = "lm";      // lm | classify
  std::string mode = "sparse";  // sparse | dense
  std::uint64_t seed = 1;
  long steps = 20000;
  long batch_size = 2;
  std::string init_from;        // checkpoint path, empty = fresh init

  struct ModelCfg {
    // transformer (task lm)
    long dim = 128, layers = 4, heads = 4, mlp_ratio = 4, vocab = 32, seq_len = 32;
    // mlp (task classify)
    std::vector<long> mlp_dims = {784, 256, 256, 10};
  } model;

  std::string pattern = "2:4";

  struct SchedulesCfg {
    double t0 = 1.0, gamma = 0.995, t_min = 1e-4;
    long t_update = 100;
    double beta_start = 0.20, beta_end = 0.70;            // fractions of steps
    double lambda_start = 0.20, lambda_end = 0.80;        // fractions of steps
    double lambda_mid_start = 0.0, lambda_mid_end = 0.1;  // weights
    double harden_start = 0.80, harden_end = 0.95;        // fractions of steps
  } schedules;

  struct LossCfg {
    double lambda_task = 1.0, lambda_kl = 1.0;
    double kl_temperature = 1.0;
    std::string kl_direction = "teacher_leading";  // teacher_leading | student_leading
  } loss;

  struct OptimizerCfg {
    std::string kind = "auto";  // auto | sgd | adam
    double lr = -1.0;           // -1 = task default
    double momentum = 0.9;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  } optimizer;

  struct ImportanceCfg {
    std::string backend = "hessian";  // hessian | magnitude
    double ema_decay = 0.9;
    double epsilon = 1e-8;
    double std_epsilon = 1e-8;
    long probes = 1;
    std::string probe_loss = "composite";  // composite | task
    std::string hvp_backend = "fd";        // fd | double_backward
  } importance;

  struct MaskCfg {
    double ema_alpha = 0.15;
    double eta_pen = 1.0;
    double theta = 0.5;
    std::string finalize_ranking = "by_m";  // by_m | by_score
  } mask;

  struct SlorbCfg {
    bool enabled = true;
    long rank_divisor = 16;
  } slorb;

  struct DistillCfg {
    bool enabled = true;
    std::string teacher = "self";  // self | <checkpoint path>
  } distill;

  bool ste = true;
  std::string anneal_mode = "full";  // full | abrupt

  struct DataCfg {
    long corpus_chars = 1000000;
    long heldout_chars = 4096;
    long alphabet = 32;
    long classify_dim = 784, classes = 10;
    double class_sep = 6.0;
    long eval_examples = 512;
  } data;

  struct EvalCfg {
    long cadence = 2000;
  } eval;

  // ---- resolution ----

  void resolve_defaults() {
    if (optimizer.kind == "auto") optimizer.kind = task == "classify" ? "sgd" : "adam";
    if (optimizer.lr < 0) optimizer.lr = optimizer.kind == "sgd" ? 0.05 : 3e-4;
  }

  AnnealPlan resolved_plan() const {
    AnnealPlan p;
    p.t0 = schedules.t0;
    p.gamma = schedules.gamma;
    p.t_min = schedules.t_min;
    p.t_update = schedules.t_update;
    p.t_max = steps;
    auto at = [&](double f) { return long(f * double(steps)); };
    p.beta_start_step = at(schedules.beta_start);
    p.beta_end_step = at(schedules.beta_end);
    p.lambda_start_step = at(schedules.lambda_start);
    p.lambda_end_step = at(schedules.lambda_end);
    p.lambda_mid_start = schedules.lambda_mid_start;
    p.lambda_mid_end = schedules.lambda_mid_end;
    p.harden_start_step = at(schedules.harden_start);
    p.harden_end_step = at(schedules.harden_end);
    p.validate();
    return p;
  }

  SparsityPattern resolved_pattern() const { return SparsityPattern::parse(pattern); }

  MaskDefaults mask_defaults() const {
    MaskDefaults md;
    md.ema_alpha = mask.ema_alpha;
    md.eta_pen = mask.eta_pen;
    md.hard_threshold = mask.theta;
    md.hess_decay = importance.ema_decay;
    md.hess_epsilon = importance.epsilon;
    return md;
  }

  void validate() const {
    require(task == "lm" || task == "classify", "config: task must be lm or classify");
    require(mode == "sparse" || mode == "dense", "config: mode must be sparse or dense");
    require(steps > 0 && batch_size > 0, "config: steps and batch_size must be positive");
    require(loss.lambda_task >= 0 && loss.lambda_kl >= 0, "config: loss weights must be >= 0");
    require(loss.kl_direction == "teacher_leading" || loss.kl_direction == "student_leading",
            "config: bad kl_direction");
    require(importance.backend == "hessian" || importance.backend == "magnitude",
            "config: importance.backend must be hessian or magnitude");
    require(importance.probe_loss == "composite" || importance.probe_loss == "task",
            "config: bad importance.probe_loss");
    require(importance.hvp_backend == "fd" || importance.hvp_backend == "double_backward",
            "config: bad importance.hvp_backend");
    require(importance.probes >= 1, "config: importance.probes must be >= 1");
    require(mask.finalize_ranking == "by_m" || mask.finalize_ranking == "by_score",
            "config: bad mask.finalize_ranking");
    require(anneal_mode == "full" || anneal_mode == "abrupt", "config: bad anneal_mode");
    require(eval.cadence > 0, "config: eval.cadence must be positive");
    if (mode == "sparse") (void)resolved_plan();
    (void)resolved_pattern();
  }
};

// ---- json mapping ----

inline json to_json(const TrainConfig& c) {
  json j;
  j["task"] = c.task;
  j["mode"] = c.mode;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["init_from"] = c.init_from;
  j["model"] = {{"dim", c.model.dim},       {"layers", c.model.layers},
                {"heads", c.model.heads},   {"mlp_ratio", c.model.mlp_ratio},
                {"vocab", c.model.vocab},   {"seq_len", c.model.seq_len},
                {"mlp_dims", c.model.mlp_dims}};
  j["pattern"] = c.pattern;
  j["schedules"] = {{"t0", c.schedules.t0},
                    {"gamma", c.schedules.gamma},
                    {"t_min", c.schedules.t_min},
                    {"t_update", c.schedules.t_update},
                    {"beta_start", c.schedules.beta_start},
                    {"beta_end", c.schedules.beta_end},
                    {"lambda_start", c.schedules.lambda_start},
                    {"lambda_end", c.schedules.lambda_end},
                    {"lambda_mid_start", c.schedules.lambda_mid_start},
                    {"lambda_mid_end", c.schedules.lambda_mid_end},
                    {"harden_start", c.schedules.harden_start},
                    {"harden_end", c.schedules.harden_end}};
  j["loss"] = {{"lambda_task", c.loss.lambda_task},
               {"lambda_kl", c.loss.lambda_kl},
               {"kl_temperature", c.loss.kl_temperature},
               {"kl_direction", c.loss.kl_direction}};
  j["optimizer"] = {{"kind", c.optimizer.kind}, {"lr", c.optimizer.lr},
                    {"momentum", c.optimizer.momentum}, {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}};
  j["importance"] = {{"backend", c.importance.backend},
                     {"ema_decay", c.importance.ema_decay},
                     {"epsilon", c.importance.epsilon},
                     {"std_epsilon", c.importance.std_epsilon},
                     {"probes", c.importance.probes},
                     {"probe_loss", c.importance.probe_loss},
                     {"hvp_backend", c.importance.hvp_backend}};
  j["mask"] = {{"ema_alpha", c.mask.ema_alpha},
               {"eta_pen", c.mask.eta_pen},
               {"theta", c.mask.theta},
               {"finalize_ranking", c.mask.finalize_ranking}};
  j["slorb"] = {{"enabled", c.slorb.enabled}, {"rank_divisor", c.slorb.rank_divisor}};
  j["distill"] = {{"enabled", c.distill.enabled}, {"teacher", c.distill.teacher}};
  j["ste"] = c.ste;
  j["anneal_mode"] = c.anneal_mode;
  j["data"] = {{"corpus_chars", c.data.corpus_chars},
               {"heldout_chars", c.data.heldout_chars},
               {"alphabet", c.data.alphabet},
               {"classify_dim", c.data.classify_dim},
               {"classes", c.data.classes},
               {"class_sep", c.data.class_sep},
               {"eval_examples", c.data.eval_examples}};
  j["eval"] = {{"cadence", c.eval.cadence}};
  return j;
}

inline TrainConfig config_from_json(const json& j) {
  using detail::check_keys;
  using detail::get_to;
  TrainConfig c;
  check_keys(j, "", {"task", "mode", "seed", "steps", "batch_size", "init_from", "model",
                     "pattern", "schedules", "loss", "optimizer", "importance", "mask", "slorb",
                     "distill", "ste", "anneal_mode", "data", "eval"});
  get_to(j, "task", c.task);
  get_to(j, "mode", c.mode);
  get_to(j, "seed", c.seed);
  get_to(j, "steps", c.steps);
  get_to(j, "batch_size", c.batch_size);
  get_to(j, "init_from", c.init_from);
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model", {"dim", "layers", "heads", "mlp_ratio", "vocab", "seq_len", "mlp_dims"});
    get_to(m, "dim", c.model.dim);
    get_to(m, "layers", c.model.layers);
    get_to(m, "heads", c.model.heads);
    get_to(m, "mlp_ratio", c.model.mlp_ratio);
    get_to(m, "vocab", c.model.vocab);
    get_to(m, "seq_len", c.model.seq_len);
    get_to(m, "mlp_dims", c.model.mlp_dims);
  }
  get_to(j, "pattern", c.pattern);
  if (j.contains("schedules")) {
    const json& s = j.at("schedules");
    check_keys(s, "schedules",
               {"t0", "gamma", "t_min", "t_update", "beta_start", "beta_end", "lambda_start",
                "lambda_end", "lambda_mid_start", "lambda_mid_end", "harden_start", "harden_end"});
    get_to(s, "t0", c.schedules.t0);
    get_to(s, "gamma", c.schedules.gamma);
    get_to(s, "t_min", c.schedules.t_min);
    get_to(s, "t_update", c.schedules.t_update);
    get_to(s, "beta_start", c.schedules.beta_start);
    get_to(s, "beta_end", c.schedules.beta_end);
    get_to(s, "lambda_start", c.schedules.lambda_start);
    get_to(s, "lambda_end", c.schedules.lambda_end);
    get_to(s, "lambda_mid_start", c.schedules.lambda_mid_start);
    get_to(s, "lambda_mid_end", c.schedules.lambda_mid_end);
    get_to(s, "harden_start", c.schedules.harden_start);
    get_to(s, "harden_end", c.schedules.harden_end);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, "loss", {"lambda_task", "lambda_kl", "kl_temperature", "kl_direction"});
    get_to(l, "lambda_task", c.loss.lambda_task);
    get_to(l, "lambda_kl", c.loss.lambda_kl);
    get_to(l, "kl_temperature", c.loss.kl_temperature);
    get_to(l, "kl_direction", c.loss.kl_direction);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o, "optimizer", {"kind", "lr", "momentum", "beta1", "beta2", "eps"});
    get_to(o, "kind", c.optimizer.kind);
    get_to(o, "lr", c.optimizer.lr);
    get_to(o, "momentum", c.optimizer.momentum);
    get_to(o, "beta1", c.optimizer.beta1);
    get_to(o, "beta2", c.optimizer.beta2);
    get_to(o, "eps", c.optimizer.eps);
  }
  if (j.contains("importance")) {
    const json& i = j.at("importance");
    check_keys(i, "importance", {"backend", "ema_decay", "epsilon", "std_epsilon", "probes",
                                 "probe_loss", "hvp_backend"});
    get_to(i, "backend", c.importance.backend);
    get_to(i, "ema_decay", c.importance.ema_decay);
    get_to(i, "epsilon", c.importance.epsilon);
    get_to(i, "std_epsilon", c.importance.std_epsilon);
    get_to(i, "probes", c.importance.probes);
    get_to(i, "probe_loss", c.importance.probe_loss);
    get_to(i, "hvp_backend", c.importance.hvp_backend);
  }
  if (j.contains("mask")) {
    const json& m = j.at("mask");
    check_keys(m, "mask", {"ema_alpha", "eta_pen", "theta", "finalize_ranking"});
    get_to(m, "ema_alpha", c.mask.ema_alpha);
    get_to(m, "eta_pen", c.mask.eta_pen);
    get_to(m, "theta", c.mask.theta);
    get_to(m, "finalize_ranking", c.mask.finalize_ranking);
  }
  if (j.contains("slorb")) {
    const json& s = j.at("slorb");
    check_keys(s, "slorb", {"enabled", "rank_divisor"});
    get_to(s, "enabled", c.slorb.enabled);
    get_to(s, "rank_divisor", c.slorb.rank_divisor);
  }
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    check_keys(d, "distill", {"enabled", "teacher"});
    get_to(d, "enabled", c.distill.enabled);
    get_to(d, "teacher", c.distill.teacher);
  }
  get_to(j, "ste", c.ste);
  get_to(j, "anneal_mode", c.anneal_mode);
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "data", {"corpus_chars", "heldout_chars", "alphabet", "classify_dim", "classes",
                           "class_sep", "eval_examples"});
    get_to(d, "corpus_chars", c.data.corpus_chars);
    get_to(d, "heldout_chars", c.data.heldout_chars);
    get_to(d, "alphabet", c.data.alphabet);
    get_to(d, "classify_dim", c.data.classify_dim);
    get_to(d, "classes", c.data.classes);
    get_to(d, "class_sep", c.data.class_sep);
    get_to(d, "eval_examples", c.data.eval_examples);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"cadence"});
    get_to(e, "cadence", c.eval.cadence);
  }
  c.validate();
  return c;
}

/// Applies a dotted-path override like "schedules.gamma=0.99". The value is
/// parsed as JSON when possible, else taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json parsed;
  try {
    parsed = json::parse(value);
  } catch (...) {
    parsed = value;
  }

  json* cur = &j;
  std::size_t pos = 0;
  for (;;) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ConfigError("override has an empty path segment: " + assignment);
    if (dot == std::string::npos) {
      (*cur)[key] = parsed;
      break;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

}  // namespace maskanneal
