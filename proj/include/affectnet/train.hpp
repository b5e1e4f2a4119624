#pragma once

// Two-phase training: phase 1 optimizes the network under the plain task sum,
// phase 2 fine-tunes network and log-variances under the uncertainty-weighted
// loss with s reset to 0. Every epoch appends a JSON record to the RunLog.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "affectnet/config.hpp"
#include "affectnet/data.hpp"
#include "affectnet/evaluate.hpp"
#include "affectnet/model.hpp"
#include "affectnet/objectives.hpp"
#include "affectnet/optim.hpp"

namespace affectnet {

enum class LossMode { kSum, kWeighted };
enum class OptimizerKind { kAdam, kSgd };

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "sum") return LossMode::kSum;
  if (s == "weighted") return LossMode::kWeighted;
  throw ValidationError("loss mode must be 'sum' or 'weighted', got '" + s + "'");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ValidationError("optimizer must be 'adam' or 'sgd', got '" + s + "'");
}

inline const char* to_string(LossMode m) { return m == LossMode::kSum ? "sum" : "weighted"; }
inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::kAdam ? "adam" : "sgd"; }

struct PhaseConfig {
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr = 0.001;
  double weight_decay = 0.001;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: no cap
  LossMode loss = LossMode::kSum;
  bool freeze_backbone = false;

  static PhaseConfig from(const KeyValues& kv, const std::string& prefix, PhaseConfig d) {
    d.optimizer = parse_optimizer(kv.get_string(prefix + "optimizer", to_string(d.optimizer)));
    d.lr = kv.get_double(prefix + "lr", d.lr);
    d.weight_decay = kv.get_double(prefix + "weight_decay", d.weight_decay);
    d.epochs = kv.get_size(prefix + "epochs", d.epochs);
    d.max_steps = kv.get_size(prefix + "max_steps", d.max_steps);
    d.loss = parse_loss_mode(kv.get_string(prefix + "loss", to_string(d.loss)));
    d.freeze_backbone = kv.get_bool(prefix + "freeze_backbone", d.freeze_backbone);
    if (!(d.lr > 0) || !std::isfinite(d.lr)) throw ValidationError(prefix + "lr must be positive");
    if (!(d.weight_decay >= 0)) throw ValidationError(prefix + "weight_decay must be >= 0");
    return d;
  }
};

struct TrainConfig {
  ModelConfig model;
  SyntheticSpec data;
  std::string data_dir;  // non-empty: load an exported dataset instead of generating
  double val_fraction = 0.2;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  PhaseConfig phase1{OptimizerKind::kAdam, 0.001, 0.001, 30, 0, LossMode::kSum, false};
  PhaseConfig phase2{OptimizerKind::kSgd, 0.0001, 0.005, 10, 0, LossMode::kWeighted, false};
  KeyValues source;

  static TrainConfig from(const KeyValues& kv) {
    TrainConfig c;
    c.source = kv;
    c.model = ModelConfig::from(kv, "model.");
    c.data = SyntheticSpec::from(kv, "data.");
    c.data_dir = kv.get_string("data.dir", "");
    c.val_fraction = kv.get_double("data.val_fraction", c.val_fraction);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.seed = kv.get_u64("seed", c.seed);
    c.adam_beta1 = kv.get_double("adam.beta1", c.adam_beta1);
    c.adam_beta2 = kv.get_double("adam.beta2", c.adam_beta2);
    c.adam_eps = kv.get_double("adam.eps", c.adam_eps);
    c.phase1 = PhaseConfig::from(kv, "phase1.", c.phase1);
    c.phase2 = PhaseConfig::from(kv, "phase2.", c.phase2);
    kv.reject_unused();
    if (c.batch_size < 2) throw ValidationError("batch_size must be >= 2");
    if (!(c.val_fraction >= 0 && c.val_fraction < 1)) throw ValidationError("data.val_fraction must lie in [0,1)");
    return c;
  }

  // AFFECTNET_SEED, when set, replaces the configured seed.
  void apply_env() {
    const char* env = std::getenv("AFFECTNET_SEED");
    if (!env || !*env) return;
    const std::string text(env);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw ValidationError("AFFECTNET_SEED must be an unsigned integer, got '" + text + "'");
    }
    seed = v;
    source.set("seed", text);
  }

  AdamOptions adam(const PhaseConfig& p) const { return {p.lr, p.weight_decay, adam_beta1, adam_beta2, adam_eps}; }
};

// Independent streams derived from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct RunLog {
  std::vector<nlohmann::json> records;

  void add(nlohmann::json r) { records.push_back(std::move(r)); }

  std::vector<nlohmann::json> of(const std::string& kind) const {
    std::vector<nlohmann::json> out;
    for (const auto& r : records)
      if (r.at("record") == kind) out.push_back(r);
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += r.dump() + "\n";
    return out;
  }
};

template <class T>
std::vector<PredictionRecord> predict_records(const MTANet<T>& model, const Dataset& d, std::size_t batch_size = 64) {
  std::vector<PredictionRecord> out;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(d.size(), start + batch_size); ++i) rows.push_back(i);
    auto [x, labels] = make_batch<T>(d, rows);
    const auto o = model.predict(x);
    const auto disc = decision_rules(o);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      PredictionRecord p;
      p.frame_id = d.ids[rows[r]];
      p.valence = o.va.data()[2 * r];
      p.arousal = o.va.data()[2 * r + 1];
      for (std::size_t k = 0; k < kNumAUs; ++k) p.au[k] = detail::stable_sigmoid(static_cast<double>(o.au_logits.data()[r * kNumAUs + k]));
      p.expr = static_cast<int>(disc.expr[r]);
      out.push_back(p);
    }
  }
  return out;
}

template <class T>
EvalReport evaluate_model(const MTANet<T>& model, const Dataset& d) {
  return compute_report(join_for_eval(predict_records(model, d), to_label_records(d)));
}

struct TrainResult {
  MTANet<float> model;
  RunLog log;
  std::vector<std::vector<float>> best_values;  // parameter snapshot with the best validation score
  double best_score = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  Dataset train_set, val_set;
};

// Called after each optimizer step with (phase, global step, batch total loss).
using StepObserver = std::function<void(int, std::size_t, double)>;

namespace detail {

inline nlohmann::json metrics_json(const EvalReport& r) {
  return {{"ccc_valence", number_or_null(r.ccc_valence)},
          {"ccc_arousal", number_or_null(r.ccc_arousal)},
          {"f1_au", number_or_null(r.f1_au)},
          {"f1_expr", number_or_null(r.f1_expr)},
          {"accuracy_expr", number_or_null(r.accuracy_expr)}};
}

inline std::vector<std::vector<float>> snapshot(const MTANet<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

inline void restore(MTANet<float>& m, const std::vector<std::vector<float>>& values) {
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(values[i].begin(), values[i].end(), params[i].value.mutable_data().begin());
}

}  // namespace detail

inline TrainResult run_training(const TrainConfig& cfg, const Dataset& all, const StepObserver& observer = {}) {
  if (all.size() == 0) throw ValidationError("training: dataset is empty");
  if (all.image_shape != Shape{cfg.model.in_channels, cfg.model.height, cfg.model.width}) {
    throw ShapeError("training: dataset images " + shape_str(all.image_shape) + " do not match model input");
  }
  const auto [train_rows, val_rows] = split_indices(all.size(), cfg.val_fraction, cfg.seed);
  TrainResult res{MTANet<float>(cfg.model, derive_seed(cfg.seed, 0)), {}, {}, std::numeric_limits<double>::quiet_NaN(), 0, 0,
                  all.subset(train_rows), all.subset(val_rows)};
  MTANet<float>& model = res.model;
  const Dataset& train = res.train_set;
  const Dataset& val = res.val_set;
  if (train.size() < 2) throw ValidationError("training: fewer than two training samples");

  nlohmann::json echo = nlohmann::json::object();
  for (const auto& [k, v] : cfg.source.entries()) echo[k] = v;
  res.log.add({{"record", "config"},
               {"config", echo},
               {"seed", cfg.seed},
               {"train_samples", train.size()},
               {"val_samples", val.size()},
               {"parameters", model.parameter_count()}});

  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, 1));
  std::size_t epoch = 0;

  for (int phase = 1; phase <= 2; ++phase) {
    const PhaseConfig& pc = phase == 1 ? cfg.phase1 : cfg.phase2;
    if (pc.epochs == 0) continue;
    if (phase == 2) model.loss_weights().reset();
    const bool weighted = pc.loss == LossMode::kWeighted;

    ParameterList<float> params;
    for (auto& p : model.parameters(weighted)) {
      if (pc.freeze_backbone && p.name.rfind("backbone.", 0) == 0) continue;
      params.push_back(p);
    }
    std::variant<Adam<float>, Sgd<float>> opt =
        pc.optimizer == OptimizerKind::kAdam ? std::variant<Adam<float>, Sgd<float>>(Adam<float>(params, cfg.adam(pc)))
                                             : std::variant<Adam<float>, Sgd<float>>(Sgd<float>(params, {pc.lr, pc.weight_decay}));
    res.log.add({{"record", "phase_start"},
                 {"phase", phase},
                 {"optimizer", to_string(pc.optimizer)},
                 {"loss", to_string(pc.loss)},
                 {"lr", pc.lr},
                 {"weight_decay", pc.weight_decay},
                 {"epochs", pc.epochs},
                 {"freeze_backbone", pc.freeze_backbone},
                 {"trainable_tensors", params.size()}});

    std::optional<double> initial_loss;
    std::size_t over_limit = 0, phase_steps = 0;
    bool first_step = true, capped = false;
    for (std::size_t e = 0; e < pc.epochs && !capped; ++e) {
      ++epoch;
      double sum_total = 0, sum_va = 0, sum_au = 0, sum_expr = 0;
      std::size_t n_batches = 0, n_va = 0, n_au = 0, n_expr = 0;
      const auto batches = batch_iter(train.labels, cfg.batch_size, derive_seed(cfg.seed, 1000 + epoch));
      for (const auto& rows : batches) {
        if (pc.max_steps && phase_steps >= pc.max_steps) {
          capped = true;
          break;
        }
        auto [x, labels] = make_batch<float>(train, rows);
        Tape<float> tape;
        const auto out = model.forward(x, true, dropout_rng);
        const auto l = task_losses(out, labels);
        const auto total = weighted ? weighted_loss(l, model.loss_weights()) : total_sum_loss(l);
        const double value = total.item();
        if (!std::isfinite(value)) {
          throw NumericalError("phase " + std::to_string(phase) + " epoch " + std::to_string(epoch) +
                               ": non-finite loss");
        }
        if (first_step && phase == 2 && weighted) {
          const double identity = 0.5 * l.va.value.item() + l.au.value.item() + l.expr.value.item();
          res.log.add({{"record", "phase2_first_step"},
                       {"weighted_loss", value},
                       {"identity", identity},
                       {"abs_diff", std::abs(value - identity)}});
        }
        first_step = false;
        tape.backward(total);
        std::visit([](auto& o) { o.step(); }, opt);
        std::visit([](auto& o) { o.zero_grad(); }, opt);
        model.zero_grad();
        if (weighted && !model.loss_weights().finite()) throw NumericalError("loss log-variances became non-finite");
        ++phase_steps;
        ++res.steps;
        if (observer) observer(phase, res.steps, value);

        sum_total += value;
        ++n_batches;
        if (l.va.present()) sum_va += l.va.value.item(), ++n_va;
        if (l.au.present()) sum_au += l.au.value.item(), ++n_au;
        if (l.expr.present()) sum_expr += l.expr.value.item(), ++n_expr;
      }
      if (n_batches == 0) break;
      const double mean_total = sum_total / static_cast<double>(n_batches);
      auto mean_or_null = [](double s, std::size_t n) { return n ? nlohmann::json(s / static_cast<double>(n)) : nlohmann::json(); };
      const auto sig = model.loss_weights().sigmas();
      nlohmann::json rec{{"record", "epoch"},
                         {"phase", phase},
                         {"epoch", epoch},
                         {"steps", res.steps},
                         {"loss_total", mean_total},
                         {"loss_va", mean_or_null(sum_va, n_va)},
                         {"loss_au", mean_or_null(sum_au, n_au)},
                         {"loss_expr", mean_or_null(sum_expr, n_expr)},
                         {"sigma", {{"va", sig[0]}, {"au", sig[1]}, {"expr", sig[2]}}}};
      if (val.size() > 0) {
        const EvalReport r = evaluate_model(model, val);
        const double score = headline_score(r);
        rec["val"] = detail::metrics_json(r);
        rec["val_score"] = detail::number_or_null(score);
        if (std::isfinite(score) && (!std::isfinite(res.best_score) || score > res.best_score)) {
          res.best_score = score;
          res.best_epoch = epoch;
          res.best_values = detail::snapshot(model);
        }
      }
      res.log.add(rec);

      if (!initial_loss) initial_loss = mean_total;
      over_limit = mean_total > 10 * std::abs(*initial_loss) ? over_limit + 1 : 0;
      if (over_limit >= 3) {
        throw NumericalError("phase " + std::to_string(phase) + " diverged: loss above 10x its initial value for 3 epochs");
      }
    }
    const auto s = model.loss_weights();
    res.log.add({{"record", "phase_end"},
                 {"phase", phase},
                 {"epoch", epoch},
                 {"steps", phase_steps},
                 {"s", {{"va", s.s_va().item()}, {"au", s.s_au().item()}, {"expr", s.s_expr().item()}}}});
  }
  res.log.add({{"record", "run_end"},
               {"epochs", epoch},
               {"steps", res.steps},
               {"best_epoch", res.best_epoch},
               {"best_score", detail::number_or_null(res.best_score)}});
  return res;
}

inline Dataset load_training_data(const TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) return import_dataset(cfg.data_dir);
  SyntheticSpec spec = cfg.data;
  spec.channels = cfg.model.in_channels;
  spec.height = cfg.model.height;
  spec.width = cfg.model.width;
  return gen_synthetic(spec);
}

struct SynergyReport {
  EvalReport joint, expr_only;
  std::size_t train_samples = 0, expr_only_samples = 0, val_samples = 0;

  nlohmann::json to_json() const {
    return {{"joint", detail::metrics_json(joint)},
            {"expr_only", detail::metrics_json(expr_only)},
            {"train_samples", train_samples},
            {"expr_only_samples", expr_only_samples},
            {"val_samples", val_samples},
            {"joint_expr_accuracy_at_least_single", joint.accuracy_expr >= expr_only.accuracy_expr}};
  }
};

// Joint training against an expression-only model on the same masked training
// rows; both are scored on the same held-out split. The outcome is reported,
// never asserted.
inline SynergyReport run_synergy_check(const TrainConfig& cfg, const Dataset& all) {
  const auto [train_rows, val_rows] = split_indices(all.size(), cfg.val_fraction, cfg.seed);
  if (val_rows.empty()) throw ValidationError("synergy check: data.val_fraction leaves no validation rows");
  const Dataset train = all.subset(train_rows), val = all.subset(val_rows);
  TrainConfig inner = cfg;
  inner.val_fraction = 0;

  std::vector<std::size_t> expr_rows;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train.labels.expr_mask[i]) expr_rows.push_back(i);
  Dataset only = train.subset(expr_rows);
  std::fill(only.labels.va_mask.begin(), only.labels.va_mask.end(), 0);
  std::fill(only.labels.au_mask.begin(), only.labels.au_mask.end(), 0);

  SynergyReport r;
  r.train_samples = train.size();
  r.expr_only_samples = only.size();
  r.val_samples = val.size();
  r.joint = evaluate_model(run_training(inner, train).model, val);
  r.expr_only = evaluate_model(run_training(inner, only).model, val);
  return r;
}

// Writes runlog.jsonl, final.ckpt, best.ckpt (when a validation split exists)
// and the validation predictions/labels CSVs.
inline void write_outputs(const TrainResult& res, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir + "/runlog.jsonl", res.log.to_jsonl());
  save_checkpoint(res.model, out_dir + "/final.ckpt");
  if (!res.best_values.empty()) {
    MTANet<float> best(res.model.config());
    detail::restore(best, res.best_values);
    save_checkpoint(best, out_dir + "/best.ckpt");
  }
  if (res.val_set.size() > 0) {
    write_text(out_dir + "/val_predictions.csv", format_predictions_csv(predict_records(res.model, res.val_set)));
    write_text(out_dir + "/val_labels.csv", format_labels_csv(to_label_records(res.val_set)));
  }
}

}  // namespace affectnet
