// affectnet command-line entry point.
//
// Exit codes: 0 success, 1 validation or parse error, 2 numerical failure
// (non-finite values, divergence, failed gradient check), 3 internal error.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "affectnet/affectnet.hpp"

namespace {

using namespace affectnet;

enum ExitCode { kOk = 0, kValidation = 1, kNumerical = 2, kInternal = 3 };

std::string group_of(const std::string& frame_id) {
  const auto slash = frame_id.rfind('/');
  return slash == std::string::npos ? std::string() : frame_id.substr(0, slash);
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool freeze_backbone) {
  TrainConfig cfg = TrainConfig::from(KeyValues::load(config_path));
  cfg.apply_env();
  if (freeze_backbone) {
    cfg.phase2.freeze_backbone = true;
    cfg.source.set("phase2.freeze_backbone", "true");
  }
  const Dataset data = load_training_data(cfg);
  std::printf("training on %zu samples (seed %llu), %zu parameters\n", data.size(),
              static_cast<unsigned long long>(cfg.seed), expected_parameter_count(cfg.model));
  const TrainResult res = run_training(cfg, data, [](int phase, std::size_t step, double loss) {
    if (step % 50 == 0) std::printf("  phase %d step %zu loss %.5f\n", phase, step, loss);
  });
  write_outputs(res, out_dir);
  for (const auto& r : res.log.of("phase_end")) std::printf("%s\n", r.dump().c_str());
  if (!res.val_set.ids.empty()) {
    std::printf("final validation:\n%s", format_table(evaluate_model(res.model, res.val_set), false).c_str());
  }
  std::printf("wrote %s/{runlog.jsonl,final.ckpt%s}\n", out_dir.c_str(), res.best_values.empty() ? "" : ",best.ckpt");
  return kOk;
}

int cmd_eval(const std::string& pred, const std::string& labels, bool show_baseline, const std::string& report_path,
             bool per_group) {
  const auto joined = join_for_eval(load_predictions_csv(pred), load_labels_csv(labels));
  const EvalReport r = compute_report(joined);
  std::printf("%s", format_table(r, show_baseline).c_str());
  nlohmann::json j = report_json(r);
  if (per_group) {
    std::vector<std::string> groups;
    for (const auto& id : joined.va_ids) groups.push_back(group_of(id));
    const double v = ccc_per_group(joined.pred_valence, joined.label_valence, groups);
    const double a = ccc_per_group(joined.pred_arousal, joined.label_arousal, groups);
    std::printf("per-group mean CCC: valence %.4f, arousal %.4f\n", v, a);
    j["ccc_valence_per_group"] = v;
    j["ccc_arousal_per_group"] = a;
  }
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  return kOk;
}

int cmd_gradcheck(const std::string& scope, const std::string& corrupt) {
  detail::corrupted_backward_op() = corrupt;
  const GradSuiteReport r = run_gradcheck(parse_grad_scope(scope));
  for (const auto& c : r.cases) {
    std::printf("%-4s %-32s max_rel_error %.3e (tol %.0e, %zu checked, %zu near kinks)\n", c.pass() ? "ok" : "FAIL",
                c.name.c_str(), c.max_rel_error, c.tolerance, c.checked, c.skipped);
  }
  std::printf("%zu cases in %.2f s\n", r.cases.size(), r.seconds);
  if (r.passed()) return kOk;
  for (const auto& name : r.failures()) std::fprintf(stderr, "gradient check failed: %s\n", name.c_str());
  return kNumerical;
}

int cmd_synergy(const std::string& config_path, const std::string& report_path) {
  TrainConfig cfg = TrainConfig::from(KeyValues::load(config_path));
  cfg.apply_env();
  const SynergyReport r = run_synergy_check(cfg, load_training_data(cfg));
  std::printf("validation rows %zu; training rows %zu joint, %zu expression-only\n", r.val_samples, r.train_samples,
              r.expr_only_samples);
  std::printf("%-16s %10s %10s\n", "", "expr acc", "expr F1");
  std::printf("%-16s %10s %10s\n", "joint", detail::cell(r.joint.accuracy_expr).c_str(), detail::cell(r.joint.f1_expr).c_str());
  std::printf("%-16s %10s %10s\n", "expression only", detail::cell(r.expr_only.accuracy_expr).c_str(),
              detail::cell(r.expr_only.f1_expr).c_str());
  if (!report_path.empty()) write_text(report_path, r.to_json().dump(2) + "\n");
  return kOk;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
  const KeyValues kv = KeyValues::load(spec_path);
  const SyntheticSpec spec = SyntheticSpec::from(kv);
  kv.reject_unused();
  const Dataset d = gen_synthetic(spec);
  export_dataset(d, out_dir);
  std::printf("wrote %zu samples to %s\n", d.size(), out_dir.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task facial affect network: training, evaluation, gradient checks"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "affectnet-run";
  auto* train = app.add_subcommand("train", "Two-phase training from a config file");
  train->add_option("--config", config_path, "key = value config file")->required();
  train->add_option("--out", out_dir, "output directory");
  bool freeze_backbone = false;
  train->add_flag("--freeze-backbone", freeze_backbone, "keep backbone weights fixed during phase 2");

  std::string pred, labels, report;
  bool show_baseline = false, per_group = false;
  auto* eval = app.add_subcommand("eval", "Score a predictions CSV against a labels CSV");
  eval->add_option("--pred", pred, "predictions CSV")->required();
  eval->add_option("--labels", labels, "labels CSV")->required();
  eval->add_flag("--show-baseline", show_baseline, "add the published baseline row");
  eval->add_option("--report", report, "write a JSON report here");
  eval->add_flag("--per-group", per_group, "also report CCC averaged over frame_id groups (text before the last '/')");

  std::string scope = "ops", corrupt;
  auto* grad = app.add_subcommand("gradcheck", "Run the gradient-check suite");
  grad->add_option("--scope", scope, "ops, blocks or model")->check(CLI::IsMember({"ops", "blocks", "model"}));
  grad->add_option("--corrupt", corrupt, "skew the backward rule of this op (negative control)")->group("");

  std::string spec_path, data_out;
  std::string synergy_config, synergy_report;
  auto* synergy = app.add_subcommand("synergy", "Joint vs expression-only training on the same masked data (report only)");
  synergy->add_option("--config", synergy_config, "key = value config file")->required();
  synergy->add_option("--report", synergy_report, "write a JSON report here");

  auto* gen = app.add_subcommand("gen-data", "Generate and export a synthetic dataset");
  gen->add_option("--spec", spec_path, "key = value spec file")->required();
  gen->add_option("--out", data_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, freeze_backbone);
    if (*eval) return cmd_eval(pred, labels, show_baseline, report, per_group);
    if (*grad) return cmd_gradcheck(scope, corrupt);
    if (*synergy) return cmd_synergy(synergy_config, synergy_report);
    if (*gen) return cmd_gen_data(spec_path, data_out);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
  return kInternal;
}
