#pragma once

// Metrics over joined prediction/label series, the results table, and the
// JSON report.

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "affectnet/data.hpp"
#include "affectnet/objectives.hpp"

namespace affectnet {

struct BaselineRow {
  const char* valence = "0.14";
  const char* arousal = "0.24";
  const char* aus = "0.31";
  const char* expression = "0.36";
};

// Tasks with too few rows (VA < 2, AU or expression 0) report NaN.
inline EvalReport compute_report(const JoinedSeries& j) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  EvalReport r;
  r.n_va = j.pred_valence.size();
  r.n_au = j.pred_au.size() / kNumAUs;
  r.n_expr = j.pred_expr.size();
  r.unmatched_predictions = j.unmatched_predictions;
  r.unmatched_labels = j.unmatched_labels;
  if (r.n_va >= 2) {
    const auto c = metric_ccc(j.pred_valence, j.label_valence, j.pred_arousal, j.label_arousal);
    r.ccc_valence = c.valence;
    r.ccc_arousal = c.arousal;
  } else {
    r.ccc_valence = r.ccc_arousal = nan;
  }
  if (r.n_au > 0) {
    auto f = metric_f1(j.pred_au, j.label_au, F1Scheme::kAU8);
    r.f1_au = f.mean;
    r.f1_per_au = std::move(f.per_label);
  } else {
    r.f1_au = nan;
  }
  if (r.n_expr > 0) {
    auto f = metric_f1(j.pred_expr, j.label_expr, F1Scheme::kMacro7);
    r.f1_expr = f.mean;
    r.f1_per_class = std::move(f.per_label);
    r.accuracy_expr = accuracy(j.pred_expr, j.label_expr);
  } else {
    r.f1_expr = r.accuracy_expr = nan;
  }
  return r;
}

inline EvalReport run_eval(const std::string& pred_path, const std::string& label_path) {
  return compute_report(join_for_eval(load_predictions_csv(pred_path), load_labels_csv(label_path)));
}

// Mean of the four table metrics that are defined.
inline double headline_score(const EvalReport& r) {
  double s = 0;
  int n = 0;
  for (double v : {r.ccc_valence, r.ccc_arousal, r.f1_au, r.f1_expr})
    if (std::isfinite(v)) {
      s += v;
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

namespace detail {

inline std::string cell(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string row(const std::string& name, const std::string& a, const std::string& b, const std::string& c,
                       const std::string& d) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %10s %10s %10s %12s\n", name.c_str(), a.c_str(), b.c_str(), c.c_str(),
                d.c_str());
  return buf;
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace detail

inline std::string format_table(const EvalReport& r, bool show_baseline) {
  std::string out = detail::row("", "Valence", "Arousal", "AUs", "Expression");
  if (show_baseline) {
    const BaselineRow b;
    out += detail::row("Baseline", b.valence, b.arousal, b.aus, b.expression);
  }
  out += detail::row("This run", detail::cell(r.ccc_valence), detail::cell(r.ccc_arousal), detail::cell(r.f1_au),
                     detail::cell(r.f1_expr));
  out += "\nexpression accuracy " + detail::cell(r.accuracy_expr) + "\n";
  out += "rows: va " + std::to_string(r.n_va) + ", au " + std::to_string(r.n_au) + ", expr " + std::to_string(r.n_expr) +
         "; unmatched predictions " + std::to_string(r.unmatched_predictions) + ", unmatched labels " +
         std::to_string(r.unmatched_labels) + "\n";
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  using detail::number_or_null;
  nlohmann::json j;
  j["ccc_valence"] = number_or_null(r.ccc_valence);
  j["ccc_arousal"] = number_or_null(r.ccc_arousal);
  j["f1_au"] = number_or_null(r.f1_au);
  j["f1_expr"] = number_or_null(r.f1_expr);
  j["accuracy_expr"] = number_or_null(r.accuracy_expr);
  j["f1_per_au"] = r.f1_per_au;
  j["f1_per_class"] = r.f1_per_class;
  j["n_va"] = r.n_va;
  j["n_au"] = r.n_au;
  j["n_expr"] = r.n_expr;
  j["unmatched_predictions"] = r.unmatched_predictions;
  j["unmatched_labels"] = r.unmatched_labels;
  return j;
}

}  // namespace affectnet
