// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only if all
// pass.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "affectnet/affectnet.hpp"

namespace {

using namespace affectnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr double kGradBudgetSeconds = 60;
constexpr double kIdentityTol = 1e-6;
constexpr double kCccOracleTol = 1e-6;
constexpr double kGoldenTol = 1e-9;
constexpr std::size_t kOverfitSamples = 64;
constexpr std::size_t kOverfitSteps = 500;
constexpr double kOverfitBudgetSeconds = 300;
constexpr double kOverfitAuF1 = 0.95;
constexpr double kOverfitCcc = 0.9;
constexpr double kPhase2IdentityTol = 1e-5;
constexpr std::size_t kAblationSteps = 100;
constexpr double kSaturationTol = 1e-6;

const std::string kData = AFFECTNET_TEST_DATA;
const std::string kCli = AFFECTNET_CLI;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / ("affectnet_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

// ---------------------------------------------------------------------------

void gradient_suite(Verdict& v) {
  const auto t0 = Clock::now();
  std::size_t cases = 0;
  double worst = 0;
  for (auto scope : {GradScope::kOps, GradScope::kBlocks, GradScope::kModel}) {
    const auto r = run_gradcheck(scope);
    cases += r.cases.size();
    for (const auto& c : r.cases) {
      worst = std::max(worst, c.max_rel_error / c.tolerance);
      v.require(c.pass(), c.name + " rel " + fmt(c.max_rel_error) + " tol " + fmt(c.tolerance));
    }
  }
  const double secs = seconds_since(t0);
  v.require(secs < kGradBudgetSeconds, "runtime " + fmt(secs) + " s");
  v.detail << cases << " cases, worst error/tolerance " << fmt(worst) << ", " << fmt(secs) << " s";
}

TaskLosses<double> scalar_losses(double va, double au, double expr) {
  return {{Tensor64::scalar(va), 4}, {Tensor64::scalar(au), 4}, {Tensor64::scalar(expr), 4}};
}

void loss_identities(Verdict& v) {
  constexpr std::size_t n = 6;
  std::mt19937_64 rng(21);
  const Mask all(n, 1);
  double worst = 0;
  auto check = [&](double got, double want, const std::string& name) {
    worst = std::max(worst, std::abs(got - want));
    v.require(std::abs(got - want) < kIdentityTol, name + " " + fmt(got) + " vs " + fmt(want));
  };

  std::vector<double> same(n * kNumExpressions);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < kNumExpressions; ++c) same[i * kNumExpressions + c] = 0.37 * static_cast<double>(i);
  std::vector<std::size_t> classes(n);
  for (auto& c : classes) c = rng() % kNumExpressions;
  check(expr_loss(Tensor64({n, kNumExpressions}, same), classes, all).value.item(), std::log(7.0), "expr ln7");

  std::vector<std::uint8_t> au_target(n * kNumAUs);
  for (auto& a : au_target) a = static_cast<std::uint8_t>(rng() & 1);
  check(au_loss(Tensor64::zeros({n, kNumAUs}), au_target, all).value.item(), 8 * std::log(2.0), "au 8ln2");

  std::vector<double> x(50);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& e : x) e = u(rng);
  check(ccc(x, x), 1.0, "ccc(x,x)");

  std::vector<float> va_target(2 * n);
  std::vector<double> va_pred(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) va_pred[i] = va_target[i] = static_cast<float>(u(rng) * 0.9);
  check(va_loss(Tensor64({n, 2}, va_pred), va_target, all).value.item(), 0.0, "va_loss(pred=target)");

  const LossWeights<double> unit;
  const auto l = scalar_losses(0.83, 2.9, 1.4);
  check(weighted_loss(l, unit).item(), 0.5 * 0.83 + 2.9 + 1.4, "weighted at s=0");
  v.detail << "max deviation " << fmt(worst);
}

long double oracle_ccc(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  const long double nn = x.size();
  return 2 * sxy / nn / (sxx / nn + syy / nn + (mx - my) * (mx - my));
}

void ccc_oracle(Verdict& v) {
  std::mt19937_64 rng(1234);
  std::normal_distribution<double> g(0, 1);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(100), y(100);
    const double rho = std::uniform_real_distribution<double>(-1, 1)(rng);
    for (std::size_t i = 0; i < 100; ++i) {
      x[i] = g(rng);
      y[i] = 0.3 + 1.2 * (rho * x[i] + std::sqrt(1 - rho * rho) * g(rng));
    }
    worst = std::max(worst, static_cast<double>(std::abs(ccc(x, y) - oracle_ccc(x, y))));
  }
  v.require(worst < kCccOracleTol, "oracle deviation " + fmt(worst));
  const double anti = ccc(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1});
  v.require(std::abs(anti + 1) < kCccOracleTol, "[1,2,3] vs [3,2,1] gave " + fmt(anti));
  v.detail << "max oracle deviation " << fmt(worst) << ", anti-ordered " << fmt(anti);
}

void golden_fixture(Verdict& v) {
  const auto r = run_eval(kData + "/fixture_pred.csv", kData + "/fixture_labels.csv");
  const auto want = nlohmann::json::parse(slurp(kData + "/fixture_expected.json"));
  const auto got = report_json(r);
  double worst = 0;
  for (auto it = want.begin(); it != want.end(); ++it) {
    if (it->is_number_float()) {
      worst = std::max(worst, std::abs(got.at(it.key()).get<double>() - it->get<double>()));
    } else if (it->is_array()) {
      for (std::size_t k = 0; k < it->size(); ++k)
        worst = std::max(worst, std::abs(got.at(it.key())[k].get<double>() - (*it)[k].get<double>()));
    } else {
      v.require(got.at(it.key()) == *it, it.key());
    }
  }
  v.require(worst < kGoldenTol, "golden deviation " + fmt(worst));

  const auto labels = load_labels_csv(kData + "/fixture_labels.csv");
  std::vector<PredictionRecord> self;
  for (const auto& l : labels) {
    PredictionRecord p;
    p.frame_id = l.frame_id;
    p.valence = l.valence.value_or(0);
    p.arousal = l.arousal.value_or(0);
    for (std::size_t k = 0; k < kNumAUs; ++k) p.au[k] = l.au[k].value_or(0);
    p.expr = l.expr.value_or(0);
    self.push_back(p);
  }
  const auto s = compute_report(join_for_eval(self, labels));
  for (double m : {s.ccc_valence, s.ccc_arousal, s.f1_au, s.f1_expr, s.accuracy_expr})
    v.require(std::abs(m - 1) < kGoldenTol, "labels vs labels " + fmt(m));
  v.detail << "10-row fixture max deviation " << fmt(worst) << ", labels vs labels all ones";
}

KeyValues overfit_kv(std::size_t steps) {
  KeyValues kv;
  kv.set("data.n_samples", std::to_string(kOverfitSamples));
  kv.set("data.val_fraction", "0");
  kv.set("phase1.epochs", "100000");
  kv.set("phase1.max_steps", std::to_string(steps));
  kv.set("phase2.epochs", "0");
  return kv;
}

void overfit(Verdict& v) {
  const auto cfg = TrainConfig::from(overfit_kv(kOverfitSteps));
  const auto data = load_training_data(cfg);
  const auto t0 = Clock::now();
  const auto res = run_training(cfg, data);
  const double secs = seconds_since(t0);
  const auto r = evaluate_model(res.model, res.train_set);
  v.require(res.steps <= kOverfitSteps, "steps " + std::to_string(res.steps));
  v.require(r.accuracy_expr == 1.0, "expression accuracy " + fmt(r.accuracy_expr));
  v.require(r.f1_au >= kOverfitAuF1, "AU F1 " + fmt(r.f1_au));
  v.require(r.ccc_valence >= kOverfitCcc, "valence CCC " + fmt(r.ccc_valence));
  v.require(r.ccc_arousal >= kOverfitCcc, "arousal CCC " + fmt(r.ccc_arousal));
  v.require(secs < kOverfitBudgetSeconds, "runtime " + fmt(secs) + " s");
  v.detail << res.steps << " steps, " << fmt(secs) << " s: expr acc " << fmt(r.accuracy_expr) << ", AU F1 "
           << fmt(r.f1_au) << ", CCC valence " << fmt(r.ccc_valence) << ", arousal " << fmt(r.ccc_arousal);
}

KeyValues protocol_kv() {
  KeyValues kv;
  kv.set("data.n_samples", "48");
  kv.set("seed", "3");
  kv.set("phase1.epochs", "100000");
  kv.set("phase1.max_steps", "40");
  kv.set("phase2.epochs", "3");
  return kv;
}

void two_phase(Verdict& v) {
  const auto cfg = TrainConfig::from(protocol_kv());
  const auto data = load_training_data(cfg);
  const auto a = run_training(cfg, data);
  const auto b = run_training(cfg, data);

  const auto first = a.log.of("phase2_first_step");
  double diff = std::numeric_limits<double>::infinity();
  if (first.size() == 1) diff = first[0]["abs_diff"].get<double>();
  v.require(diff < kPhase2IdentityTol, "phase-2 first-step identity off by " + fmt(diff));
  v.require(a.model.loss_weights().finite(), "s not finite");
  const auto starts = a.log.of("phase_start"), ends = a.log.of("phase_end");
  v.require(starts.size() == 2 && ends.size() == 2, "RunLog phase records");
  v.require(!starts.empty() && starts.front()["phase"] == 1 && starts.back()["phase"] == 2, "phase numbering");

  const auto dir = scratch_dir();
  save_checkpoint(a.model, (dir / "a.ckpt").string());
  save_checkpoint(b.model, (dir / "b.ckpt").string());
  const bool same = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");
  v.require(same, "same seed gave different checkpoints");
  v.require(a.log.to_jsonl() == b.log.to_jsonl(), "same seed gave different RunLogs");
  const auto s = a.model.loss_weights().sigmas();
  v.detail << "first-step |diff| " << fmt(diff) << ", sigma (" << fmt(s[0]) << ", " << fmt(s[1]) << ", "
           << fmt(s[2]) << "), checkpoints " << (same ? "identical" : "differ");
}

void ablation(Verdict& v) {
  for (const char* mode : {"none", "se", "cbam"}) {
    auto kv = overfit_kv(kAblationSteps);
    kv.set("model.attention", mode);
    kv.set("phase2.epochs", "2");
    const auto cfg = TrainConfig::from(kv);
    try {
      const auto res = run_training(cfg, load_training_data(cfg));
      const auto ends = res.log.of("phase_end");
      std::vector<double> sum_loss;
      double weighted = 0;
      for (const auto& e : res.log.of("epoch")) {
        if (e["phase"] == 1) sum_loss.push_back(e["loss_total"].get<double>());
        if (e["phase"] == 2) weighted = e["loss_total"].get<double>();
      }
      v.require(ends.size() == 2 && sum_loss.size() >= 2 && std::isfinite(weighted), std::string(mode) + " did not finish");
      if (sum_loss.size() < 2) continue;
      v.require(sum_loss.back() < sum_loss.front(), std::string(mode) + " sum loss did not decrease");
      v.detail << mode << " sum loss " << fmt(sum_loss.front()) << " -> " << fmt(sum_loss.back()) << ", weighted "
               << fmt(weighted) << "; ";
    } catch (const NumericalError& e) {
      v.require(false, std::string(mode) + " diverged: " + e.what());
    }
  }

  ModelConfig plain_cfg;
  plain_cfg.attention = AttentionMode::kNone;
  double worst = 0;
  for (auto mode : {AttentionMode::kSE, AttentionMode::kCBAM}) {
    ModelConfig c;
    c.attention = mode;
    MTANet<double> attended(c, 4);
    attended.saturate_attention(40.0);
    MTANet<double> plain(plain_cfg, 5);
    v.require(plain.copy_matching(attended) == plain.parameters().size(), "parameter names differ across modes");
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> px(2 * c.in_channels * c.height * c.width);
    for (auto& p : px) p = u(rng);
    const Tensor64 x({2, c.in_channels, c.height, c.width}, px);
    const auto oa = attended.predict(x), op = plain.predict(x);
    for (std::size_t i = 0; i < oa.expr_logits.numel(); ++i)
      worst = std::max(worst, std::abs(oa.expr_logits.data()[i] - op.expr_logits.data()[i]));
    for (std::size_t i = 0; i < oa.au_logits.numel(); ++i)
      worst = std::max(worst, std::abs(oa.au_logits.data()[i] - op.au_logits.data()[i]));
    for (std::size_t i = 0; i < oa.va.numel(); ++i) worst = std::max(worst, std::abs(oa.va.data()[i] - op.va.data()[i]));
  }
  v.require(worst < kSaturationTol, "saturated gates deviate by " + fmt(worst));
  v.detail << "saturated-gate model deviation " << fmt(worst);
}

template <class Fn>
std::string error_of(Fn fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

void checkpoint_round_trip(Verdict& v) {
  const auto dir = scratch_dir();
  const ModelConfig cfg;
  MTANet<float> m(cfg, 17);
  m.loss_weights().set(0.1f, -0.2f, 0.3f);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);
  const auto back = load_checkpoint<float>(path, checkpoint_config(path));
  const auto pa = m.parameters(), pb = back.parameters();
  bool bitwise = pa.size() == pb.size();
  for (std::size_t i = 0; bitwise && i < pa.size(); ++i)
    bitwise = pa[i].name == pb[i].name && pa[i].value.numel() == pb[i].value.numel() &&
              std::memcmp(pa[i].value.data().data(), pb[i].value.data().data(), 4 * pa[i].value.numel()) == 0;
  v.require(bitwise, "round trip not bitwise");
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> px(3 * cfg.in_channels * cfg.height * cfg.width);
  for (auto& p : px) p = u(rng);
  const Tensor x({3, cfg.in_channels, cfg.height, cfg.width}, px);
  const auto oa = m.predict(x), ob = back.predict(x);
  const bool same_forward =
      std::memcmp(oa.va.data().data(), ob.va.data().data(), 4 * oa.va.numel()) == 0 &&
      std::memcmp(oa.au_logits.data().data(), ob.au_logits.data().data(), 4 * oa.au_logits.numel()) == 0 &&
      std::memcmp(oa.expr_logits.data().data(), ob.expr_logits.data().data(), 4 * oa.expr_logits.numel()) == 0;
  v.require(same_forward, "forward after reload differs");

  const std::string bytes = slurp(path);
  const auto payload = bytes.find("\nend\n") + 5;
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return (dir / name).string();
  };
  std::string flipped = bytes;
  flipped[payload + 1] = static_cast<char>(flipped[payload + 1] ^ 0x01);
  const auto bad = write("flip.ckpt", flipped);
  const std::string e1 = error_of([&] { (void)load_checkpoint<float>(bad, cfg); });
  v.require(e1.find("backbone.stem.weight") != std::string::npos, "corruption error: '" + e1 + "'");

  const auto short_path = write("short.ckpt", bytes.substr(0, bytes.size() - 2));
  const std::string e2 = error_of([&] { (void)load_checkpoint<float>(short_path, cfg); });
  v.require(e2.find("loss.s_expr") != std::string::npos, "short payload error: '" + e2 + "'");
  v.detail << m.parameter_count() << " parameters and forward outputs bitwise; corrupted -> \"" << e1 << "\"; short -> \"" << e2 << "\"";
}

void baseline_row(Verdict& v) {
  const auto out = scratch_dir() / "eval.txt";
  const std::string cmd = kCli + " eval --show-baseline --pred " + kData + "/fixture_pred.csv --labels " + kData +
                          "/fixture_labels.csv >" + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  v.require(WIFEXITED(status) && WEXITSTATUS(status) == 0, "eval exit status");
  const std::string text = slurp(out);
  const auto pos = text.find("Baseline");
  std::vector<std::string> cells;
  if (pos != std::string::npos) {
    std::istringstream line(text.substr(pos, text.find('\n', pos) - pos));
    std::string cell;
    line >> cell;
    while (line >> cell) cells.push_back(cell);
  }
  v.require(cells == std::vector<std::string>{"0.14", "0.24", "0.31", "0.36"}, "baseline row");
  v.detail << "baseline cells:";
  for (const auto& c : cells) v.detail << ' ' << c;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
      {"gradient suite", gradient_suite},
      {"loss identities", loss_identities},
      {"CCC oracle", ccc_oracle},
      {"golden evaluation", golden_fixture},
      {"overfit sanity", overfit},
      {"two-phase protocol", two_phase},
      {"attention ablation", ablation},
      {"checkpoint round trip", checkpoint_round_trip},
      {"baseline row", baseline_row},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    failed += !v.pass;
    std::printf("criterion %zu %s %s: %s\n", i + 1, v.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                v.detail.str().c_str());
    std::fflush(stdout);
  }
  fs::remove_all(scratch_dir());
  std::printf("%zu criteria, %d failed\n", criteria.size(), failed);
  return failed == 0 ? 0 : 1;
}
