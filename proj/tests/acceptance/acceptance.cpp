// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. `acceptance 4 7` runs a subset.

#include "mmv/downstream.hpp"
#include "mmv/pretraining.hpp"
#include "mmv/scenario.hpp"
#include "mmv/volume_io.hpp"
#include "../test_util.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

using namespace mmv;
using namespace mmv::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass) detail.clear();
    pass = false;
    detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const std::vector<Modality> kAll(kRegistry.begin(), kRegistry.end());

MultiModalStudy phantom(std::uint64_t seed, Dims d, std::int64_t patch) {
  PhantomConfig pc;
  pc.dims = d;
  pc.patch = patch;
  pc.seed = seed;
  return prepare_study(generate_phantom(pc), d, patch);
}

// ------------------------------------------------------------------ 1
Outcome masking_budget() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  const std::vector<std::int64_t> cap(4, 990);
  std::array<double, 4> share{};
  bool near_total = false;
  const int plans = 10000;
  for (int i = 0; i < plans; ++i) {
    const auto plan = sample_multimodal_plan(rng, kAll, cap, MaskConfig{});
    if (plan.masked_total() != 2970 || plan.visible_total() != 990) {
      o.require(false, "plan " + std::to_string(i) + " masks " + std::to_string(plan.masked_total()) + " tokens");
      return o;
    }
    for (int k = 0; k < 4; ++k) {
      const auto& e = plan.entries[static_cast<std::size_t>(k)];
      std::set<std::int64_t> all(e.visible.begin(), e.visible.end());
      all.insert(e.masked.begin(), e.masked.end());
      if (static_cast<std::int64_t>(all.size()) != 990 || e.visible.size() + e.masked.size() != 990) {
        o.require(false, "plan " + std::to_string(i) + " is not a partition");
        return o;
      }
      share[static_cast<std::size_t>(k)] += static_cast<double>(e.visible.size()) / 990.0 / plans;
      if (static_cast<double>(e.masked.size()) >= 0.99 * 990) near_total = true;
    }
  }
  const double secs = seconds_since(t0);
  for (int k = 0; k < 4; ++k)
    o.require(std::abs(share[static_cast<std::size_t>(k)] - 0.25) <= 0.01,
              std::string(modality_name(kAll[static_cast<std::size_t>(k)])) + " visible share " + fmt("%.4f", share[static_cast<std::size_t>(k)]));
  o.require(near_total, "no plan masked >= 99% of a modality");
  o.require(secs < 10, "took " + fmt("%.1f", secs) + " s");
  if (o.pass)
    o.detail = "shares " + fmt("%.4f", share[0]) + "/" + fmt("%.4f", share[1]) + "/" + fmt("%.4f", share[2]) + "/" +
               fmt("%.4f", share[3]) + ", " + fmt("%.2f", secs) + " s";
  return o;
}

// ------------------------------------------------------------------ 2
Outcome patchify_round_trip() {
  Outcome o;
  const std::array<std::pair<Dims, std::int64_t>, 3> shapes{
      {{Dims{160, 176, 144}, 16}, {Dims{32, 48, 16}, 8}, {Dims{12, 8, 20}, 4}}};
  o.require(PatchGridSpec::for_volume(shapes[0].first, 16).count() == 990, "160x176x144 at 16 is not 990 tokens");
  std::mt19937_64 rng(7);
  std::normal_distribution<float> n(0, 1);
  for (int i = 0; i < 100; ++i) {
    const auto [d, p] = shapes[static_cast<std::size_t>(i % 3)];
    Volume v(d);
    for (auto& x : v.data) x = n(rng);
    const auto a = patchify(v, p);
    if (a.rows() != d.voxels() / (p * p * p) || unpatchify(a).data != v.data) {
      o.require(false, "volume " + std::to_string(i) + " (" + d.str() + ") does not round-trip");
      break;
    }
  }
  if (o.pass) o.detail = "100 volumes bit-exact";
  return o;
}

// ------------------------------------------------------------------ 3
Outcome gradient_check() {
  Outcome o;
  MultiMaeConfig c;
  c.patch = 4;
  c.encoder = {2, 32, 2, 2.0, {1, 2}};
  c.decoder = {2, 32, 2, 2.0};  // one cross-attention block + one self-attention block
  c.init_seed = 13;
  MultiMae<double> model(c);
  const auto s = phantom(5, {16, 16, 16}, 4);
  std::vector<Tensor<double>> leaves;
  for (const auto& [_, t] : model.params().entries()) leaves.push_back(t);
  const auto r = sampled_gradient_error(leaves, [&] {
    Rng rng(9);
    return pretrain_loss(model, s, rng);
  }, 240, 31);
  o.require(r.checked >= 200, "only " + std::to_string(r.checked) + " parameters checked");
  o.require(r.worst <= 1e-5, "worst relative error " + fmt("%.3g", r.worst));
  if (o.pass) o.detail = std::to_string(r.checked) + " parameters, worst relative error " + fmt("%.3g", r.worst);
  return o;
}

// ------------------------------------------------------------------ 4
Outcome overfit() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  MultiMaeConfig c;
  c.patch = 8;
  c.encoder = {2, 64, 2, 2.0, {1, 2}};
  c.decoder = {1, 128, 2, 2.0};
  c.init_seed = 1;
  std::vector<MultiModalStudy> train{phantom(100, {64, 64, 64}, 8), phantom(101, {64, 64, 64}, 8)};
  MultiMae<float> model(c);
  auto mse = [&] {
    ag::NoGradGuard g;
    Rng rng(77);
    double l = 0;
    for (const auto& s : train) l += pretrain_loss(model, s, rng).item();
    return l / static_cast<double>(train.size());
  };
  const double initial = mse();
  PretrainConfig pc;
  pc.epochs = 300;  // two studies per batch: one step per epoch
  pc.batch_size = 2;
  pc.lr = 2e-3;
  pc.weight_decay = 0;
  pc.clip_norm = 1.0;
  pc.seed = 5;
  pc.val_metrics = false;
  TempDir dir("accept-overfit");
  PretrainRunOptions opts;
  opts.out_dir = dir.path();
  const auto res = run_pretraining(model, pc, train, {}, opts);
  const double final_loss = mse();
  const auto synth = synthesize_modality(train[0], Modality::t1, model);
  const auto f = metrics::fidelity(train[0].volume(Modality::t1), synth);
  const double secs = seconds_since(t0);
  const double ratio = final_loss / initial;
  o.detail = "steps " + std::to_string(res.history.back().step) + ", MSE " + fmt("%.4f", initial) + " -> " +
             fmt("%.4f", final_loss) + " (" + fmt("%.1f", 100 * ratio) + "%), t1 synthesis PSNR " + fmt("%.2f", f.psnr) +
             " dB, SSIM " + fmt("%.3f", f.ssim) + ", " + fmt("%.0f", secs) + " s";
  const auto detail = o.detail;
  o.require(res.history.back().step == 300, "ran " + std::to_string(res.history.back().step) + " steps");
  o.require(ratio <= 0.10, "MSE ratio above 10%");
  o.require(f.psnr >= 25.0, "PSNR below 25 dB");
  o.require(secs < 600, "slower than 10 min");
  if (!o.pass) o.detail += " [" + detail + "]";
  return o;
}

// ------------------------------------------------------------------ 5
double mcc_oracle(const std::vector<int>& t, const std::vector<int>& p, int k) {
  // covariance of one-hot indicator matrices
  const double n = static_cast<double>(t.size());
  std::vector<double> mt(static_cast<std::size_t>(k), 0), mp(static_cast<std::size_t>(k), 0);
  for (std::size_t s = 0; s < t.size(); ++s) {
    mt[static_cast<std::size_t>(t[s])] += 1 / n;
    mp[static_cast<std::size_t>(p[s])] += 1 / n;
  }
  double cxy = 0, cxx = 0, cyy = 0;
  for (std::size_t s = 0; s < t.size(); ++s)
    for (int c = 0; c < k; ++c) {
      const double x = (t[s] == c) - mt[static_cast<std::size_t>(c)], y = (p[s] == c) - mp[static_cast<std::size_t>(c)];
      cxy += x * y;
      cxx += x * x;
      cyy += y * y;
    }
  return cxx * cyy == 0 ? 0.0 : cxy / std::sqrt(cxx * cyy);
}

double f1_oracle(const std::vector<int>& t, const std::vector<int>& p, int k) {
  double sum = 0;
  for (int c = 0; c < k; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t s = 0; s < t.size(); ++s) {
      tp += t[s] == c && p[s] == c;
      fp += t[s] != c && p[s] == c;
      fn += t[s] == c && p[s] != c;
    }
    const double pr = tp + fp ? double(tp) / (tp + fp) : 0, rc = tp + fn ? double(tp) / (tp + fn) : 0;
    sum += pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0;
  }
  return sum / k;
}

double ssim_windows(const Volume& a, const Volume& b) {
  const int w = 7;
  const double c1 = 1e-4, c2 = 9e-4, n = w * w * w;
  double total = 0;
  int count = 0;
  for (std::int64_t z = 0; z + w <= a.dims.d; ++z)
    for (std::int64_t y = 0; y + w <= a.dims.h; ++y)
      for (std::int64_t x = 0; x + w <= a.dims.w; ++x) {
        double mx = 0, my = 0;
        for (int i = 0; i < w; ++i)
          for (int j = 0; j < w; ++j)
            for (int k = 0; k < w; ++k) {
              mx += a.at(z + i, y + j, x + k) / n;
              my += b.at(z + i, y + j, x + k) / n;
            }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < w; ++i)
          for (int j = 0; j < w; ++j)
            for (int k = 0; k < w; ++k) {
              const double dx = a.at(z + i, y + j, x + k) - mx, dy = b.at(z + i, y + j, x + k) - my;
              vx += dx * dx / n;
              vy += dy * dy / n;
              cxy += dx * dy / n;
            }
        total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return total / count;
}

Outcome metric_oracles() {
  Outcome o;
  double worst = 0;
  auto track = [&](double got, double want, const std::string& what) {
    const double e = std::abs(got - want);
    worst = std::max(worst, e);
    if (!(e <= 1e-9)) o.require(false, what + " off by " + fmt("%.3g", e));
  };
  // Dice over every pair of subsets of five voxels
  for (int a = 0; a < 32 && o.pass; ++a)
    for (int b = 0; b < 32; ++b) {
      metrics::Mask ma(5), mb(5);
      int na = 0, nb = 0, both = 0;
      for (int i = 0; i < 5; ++i) {
        ma[static_cast<std::size_t>(i)] = (a >> i) & 1;
        mb[static_cast<std::size_t>(i)] = (b >> i) & 1;
        na += (a >> i) & 1;
        nb += (b >> i) & 1;
        both += ((a & b) >> i) & 1;
      }
      track(metrics::dice(ma, mb), na + nb == 0 ? 1.0 : 2.0 * both / (na + nb), "dice");
    }
  // accuracy / macro F1 / MCC over every length-4 sequence pair on three classes
  for (int tc = 0; tc < 81 && o.pass; ++tc)
    for (int pc = 0; pc < 81; ++pc) {
      std::vector<int> t(4), p(4);
      int correct = 0;
      for (int i = 0, x = tc, y = pc; i < 4; ++i, x /= 3, y /= 3) {
        t[static_cast<std::size_t>(i)] = x % 3;
        p[static_cast<std::size_t>(i)] = y % 3;
        correct += x % 3 == y % 3;
      }
      const auto r = metrics::classification_report(p, t);
      track(r.accuracy, correct / 4.0, "accuracy");
      track(r.macro_f1, f1_oracle(t, p, 3), "macro F1");
      track(r.mcc, mcc_oracle(t, p, 3), "MCC");
    }
  // PSNR against the direct sum
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  for (int k = 1; k <= 20; ++k) {
    std::vector<float> ref(37), cand(37);
    double se = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ref[i] = u(rng);
      cand[i] = ref[i] + static_cast<float>(0.013 * k * ((i % 5) - 2.0));
      se += std::pow(double(ref[i]) - double(cand[i]), 2);
    }
    track(metrics::psnr(ref, cand, 1.5), 10 * std::log10(1.5 * 1.5 / (se / 37)), "PSNR");
  }
  // SSIM: direct window evaluation on phantoms rescaled to [0, 1]
  double ssim_err = 0;
  for (std::uint64_t seed : {3u, 4u}) {
    PhantomConfig pc;
    pc.dims = {16, 16, 16};
    pc.patch = 4;
    pc.seed = seed;
    const auto s = generate_phantom(pc);
    const auto& a = s.volume(Modality::t1);
    const auto& b = s.volume(seed == 3 ? Modality::t2 : Modality::fla);
    ssim_err = std::max(ssim_err, std::abs(metrics::ssim(a, b) - ssim_windows(a, b)));
    Volume shifted = a;
    for (std::size_t i = 0; i < shifted.data.size(); ++i) shifted.data[i] = std::clamp(shifted.data[i] + 0.05f * float(i % 7) / 7, 0.0f, 1.0f);
    ssim_err = std::max(ssim_err, std::abs(metrics::ssim(a, shifted) - ssim_windows(a, shifted)));
  }
  o.require(ssim_err <= 1e-6, "SSIM off by " + fmt("%.3g", ssim_err));
  // exact MCC endpoints
  const std::vector<int> t{0, 0, 1, 1, 2, 2, 0, 1};
  o.require(metrics::classification_report(t, t).mcc == 1.0, "perfect predictor MCC is not exactly 1");
  for (int c = 0; c < 3; ++c)
    o.require(metrics::classification_report(std::vector<int>(t.size(), c), t).mcc == 0.0,
              "constant predictor MCC is not exactly 0");
  if (o.pass) o.detail = "worst oracle gap " + fmt("%.3g", worst) + ", SSIM gap " + fmt("%.3g", ssim_err);
  return o;
}

// ------------------------------------------------------------------ 6
Outcome region_composition() {
  Outcome o;
  int maps = 0;
  for (std::uint64_t seed = 0; seed < 200 && o.pass; ++seed) {
    PhantomConfig pc;
    pc.dims = {32, 32, 32};
    pc.patch = 4;
    pc.seed = seed;
    const auto s = generate_phantom(pc);
    const auto& lm = *s.labelmap;
    const auto r = metrics::compose_regions(lm);
    for (std::size_t i = 0; i < lm.data.size(); ++i) {
      const int v = lm.data[i];
      const bool et = v == 4, tc = v == 1 || v == 4, wt = v == 1 || v == 2 || v == 4;
      if (bool(r.et[i]) != et || bool(r.tc[i]) != tc || bool(r.wt[i]) != wt || (r.et[i] && !r.tc[i]) || (r.tc[i] && !r.wt[i])) {
        o.require(false, "phantom " + std::to_string(seed) + " voxel " + std::to_string(i));
        break;
      }
    }
    ++maps;
  }
  if (o.pass) o.detail = std::to_string(maps) + " phantom labelmaps";
  return o;
}

// ------------------------------------------------------------------ 7
Outcome sliding_window() {
  Outcome o;
  o.require(sliding_window_starts(160, 128, 0.25) == std::vector<std::int64_t>{0, 32}, "starts for 160/128/0.25 are not {0, 32}");
  FinetuneConfig cfg;
  cfg.task = Task::segmentation;
  cfg.regime = Regime::scratch;
  cfg.seg.feature_size = 4;
  cfg.seg.crop = 16;
  cfg.seg.window = 16;
  MultiMaeConfig c;
  c.patch = 4;
  c.encoder = {2, 12, 2, 2.0, {1, 2}};
  c.decoder = {1, 12, 2, 2.0};
  c.init_seed = 3;
  auto m = make_finetune_model<MultiMae<float>>(cfg, c, std::nullopt);
  const auto s = phantom(5, {16, 16, 16}, 4);
  ag::NoGradGuard guard;
  const auto direct = seg_forward(m, s);
  const auto tiled = sliding_window_infer<float>(s, 16, 0.25, [&](const MultiModalStudy& w) { return seg_forward(m, w); });
  double worst = 0;
  for (std::size_t i = 0; i < direct.size(); ++i) worst = std::max(worst, double(std::abs(tiled.at(i) - direct.at(i))));
  o.require(tiled.shape() == direct.shape() && worst <= 1e-6, "window-sized output differs by " + fmt("%.3g", worst));
  if (o.pass) o.detail = "starts {0, 32}; max difference " + fmt("%.3g", worst);
  return o;
}

// ------------------------------------------------------------------ 8
template <class B, class C>
void scenario_check(Outcome& o, const C& bc, Task task, const std::vector<MultiModalStudy>& train,
                    const std::vector<MultiModalStudy>& eval, const fs::path& dir) {
  B pre(bc);
  PretrainConfig pc;
  pc.epochs = 2;
  pc.batch_size = 2;
  pc.lr = 1e-3;
  pc.val_metrics = false;
  PretrainRunOptions po;
  po.out_dir = dir / "pre";
  const auto pr = run_pretraining(pre, pc, train, {}, po);
  FinetuneConfig fc;
  fc.task = task;
  fc.regime = Regime::full;
  fc.epochs = 2;
  fc.warmup_epochs = 1;
  fc.lr = 1e-3;
  fc.batch_size = 2;
  fc.seg.feature_size = 4;
  fc.seg.crop = 16;
  fc.seg.window = 16;
  auto m = make_finetune_model<B>(fc, bc, pr.checkpoint);
  FinetuneRunOptions fo;
  fo.out_dir = dir / "ft";
  finetune(m, fc, train, fo);
  const auto rows = scenario_rows(m, eval, "full");
  const std::string tag = std::string(B::kKind) + "/" + std::string(task_name(task));
  o.require(rows.size() == 5, tag + ": " + std::to_string(rows.size()) + " rows");
  for (const auto& r : rows) {
    o.require(r.available, tag + " " + r.scenario + " unavailable: " + r.reason);
    for (const auto& [k, v] : r.metrics) o.require(std::isfinite(v), tag + " " + r.scenario + " " + k + " is not finite");
  }
}

Outcome missing_modality_contract() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  MultiMaeConfig mc;
  mc.patch = 4;
  mc.encoder = {2, 12, 2, 2.0, {1, 2}};
  mc.decoder = {1, 12, 2, 2.0};
  mc.init_seed = 3;
  BaselineConfig bc;
  bc.patch = 4;
  bc.encoder = mc.encoder;
  bc.decoder = mc.decoder;
  bc.init_seed = 5;
  {
    MultiMae<float> main(mc);
    BaselineVit<float> base(bc);
    const auto s = phantom(9, {16, 24, 20}, 4);
    const auto tokens = PatchGridSpec::for_volume(s.dims(), 4).count();
    ag::NoGradGuard g;
    const auto full_main = encode_unmasked(main, s).length(), full_base = encode_unmasked(base, s).length();
    for (auto m : kAll) {
      const auto dropped = s.without(m);
      o.require(full_main - encode_unmasked(main, dropped).length() == tokens,
                std::string("dropping ") + std::string(modality_name(m)) + " does not remove its tokens");
      o.require(encode_unmasked(base, dropped).length() == full_base,
                std::string("baseline length changes without ") + std::string(modality_name(m)));
    }
  }
  std::vector<MultiModalStudy> train, eval;
  for (std::uint64_t i = 0; i < 4; ++i) train.push_back(phantom(500 + i, {16, 16, 16}, 4));
  for (std::uint64_t i = 0; i < 10; ++i) eval.push_back(phantom(600 + i, {16, 16, 16}, 4));
  TempDir dir("accept-scenarios");
  for (auto task : {Task::segmentation, Task::classification}) {
    const auto sub = dir.path() / std::string(task_name(task));
    scenario_check<MultiMae<float>>(o, mc, task, train, eval, sub / "multimae");
    scenario_check<BaselineVit<float>>(o, bc, task, train, eval, sub / "baseline");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 300, "took " + fmt("%.0f", secs) + " s");
  if (o.pass) o.detail = "lengths hold; 5 finite rows per kind and task on 10 phantoms, " + fmt("%.1f", secs) + " s";
  return o;
}

// ------------------------------------------------------------------ 9
Outcome fusion_invariance() {
  Outcome o;
  const PatchGridSpec spec{16, {10, 11, 9}};
  const std::int64_t n = spec.count(), dim = 8;
  o.require(n == 990, "grid holds " + std::to_string(n) + " locations");
  double worst = 0;
  int subsets = 0;
  for (int bits = 1; bits < 16; ++bits) {
    std::vector<Modality> mods;
    for (int k = 0; k < 4; ++k)
      if (bits >> k & 1) mods.push_back(kAll[static_cast<std::size_t>(k)]);
    const auto rows = static_cast<std::int64_t>(mods.size()) * n;
    const auto rand = random_values(static_cast<std::size_t>((rows + 1) * dim), static_cast<std::uint64_t>(bits));
    const auto same = random_values(static_cast<std::size_t>(n * dim), 99);
    ag::Buffer<double> varied(rand.begin(), rand.end()), identical(static_cast<std::size_t>((rows + 1) * dim), 0.0);
    std::vector<TokenOrigin> origin;
    for (auto m : mods)
      for (std::int64_t i = 0; i < n; ++i) {
        const auto r = static_cast<std::int64_t>(origin.size()) + 1;
        for (std::int64_t c = 0; c < dim; ++c) identical[static_cast<std::size_t>(r * dim + c)] = same[static_cast<std::size_t>(i * dim + c)];
        origin.push_back({m, spec.coord(i)});
      }
    const auto fused = fuse_tokens_per_location(Tensor<double>::constant({rows + 1, dim}, varied), origin, spec);
    o.require(fused.dim(0) == 990, "subset " + std::to_string(bits) + " fuses to " + std::to_string(fused.dim(0)) + " rows");
    const auto ident = fuse_tokens_per_location(Tensor<double>::constant({rows + 1, dim}, identical), origin, spec);
    for (std::size_t i = 0; i < same.size(); ++i) worst = std::max(worst, std::abs(ident.at(i) - same[i]));
    ++subsets;
  }
  o.require(worst <= 1e-12, "identity fusion off by " + fmt("%.3g", worst));
  if (o.pass) o.detail = std::to_string(subsets) + " subsets fuse to 990 rows; identity error " + fmt("%.3g", worst);
  return o;
}

// ------------------------------------------------------------------ 10
Outcome schedules() {
  Outcome o;
  PlateauScheduler s(1e-4, 0.1, 50, 1e-6);
  s.step(1.0);
  for (int i = 0; i < 49; ++i) s.step(1.0);
  o.require(s.lr() == 1e-4, "lr dropped before 50 stagnant epochs");
  s.step(1.0);
  o.require(std::abs(s.lr() - 1e-5) <= 1e-20, "lr after 50 stagnant epochs is " + fmt("%.3g", s.lr()));
  o.require(warmup_cosine_lr(40, 1e-4, 40, 100) == 1e-4, "lr(40) is " + fmt("%.17g", warmup_cosine_lr(40, 1e-4, 40, 100)));
  o.require(warmup_cosine_lr(100, 1e-4, 40, 100) == 0.0, "lr(100) is " + fmt("%.3g", warmup_cosine_lr(100, 1e-4, 40, 100)));

  MultiMaeConfig c;
  c.patch = 4;
  c.encoder = {2, 12, 2, 2.0, {1, 2}};
  c.decoder = {1, 12, 2, 2.0};
  c.init_seed = 3;
  MultiMae<float> model(c);
  AdamW<float> opt(trainable_params(model.params()), {});
  // intensities scaled up so gradient norms exceed the clip threshold
  auto s1 = phantom(1, {16, 16, 16}, 4), s2 = phantom(2, {16, 16, 16}, 4);
  for (auto* s : {&s1, &s2})
    for (auto m : kAll)
      for (auto& x : s->volume(m).data) x *= 20.0f;
  Rng rng(4);
  int engaged = 0;
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    const auto st = pretrain_step<MultiMae<float>>({&s1, &s2}, model, opt, 1e-3, 0.5, rng);
    if (!st.clipped) continue;
    ++engaged;
    worst = std::max(worst, st.post_clip_norm);
  }
  o.require(engaged > 0, "clipping never engaged");
  o.require(worst <= 0.5 + 1e-6, "clipped norm " + fmt("%.9g", worst));
  if (o.pass) o.detail = "plateau at 50, lr(40)=1e-4, lr(100)=0, clipped norm <= " + fmt("%.9g", worst) + " over " + std::to_string(engaged) + " steps";
  return o;
}

// ------------------------------------------------------------------ 11
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "'" MMV_CLI "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

Outcome reproducibility() {
  Outcome o;
  TempDir dir("accept-cli");
  const auto& root = dir.path();
  const auto run = root / "run";
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  std::ofstream(root / "cfg.toml") << "[run]\nseed = 3\ndeterministic = true\n\n[data.phantom]\ndims = [16, 16, 16]\ntrain = 3\nval = 1\ntest = 3\n\n"
                                      "[model]\nkind = \"multimae\"\npatch = 4\n\n[model.encoder]\nlayers = 2\ndim = 12\nheads = 2\nmlp_ratio = 2.0\ntaps = [1, 2]\n\n"
                                      "[model.decoder]\nlayers = 1\ndim = 12\nheads = 2\nmlp_ratio = 2.0\n\n"
                                      "[pretrain]\nepochs = 3\nbatch_size = 2\nlr = 0.001\n\n"
                                      "[finetune]\ntask = \"segmentation\"\nregime = \"full\"\nepochs = 2\nwarmup_epochs = 1\nlr = 0.001\nbatch_size = 2\npretrained = \""
                                   << (run / "pre" / "checkpoint.mmv").string()
                                   << "\"\n\n[finetune.seg]\nfeature_size = 4\ncrop = 16\nwindow = 16\n\n"
                                      "[evaluate]\ntask = \"segmentation\"\n\n[evaluate.checkpoints.multimae]\nfull = \""
                                   << (run / "ft" / "finetuned.mmv").string() << "\"\n";
  std::ofstream(root / "report.toml") << "[report]\nledgers = [\"" << (run / "pre" / "ledger.jsonl").string() << "\", \""
                                      << (run / "ft" / "ledger.jsonl").string() << "\"]\nmetrics = \""
                                      << (run / "eval" / "report.json").string() << "\"\n";
  auto pipeline = [&] {
    const auto cfg = q(root / "cfg.toml");
    for (const auto& [cmd, out] : std::vector<std::pair<std::string, std::string>>{
             {"pretrain", "pre"}, {"finetune", "ft"}, {"evaluate", "eval"}}) {
      const int code = run_cli(cmd + " --config " + cfg + " --out " + q(run / out), root / (cmd + ".log"));
      if (code != 0) {
        o.require(false, cmd + " exited " + std::to_string(code) + ": " + slurp(root / (cmd + ".log")));
        return;
      }
    }
    const int code = run_cli("report --config " + q(root / "report.toml") + " --out " + q(run / "report"), root / "report.log");
    if (code != 0) o.require(false, "report exited " + std::to_string(code));
  };
  pipeline();
  if (!o.pass) return o;
  fs::rename(run, root / "first");
  pipeline();
  if (!o.pass) return o;
  const auto a = tree(root / "first"), b = tree(run);
  o.require(a.size() == b.size(), "runs wrote different file sets");
  std::size_t same = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) o.require(false, name + " differs between runs");
    else ++same;
  }

  // interrupted after epoch 1 and resumed: same parameters and per-epoch records
  std::string base = slurp(root / "cfg.toml");
  base = base.substr(0, base.find("[finetune]"));
  std::ofstream(root / "part.toml") << base << "stop_after_epoch = 1\n";
  std::ofstream(root / "resume.toml") << base << "resume = \"" << (root / "split" / "checkpoint.mmv").string() << "\"\n";
  o.require(run_cli("pretrain --config " + q(root / "part.toml") + " --out " + q(root / "split"), root / "part.log") == 0, "interrupted run failed");
  o.require(run_cli("pretrain --config " + q(root / "resume.toml") + " --out " + q(root / "split"), root / "resume.log") == 0, "resumed run failed");
  if (!o.pass) return o;
  const auto full = load_multimae<float>(load_checkpoint(run / "pre" / "checkpoint.mmv"));
  const auto split = load_multimae<float>(load_checkpoint(root / "split" / "checkpoint.mmv"));
  o.require(params_digest(full->params()) == params_digest(split->params()), "resumed parameters differ");
  const auto la = detail::read_lines(run / "pre" / "ledger.jsonl"), lb = detail::read_lines(root / "split" / "ledger.jsonl");
  o.require(la.size() == lb.size(), "resumed ledger has " + std::to_string(lb.size()) + " lines");
  for (std::size_t i = 1; i < std::min(la.size(), lb.size()); ++i) o.require(la[i] == lb[i], "ledger epoch " + std::to_string(i) + " differs");
  if (o.pass) o.detail = std::to_string(same) + " artifacts byte-identical; resume matches";
  return o;
}

// ------------------------------------------------------------------ 12
Outcome oversampler() {
  Outcome o;
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) labels.push_back(0);
  for (int i = 0; i < 13; ++i) labels.push_back(1);
  for (int i = 0; i < 7; ++i) labels.push_back(2);
  const Oversampler os(labels, 3);
  Rng rng(12);
  std::array<int, 3> hits{};
  const int n = 10000;
  for (auto i : os.stream(rng, n)) ++hits[static_cast<std::size_t>(labels[i])];
  std::string freq;
  for (int c = 0; c < 3; ++c) {
    const double f = static_cast<double>(hits[static_cast<std::size_t>(c)]) / n;
    freq += (c ? "/" : "") + fmt("%.4f", f);
    o.require(std::abs(f - 1.0 / 3) <= 0.02, "class " + std::to_string(c) + " drawn at " + fmt("%.4f", f));
  }
  if (o.pass) o.detail = "frequencies " + freq;
  return o;
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "masking budget", masking_budget},
      {2, "patchify round trip", patchify_round_trip},
      {3, "gradient correctness", gradient_check},
      {4, "desk-scale overfit", overfit},
      {5, "metric oracles", metric_oracles},
      {6, "region composition", region_composition},
      {7, "sliding window", sliding_window},
      {8, "missing-modality contract", missing_modality_contract},
      {9, "fusion invariance", fusion_invariance},
      {10, "schedules", schedules},
      {11, "reproducibility", reproducibility},
      {12, "oversampler", oversampler},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    failed += !out.pass;
    std::printf("criterion %2d: %s  %s: %s\n", c.id, out.pass ? "PASS" : "FAIL", c.name, out.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
