#pragma once
// Masked-reconstruction pretraining: one optimization step, validation, and
// the resumable epoch loop with its JSON-lines run ledger.

#include "mmv/checkpoint.hpp"
#include "mmv/metrics.hpp"
#include "mmv/multimae.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

namespace mmv {

struct PretrainConfig {
  int epochs = 1200;
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double clip_norm = 0.5;
  double plateau_factor = 0.1;
  int plateau_patience = 50;
  double plateau_threshold = 1e-6;
  std::uint64_t seed = 0;
  std::uint64_t val_seed = 1;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 writes only the final one
  bool val_metrics = true;   // PSNR/SSIM of validation reconstructions

  void validate() const {
    if (epochs < 1) throw ConfigError("pretrain.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("pretrain.lr must be positive");
    if (weight_decay < 0) throw ConfigError("pretrain.weight_decay must be non-negative");
    if (!(clip_norm > 0)) throw ConfigError("pretrain.clip_norm must be positive");
    if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("pretrain.plateau_factor must lie in (0, 1)");
    if (plateau_patience < 1) throw ConfigError("pretrain.plateau_patience must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("pretrain.checkpoint_every must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"plateau_factor", c.plateau_factor},
       {"plateau_patience", c.plateau_patience},
       {"plateau_threshold", c.plateau_threshold},
       {"seed", c.seed},
       {"val_seed", c.val_seed},
       {"checkpoint_every", c.checkpoint_every},
       {"val_metrics", c.val_metrics}};
}

// ---------------------------------------------------------------- model hooks
// run_pretraining works with any model that provides these overloads.

template <class T>
Tensor<T> pretrain_loss(const MultiMae<T>& model, const MultiModalStudy& s, Rng& rng) {
  return mae_loss(model, s, model.sample_plan(rng, s));
}

/// Reconstructions of every present modality under a sampled mask.
template <class T>
std::vector<std::pair<Modality, Volume>> reconstruct_study(const MultiMae<T>& model, const MultiModalStudy& s, Rng& rng) {
  const auto out = model.forward(s, model.sample_plan(rng, s));
  std::vector<std::pair<Modality, Volume>> r;
  for (std::size_t i = 0; i < out.modalities.size(); ++i)
    r.emplace_back(out.modalities[i], predictions_to_volume(out.predictions[i], out.spec));
  return r;
}

template <class T>
nlohmann::json model_config_json(const MultiMae<T>& model) {
  return model.config();
}

// ---------------------------------------------------------------- one step

struct StepStats {
  double loss = 0;
  double grad_norm = 0;       // before clipping
  double post_clip_norm = 0;  // after clipping
  bool clipped = false;
  double lr = 0;
};

template <class T>
NamedParams<T> trainable_params(nn::ParamStore<T>& ps) {
  NamedParams<T> out;
  for (auto& [name, t] : ps.entries())
    if (t.requires_grad()) out.emplace_back(name, t);
  return out;
}

/// Mean loss over the batch, backward, global-norm clip, AdamW update.
/// Each study's graph is released right after its backward pass.
template <class Model, class T = typename Model::scalar_type>
StepStats pretrain_step(const std::vector<const MultiModalStudy*>& batch, const Model& model, AdamW<T>& opt,
                        double lr, double clip_norm, Rng& rng) {
  if (batch.empty()) throw ValidationError("pretrain_step: empty batch");
  opt.zero_grad();
  StepStats st;
  st.lr = lr;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (const auto* s : batch) {
    auto loss = ag::scale(pretrain_loss(model, *s, rng), inv);
    const double v = loss.item();
    if (!std::isfinite(v))
      throw NumericError("non-finite pretraining loss on study '" + s->id + "' (step " +
                         std::to_string(opt.steps() + 1) + ", lr " + std::to_string(lr) + ")");
    st.loss += v;
    loss.backward();
  }
  const auto clip = clip_grad_norm(opt.params(), clip_norm);
  if (!std::isfinite(clip.pre_norm))
    throw NumericError("non-finite gradient norm at step " + std::to_string(opt.steps() + 1));
  st.grad_norm = clip.pre_norm;
  st.post_clip_norm = clip.post_norm;
  st.clipped = clip.clipped;
  opt.step(lr);
  return st;
}

// ---------------------------------------------------------------- validation

struct ValidationStats {
  double loss = 0;
  std::optional<double> psnr, ssim;
};

/// Fixed-seed masks make the monitored loss comparable across epochs.
template <class Model>
ValidationStats validate_model(const Model& model, const std::vector<MultiModalStudy>& val, std::uint64_t seed,
                               bool with_metrics) {
  ag::NoGradGuard guard;
  ValidationStats v;
  if (val.empty()) return v;
  Rng rng(seed);
  for (const auto& s : val) v.loss += static_cast<double>(pretrain_loss(model, s, rng).item());
  v.loss /= static_cast<double>(val.size());
  if (!with_metrics) return v;
  Rng mrng(seed);
  double psnr = 0, ssim = 0;
  int n = 0;
  for (const auto& s : val)
    for (const auto& [m, recon] : reconstruct_study(model, s, mrng)) {
      const auto f = metrics::fidelity(s.volume(m), recon);
      psnr += std::isfinite(f.psnr) ? f.psnr : 100.0;  // cap exact reconstructions so the mean stays finite
      ssim += f.ssim;
      ++n;
    }
  if (n > 0) {
    v.psnr = psnr / n;
    v.ssim = ssim / n;
  }
  return v;
}

// ---------------------------------------------------------------- run loop

struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
  std::optional<double> val_loss, val_psnr, val_ssim;
};

inline nlohmann::json to_ledger(const EpochRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", r.epoch},       {"step", r.step},        {"loss", r.loss},        {"lr", r.lr},
          {"grad_norm", r.grad_norm}, {"val_loss", opt(r.val_loss)}, {"val_psnr", opt(r.val_psnr)},
          {"val_ssim", opt(r.val_ssim)}};
}

struct PretrainRunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;  // checkpoint written by an earlier run
  int stop_after_epoch = -1;                    // >= 0: checkpoint and return after this epoch
  nlohmann::json run_config = nlohmann::json::object();  // embedded verbatim in ledger and checkpoint
  std::function<void(const EpochRecord&)> on_epoch;
};

struct PretrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path ledger;
  std::vector<EpochRecord> history;
  bool finished = false;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace detail

template <class Model>
Checkpoint make_checkpoint(const Model& model, const AdamW<typename Model::scalar_type>* opt, const nlohmann::json& run_config) {
  Checkpoint ck;
  ck.meta["kind"] = Model::kKind;
  ck.meta["model"] = model_config_json(model);
  ck.meta["run_config"] = run_config;
  store_params(ck, model.params());
  if (opt) store_optimizer(ck, *opt);
  return ck;
}

/// Epoch loop. Every epoch appends one ledger record; the checkpoint holds
/// parameters, optimizer moments, scheduler and rng state so a resumed run
/// continues the uninterrupted trajectory exactly.
template <class Model, class T = typename Model::scalar_type>
PretrainResult run_pretraining(Model& model, const PretrainConfig& cfg, const std::vector<MultiModalStudy>& train,
                               const std::vector<MultiModalStudy>& val, const PretrainRunOptions& opts) {
  cfg.validate();
  if (train.empty()) throw ValidationError("pretraining needs at least one training study");
  namespace fs = std::filesystem;
  fs::create_directories(opts.out_dir);
  PretrainResult res;
  res.checkpoint = opts.out_dir / "checkpoint.mmv";
  res.ledger = opts.out_dir / "ledger.jsonl";

  AdamW<T> opt(trainable_params(model.params()), {0.9, 0.999, 1e-8, cfg.weight_decay});
  PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
  Rng rng(cfg.seed);
  int start_epoch = 0;
  std::int64_t step = 0;

  std::vector<std::string> ledger_lines{nlohmann::json{{"config", opts.run_config}}.dump()};
  if (opts.resume) {
    const auto ck = load_checkpoint(*opts.resume);
    if (ck.meta.value("kind", "") != Model::kKind)
      throw ValidationError("checkpoint " + opts.resume->string() + " holds a '" + ck.meta.value("kind", "") +
                            "' model, expected '" + Model::kKind + "'");
    restore_params(ck, model.params());
    restore_optimizer(ck, opt);
    const auto& tr = ck.meta.at("train");
    start_epoch = tr.at("next_epoch");
    step = tr.at("step");
    sched.restore(tr.at("lr"), tr.at("best").is_null() ? std::numeric_limits<double>::infinity() : tr.at("best").get<double>(),
                  tr.at("bad_epochs"));
    set_rng_state(rng, tr.at("rng"));
    const auto previous = detail::read_lines(opts.resume->parent_path() / "ledger.jsonl");
    for (std::size_t i = 1; i < previous.size(); ++i) {
      const auto rec = nlohmann::json::parse(previous[i]);
      if (rec.at("epoch").get<int>() < start_epoch) ledger_lines.push_back(previous[i]);
    }
  }
  {
    std::ofstream out(res.ledger, std::ios::trunc);
    if (!out) throw IoError("cannot write ledger " + res.ledger.string());
    for (const auto& l : ledger_lines) out << l << '\n';
  }

  auto save = [&](int next_epoch) {
    auto ck = make_checkpoint(model, &opt, opts.run_config);
    const double best = sched.best();
    ck.meta["train"] = {{"next_epoch", next_epoch},
                        {"step", step},
                        {"lr", sched.lr()},
                        {"best", std::isfinite(best) ? nlohmann::json(best) : nlohmann::json(nullptr)},
                        {"bad_epochs", sched.bad_epochs()},
                        {"rng", rng_state(rng)}};
    save_checkpoint(res.checkpoint, ck);
  };

  std::vector<std::size_t> order(train.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr();
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const MultiModalStudy*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(&train[order[i]]);
      const auto st = pretrain_step(batch, model, opt, sched.lr(), cfg.clip_norm, rng);
      rec.loss += st.loss;
      rec.grad_norm += st.grad_norm;
      ++batches;
      ++step;
    }
    rec.loss /= batches;
    rec.grad_norm /= batches;
    rec.step = step;
    const auto v = validate_model(model, val, cfg.val_seed, cfg.val_metrics);
    if (!val.empty()) {
      rec.val_loss = v.loss;
      rec.val_psnr = v.psnr;
      rec.val_ssim = v.ssim;
    }
    sched.step(val.empty() ? rec.loss : v.loss);
    {
      std::ofstream out(res.ledger, std::ios::app);
      out << to_ledger(rec).dump() << '\n';
    }
    res.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    const bool last = epoch + 1 == cfg.epochs;
    const bool stop = epoch == opts.stop_after_epoch;
    if (last || stop || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)) save(epoch + 1);
    if (stop && !last) return res;
  }
  res.finished = true;
  return res;
}

/// Rebuilds a multi-modal model from a pretraining checkpoint.
template <class T>
std::unique_ptr<MultiMae<T>> load_multimae(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != MultiMae<T>::kKind)
    throw ValidationError("checkpoint does not hold a multimae model (kind '" + ck.meta.value("kind", "") + "')");
  auto model = std::make_unique<MultiMae<T>>(ck.meta.at("model").get<MultiMaeConfig>());
  restore_params(ck, model->params());
  return model;
}

}  // namespace mmv
