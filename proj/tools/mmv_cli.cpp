// mmv: pretrain | finetune | synthesize | evaluate | report
//
// Every command takes --config (TOML or .json). One file may hold the sections
// of all commands; each command ignores the others' sections and rejects
// unknown keys in its own. Exit codes: 0 ok, 2 config, 3 data, 4 numeric.

#include "mmv/config.hpp"
#include "mmv/scenario.hpp"
#include "svg_plot.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <regex>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mmv;

namespace {

const std::vector<std::string> kCommands{"pretrain", "finetune", "synthesize", "evaluate", "report"};

struct Run {
  std::string command;
  Config cfg;
  fs::path out;
  std::uint64_t seed = 0;

  /// Config as embedded in artifacts: the file text plus the effective values.
  json embedded() const { return {{"text", cfg.text()}, {"effective", cfg.effective()}}; }

  /// Comment block carrying the config text for line-oriented outputs.
  std::string comment_block(std::string_view lead = "# ") const {
    std::ostringstream o;
    std::istringstream in(cfg.text());
    for (std::string line; std::getline(in, line);) o << lead << line << '\n';
    return o.str();
  }
};

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

Dims dims_from(const std::vector<std::int64_t>& v, const std::string& key) {
  if (v.size() != 3 || std::any_of(v.begin(), v.end(), [](auto x) { return x < 1; }))
    throw ConfigError("config key '" + key + "': expected three positive integers");
  return {v[0], v[1], v[2]};
}

// ---------------------------------------------------------------- model config

EncoderConfig read_encoder(const Config& c, EncoderConfig e) {
  e.layers = c.get("model.encoder.layers", e.layers);
  e.dim = c.get("model.encoder.dim", e.dim);
  e.heads = c.get("model.encoder.heads", e.heads);
  e.mlp_ratio = c.get("model.encoder.mlp_ratio", e.mlp_ratio);
  e.taps = c.get("model.encoder.taps", e.taps);
  return e;
}

DecoderConfig read_decoder(const Config& c, DecoderConfig d) {
  d.layers = c.get("model.decoder.layers", d.layers);
  d.dim = c.get("model.decoder.dim", d.dim);
  d.heads = c.get("model.decoder.heads", d.heads);
  d.mlp_ratio = c.get("model.decoder.mlp_ratio", d.mlp_ratio);
  return d;
}

std::string read_kind(const Config& c) {
  const auto kind = c.get<std::string>("model.kind", "multimae");
  if (kind != "multimae" && kind != "baseline") throw ConfigError("model.kind must be 'multimae' or 'baseline', got '" + kind + "'");
  return kind;
}

MultiMaeConfig read_multimae(const Config& c, std::uint64_t seed) {
  MultiMaeConfig m;
  m.patch = c.get("model.patch", m.patch);
  m.encoder = read_encoder(c, m.encoder);
  m.decoder = read_decoder(c, m.decoder);
  m.mask.global_ratio = c.get("model.mask.ratio", m.mask.global_ratio);
  m.mask.alpha = c.get("model.mask.alpha", m.mask.alpha);
  m.init_seed = c.get("model.init_seed", seed);
  m.validate();
  return m;
}

BaselineConfig read_baseline(const Config& c, std::uint64_t seed) {
  BaselineConfig b;
  b.patch = c.get("model.patch", b.patch);
  b.encoder = read_encoder(c, b.encoder);
  b.decoder = read_decoder(c, b.decoder);
  b.mask_ratio = c.get("model.mask.ratio", b.mask_ratio);
  b.init_seed = c.get("model.init_seed", seed);
  b.validate();
  return b;
}

std::int64_t read_patch(const Config& c) { return c.get<std::int64_t>("model.patch", 16); }

/// Calls f(tag) with a default-constructed pointer of the backbone type for `kind`.
template <class F>
decltype(auto) with_kind(const std::string& kind, F&& f) {
  if (kind == "multimae") return f(static_cast<MultiMae<float>*>(nullptr));
  if (kind == "baseline") return f(static_cast<BaselineVit<float>*>(nullptr));
  throw ValidationError("unknown model kind '" + kind + "'");
}

template <class B>
auto read_backbone_config(const Config& c, std::uint64_t seed) {
  if constexpr (std::is_same_v<B, MultiMae<float>>)
    return read_multimae(c, seed);
  else
    return read_baseline(c, seed);
}

// ---------------------------------------------------------------- data

/// Studies per split from manifest directories or generated phantoms, cropped
/// and normalized to the model-input contract. MMV_CACHE_DIR caches prepared splits.
class DataSource {
 public:
  explicit DataSource(const Config& c) {
    for (const auto* split : {"train", "val", "test"}) {
      if (auto p = c.find<std::string>(std::string("data.") + split)) paths_[split] = *p;
      if (auto n = c.find<std::int64_t>(std::string("data.phantom.") + split)) {
        if (*n < 0) throw ConfigError(std::string("config key 'data.phantom.") + split + "': must be >= 0");
        counts_[split] = *n;
      }
      if (paths_.count(split) && counts_.count(split))
        throw ConfigError(std::string("data.") + split + " and data.phantom." + split + " are mutually exclusive");
    }
    phantom_dims_ = dims_from(c.get<std::vector<std::int64_t>>("data.phantom.dims", {64, 64, 64}), "data.phantom.dims");
    phantom_seed_ = c.get<std::uint64_t>("data.phantom.seed", 0);
    if (auto d = c.find<std::vector<std::int64_t>>("data.dims")) dims_ = dims_from(*d, "data.dims");
  }

  bool has(const std::string& split) const { return paths_.count(split) || counts_.count(split); }

  std::vector<MultiModalStudy> load(const std::string& split, std::int64_t patch) const {
    if (!has(split)) throw ConfigError("no '" + split + "' data configured (data." + split + " or data.phantom." + split + ")");
    const bool phantoms = counts_.count(split) > 0;
    Dims target = dims_.value_or(phantom_dims_);
    if (!phantoms && !dims_) throw ConfigError("data.dims is required when reading studies from disk");
    json key = {{"split", split}, {"dims", {target.d, target.h, target.w}}, {"patch", patch}};
    if (phantoms) {
      key["phantom"] = {{"count", counts_.at(split)}, {"dims", {phantom_dims_.d, phantom_dims_.h, phantom_dims_.w}}, {"seed", phantom_seed_}};
    } else {
      key["dir"] = fs::absolute(paths_.at(split)).lexically_normal().string();
      json stamps = json::array();
      for (const auto& m : manifests(paths_.at(split)))
        stamps.push_back({m.string(), fs::last_write_time(m).time_since_epoch().count()});
      key["manifests"] = stamps;
    }
    const char* cache_env = std::getenv("MMV_CACHE_DIR");
    fs::path cache;
    if (cache_env && *cache_env) {
      cache = fs::path(cache_env) / ("prepared-" + hex(fnv1a(key.dump())));
      if (fs::exists(cache / "index.json")) {
        std::vector<MultiModalStudy> out;
        for (const auto& rel : detail::read_json_file(cache / "index.json")) out.push_back(load_study(cache / rel.get<std::string>()));
        return out;
      }
    }
    std::vector<MultiModalStudy> out;
    if (phantoms) {
      const std::uint64_t offset = split == "train" ? 0 : split == "val" ? 100000 : 200000;
      for (std::int64_t i = 0; i < counts_.at(split); ++i) {
        PhantomConfig pc;
        pc.dims = phantom_dims_;
        pc.patch = patch;
        pc.seed = phantom_seed_ + offset + static_cast<std::uint64_t>(i);
        out.push_back(prepare_study(generate_phantom(pc), target, patch));
      }
    } else {
      for (const auto& m : manifests(paths_.at(split))) out.push_back(prepare_study(load_study(m), target, patch));
    }
    if (!cache.empty()) {
      json index = json::array();
      for (std::size_t i = 0; i < out.size(); ++i) {
        const auto rel = fs::path(std::to_string(i)) / "manifest.json";
        write_study(out[i], cache / std::to_string(i));
        index.push_back(rel.string());
      }
      write_text(cache / "index.json", index.dump());
    }
    return out;
  }

 private:
  std::map<std::string, std::string> paths_;
  std::map<std::string, std::int64_t> counts_;
  Dims phantom_dims_{64, 64, 64};
  std::uint64_t phantom_seed_ = 0;
  std::optional<Dims> dims_;

  /// `dir/*/manifest.json` and `dir/*.json`, sorted by path.
  static std::vector<fs::path> manifests(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path() / "manifest.json");
      else if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw ValidationError("no study manifests found in " + dir.string());
    return out;
  }
};

// ---------------------------------------------------------------- commands

void cmd_pretrain(const Run& run) {
  const auto& c = run.cfg;
  const auto kind = read_kind(c);
  PretrainConfig pc;
  pc.epochs = c.get("pretrain.epochs", pc.epochs);
  pc.batch_size = c.get("pretrain.batch_size", pc.batch_size);
  pc.lr = c.get("pretrain.lr", pc.lr);
  pc.weight_decay = c.get("pretrain.weight_decay", pc.weight_decay);
  pc.clip_norm = c.get("pretrain.clip_norm", pc.clip_norm);
  pc.plateau_factor = c.get("pretrain.plateau_factor", pc.plateau_factor);
  pc.plateau_patience = c.get("pretrain.plateau_patience", pc.plateau_patience);
  pc.plateau_threshold = c.get("pretrain.plateau_threshold", pc.plateau_threshold);
  pc.checkpoint_every = c.get("pretrain.checkpoint_every", pc.checkpoint_every);
  pc.val_metrics = c.get("pretrain.val_metrics", pc.val_metrics);
  pc.seed = run.seed;
  pc.val_seed = c.get("pretrain.val_seed", run.seed + 1);
  PretrainRunOptions opts;
  opts.out_dir = run.out;
  if (auto r = c.find<std::string>("pretrain.resume")) opts.resume = *r;
  opts.stop_after_epoch = c.get("pretrain.stop_after_epoch", -1);
  opts.run_config = run.embedded();
  opts.on_epoch = [&](const EpochRecord& r) {
    std::cerr << "[pretrain] epoch " << r.epoch + 1 << "/" << pc.epochs << " loss " << r.loss << " lr " << r.lr;
    if (r.val_loss) std::cerr << " val_loss " << *r.val_loss;
    if (r.val_psnr) std::cerr << " val_psnr " << *r.val_psnr;
    std::cerr << '\n';
  };
  const DataSource data(c);
  with_kind(kind, [&](auto* tag) {
    using B = std::remove_pointer_t<decltype(tag)>;
    const auto bc = read_backbone_config<B>(c, run.seed);
    c.reject_unknown();
    pc.validate();
    const auto train = data.load("train", bc.patch);
    const auto val = data.has("val") ? data.load("val", bc.patch) : std::vector<MultiModalStudy>{};
    B model(bc);
    const auto res = run_pretraining(model, pc, train, val, opts);
    std::cout << (res.finished ? "finished: " : "stopped: ") << res.checkpoint.string() << '\n';
  });
}

FinetuneConfig read_finetune(const Config& c, std::uint64_t seed) {
  FinetuneConfig f;
  f.task = parse_task(c.get<std::string>("finetune.task", "segmentation"));
  f.regime = parse_regime(c.get<std::string>("finetune.regime", "full"));
  f.epochs = c.get("finetune.epochs", f.epochs);
  f.warmup_epochs = c.get("finetune.warmup_epochs", f.warmup_epochs);
  f.lr = c.get("finetune.lr", f.lr);
  f.weight_decay = c.get("finetune.weight_decay", f.weight_decay);
  f.clip_norm = c.get("finetune.clip_norm", f.clip_norm);
  f.batch_size = c.get("finetune.batch_size", f.batch_size);
  f.oversample = c.get("finetune.oversample", f.oversample);
  f.seg.feature_size = c.get("finetune.seg.feature_size", f.seg.feature_size);
  f.seg.classes = c.get("finetune.seg.classes", f.seg.classes);
  f.seg.crop = c.get("finetune.seg.crop", f.seg.crop);
  f.seg.window = c.get("finetune.seg.window", f.seg.window);
  f.seg.overlap = c.get("finetune.seg.overlap", f.seg.overlap);
  f.cls.pool_cls = c.get("finetune.cls.pool_cls", f.cls.pool_cls);
  f.seed = seed;
  f.validate();
  return f;
}

void cmd_finetune(const Run& run) {
  const auto& c = run.cfg;
  const auto kind = read_kind(c);
  const auto fc = read_finetune(c, run.seed);
  const auto pretrained = c.find<std::string>("finetune.pretrained");
  const DataSource data(c);
  // the architecture of a pretrained backbone comes from its checkpoint; the keys are still validated
  const auto patch = pretrained ? load_checkpoint(*pretrained).meta.at("model").at("patch").get<std::int64_t>() : read_patch(c);
  const auto train = data.load("train", patch);
  const auto test = data.has("test") ? data.load("test", patch) : std::vector<MultiModalStudy>{};
  with_kind(kind, [&](auto* tag) {
    using B = std::remove_pointer_t<decltype(tag)>;
    const auto bc = read_backbone_config<B>(c, run.seed);
    c.reject_unknown();
    std::optional<fs::path> pre;
    if (pretrained) pre = *pretrained;
    auto model = make_finetune_model<B>(fc, bc, pre);
    FinetuneRunOptions opts;
    opts.out_dir = run.out;
    opts.run_config = run.embedded();
    opts.on_epoch = [&](const FinetuneEpoch& e) {
      std::cerr << "[finetune] epoch " << e.epoch + 1 << "/" << fc.epochs << " loss " << e.loss << " lr " << e.lr << '\n';
    };
    const auto res = finetune(model, fc, train, opts);
    if (!test.empty()) {
      if (fc.task == Task::segmentation) {
        fs::create_directories(run.out / "predictions");
        for (const auto& s : test) {
          const auto pred = argmax_labels(segment_study(model, s));
          write_labelmap(run.out / "predictions" / (s.id + "_seg.raw"), pred, {{"study", s.id}, {"run_config", run.embedded()}});
        }
      } else {
        std::vector<std::pair<std::string, std::vector<double>>> rows;
        for (const auto& s : test) rows.emplace_back(s.id, class_logits(model, s));
        const auto csv = run.out / "predictions.csv";
        write_class_predictions(csv, rows);
        std::ifstream in(csv);
        std::stringstream body;
        body << in.rdbuf();
        write_text(csv, run.comment_block() + body.str());
      }
    }
    std::cout << "finetuned: " << res.checkpoint.string() << '\n';
  });
}

void cmd_synthesize(const Run& run) {
  const auto& c = run.cfg;
  const auto ck_path = c.require<std::string>("synthesize.checkpoint");
  const auto target_name = c.require<std::string>("synthesize.target");
  const auto split = c.get<std::string>("synthesize.split", "test");
  const auto target = parse_modality(target_name);
  if (!target) throw ConfigError("synthesize.target: unknown modality '" + target_name + "'");
  const DataSource data(c);
  c.ignore_section("model");
  c.reject_unknown();
  const auto ck = load_checkpoint(ck_path);
  const auto kind = ck.meta.value("kind", "");
  if (kind != "multimae" && kind != "baseline")
    throw ValidationError("synthesize.checkpoint must hold a pretrained model, found kind '" + kind + "'");
  const auto patch = ck.meta.at("model").at("patch").get<std::int64_t>();
  const auto studies = data.load(split, patch);
  std::ostringstream csv;
  csv << run.comment_block() << "study_id,target,psnr,ssim\n";
  json rows = json::array();
  with_kind(kind, [&](auto* tag) {
    using B = std::remove_pointer_t<decltype(tag)>;
    const auto model = load_backbone<B>(ck);
    for (const auto& s : studies) {
      const auto v = synthesize_modality(s, *target, *model);
      fs::create_directories(run.out / s.id);
      write_volume(run.out / s.id / (target_name + ".raw"), v, {{"study", s.id}, {"synthesized", target_name}, {"run_config", run.embedded()}});
      json row = {{"study_id", s.id}, {"target", target_name}, {"psnr", nullptr}, {"ssim", nullptr}};
      csv << s.id << ',' << target_name << ',';
      if (s.has(*target)) {
        const auto f = metrics::fidelity(s.volume(*target), v);
        const double p = std::isfinite(f.psnr) ? f.psnr : 100.0;
        row["psnr"] = p;
        row["ssim"] = f.ssim;
        csv << json(p).dump() << ',' << json(f.ssim).dump();
      } else {
        csv << ',';
      }
      csv << '\n';
      rows.push_back(row);
      std::cerr << "[synthesize] " << s.id << " " << target_name << (s.has(*target) ? " psnr " + json(row["psnr"]).dump() : "") << '\n';
    }
  });
  write_text(run.out / "synthesis.csv", csv.str());
  write_text(run.out / "synthesis.json", json{{"config", run.embedded()}, {"rows", rows}}.dump(2) + "\n");
}

std::string format_table(const MetricsReport& r) {
  std::ostringstream o;
  const auto cols = report_columns(r.task);
  o << std::left << std::setw(9) << "scenario" << std::setw(10) << "model" << std::setw(12) << "regime";
  for (const auto& c : cols) o << std::setw(10) << c;
  o << '\n';
  for (const auto& row : r.rows) {
    o << std::left << std::setw(9) << row.scenario << std::setw(10) << row.model_kind << std::setw(12) << row.regime;
    if (!row.available) {
      o << "unavailable: " << row.reason << '\n';
      continue;
    }
    for (const auto& c : cols) o << std::setw(10) << std::fixed << std::setprecision(4) << row.metrics.at(c);
    o << '\n';
  }
  return o.str();
}

void cmd_evaluate(const Run& run) {
  const auto& c = run.cfg;
  const auto task = parse_eval_task(c.require<std::string>("evaluate.task"));
  const auto split = c.get<std::string>("evaluate.split", "test");
  std::vector<ScenarioSpec> scenarios;
  for (const auto& n : c.get<std::vector<std::string>>("evaluate.scenarios", {"all", "no-t1", "no-t1c", "no-t2", "no-fla"}))
    scenarios.push_back(parse_scenario(n));
  struct Entry {
    std::string kind, regime;
    fs::path path;
  };
  std::vector<Entry> entries;
  for (const std::string kind : {"multimae", "baseline"})
    for (const std::string regime : {"scratch", "frozen", "full", "pretrained"})
      if (auto p = c.find<std::string>("evaluate.checkpoints." + kind + "." + regime)) {
        if ((regime == "pretrained") != (task == EvalTask::synthesis))
          throw ConfigError("evaluate.checkpoints." + kind + "." + regime + ": " +
                            (task == EvalTask::synthesis ? "synthesis evaluates pretrained checkpoints only"
                                                         : "the 'pretrained' slot applies to task = synthesis only"));
        entries.push_back({kind, regime, *p});
      }
  if (entries.empty()) throw ConfigError("evaluate.checkpoints lists no model (evaluate.checkpoints.<kind>.<regime> = path)");
  const DataSource data(c);
  c.ignore_section("model");
  c.reject_unknown();

  std::map<std::int64_t, std::vector<MultiModalStudy>> by_patch;
  auto studies_for = [&](std::int64_t patch) -> const std::vector<MultiModalStudy>& {
    auto it = by_patch.find(patch);
    if (it == by_patch.end()) it = by_patch.emplace(patch, data.load(split, patch)).first;
    return it->second;
  };

  std::vector<std::vector<ReportRow>> per_entry;
  for (const auto& e : entries) {
    if (!fs::exists(e.path)) {
      std::vector<ReportRow> rows;
      for (const auto& sc : scenarios) rows.push_back(unavailable_row(sc.name, e.kind, e.regime, "checkpoint not found: " + e.path.string()));
      per_entry.push_back(std::move(rows));
      continue;
    }
    const auto ck = load_checkpoint(e.path);
    const auto patch = ck.meta.at("model").at("patch").get<std::int64_t>();
    with_kind(e.kind, [&](auto* tag) {
      using B = std::remove_pointer_t<decltype(tag)>;
      if (task == EvalTask::synthesis) {
        if (ck.meta.value("kind", "") != e.kind)
          throw ConfigError("evaluate.checkpoints." + e.kind + ".pretrained does not hold a pretrained " + e.kind + " model");
        per_entry.push_back(synthesis_rows(*load_backbone<B>(ck), studies_for(patch), scenarios));
        return;
      }
      const auto m = load_finetuned<B>(ck);
      const auto want = task == EvalTask::segmentation ? Task::segmentation : Task::classification;
      if (m.task != want) throw ConfigError("checkpoint " + e.path.string() + " was finetuned for " + std::string(task_name(m.task)));
      const auto regime = ck.meta.at("finetune").at("regime").get<std::string>();
      if (regime != e.regime)
        throw ConfigError("evaluate.checkpoints." + e.kind + "." + e.regime + " holds a '" + regime + "' finetune");
      per_entry.push_back(scenario_rows(m, studies_for(patch), e.regime, scenarios));
    });
    for (const auto& r : per_entry.back())
      std::cerr << "[evaluate] " << r.scenario << " " << r.model_kind << " " << r.regime << (r.available ? " ok" : " unavailable") << '\n';
  }
  MetricsReport report;
  report.task = task;
  report.config_text = run.cfg.text();
  report.config = run.cfg.effective();
  for (std::size_t s = 0; s < scenarios.size(); ++s)
    for (const auto& rows : per_entry) report.rows.push_back(rows[s]);
  write_text(run.out / "report.csv", report.to_csv());
  write_text(run.out / "report.json", report.to_json().dump(2) + "\n");
  std::cout << format_table(report);
}

void cmd_report(const Run& run) {
  const auto& c = run.cfg;
  const auto ledgers = c.get<std::vector<std::string>>("report.ledgers", {});
  const auto metrics_path = c.find<std::string>("report.metrics");
  const bool plots = c.get("report.plots", true);
  c.ignore_section("model");
  c.ignore_section("data");
  c.reject_unknown();
  if (ledgers.empty() && !metrics_path) throw ConfigError("report needs report.ledgers and/or report.metrics");

  std::ostringstream text;
  text << run.comment_block();
  const auto svg_note = "<!--\n" + std::regex_replace(run.cfg.text(), std::regex("--"), "- -") + "-->\n";
  for (std::size_t i = 0; i < ledgers.size(); ++i) {
    const auto lines = detail::read_lines(ledgers[i]);
    if (lines.empty()) throw ValidationError("empty ledger " + ledgers[i]);
    svg::Series loss{"train loss", {}}, val{"val loss", {}};
    std::optional<double> best_val;
    int epochs = 0;
    double first = 0, last = 0;
    for (std::size_t k = 1; k < lines.size(); ++k) {
      json r;
      try {
        r = json::parse(lines[k]);
      } catch (const json::parse_error&) {
        throw ValidationError("malformed ledger line " + std::to_string(k + 1) + " in " + ledgers[i]);
      }
      const double x = r.at("epoch").get<double>() + 1;
      const double l = r.at("loss").get<double>();
      loss.points.emplace_back(x, l);
      if (k == 1) first = l;
      last = l;
      ++epochs;
      if (r.contains("val_loss") && r["val_loss"].is_number()) {
        const double v = r["val_loss"].get<double>();
        val.points.emplace_back(x, v);
        best_val = best_val ? std::min(*best_val, v) : v;
      }
    }
    text << "ledger " << ledgers[i] << ": " << epochs << " epochs, loss " << std::fixed << std::setprecision(4) << first << " -> "
         << last;
    if (best_val) text << ", best val loss " << *best_val;
    text << '\n';
    if (plots) {
      std::vector<svg::Series> series{loss};
      if (!val.points.empty()) series.push_back(val);
      write_text(run.out / ("curve_" + std::to_string(i) + ".svg"),
                 svg::line_plot(fs::path(ledgers[i]).parent_path().filename().string() + " loss", "epoch", "loss (log)", series, true) +
                     svg_note);
    }
  }
  if (metrics_path) {
    const auto j = detail::read_json_file(*metrics_path);
    MetricsReport r;
    r.task = parse_eval_task(j.at("task").get<std::string>());
    for (const auto& row : j.at("rows")) {
      ReportRow rr;
      rr.scenario = row.at("scenario");
      rr.model_kind = row.at("model_kind");
      rr.regime = row.at("regime");
      rr.available = row.at("status") == "ok";
      rr.reason = row.at("reason");
      rr.studies = row.at("studies");
      if (rr.available)
        for (auto it = row.at("metrics").begin(); it != row.at("metrics").end(); ++it) rr.metrics[it.key()] = it.value().get<double>();
      r.rows.push_back(rr);
    }
    text << "\nmetrics (" << eval_task_name(r.task) << ") from " << *metrics_path << "\n" << format_table(r);
    if (plots) {
      std::vector<std::string> scen, members;
      for (const auto& row : r.rows) {
        if (std::find(scen.begin(), scen.end(), row.scenario) == scen.end()) scen.push_back(row.scenario);
        const auto m = row.model_kind + "/" + row.regime;
        if (std::find(members.begin(), members.end(), m) == members.end()) members.push_back(m);
      }
      for (const auto& col : report_columns(r.task)) {
        std::vector<std::vector<double>> values(scen.size(), std::vector<double>(members.size(), std::nan("")));
        for (const auto& row : r.rows) {
          if (!row.available) continue;
          const auto si = static_cast<std::size_t>(std::find(scen.begin(), scen.end(), row.scenario) - scen.begin());
          const auto mi = static_cast<std::size_t>(std::find(members.begin(), members.end(), row.model_kind + "/" + row.regime) - members.begin());
          values[si][mi] = row.metrics.at(col);
        }
        write_text(run.out / ("metrics_" + col + ".svg"), svg::bar_chart(col + " by scenario", col, scen, members, values) + svg_note);
      }
    }
  }
  write_text(run.out / "report.txt", text.str());
  std::cout << text.str();
}

int fail(int code, const std::string& kind, const std::string& what) {
  std::cerr << "mmv: " << kind << ": " << what << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal masked autoencoders for brain MRI: pretraining, finetuning, synthesis and evaluation"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  std::int64_t seed = 0;
  std::string deterministic = "true";
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> help{{"pretrain", "masked-autoencoder pretraining"},
                                                {"finetune", "segmentation or classification finetuning"},
                                                {"synthesize", "generate a missing modality"},
                                                {"evaluate", "five-scenario missing-modality evaluation"},
                                                {"report", "tables and plots from ledgers and reports"}};
  for (const auto& name : kCommands) {
    auto* s = app.add_subcommand(name, help.at(name));
    s->add_option("--config", config_path, "TOML or JSON config file")->required();
    s->add_option("--seed", seed, "master seed (overrides run.seed)");
    s->add_option("--out", out_dir, "output directory (default: mmv-<command>)");
    s->add_option("--deterministic", deterministic, "true or false")->check(CLI::IsMember({"true", "false", "1", "0"}));
    subs[name] = s;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  Run run;
  for (const auto& [name, s] : subs)
    if (s->parsed()) run.command = name;
  try {
    run.cfg = Config::from_file(config_path);
    if (subs[run.command]->count("--seed")) run.cfg.set("run.seed", seed);
    if (subs[run.command]->count("--deterministic")) run.cfg.set("run.deterministic", deterministic == "true" || deterministic == "1");
    run.seed = run.cfg.get<std::uint64_t>("run.seed", 0);
    // every code path is single-threaded with a fixed reduction order, so runs are deterministic either way
    (void)run.cfg.get("run.deterministic", true);
    run.out = out_dir.empty() ? fs::path("mmv-" + run.command) : fs::path(out_dir);
    for (const auto& other : kCommands)
      if (other != run.command) run.cfg.ignore_section(other);
    if (run.command == "pretrain") cmd_pretrain(run);
    else if (run.command == "finetune") cmd_finetune(run);
    else if (run.command == "synthesize") cmd_synthesize(run);
    else if (run.command == "evaluate") cmd_evaluate(run);
    else cmd_report(run);
    return 0;
  } catch (const ConfigError& e) {
    return fail(2, "config error", e.what());
  } catch (const IoError& e) {
    return fail(3, "data error", e.what());
  } catch (const ValidationError& e) {
    return fail(3, "data error", e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(3, "data error", e.what());
  } catch (const NumericError& e) {
    return fail(4, "numeric failure", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal error", e.what());
  }
}
