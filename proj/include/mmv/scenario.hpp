#pragma once
// Missing-modality evaluation: the five scenarios, per-cell evaluation for
// each model kind and regime, and the CSV/JSON report.

#include "mmv/downstream.hpp"

namespace mmv {

struct ScenarioSpec {
  std::string name;
  std::optional<Modality> excluded;
};

inline const std::vector<ScenarioSpec>& all_scenarios() {
  static const std::vector<ScenarioSpec> s{{"all", std::nullopt},
                                           {"no-t1", Modality::t1},
                                           {"no-t1c", Modality::t1c},
                                           {"no-t2", Modality::t2},
                                           {"no-fla", Modality::fla}};
  return s;
}

inline ScenarioSpec parse_scenario(std::string_view name) {
  for (const auto& s : all_scenarios())
    if (s.name == name) return s;
  throw ConfigError("unknown scenario '" + std::string(name) + "' (expected all, no-t1, no-t1c, no-t2 or no-fla)");
}

/// The study as the model sees it under the scenario. The main model then
/// drops the modality's tokens; the baseline zero-fills its channel.
inline MultiModalStudy apply_scenario(const MultiModalStudy& s, const ScenarioSpec& sc) {
  if (!sc.excluded || !s.has(*sc.excluded)) return s;
  return s.without(*sc.excluded);
}

enum class EvalTask { segmentation, classification, synthesis };

inline std::string_view eval_task_name(EvalTask t) {
  switch (t) {
    case EvalTask::segmentation: return "segmentation";
    case EvalTask::classification: return "classification";
    case EvalTask::synthesis: return "synthesis";
  }
  return "?";
}

inline EvalTask parse_eval_task(std::string_view s) {
  if (s == "segmentation") return EvalTask::segmentation;
  if (s == "classification") return EvalTask::classification;
  if (s == "synthesis") return EvalTask::synthesis;
  throw ConfigError("evaluate.task must be segmentation, classification or synthesis, got '" + std::string(s) + "'");
}

inline std::vector<std::string> report_columns(EvalTask t) {
  switch (t) {
    case EvalTask::segmentation: return {"dice_tc", "dice_et", "dice_wt"};
    case EvalTask::classification: return {"accuracy", "f1_macro", "mcc"};
    case EvalTask::synthesis: return {"psnr", "ssim"};
  }
  return {};
}

struct ReportRow {
  std::string scenario, model_kind, regime;
  bool available = true;
  std::string reason;
  std::int64_t studies = 0;
  std::map<std::string, double> metrics;
};

inline ReportRow unavailable_row(std::string scenario, std::string kind, std::string regime, std::string reason) {
  ReportRow r;
  r.scenario = std::move(scenario);
  r.model_kind = std::move(kind);
  r.regime = std::move(regime);
  r.available = false;
  r.reason = std::move(reason);
  return r;
}

struct MetricsReport {
  EvalTask task = EvalTask::segmentation;
  std::string config_text;                                // the config file as given
  nlohmann::json config = nlohmann::json::object();       // effective values
  std::vector<ReportRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json m = nlohmann::json::object();
      for (const auto& c : report_columns(task))
        m[c] = r.available ? nlohmann::json(r.metrics.at(c)) : nlohmann::json(nullptr);
      rows_j.push_back({{"scenario", r.scenario},
                        {"model_kind", r.model_kind},
                        {"regime", r.regime},
                        {"status", r.available ? "ok" : "unavailable"},
                        {"reason", r.reason},
                        {"studies", r.studies},
                        {"metrics", m}});
    }
    return {{"task", eval_task_name(task)},
            {"columns", report_columns(task)},
            {"config_text", config_text},
            {"config", config},
            {"rows", rows_j}};
  }

  /// Config lines first as '#' comments, then one row per cell.
  std::string to_csv() const {
    std::ostringstream out;
    std::istringstream cfg(config_text);
    for (std::string line; std::getline(cfg, line);) out << "# " << line << '\n';
    out << "scenario,model_kind,regime,status,reason,studies";
    for (const auto& c : report_columns(task)) out << ',' << c;
    out << '\n';
    for (const auto& r : rows) {
      out << r.scenario << ',' << r.model_kind << ',' << r.regime << ',' << (r.available ? "ok" : "unavailable") << ','
          << csv_quote(r.reason) << ',' << r.studies;
      for (const auto& c : report_columns(task)) {
        out << ',';
        if (r.available) out << nlohmann::json(r.metrics.at(c)).dump();
      }
      out << '\n';
    }
    return out.str();
  }

 private:
  static std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }
};

namespace detail {

/// Reason the scenario cannot be evaluated on this data, if any.
inline std::optional<std::string> scenario_blocker(const std::vector<MultiModalStudy>& data, const ScenarioSpec& sc) {
  if (data.empty()) return "no evaluation studies";
  if (!sc.excluded) return std::nullopt;
  const auto m = *sc.excluded;
  if (std::none_of(data.begin(), data.end(), [&](const MultiModalStudy& s) { return s.has(m); }))
    return "modality " + std::string(modality_name(m)) + " is absent from every evaluation study";
  for (const auto& s : data)
    if (s.present().size() == 1 && s.has(m)) return "study '" + s.id + "' has no modality left without " + std::string(modality_name(m));
  return std::nullopt;
}

}  // namespace detail

/// One report row for a finetuned model under one scenario.
template <class Backbone>
ReportRow evaluate_cell(const FinetuneModel<Backbone>& model, const std::vector<MultiModalStudy>& data,
                        const ScenarioSpec& sc, const std::string& regime) {
  ReportRow row;
  row.scenario = sc.name;
  row.model_kind = Backbone::kKind;
  row.regime = regime;
  if (auto why = detail::scenario_blocker(data, sc)) return unavailable_row(sc.name, row.model_kind, regime, *why);
  if (model.task == Task::segmentation) {
    double tc = 0, et = 0, wt = 0;
    for (const auto& s : data) {
      if (!s.labelmap) return unavailable_row(sc.name, row.model_kind, regime, "study '" + s.id + "' has no labelmap");
      const auto d = evaluate_segmentation(model, apply_scenario(s, sc));
      tc += d.tc;
      et += d.et;
      wt += d.wt;
    }
    const auto n = static_cast<double>(data.size());
    row.metrics = {{"dice_tc", tc / n}, {"dice_et", et / n}, {"dice_wt", wt / n}};
  } else {
    std::vector<int> pred, truth;
    for (const auto& s : data) {
      if (!s.class_label) return unavailable_row(sc.name, row.model_kind, regime, "study '" + s.id + "' has no class label");
      pred.push_back(argmax(class_logits(model, apply_scenario(s, sc))));
      truth.push_back(static_cast<int>(*s.class_label));
    }
    const auto r = metrics::classification_report(pred, truth);
    row.metrics = {{"accuracy", r.accuracy}, {"f1_macro", r.macro_f1}, {"mcc", r.mcc}};
  }
  row.studies = static_cast<std::int64_t>(data.size());
  return row;
}

/// Synthesis of the withheld modality by a pretrained model, scored against the truth.
template <class Backbone>
ReportRow evaluate_synthesis_cell(const Backbone& model, const std::vector<MultiModalStudy>& data,
                                  const ScenarioSpec& sc, const std::string& regime) {
  const std::string kind = Backbone::kKind;
  if (!sc.excluded) return unavailable_row(sc.name, kind, regime, "no modality withheld, nothing to synthesize");
  if (auto why = detail::scenario_blocker(data, sc)) return unavailable_row(sc.name, kind, regime, *why);
  double psnr = 0, ssim = 0;
  std::int64_t n = 0;
  for (const auto& s : data) {
    if (!s.has(*sc.excluded)) continue;
    const auto f = metrics::fidelity(s.volume(*sc.excluded), synthesize_modality(s, *sc.excluded, model));
    psnr += std::isfinite(f.psnr) ? f.psnr : 100.0;
    ssim += f.ssim;
    ++n;
  }
  ReportRow row;
  row.scenario = sc.name;
  row.model_kind = kind;
  row.regime = regime;
  row.studies = n;
  row.metrics = {{"psnr", psnr / static_cast<double>(n)}, {"ssim", ssim / static_cast<double>(n)}};
  return row;
}

template <class Backbone>
std::vector<ReportRow> scenario_rows(const FinetuneModel<Backbone>& model, const std::vector<MultiModalStudy>& data,
                                     const std::string& regime,
                                     const std::vector<ScenarioSpec>& scenarios = all_scenarios()) {
  std::vector<ReportRow> rows;
  for (const auto& sc : scenarios) rows.push_back(evaluate_cell(model, data, sc, regime));
  return rows;
}

template <class Backbone>
std::vector<ReportRow> synthesis_rows(const Backbone& model, const std::vector<MultiModalStudy>& data,
                                      const std::vector<ScenarioSpec>& scenarios = all_scenarios()) {
  std::vector<ReportRow> rows;
  for (const auto& sc : scenarios) rows.push_back(evaluate_synthesis_cell(model, data, sc, "pretrained"));
  return rows;
}

}  // namespace mmv
