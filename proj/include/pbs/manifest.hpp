#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "pbs/errors.hpp"
#include "pbs/pipeline.hpp"
#include "pbs/workload.hpp"

namespace pbs {

using json = nlohmann::json;

struct TensorInputs {
  std::string q, k, v;
};

struct OutputSpec {
  std::string attention;  // output tensor path ("" = do not write)
  std::string report;     // report JSON path ("" = stdout)
};

/// Everything one pipeline run needs: either tensor paths or a workload spec,
/// the pipeline configuration, and where the results go.
struct RunManifest {
  std::optional<WorkloadSpec> workload;
  std::optional<TensorInputs> inputs;
  PipelineConfig pipeline;
  OutputSpec outputs;

  void validate() const {
    if (workload.has_value() == inputs.has_value())
      throw ConfigError("manifest needs exactly one of \"workload\" or \"inputs\"");
    pipeline.validate();
  }
};

namespace detail {

inline void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                        const char* where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError(std::string("unknown key \"") + key + "\" in " + where);
  }
}

template <typename V>
void read_into(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for \"") + key + "\"");
  }
}

}  // namespace detail

inline json workload_to_json(const WorkloadSpec& w) {
  json j{{"kind", workload_kind_name(w.kind)}, {"n", w.n},       {"d", w.d},
         {"heads", w.heads},                   {"seed", w.seed}};
  if (w.kind == WorkloadKind::vertical_lines || w.kind == WorkloadKind::mixed) {
    j["line_count"] = w.line_count;
    j["line_strength"] = w.line_strength;
    j["scatter"] = scatter_name(w.scatter);
  }
  return j;
}

inline WorkloadSpec workload_from_json(const json& j) {
  detail::expect_keys(
      j, {"kind", "n", "d", "heads", "seed", "line_count", "line_strength", "scatter"},
      "workload");
  WorkloadSpec w;
  std::string kind = workload_kind_name(w.kind), scatter = scatter_name(w.scatter);
  detail::read_into(j, "kind", kind);
  detail::read_into(j, "n", w.n);
  detail::read_into(j, "d", w.d);
  detail::read_into(j, "heads", w.heads);
  detail::read_into(j, "seed", w.seed);
  detail::read_into(j, "line_count", w.line_count);
  detail::read_into(j, "line_strength", w.line_strength);
  detail::read_into(j, "scatter", scatter);
  w.kind = workload_kind_from_name(kind);
  w.scatter = scatter_from_name(scatter);
  return w;
}

inline json pipeline_to_json(const PipelineConfig& c) {
  return json{{"block_size", c.block_size},
              {"segment_size", c.segment_size},
              {"tau", c.tau},
              {"strategy", strategy_name(c.strategy)},
              {"precision", precision_name(c.precision)},
              {"force_first_block", c.forced.first_block},
              {"force_diagonal_band", c.forced.diagonal_band},
              {"scale", c.scale}};
}

inline PipelineConfig pipeline_from_json(const json& j) {
  detail::expect_keys(j,
                      {"block_size", "segment_size", "tau", "strategy", "precision",
                       "force_first_block", "force_diagonal_band", "scale"},
                      "pipeline");
  PipelineConfig c;
  std::string strategy = strategy_name(c.strategy), precision = precision_name(c.precision);
  detail::read_into(j, "block_size", c.block_size);
  detail::read_into(j, "segment_size", c.segment_size);
  detail::read_into(j, "tau", c.tau);
  detail::read_into(j, "strategy", strategy);
  detail::read_into(j, "precision", precision);
  detail::read_into(j, "force_first_block", c.forced.first_block);
  detail::read_into(j, "force_diagonal_band", c.forced.diagonal_band);
  detail::read_into(j, "scale", c.scale);
  c.strategy = strategy_from_name(strategy);
  c.precision = precision_from_name(precision);
  return c;
}

inline json manifest_to_json(const RunManifest& m) {
  json j;
  if (m.workload) j["workload"] = workload_to_json(*m.workload);
  if (m.inputs)
    j["inputs"] = json{{"q", m.inputs->q}, {"k", m.inputs->k}, {"v", m.inputs->v}};
  j["pipeline"] = pipeline_to_json(m.pipeline);
  j["outputs"] = json{{"attention", m.outputs.attention}, {"report", m.outputs.report}};
  return j;
}

inline RunManifest manifest_from_json(const json& j) {
  detail::expect_keys(j, {"workload", "inputs", "pipeline", "outputs"}, "manifest");
  RunManifest m;
  if (j.contains("workload")) m.workload = workload_from_json(j.at("workload"));
  if (j.contains("inputs")) {
    detail::expect_keys(j.at("inputs"), {"q", "k", "v"}, "inputs");
    TensorInputs in;
    detail::read_into(j.at("inputs"), "q", in.q);
    detail::read_into(j.at("inputs"), "k", in.k);
    detail::read_into(j.at("inputs"), "v", in.v);
    if (in.q.empty() || in.k.empty() || in.v.empty())
      throw ConfigError("inputs need all of q, k, v paths");
    m.inputs = in;
  }
  if (j.contains("pipeline")) m.pipeline = pipeline_from_json(j.at("pipeline"));
  if (j.contains("outputs")) {
    detail::expect_keys(j.at("outputs"), {"attention", "report"}, "outputs");
    detail::read_into(j.at("outputs"), "attention", m.outputs.attention);
    detail::read_into(j.at("outputs"), "report", m.outputs.report);
  }
  m.validate();
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("manifest is not valid JSON: " + std::string(e.what()));
  }
  return manifest_from_json(j);
}

/// The fixed report document: exactly these fields, timings in microseconds.
inline json report_to_json(const PipelineReport& r) {
  if (!r.attention_coverage)
    throw ConfigError("report serialization requires attention_coverage to be computed");
  return json{{"block_density", r.block_density},
              {"causal_density_baseline", r.causal_density_baseline},
              {"attention_coverage", *r.attention_coverage},
              {"selected_blocks", r.selected_blocks},
              {"total_admissible_blocks", r.total_admissible_blocks},
              {"timings_us", json{{"estimate", r.timings.estimate_us},
                                  {"permute", r.timings.permute_us},
                                  {"select", r.timings.select_us},
                                  {"attention", r.timings.attention_us},
                                  {"unpermute", r.timings.unpermute_us}}}};
}

}  // namespace pbs
