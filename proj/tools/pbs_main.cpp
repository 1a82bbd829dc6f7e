// Command-line harness: workload generation, pipeline runs, parameter
// sweeps, stage timing benchmarks, and visualization data export.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pbs/attention.hpp"
#include "pbs/block_selection.hpp"
#include "pbs/manifest.hpp"
#include "pbs/matrix.hpp"
#include "pbs/pipeline.hpp"
#include "pbs/tensor_io.hpp"
#include "pbs/workload.hpp"

namespace fs = std::filesystem;
using pbs::json;

namespace {

struct Overrides {
  std::optional<std::string> precision;
  std::optional<std::size_t> block_size;
  std::optional<std::size_t> segment_size;
  std::optional<double> tau;
  std::optional<std::string> strategy;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--precision", o.precision, "Element precision (f32|f64)");
  cmd->add_option("--block-size", o.block_size, "Attention block size B");
  cmd->add_option("--segment-size", o.segment_size, "Permutation segment size S (0 = none)");
  cmd->add_option("--tau", o.tau, "Block selection threshold in [0,1]");
  cmd->add_option("--strategy", o.strategy,
                  "Permutation strategy (none|key_permute|query_permute|both)");
  cmd->add_option("--seed", o.seed, "Workload seed override");
  cmd->add_option("--threads", o.threads, "Max heads evaluated concurrently")
      ->envname("PBS_THREADS");
}

void apply_overrides(pbs::RunManifest& m, const Overrides& o) {
  if (o.precision) m.pipeline.precision = pbs::precision_from_name(*o.precision);
  if (o.block_size) m.pipeline.block_size = *o.block_size;
  if (o.segment_size) m.pipeline.segment_size = *o.segment_size;
  if (o.tau) m.pipeline.tau = *o.tau;
  if (o.strategy) m.pipeline.strategy = pbs::strategy_from_name(*o.strategy);
  if (o.seed && m.workload) m.workload->seed = *o.seed;
  m.validate();
}

fs::path resolve(const fs::path& base_dir, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

template <std::floating_point T>
struct HeadInputs {
  std::vector<pbs::Matrix<T>> q, k, v;
  bool from_stack = false;
};

template <std::floating_point T>
HeadInputs<T> load_inputs(const pbs::RunManifest& m, const fs::path& base_dir) {
  HeadInputs<T> in;
  if (m.workload) {
    auto w = pbs::generate_workload<T>(*m.workload, m.pipeline.block_size,
                                       m.pipeline.segment_size);
    in.q = std::move(w.q);
    in.k = std::move(w.k);
    in.v = std::move(w.v);
    in.from_stack = in.q.size() > 1;
    return in;
  }
  const auto lq = pbs::read_tensor(resolve(base_dir, m.inputs->q));
  const auto lk = pbs::read_tensor(resolve(base_dir, m.inputs->k));
  const auto lv = pbs::read_tensor(resolve(base_dir, m.inputs->v));
  if (lq.head_count() != lk.head_count() || lk.head_count() != lv.head_count())
    throw pbs::ConfigError("q/k/v head counts differ (" + std::to_string(lq.head_count()) +
                           ", " + std::to_string(lk.head_count()) + ", " +
                           std::to_string(lv.head_count()) + ")");
  in.q = lq.as<T>();
  in.k = lk.as<T>();
  in.v = lv.as<T>();
  in.from_stack = lq.is_stack || lk.is_stack || lv.is_stack;
  return in;
}

/// Evaluate fn(head) for every head, at most `threads` at a time; results
/// land in per-head slots so the merge order is independent of scheduling.
template <typename Fn>
void for_each_head(std::size_t heads, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, threads);
  if (threads == 1 || heads <= 1) {
    for (std::size_t h = 0; h < heads; ++h) fn(h);
    return;
  }
  std::vector<std::exception_ptr> errors(heads);
  for (std::size_t begin = 0; begin < heads; begin += threads) {
    const std::size_t end = std::min(heads, begin + threads);
    std::vector<std::thread> pool;
    for (std::size_t h = begin; h < end; ++h)
      pool.emplace_back([&, h] {
        try {
          fn(h);
        } catch (...) {
          errors[h] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

json aggregate_reports(const std::vector<json>& heads) {
  json agg = heads.front();
  if (heads.size() == 1) return agg;
  const double h = double(heads.size());
  for (const char* key : {"block_density", "causal_density_baseline", "attention_coverage"}) {
    double sum = 0;
    for (const auto& r : heads) sum += r.at(key).get<double>();
    agg[key] = sum / h;
  }
  for (const char* key : {"selected_blocks", "total_admissible_blocks"}) {
    std::uint64_t sum = 0;
    for (const auto& r : heads) sum += r.at(key).get<std::uint64_t>();
    agg[key] = sum;
  }
  for (const char* key : {"estimate", "permute", "select", "attention", "unpermute"}) {
    double sum = 0;
    for (const auto& r : heads) sum += r.at("timings_us").at(key).get<double>();
    agg["timings_us"][key] = sum;
  }
  return agg;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw pbs::IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw pbs::IoError("short write to '" + path + "'");
}

// ---------------------------------------------------------------- gen

int cmd_gen(const pbs::WorkloadSpec& spec, const pbs::PipelineConfig& cfg,
            const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  auto emit = [&](auto tag) {
    using T = decltype(tag);
    const auto w = pbs::generate_workload<T>(spec, cfg.block_size, cfg.segment_size);
    const bool stack = spec.heads > 1;
    if (stack) {
      pbs::write_tensor_stack(dir / "q.pbst", w.q);
      pbs::write_tensor_stack(dir / "k.pbst", w.k);
      pbs::write_tensor_stack(dir / "v.pbst", w.v);
    } else {
      pbs::write_tensor(dir / "q.pbst", w.q[0]);
      pbs::write_tensor(dir / "k.pbst", w.k[0]);
      pbs::write_tensor(dir / "v.pbst", w.v[0]);
    }
  };
  if (cfg.precision == pbs::Precision::f32)
    emit(float{});
  else
    emit(double{});

  // ready-to-run manifest pointing at the tensors just written
  json mj{{"inputs", json{{"q", "q.pbst"}, {"k", "k.pbst"}, {"v", "v.pbst"}}},
          {"pipeline", pbs::pipeline_to_json(cfg)},
          {"outputs", json{{"attention", "out.pbst"}, {"report", "report.json"}}}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw pbs::IoError("cannot write manifest.json");
  out << mj.dump(2) << "\n";

  std::cout << "wrote q.pbst k.pbst v.pbst manifest.json to " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- run

template <std::floating_point T>
int run_typed(const pbs::RunManifest& m, const fs::path& base_dir, std::size_t threads) {
  const auto in = load_inputs<T>(m, base_dir);
  const std::size_t heads = in.q.size();
  if (heads == 0) throw pbs::ConfigError("inputs hold no heads");
  // the report includes true-mass coverage, so fail before any heavy work
  // if the sequence is beyond the coverage diagnostic's limit
  const std::size_t n = in.q[0].rows();
  if (n * n > pbs::kCoverageElementLimit)
    throw pbs::ResourceError("run needs N^2 coverage evaluations for its report",
                             pbs::kCoverageElementLimit);

  std::vector<pbs::Matrix<T>> outputs(heads);
  std::vector<json> reports(heads);
  for_each_head(heads, threads, [&](std::size_t h) {
    auto res = pbs::pbs_attention(in.q[h], in.k[h], in.v[h], m.pipeline);
    res.report.attention_coverage = pbs::attention_coverage(
        in.q[h], in.k[h], res.mask, res.sigma, res.pi, m.pipeline.scale);
    outputs[h] = std::move(res.output);
    reports[h] = pbs::report_to_json(res.report);
  });

  if (!m.outputs.attention.empty()) {
    const fs::path out_path = resolve(base_dir, m.outputs.attention);
    if (in.from_stack || heads > 1)
      pbs::write_tensor_stack(out_path, outputs);
    else
      pbs::write_tensor(out_path, outputs[0]);
  }

  json doc{{"aggregate", aggregate_reports(reports)}, {"heads", reports}};
  const std::string report_path =
      m.outputs.report.empty() ? "" : resolve(base_dir, m.outputs.report).string();
  write_text(report_path, doc.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------- sweep

std::string format_sweep_csv(const std::vector<pbs::SweepRow>& rows) {
  std::string csv = "tau,S,strategy,density,coverage,max_err,mean_err,time_us\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6g,%zu,%s,%.6f,%.6f,%.9g,%.9g,%.1f\n", r.tau,
                  r.segment_size, pbs::strategy_name(r.strategy), r.density, r.coverage,
                  r.max_err, r.mean_err, r.time_us);
    csv += buf;
  }
  return csv;
}

template <std::floating_point T>
int sweep_typed(const pbs::RunManifest& m, const fs::path& base_dir,
                std::vector<double> taus, std::vector<std::size_t> segments,
                std::vector<std::string> strategies, const std::string& out_path) {
  const auto in = load_inputs<T>(m, base_dir);
  if (taus.empty()) taus = {m.pipeline.tau};
  if (segments.empty()) segments = {m.pipeline.segment_size};
  if (strategies.empty()) strategies = {pbs::strategy_name(m.pipeline.strategy)};
  std::sort(strategies.begin(), strategies.end());
  strategies.erase(std::unique(strategies.begin(), strategies.end()), strategies.end());

  std::vector<pbs::SweepRow> rows;
  for (const auto& name : strategies) {
    pbs::PipelineConfig cfg = m.pipeline;
    cfg.strategy = pbs::strategy_from_name(name);
    auto part = pbs::density_sweep(in.q[0], in.k[0], in.v[0], cfg, taus, segments);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  write_text(out_path, format_sweep_csv(rows));
  return 0;
}

// ---------------------------------------------------------------- bench

double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double idx = p * double(v.size() - 1);
  const std::size_t lo = std::size_t(idx);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = idx - double(lo);
  return v[lo] * (1 - frac) + v[hi] * frac;
}

template <std::floating_point T>
int bench_typed(const pbs::RunManifest& m, const fs::path& base_dir, std::size_t repeat,
                std::size_t threads, const std::string& out_path) {
  if (repeat < 3) throw pbs::ConfigError("bench needs --repeat >= 3");
  const auto in = load_inputs<T>(m, base_dir);
  const std::size_t heads = in.q.size();

  const char* stage_names[] = {"estimate", "permute", "select", "attention", "unpermute"};
  std::vector<std::vector<double>> samples(5);

  for (std::size_t r = 0; r < repeat; ++r) {
    std::vector<pbs::StageTimings> per_head(heads);
    for_each_head(heads, threads, [&](std::size_t h) {
      per_head[h] = pbs::pbs_attention(in.q[h], in.k[h], in.v[h], m.pipeline).report.timings;
    });
    double sums[5] = {};
    for (const auto& t : per_head) {
      sums[0] += t.estimate_us;
      sums[1] += t.permute_us;
      sums[2] += t.select_us;
      sums[3] += t.attention_us;
      sums[4] += t.unpermute_us;
    }
    for (int s = 0; s < 5; ++s) samples[s].push_back(sums[s]);
  }

  json stages;
  for (int s = 0; s < 5; ++s) {
    stages[stage_names[s]] = json{
        {"median_us", quantile(samples[s], 0.5)},
        {"iqr_us", quantile(samples[s], 0.75) - quantile(samples[s], 0.25)}};
  }
  json doc{{"repeat", repeat}, {"heads", heads}, {"stages", stages}};
  write_text(out_path, doc.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------- viz

template <std::floating_point T>
int viz_typed(const pbs::RunManifest& m, const fs::path& base_dir, std::size_t head,
              const std::string& label, const std::string& out_dir) {
  const auto in = load_inputs<T>(m, base_dir);
  if (head >= in.q.size())
    throw pbs::ConfigError("head " + std::to_string(head) + " out of range (have " +
                           std::to_string(in.q.size()) + ")");
  const auto& q = in.q[head];
  const std::size_t n = q.rows();
  if (n * n > pbs::kVizElementLimit)
    throw pbs::ResourceError("visualization would materialize an N^2 matrix",
                             pbs::kVizElementLimit);

  auto res = pbs::pbs_attention(q, in.k[head], in.v[head], m.pipeline);

  // permuted-space attention probabilities under the original-position mask
  const auto qp = pbs::apply_rows(res.sigma, q);
  const auto kp = pbs::apply_rows(res.pi, in.k[head]);
  const pbs::ElementMask em(res.sigma.map(), res.pi.map());
  const double scale = m.pipeline.scale > 0 ? m.pipeline.scale : 1.0 / std::sqrt(double(q.cols()));
  pbs::Matrix<T> scores = pbs::matmul_transposed(qp, kp);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      scores(i, j) = em.admissible(i, j) ? scores(i, j) * T(scale) : pbs::neg_inf<T>();
  pbs::Matrix<T> probs = pbs::softmax_rows(scores);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const std::string suffix = label + "_h" + std::to_string(head);
  pbs::write_tensor(dir / ("attn_" + suffix + ".pbst"), probs);
  pbs::write_tensor(dir / ("mask_" + suffix + ".pbst"),
                    res.mask.template to_matrix<float>());
  std::cout << "wrote attn_" << suffix << ".pbst mask_" << suffix << ".pbst to " << out_dir
            << "\n";
  return 0;
}

template <typename Fn>
int dispatch_precision(pbs::Precision p, Fn&& fn) {
  return p == pbs::Precision::f32 ? fn(float{}) : fn(double{});
}

std::vector<std::size_t> parse_size_list(const std::vector<std::string>& in) {
  std::vector<std::size_t> out;
  for (const auto& s : in) out.push_back(std::stoull(s));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Permuted block-sparse attention reference engine"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic workload");
  std::string gen_kind = "gaussian", gen_scatter = "scattered", gen_out = ".";
  pbs::WorkloadSpec spec;
  pbs::PipelineConfig gen_cfg;
  std::string gen_precision = "f64", gen_strategy = "key_permute";
  gen->add_option("--kind", gen_kind, "gaussian|vertical_lines|block_diag|mixed");
  gen->add_option("--n", spec.n, "Sequence length");
  gen->add_option("--d", spec.d, "Head dimension");
  gen->add_option("--heads", spec.heads, "Head count");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--line-count", spec.line_count, "Boosted key rows (vertical_lines/mixed)");
  gen->add_option("--line-strength", spec.line_strength, "Boosted key norm");
  gen->add_option("--scatter", gen_scatter, "clustered|scattered");
  gen->add_option("--precision", gen_precision, "f32|f64");
  gen->add_option("--block-size", gen_cfg.block_size, "Block size for the emitted manifest");
  gen->add_option("--segment-size", gen_cfg.segment_size, "Segment size for the emitted manifest");
  gen->add_option("--tau", gen_cfg.tau, "Selection threshold for the emitted manifest");
  gen->add_option("--strategy", gen_strategy, "Strategy for the emitted manifest");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // run / sweep / bench / viz share the manifest + override flags
  std::string manifest_path;
  Overrides ov;
  auto* run = app.add_subcommand("run", "Run the pipeline per head and write reports");
  run->add_option("--manifest", manifest_path, "Run manifest JSON")->required();
  add_override_flags(run, ov);

  auto* sweep = app.add_subcommand("sweep", "Density/coverage/error sweep as CSV");
  std::vector<std::string> tau_list_raw, segment_list_raw, strategy_list;
  std::string sweep_out;
  sweep->add_option("--manifest", manifest_path, "Run manifest JSON")->required();
  sweep->add_option("--tau-list", tau_list_raw, "Thresholds to sweep")->delimiter(',');
  sweep->add_option("--segment-list", segment_list_raw, "Segment sizes to sweep")
      ->delimiter(',');
  sweep->add_option("--strategies", strategy_list, "Strategies to sweep")->delimiter(',');
  sweep->add_option("--out", sweep_out, "CSV path (default stdout)");
  add_override_flags(sweep, ov);

  auto* bench = app.add_subcommand("bench", "Per-stage timing benchmark");
  std::size_t repeat = 5;
  std::string bench_out;
  bench->add_option("--manifest", manifest_path, "Run manifest JSON")->required();
  bench->add_option("--repeat", repeat, "Repetitions (>= 3)");
  bench->add_option("--out", bench_out, "Timing JSON path (default stdout)");
  add_override_flags(bench, ov);

  auto* viz = app.add_subcommand("viz", "Export attention matrix and block mask tensors");
  std::size_t viz_head = 0;
  std::string viz_label = "layer", viz_out = ".";
  viz->add_option("--manifest", manifest_path, "Run manifest JSON")->required();
  viz->add_option("--head", viz_head, "Head index");
  viz->add_option("--label", viz_label, "Label used in output file names");
  viz->add_option("--out-dir", viz_out, "Output directory");
  add_override_flags(viz, ov);

  try {
    app.parse(argc, argv);

    if (gen->parsed()) {
      spec.kind = pbs::workload_kind_from_name(gen_kind);
      spec.scatter = pbs::scatter_from_name(gen_scatter);
      gen_cfg.precision = pbs::precision_from_name(gen_precision);
      gen_cfg.strategy = pbs::strategy_from_name(gen_strategy);
      spec.validate();
      gen_cfg.validate();
      return cmd_gen(spec, gen_cfg, gen_out);
    }

    pbs::RunManifest m = pbs::load_manifest(manifest_path);
    apply_overrides(m, ov);
    const fs::path base_dir = fs::path(manifest_path).parent_path();

    if (run->parsed())
      return dispatch_precision(m.pipeline.precision, [&](auto tag) {
        return run_typed<decltype(tag)>(m, base_dir, ov.threads);
      });
    if (sweep->parsed())
      return dispatch_precision(m.pipeline.precision, [&](auto tag) {
        std::vector<double> taus;
        for (const auto& s : tau_list_raw) taus.push_back(std::stod(s));
        return sweep_typed<decltype(tag)>(m, base_dir, taus, parse_size_list(segment_list_raw),
                                          strategy_list, sweep_out);
      });
    if (bench->parsed())
      return dispatch_precision(m.pipeline.precision, [&](auto tag) {
        return bench_typed<decltype(tag)>(m, base_dir, repeat, ov.threads, bench_out);
      });
    if (viz->parsed())
      return dispatch_precision(m.pipeline.precision, [&](auto tag) {
        return viz_typed<decltype(tag)>(m, base_dir, viz_head, viz_label, viz_out);
      });
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "E_CONFIG: " << e.what() << "\n";
    return 2;
  } catch (const pbs::Error& e) {
    std::cerr << e.prefix() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::invalid_argument& e) {
    std::cerr << "E_CONFIG: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "E_UNKNOWN: " << e.what() << "\n";
    return 1;
  }
}
