#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qpe/common.hpp"
#include "qpe/plan.hpp"

namespace qpe {

/// A fully specified simulated query: plan plus ground truth and cost model.
/// All per-node vectors are aligned with plan.nodes.
struct QuerySpec {
    std::string query_id;
    Plan plan;
    std::vector<std::int64_t> true_cardinality;  // N_i: total GetNext calls incl. spill calls
    std::vector<std::int64_t> out_rows;          // tuples actually produced (N_i minus spill calls)
    std::vector<double> per_tuple_cost;          // simulated seconds per GetNext
    std::vector<double> spill_fraction;          // 0..1, fraction of output re-read/re-written
    std::vector<std::int64_t> batch_size;        // rows per batch, BatchSort nodes only (else 0)
    std::vector<double> static_ub;               // engine-known upper bound on N_i at t_start
    double skew_z = 0.0;
    std::uint64_t seed = 0;  // drives join fan-out draws
};

/// One timestamped observation of all per-node counters.
struct CounterSnapshot {
    double time = 0.0;
    std::vector<std::int64_t> k;  // cumulative GetNext calls
    std::vector<double> e;        // current estimate of N_i
    std::vector<double> lb, ub;   // bounds on N_i
    std::vector<double> r, w;     // cumulative bytes read / written
};

struct PipelineWindow {
    double t_begin = 0.0;
    double t_end = 0.0;
};

struct TraceTruth {
    std::vector<std::int64_t> n;         // N_i
    std::vector<std::int64_t> out_rows;  // produced tuples
    std::vector<double> total_r, total_w;
    std::vector<PipelineWindow> windows;  // aligned with pipelines
};

struct Trace {
    std::string query_id;
    Plan plan;
    std::vector<Pipeline> pipelines;
    std::vector<CounterSnapshot> observations;
    TraceTruth truth;

    std::size_t node_count() const { return plan.nodes.size(); }
};

struct WorkloadConfig {
    std::string family_id = "default";
    int query_count = 1;
    double scale = 1.0;
    double skew_z = 0.0;
    double estimate_error_sigma = 0.0;  // log-normal noise on E_i
    double cost_sigma = 0.0;            // log-normal noise on per-tuple cost
    double spill_fraction = 0.0;        // applied to hash/sort operators
    std::vector<std::pair<std::string, double>> operator_mix;  // template name -> weight
    double observation_interval = 1.0;  // simulated seconds between snapshots
    double target_duration = 120.0;     // approximate simulated seconds per query
    std::uint64_t seed = 0;
};

/// Names of the built-in plan templates usable in operator_mix.
std::vector<std::string> plan_template_names();

/// Draws query_count specs from the configured template mix. Deterministic in
/// config.seed. Throws ConfigError on an empty or invalid operator_mix.
std::vector<QuerySpec> generate_workload(const WorkloadConfig& config);

/// Runs the iterator-model simulation and returns the counter trace. Snapshots
/// are taken at t_start, every `interval` simulated seconds, and at t_end.
Trace execute(const QuerySpec& spec, double interval);

/// True progress (Time(t) - Time(t_start)) / (Time(t_end) - Time(t_start)).
double ground_truth_progress(const Trace& trace, std::size_t obs_index);

/// True progress of one pipeline, measured inside its execution window and
/// clamped to [0,1] outside it.
double pipeline_truth_progress(const Trace& trace, std::size_t obs_index, int pipeline_id);

// --- serialization ---------------------------------------------------------

WorkloadConfig parse_workload_config(const std::string& text);
WorkloadConfig read_workload_config(const std::string& path);

std::string spec_to_json_line(const QuerySpec& spec);
QuerySpec spec_from_json_line(const std::string& line);
std::vector<QuerySpec> read_spec_file(const std::string& path);
void write_spec_file(const std::string& path, const std::vector<QuerySpec>& specs);

// Trace files are line-delimited JSON: a header line carrying plan, pipelines
// and truth, then one snapshot per line.
void write_trace_file(const std::string& path, const Trace& trace);
Trace read_trace_file(const std::string& path);

}  // namespace qpe
