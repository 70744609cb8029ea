#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qpe/common.hpp"
#include "qpe/plan.hpp"
#include "qpe/sim.hpp"

namespace qpe {

/// Candidate progress estimators, in canonical (tie-break) order. The GOLD_*
/// entries are evaluation-only references that read ground truth.
enum class EstimatorId : int {
    DNE = 0,
    TGN,
    LUO,
    BATCHDNE,
    DNESEEK,
    TGNINT,
    GOLD_GN,
    GOLD_BYTES,
};

const char* to_string(EstimatorId id);
EstimatorId estimator_from_string(const std::string& name);

/// The six selectable estimators in canonical order.
std::vector<EstimatorId> default_candidates();

/// Which estimate the snapshot carries: the engine-maintained current estimate
/// (bounds-clamped E_i^t) or the unrefined initial optimizer estimate.
enum class EstimateSource { Current, Initial };

enum class RefineMode { None, Clamp, Interpolate };

/// Per-pipeline view of one observation. Vectors are aligned with `nodes`
/// (pipeline post-order).
struct PipelineSnapshot {
    const Plan* plan = nullptr;
    const Pipeline* pipeline = nullptr;
    double time = 0.0;
    std::vector<std::size_t> node_index;  // position in plan.nodes
    std::vector<OperatorKind> kind;
    std::vector<char> driver;
    std::vector<char> leaf;  // no in-pipeline children (pipeline inputs)
    std::vector<std::int64_t> k;
    std::vector<double> e, lb, ub, r, w;
    std::vector<double> width;

    std::size_t size() const { return kind.size(); }
    std::size_t root() const { return size() - 1; }  // post-order puts the root last
};

PipelineSnapshot make_pipeline_snapshot(const Trace& trace, std::size_t obs_index,
                                        const Pipeline& pipeline,
                                        EstimateSource source = EstimateSource::Current);

/// Percentage of the dominant input consumed: sum(driver k) / sum(driver e),
/// clamped to [0,1]. Throws DegenerateInputError when sum(driver e) == 0.
double alpha(const PipelineSnapshot& snap);

/// Estimates snapped to the nearest bound. Throws ValidationError if lb > ub.
std::vector<double> refine_clamp(const PipelineSnapshot& snap);

/// Interpolation between the scaled-up observed count k/alpha and the current
/// estimate: e_new = k + (1 - alpha) * e, clipped to [lb, ub]. Nodes keep
/// their estimate when alpha is degenerate.
std::vector<double> refine_interpolate(const PipelineSnapshot& snap);

// Per-pipeline estimators. The default returns are clamped to [0,1]; *_raw
// variants keep overflow visible for the feature layer. RefineMode defaults
// follow each estimator's source technique (bounds clamping for the GetNext
// family, interpolation algebra for TGNINT).
double dne(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double dne_raw(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double tgn(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double tgn_raw(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double batchdne(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double batchdne_raw(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double dneseek(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double dneseek_raw(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double tgnint(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);
double tgnint_raw(const PipelineSnapshot& snap, RefineMode mode = RefineMode::Clamp);

/// Query progress as the weighted sum of per-pipeline values: each pipeline is
/// weighted by its driver-estimate sum over the plan-wide estimate sum.
double dne_query(const std::vector<double>& pipeline_values,
                 const std::vector<double>& driver_estimate_sums, double plan_estimate_sum);

struct LuoEstimate {
    double fraction = 0.0;
    std::optional<double> remaining_seconds;  // unset until one trailing window elapsed
};

/// Bytes-processed estimator: fraction of estimated total bytes handled at the
/// pipeline inputs/outputs (plus spill traffic), with the remaining-time
/// estimate from the trailing `window` seconds of byte throughput.
LuoEstimate luo(const Trace& trace, std::size_t obs_index, const Pipeline& pipeline,
                double window = 10.0);

/// Idealized query-level references using ground truth: GOLD_GN is
/// sum(k)/sum(N); GOLD_BYTES is bytes processed over true byte totals.
double gold_estimate(const Trace& trace, std::size_t obs_index, EstimatorId which);

struct EstimateOptions {
    bool clamp = true;
    double luo_window = 10.0;
};

/// Dispatch by estimator id. GOLD_* ids ignore the pipeline argument.
double estimate(EstimatorId id, const Trace& trace, std::size_t obs_index,
                const Pipeline& pipeline, const EstimateOptions& options = {});

/// Eq. 5 weighting evaluated on a trace observation: weights are the current
/// driver-estimate sums over the plan-wide estimate sum.
double weighted_query_progress(const Trace& trace, std::size_t obs_index,
                               const std::vector<double>& per_pipeline_estimates);

/// Same weighting scheme normalized across pipelines, so a finished query
/// reports exactly 1.0. Used when reporting progress to users.
double normalized_query_progress(const Trace& trace, std::size_t obs_index,
                                 const std::vector<double>& per_pipeline_estimates);

}  // namespace qpe
