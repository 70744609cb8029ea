#include "qpe/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace qpe {

namespace {

constexpr const char* kEstimatorNames[] = {
    "DNE", "TGN", "LUO", "BATCHDNE", "DNESEEK", "TGNINT", "GOLD_GN", "GOLD_BYTES",
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::vector<double> refined_estimates(const PipelineSnapshot& snap, RefineMode mode) {
    switch (mode) {
        case RefineMode::None:
            return snap.e;
        case RefineMode::Clamp:
            return refine_clamp(snap);
        case RefineMode::Interpolate:
            return refine_interpolate(snap);
    }
    return snap.e;
}

// sum(k) / sum(e) over the members selected by `pick`.
template <typename Pick>
double ratio_over(const PipelineSnapshot& snap, const std::vector<double>& e, Pick pick,
                  const char* what) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < snap.size(); ++i) {
        if (!pick(i)) continue;
        num += static_cast<double>(snap.k[i]);
        den += e[i];
    }
    if (den <= 0.0)
        throw DegenerateInputError(std::string("zero estimate denominator for ") + what);
    return num / den;
}

}  // namespace

const char* to_string(EstimatorId id) { return kEstimatorNames[static_cast<int>(id)]; }

EstimatorId estimator_from_string(const std::string& name) {
    for (int i = 0; i < 8; ++i)
        if (name == kEstimatorNames[i]) return static_cast<EstimatorId>(i);
    throw ConfigError("unsupported estimator: " + name);
}

std::vector<EstimatorId> default_candidates() {
    return {EstimatorId::DNE,      EstimatorId::TGN,     EstimatorId::LUO,
            EstimatorId::BATCHDNE, EstimatorId::DNESEEK, EstimatorId::TGNINT};
}

PipelineSnapshot make_pipeline_snapshot(const Trace& trace, std::size_t obs_index,
                                        const Pipeline& pipeline, EstimateSource source) {
    if (obs_index >= trace.observations.size())
        throw DegenerateInputError("observation index out of range");
    const CounterSnapshot& obs = trace.observations[obs_index];

    PipelineSnapshot snap;
    snap.plan = &trace.plan;
    snap.pipeline = &pipeline;
    snap.time = obs.time;

    std::unordered_set<NodeId> members(pipeline.nodes.begin(), pipeline.nodes.end());
    for (NodeId id : pipeline.nodes) {
        std::size_t idx = trace.plan.index_of(id);
        if (idx == static_cast<std::size_t>(-1))
            throw ValidationError("pipeline references unknown node " + std::to_string(id));
        const PlanNode& node = trace.plan.nodes[idx];
        snap.node_index.push_back(idx);
        snap.kind.push_back(node.kind);
        snap.driver.push_back(pipeline.is_driver(id) ? 1 : 0);
        bool leaf = true;
        for (NodeId c : node.children)
            if (members.count(c)) leaf = false;
        snap.leaf.push_back(leaf ? 1 : 0);
        snap.k.push_back(obs.k[idx]);
        snap.e.push_back(source == EstimateSource::Current ? obs.e[idx]
                                                           : node.est_cardinality);
        snap.lb.push_back(obs.lb[idx]);
        snap.ub.push_back(obs.ub[idx]);
        snap.r.push_back(obs.r[idx]);
        snap.w.push_back(obs.w[idx]);
        snap.width.push_back(node.est_row_width);
    }
    return snap;
}

double alpha(const PipelineSnapshot& snap) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < snap.size(); ++i) {
        if (!snap.driver[i]) continue;
        num += static_cast<double>(snap.k[i]);
        den += snap.e[i];
    }
    if (den <= 0.0) throw DegenerateInputError("zero driver estimate sum in alpha");
    return clamp01(num / den);
}

std::vector<double> refine_clamp(const PipelineSnapshot& snap) {
    std::vector<double> e(snap.size());
    for (std::size_t i = 0; i < snap.size(); ++i) {
        if (snap.lb[i] > snap.ub[i])
            throw ValidationError("lb > ub at pipeline node " +
                                  std::to_string(snap.pipeline->nodes[i]));
        e[i] = std::clamp(snap.e[i], snap.lb[i], snap.ub[i]);
    }
    return e;
}

std::vector<double> refine_interpolate(const PipelineSnapshot& snap) {
    double a;
    try {
        a = alpha(snap);
    } catch (const DegenerateInputError&) {
        return snap.e;  // degenerate alpha leaves estimates unchanged
    }
    if (a <= 0.0) return snap.e;
    std::vector<double> e(snap.size());
    for (std::size_t i = 0; i < snap.size(); ++i) {
        // alpha * (k/alpha) + (1 - alpha) * e, clipped to the node's bounds
        double refined = static_cast<double>(snap.k[i]) + (1.0 - a) * snap.e[i];
        e[i] = std::clamp(refined, snap.lb[i], snap.ub[i]);
    }
    return e;
}

double dne_raw(const PipelineSnapshot& snap, RefineMode mode) {
    auto e = refined_estimates(snap, mode);
    return ratio_over(snap, e, [&](std::size_t i) { return snap.driver[i] != 0; }, "DNE");
}

double dne(const PipelineSnapshot& snap, RefineMode mode) { return clamp01(dne_raw(snap, mode)); }

double tgn_raw(const PipelineSnapshot& snap, RefineMode mode) {
    auto e = refined_estimates(snap, mode);
    return ratio_over(snap, e, [](std::size_t) { return true; }, "TGN");
}

double tgn(const PipelineSnapshot& snap, RefineMode mode) { return clamp01(tgn_raw(snap, mode)); }

double batchdne_raw(const PipelineSnapshot& snap, RefineMode mode) {
    auto e = refined_estimates(snap, mode);
    return ratio_over(
        snap, e,
        [&](std::size_t i) { return snap.driver[i] || snap.kind[i] == OperatorKind::BatchSort; },
        "BATCHDNE");
}

double batchdne(const PipelineSnapshot& snap, RefineMode mode) {
    return clamp01(batchdne_raw(snap, mode));
}

double dneseek_raw(const PipelineSnapshot& snap, RefineMode mode) {
    auto e = refined_estimates(snap, mode);
    return ratio_over(
        snap, e,
        [&](std::size_t i) { return snap.driver[i] || snap.kind[i] == OperatorKind::IndexSeek; },
        "DNESEEK");
}

double dneseek(const PipelineSnapshot& snap, RefineMode mode) {
    return clamp01(dneseek_raw(snap, mode));
}

double tgnint_raw(const PipelineSnapshot& snap, RefineMode mode) {
    double pipeline_dne = clamp01(dne_raw(snap, mode));
    auto e = refined_estimates(snap, mode);
    double sum_k = 0.0, sum_e = 0.0;
    for (std::size_t i = 0; i < snap.size(); ++i) {
        sum_k += static_cast<double>(snap.k[i]);
        sum_e += e[i];
    }
    if (sum_k <= 0.0) return 0.0;
    double den = sum_k + (1.0 - pipeline_dne) * sum_e;
    if (den <= 0.0) return 1.0;  // everything consumed and refinement says done
    return sum_k / den;
}

double tgnint(const PipelineSnapshot& snap, RefineMode mode) {
    return clamp01(tgnint_raw(snap, mode));
}

double dne_query(const std::vector<double>& pipeline_values,
                 const std::vector<double>& driver_estimate_sums, double plan_estimate_sum) {
    if (pipeline_values.size() != driver_estimate_sums.size())
        throw ValidationError("dne_query: mismatched per-pipeline vectors");
    if (plan_estimate_sum <= 0.0)
        throw DegenerateInputError("zero plan-wide estimate sum in dne_query");
    double total = 0.0;
    for (std::size_t j = 0; j < pipeline_values.size(); ++j)
        total += pipeline_values[j] * driver_estimate_sums[j] / plan_estimate_sum;
    return total;
}

namespace {

struct LuoBytes {
    double processed = 0.0;
    double remaining = 0.0;
};

LuoBytes luo_bytes(const PipelineSnapshot& snap) {
    LuoBytes b;
    auto e_int = refine_interpolate(snap);
    for (std::size_t i = 0; i < snap.size(); ++i) b.processed += snap.r[i] + snap.w[i];
    double est_in = 0.0, in_bytes = 0.0;
    for (std::size_t i = 0; i < snap.size(); ++i) {
        if (!snap.leaf[i]) continue;
        est_in += e_int[i] * snap.width[i];
        in_bytes += snap.r[i];
    }
    std::size_t root = snap.root();
    double est_out = e_int[root] * snap.width[root];
    b.remaining = std::max(0.0, est_in - in_bytes) + std::max(0.0, est_out - snap.w[root]);
    return b;
}

}  // namespace

LuoEstimate luo(const Trace& trace, std::size_t obs_index, const Pipeline& pipeline,
                double window) {
    auto snap = make_pipeline_snapshot(trace, obs_index, pipeline);
    LuoBytes now = luo_bytes(snap);
    double total = now.processed + now.remaining;
    if (total <= 0.0) throw DegenerateInputError("zero estimated total bytes in LUO");

    LuoEstimate result;
    result.fraction = now.processed / total;

    double t_now = trace.observations[obs_index].time;
    double t_start = trace.observations.front().time;
    if (t_now - t_start >= window) {
        // latest observation at least one window back
        std::size_t j = obs_index;
        while (j > 0 && t_now - trace.observations[j].time < window) --j;
        double t_then = trace.observations[j].time;
        if (t_now - t_then >= window) {
            LuoBytes then = luo_bytes(make_pipeline_snapshot(trace, j, pipeline));
            double rate = (now.processed - then.processed) / (t_now - t_then);
            if (rate > 0.0) result.remaining_seconds = now.remaining / rate;
        }
    }
    return result;
}

double gold_estimate(const Trace& trace, std::size_t obs_index, EstimatorId which) {
    if (obs_index >= trace.observations.size())
        throw DegenerateInputError("observation index out of range");
    const CounterSnapshot& obs = trace.observations[obs_index];
    if (which == EstimatorId::GOLD_GN) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < trace.node_count(); ++i) {
            num += static_cast<double>(obs.k[i]);
            den += static_cast<double>(trace.truth.n[i]);
        }
        return den > 0.0 ? num / den : 0.0;
    }
    if (which == EstimatorId::GOLD_BYTES) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < trace.node_count(); ++i) {
            num += obs.r[i] + obs.w[i];
            den += trace.truth.total_r[i] + trace.truth.total_w[i];
        }
        return den > 0.0 ? num / den : 0.0;
    }
    throw ConfigError("gold_estimate requires a GOLD_* estimator id");
}

double estimate(EstimatorId id, const Trace& trace, std::size_t obs_index,
                const Pipeline& pipeline, const EstimateOptions& options) {
    switch (id) {
        case EstimatorId::GOLD_GN:
        case EstimatorId::GOLD_BYTES:
            return gold_estimate(trace, obs_index, id);
        case EstimatorId::LUO:
            return luo(trace, obs_index, pipeline, options.luo_window).fraction;
        default:
            break;
    }
    auto snap = make_pipeline_snapshot(trace, obs_index, pipeline);
    switch (id) {
        case EstimatorId::DNE:
            return options.clamp ? dne(snap) : dne_raw(snap);
        case EstimatorId::TGN:
            return options.clamp ? tgn(snap) : tgn_raw(snap);
        case EstimatorId::BATCHDNE:
            return options.clamp ? batchdne(snap) : batchdne_raw(snap);
        case EstimatorId::DNESEEK:
            return options.clamp ? dneseek(snap) : dneseek_raw(snap);
        case EstimatorId::TGNINT:
            return options.clamp ? tgnint(snap) : tgnint_raw(snap);
        default:
            throw ConfigError("unsupported estimator id");
    }
}

namespace {

std::vector<double> driver_estimate_sums(const Trace& trace, const CounterSnapshot& obs) {
    std::vector<double> sums(trace.pipelines.size(), 0.0);
    for (std::size_t p = 0; p < trace.pipelines.size(); ++p) {
        for (NodeId id : trace.pipelines[p].drivers)
            sums[p] += obs.e[trace.plan.index_of(id)];
    }
    return sums;
}

}  // namespace

double weighted_query_progress(const Trace& trace, std::size_t obs_index,
                               const std::vector<double>& per_pipeline_estimates) {
    if (per_pipeline_estimates.size() != trace.pipelines.size())
        throw ValidationError("weighted_query_progress: one estimate per pipeline required");
    const CounterSnapshot& obs = trace.observations.at(obs_index);
    double plan_sum = 0.0;
    for (double v : obs.e) plan_sum += v;
    return dne_query(per_pipeline_estimates, driver_estimate_sums(trace, obs), plan_sum);
}

double normalized_query_progress(const Trace& trace, std::size_t obs_index,
                                 const std::vector<double>& per_pipeline_estimates) {
    if (per_pipeline_estimates.size() != trace.pipelines.size())
        throw ValidationError("normalized_query_progress: one estimate per pipeline required");
    const CounterSnapshot& obs = trace.observations.at(obs_index);
    auto sums = driver_estimate_sums(trace, obs);
    double total = 0.0;
    for (double s : sums) total += s;
    if (total <= 0.0)
        throw DegenerateInputError("zero driver estimate sum in normalized_query_progress");
    return dne_query(per_pipeline_estimates, sums, total);
}

}  // namespace qpe
