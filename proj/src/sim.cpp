#include "qpe/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace qpe {

namespace {

using json = nlohmann::ordered_json;

constexpr std::int64_t kMaxDriverSteps = 4000;

std::int64_t muldiv_floor(std::int64_t a, std::int64_t b, std::int64_t c) {
    if (c <= 0) return 0;
    return static_cast<std::int64_t>((static_cast<__int128>(a) * b) / c);
}

// ---------------------------------------------------------------------------
// Executor

struct ExecNode {
    OperatorKind kind = OperatorKind::Other;
    std::ptrdiff_t parent = -1;
    std::vector<std::size_t> children;  // indexes into the node array
    std::int64_t n_total = 0;           // total GetNext calls incl. spill calls
    std::int64_t out = 0;               // tuples produced
    std::int64_t spill_calls = 0;       // n_total - out
    std::int64_t batch = 0;
    double cost = 1.0;
    double width = 1.0;
    double est = 0.0;  // initial optimizer estimate E_i
    double static_ub = 0.0;
    int pipeline = -1;
    bool source = false;          // advances on its own during its pipeline
    bool inner_excluded = false;  // lies in an NLJ inner subtree of its pipeline
    bool pipeline_leaf = false;
    bool pipeline_root = false;
    std::size_t owner_nlj = static_cast<std::size_t>(-1);
    std::size_t outer_child = static_cast<std::size_t>(-1);  // for NLJ: index of first child
    // runtime state
    std::int64_t consumed = 0;  // sources only
    std::int64_t produced = 0;
    std::int64_t k = 0;
};

// GetNext calls issued once `produced` tuples are out, with spill calls
// interleaved proportionally.
std::int64_t calls_for(const ExecNode& n, std::int64_t produced) {
    if (n.out <= 0) return n.n_total > 0 && produced >= n.out ? n.n_total : 0;
    std::int64_t calls = produced + muldiv_floor(produced, n.spill_calls, n.out);
    return produced >= n.out ? n.n_total : calls;
}

std::int64_t produced_from_calls(const ExecNode& n, std::int64_t k) {
    if (n.n_total <= 0) return 0;
    if (k >= n.n_total) return n.out;
    return k - muldiv_floor(k, n.spill_calls, n.n_total);
}

class Executor {
  public:
    Executor(const QuerySpec& spec, double interval)
        : spec_(spec), interval_(interval), pipelines_(decompose_pipelines(spec.plan)) {
        build_nodes();
        build_fanouts();
    }

    Trace run() {
        Trace trace;
        trace.query_id = spec_.query_id;
        trace.plan = spec_.plan;
        trace.pipelines = pipelines_;
        trace.truth.n = spec_.true_cardinality;
        trace.truth.out_rows = spec_.out_rows;
        trace.truth.windows.resize(pipelines_.size());

        emit_snapshot(0.0, static_cast<std::size_t>(-1), 0, 0.0);
        next_snap_ = interval_;

        for (std::size_t p = 0; p < pipelines_.size(); ++p) {
            trace.truth.windows[p].t_begin = clock_;
            run_pipeline(p);
            trace.truth.windows[p].t_end = clock_;
        }

        // Final snapshot at t_end unless an interval snapshot landed there.
        if (observations_.empty() || observations_.back().time < clock_ - 1e-12)
            emit_snapshot(clock_, static_cast<std::size_t>(-1), 0, 0.0);

        trace.observations = std::move(observations_);
        const auto& last = trace.observations.back();
        trace.truth.total_r = last.r;
        trace.truth.total_w = last.w;
        return trace;
    }

  private:
    void build_nodes() {
        const Plan& plan = spec_.plan;
        nodes_.resize(plan.nodes.size());
        std::unordered_map<NodeId, std::size_t> index;
        for (std::size_t i = 0; i < plan.nodes.size(); ++i) index.emplace(plan.nodes[i].id, i);
        auto parents = parent_index(plan);
        for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
            ExecNode& n = nodes_[i];
            n.kind = plan.nodes[i].kind;
            n.parent = parents[i];
            for (NodeId c : plan.nodes[i].children) n.children.push_back(index[c]);
            n.n_total = spec_.true_cardinality[i];
            n.out = spec_.out_rows[i];
            n.spill_calls = n.n_total - n.out;
            n.batch = spec_.batch_size[i];
            n.cost = spec_.per_tuple_cost[i];
            n.width = plan.nodes[i].est_row_width;
            n.est = plan.nodes[i].est_cardinality;
            n.static_ub = spec_.static_ub[i];
            if (n.kind == OperatorKind::NestedLoopJoin && !n.children.empty())
                n.outer_child = n.children.front();
        }

        // Plan-global post-order, for bound propagation at snapshot time.
        plan_post_order_.reserve(nodes_.size());
        std::vector<std::pair<std::size_t, std::size_t>> stack;
        stack.emplace_back(index[plan.root], 0);
        while (!stack.empty()) {
            auto& [ni, next] = stack.back();
            if (next < nodes_[ni].children.size()) {
                stack.emplace_back(nodes_[ni].children[next++], 0);
            } else {
                plan_post_order_.push_back(ni);
                stack.pop_back();
            }
        }

        pipeline_members_.resize(pipelines_.size());
        for (std::size_t p = 0; p < pipelines_.size(); ++p) {
            for (NodeId id : pipelines_[p].nodes) {
                std::size_t ni = index[id];
                nodes_[ni].pipeline = static_cast<int>(p);
            }
        }
        // Member lists in plan post-order (children before parents).
        for (std::size_t ni : plan_post_order_)
            pipeline_members_[nodes_[ni].pipeline].push_back(ni);
        for (std::size_t p = 0; p < pipelines_.size(); ++p)
            nodes_[pipeline_members_[p].back()].pipeline_root = true;

        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            ExecNode& n = nodes_[i];
            n.pipeline_leaf = true;
            for (std::size_t c : n.children)
                if (nodes_[c].pipeline == n.pipeline) n.pipeline_leaf = false;
            if (pipelines_[n.pipeline].is_driver(spec_.plan.nodes[i].id)) n.source = true;
        }
        // Nodes inside an in-pipeline NLJ inner subtree pace off that join.
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const ExecNode& j = nodes_[i];
            if (j.kind != OperatorKind::NestedLoopJoin) continue;
            for (std::size_t c = 1; c < j.children.size(); ++c) {
                std::vector<std::size_t> stack2{j.children[c]};
                while (!stack2.empty()) {
                    std::size_t cur = stack2.back();
                    stack2.pop_back();
                    if (nodes_[cur].pipeline != j.pipeline) continue;
                    nodes_[cur].inner_excluded = true;
                    nodes_[cur].owner_nlj = i;
                    for (std::size_t cc : nodes_[cur].children) stack2.push_back(cc);
                }
            }
        }
        // An NLJ whose outer input comes from a preceding pipeline consumes it
        // as a source of its own.
        for (std::size_t p = 0; p < pipelines_.size(); ++p) {
            bool any_source = false;
            for (std::size_t ni : pipeline_members_[p]) any_source |= nodes_[ni].source;
            for (std::size_t ni : pipeline_members_[p]) {
                ExecNode& n = nodes_[ni];
                if (n.kind == OperatorKind::NestedLoopJoin &&
                    n.outer_child != static_cast<std::size_t>(-1) &&
                    nodes_[n.outer_child].pipeline != n.pipeline) {
                    n.source = true;
                    any_source = true;
                }
            }
            bool any_work = false;
            for (std::size_t ni : pipeline_members_[p]) any_work |= nodes_[ni].n_total > 0;
            if (!any_source && any_work)
                throw ValidationError("query " + spec_.query_id + ": pipeline " +
                                      std::to_string(p) + " has no tuple source");
        }
    }

    std::int64_t source_total(const ExecNode& n) const {
        if (n.kind == OperatorKind::NestedLoopJoin &&
            n.outer_child != static_cast<std::size_t>(-1) &&
            nodes_[n.outer_child].pipeline != n.pipeline)
            return nodes_[n.outer_child].out;
        return n.out;
    }

    void build_fanouts() {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const ExecNode& n = nodes_[i];
            if (n.kind != OperatorKind::NestedLoopJoin) continue;
            std::int64_t m = n.outer_child == static_cast<std::size_t>(-1)
                                 ? 0
                                 : nodes_[n.outer_child].out;
            std::int64_t total = n.out;
            std::vector<std::int64_t> prefix(static_cast<std::size_t>(m) + 1, 0);
            if (m > 0) {
                Rng rng(mix_seed(spec_.seed, 0x10000 + i));
                std::vector<double> weight(static_cast<std::size_t>(m));
                for (std::int64_t t = 0; t < m; ++t)
                    weight[t] = std::pow(static_cast<double>(t + 1), -spec_.skew_z);
                std::shuffle(weight.begin(), weight.end(), rng);
                double sum = std::accumulate(weight.begin(), weight.end(), 0.0);
                double cum = 0.0;
                for (std::int64_t t = 0; t < m; ++t) {
                    cum += weight[t];
                    prefix[t + 1] = std::llround(static_cast<double>(total) * (cum / sum));
                }
                prefix[m] = total;
                for (std::int64_t t = 1; t <= m; ++t)
                    prefix[t] = std::max(prefix[t], prefix[t - 1]);
            }
            fanout_prefix_[i] = std::move(prefix);
        }
    }

    std::int64_t fanout_sum(std::size_t nlj, std::int64_t outer_consumed) const {
        const auto& prefix = fanout_prefix_.at(nlj);
        std::int64_t m = static_cast<std::int64_t>(prefix.size()) - 1;
        return prefix[static_cast<std::size_t>(std::clamp<std::int64_t>(outer_consumed, 0, m))];
    }

    std::int64_t produced_target(std::size_t ni) {
        ExecNode& n = nodes_[ni];
        if (n.source) {
            if (n.kind == OperatorKind::NestedLoopJoin) return fanout_sum(ni, n.consumed);
            return n.consumed;
        }
        if (n.inner_excluded) {
            const ExecNode& j = nodes_[n.owner_nlj];
            std::int64_t outer_rows = j.source ? j.consumed : nodes_[j.outer_child].produced;
            std::int64_t s = fanout_sum(n.owner_nlj, outer_rows);
            if (j.out <= 0) return s >= j.out ? n.out : 0;
            return s >= j.out ? n.out : muldiv_floor(n.out, s, j.out);
        }
        switch (n.kind) {
            case OperatorKind::NestedLoopJoin:
                return fanout_sum(ni, nodes_[n.outer_child].produced);
            case OperatorKind::Sort: {
                const ExecNode& c = nodes_[n.children.front()];
                return c.produced >= c.out ? n.out : 0;
            }
            case OperatorKind::BatchSort: {
                const ExecNode& c = nodes_[n.children.front()];
                if (c.produced >= c.out) return n.out;
                if (n.batch <= 0) return muldiv_floor(n.out, c.produced, std::max<std::int64_t>(c.out, 1));
                std::int64_t emitted_in = (c.produced / n.batch) * n.batch;
                return std::min(n.out, muldiv_floor(n.out, emitted_in, std::max<std::int64_t>(c.out, 1)));
            }
            default: {
                std::int64_t sp = 0, so = 0;
                for (std::size_t c : n.children) {
                    if (nodes_[c].pipeline != n.pipeline) continue;
                    sp += nodes_[c].produced;
                    so += nodes_[c].out;
                }
                if (so <= 0) return sp >= so ? n.out : 0;
                return sp >= so ? n.out : muldiv_floor(n.out, sp, so);
            }
        }
    }

    // Re-evaluate every node of the pipeline bottom-up and play the resulting
    // GetNext calls against the clock.
    void cascade(std::size_t p) {
        for (std::size_t ni : pipeline_members_[p]) {
            std::int64_t target = produced_target(ni);
            if (target <= nodes_[ni].produced) continue;
            std::int64_t k_target = calls_for(nodes_[ni], target);
            std::int64_t delta = k_target - nodes_[ni].k;
            nodes_[ni].produced = target;
            if (delta > 0) advance(ni, delta);
        }
    }

    void run_pipeline(std::size_t p) {
        std::vector<std::size_t> sources;
        std::int64_t total_steps = 0;
        for (std::size_t ni : pipeline_members_[p]) {
            if (!nodes_[ni].source) continue;
            sources.push_back(ni);
            total_steps += source_total(nodes_[ni]);
        }
        cascade(p);  // settle zero-input nodes
        if (sources.empty()) return;
        std::int64_t chunk = std::max<std::int64_t>(1, total_steps / kMaxDriverSteps);
        while (true) {
            // Pick the source with the least relative progress; ties go to the
            // lower node index for determinism.
            std::size_t best = static_cast<std::size_t>(-1);
            double best_frac = std::numeric_limits<double>::infinity();
            for (std::size_t ni : sources) {
                std::int64_t total = source_total(nodes_[ni]);
                if (nodes_[ni].consumed >= total) continue;
                double frac = static_cast<double>(nodes_[ni].consumed + 1) /
                              static_cast<double>(total);
                if (frac < best_frac) {
                    best_frac = frac;
                    best = ni;
                }
            }
            if (best == static_cast<std::size_t>(-1)) break;
            std::int64_t total = source_total(nodes_[best]);
            std::int64_t adv = std::min(chunk, total - nodes_[best].consumed);
            nodes_[best].consumed += adv;
            cascade(p);
        }
    }

    // --- clock and snapshots -----------------------------------------------

    void advance(std::size_t ni, std::int64_t count) {
        double cost = nodes_[ni].cost;
        double t0 = clock_;
        double duration = static_cast<double>(count) * cost;
        while (next_snap_ <= t0 + duration + 1e-12) {
            std::int64_t partial = static_cast<std::int64_t>(
                std::floor((next_snap_ - t0) / cost + 1e-9));
            partial = std::clamp<std::int64_t>(partial, 0, count);
            emit_snapshot(next_snap_, ni, partial, cost);
            next_snap_ += interval_;
        }
        nodes_[ni].k += count;
        clock_ = t0 + duration;
    }

    double bound_upper(std::size_t ni, const std::vector<std::int64_t>& k,
                       std::vector<double>& ub_memo) const {
        const ExecNode& n = nodes_[ni];
        if (k[ni] >= n.n_total) return static_cast<double>(n.n_total);
        double ub;
        switch (n.kind) {
            case OperatorKind::TableScan:
            case OperatorKind::IndexScan:
            case OperatorKind::IndexSeek:
                ub = n.static_ub;
                break;
            case OperatorKind::HashJoin:
            case OperatorKind::MergeJoin:
            case OperatorKind::NestedLoopJoin: {
                ub = 1.0;
                for (std::size_t c : n.children) ub *= std::max(ub_memo[c], 1.0);
                break;
            }
            default:
                ub = n.children.empty() ? n.static_ub : ub_memo[n.children.front()];
                break;
        }
        if (n.out > 0) ub = std::ceil(ub * (static_cast<double>(n.n_total) / n.out));
        if (n.static_ub > 0.0) ub = std::min(ub, n.static_ub);
        return std::max(ub, static_cast<double>(k[ni]));
    }

    void emit_snapshot(double time, std::size_t active, std::int64_t partial, double) {
        CounterSnapshot snap;
        snap.time = time;
        std::size_t n = nodes_.size();
        snap.k.resize(n);
        snap.e.resize(n);
        snap.lb.resize(n);
        snap.ub.resize(n);
        snap.r.assign(n, 0.0);
        snap.w.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) snap.k[i] = nodes_[i].k;
        if (active != static_cast<std::size_t>(-1)) snap.k[active] += partial;

        std::vector<double> ub_memo(n, 0.0);
        for (std::size_t i : plan_post_order_)
            ub_memo[i] = bound_upper(i, snap.k, ub_memo);

        for (std::size_t i = 0; i < n; ++i) {
            const ExecNode& nd = nodes_[i];
            snap.lb[i] = static_cast<double>(snap.k[i]);
            snap.ub[i] = ub_memo[i];
            snap.e[i] = std::clamp(nd.est, snap.lb[i], snap.ub[i]);
            std::int64_t produced = produced_from_calls(nd, snap.k[i]);
            std::int64_t spilled = snap.k[i] - produced;
            if (nd.pipeline_leaf) snap.r[i] += static_cast<double>(produced) * nd.width;
            if (nd.pipeline_root) snap.w[i] += static_cast<double>(produced) * nd.width;
            snap.r[i] += static_cast<double>(spilled) * nd.width;
            snap.w[i] += static_cast<double>(spilled) * nd.width;
        }
        observations_.push_back(std::move(snap));
    }

    const QuerySpec& spec_;
    double interval_;
    std::vector<Pipeline> pipelines_;
    std::vector<ExecNode> nodes_;
    std::vector<std::size_t> plan_post_order_;
    std::vector<std::vector<std::size_t>> pipeline_members_;
    std::unordered_map<std::size_t, std::vector<std::int64_t>> fanout_prefix_;
    std::vector<CounterSnapshot> observations_;
    double clock_ = 0.0;
    double next_snap_ = 0.0;
};

}  // namespace

Trace execute(const QuerySpec& spec, double interval) {
    if (interval <= 0.0) throw ConfigError("observation interval must be > 0");
    if (spec.true_cardinality.size() != spec.plan.nodes.size() ||
        spec.out_rows.size() != spec.plan.nodes.size() ||
        spec.per_tuple_cost.size() != spec.plan.nodes.size() ||
        spec.spill_fraction.size() != spec.plan.nodes.size() ||
        spec.batch_size.size() != spec.plan.nodes.size() ||
        spec.static_ub.size() != spec.plan.nodes.size())
        throw ValidationError("query " + spec.query_id + ": per-node vectors misaligned with plan");
    for (std::size_t i = 0; i < spec.plan.nodes.size(); ++i) {
        if (spec.per_tuple_cost[i] <= 0.0)
            throw ValidationError("query " + spec.query_id + ": per_tuple_cost must be > 0 at node " +
                                  std::to_string(spec.plan.nodes[i].id));
        if (spec.true_cardinality[i] < 0 || spec.out_rows[i] < 0 ||
            spec.out_rows[i] > spec.true_cardinality[i])
            throw ValidationError("query " + spec.query_id + ": inconsistent cardinality at node " +
                                  std::to_string(spec.plan.nodes[i].id));
        if (spec.spill_fraction[i] < 0.0 || spec.spill_fraction[i] > 1.0)
            throw ValidationError("query " + spec.query_id + ": spill_fraction out of [0,1] at node " +
                                  std::to_string(spec.plan.nodes[i].id));
    }
    return Executor(spec, interval).run();
}

double ground_truth_progress(const Trace& trace, std::size_t obs_index) {
    if (trace.observations.empty() || obs_index >= trace.observations.size())
        throw DegenerateInputError("observation index out of range");
    double t_start = trace.observations.front().time;
    double t_end = trace.observations.back().time;
    if (t_end <= t_start) throw DegenerateInputError("degenerate trace: t_end == t_start");
    return (trace.observations[obs_index].time - t_start) / (t_end - t_start);
}

double pipeline_truth_progress(const Trace& trace, std::size_t obs_index, int pipeline_id) {
    if (obs_index >= trace.observations.size())
        throw DegenerateInputError("observation index out of range");
    const auto& win = trace.truth.windows.at(static_cast<std::size_t>(pipeline_id));
    if (win.t_end <= win.t_begin)
        throw DegenerateInputError("degenerate pipeline window in trace " + trace.query_id);
    double t = trace.observations[obs_index].time;
    return std::clamp((t - win.t_begin) / (win.t_end - win.t_begin), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Workload generation

namespace {

// Real optimizers know base-table sizes nearly exactly; estimate error grows
// through filters and joins. Scales the configured sigma per operator.
double estimate_noise_factor(OperatorKind kind) {
    switch (kind) {
        case OperatorKind::TableScan:
        case OperatorKind::IndexScan:
            return 0.15;
        case OperatorKind::Filter:
            return 0.8;
        case OperatorKind::Sort:
        case OperatorKind::BatchSort:
        case OperatorKind::Top:
        case OperatorKind::Spool:
            return 0.6;
        default:
            return 1.0;
    }
}

struct TemplateBuild {
    Plan plan;  // est_cardinality filled in later
    std::vector<std::int64_t> out;
    std::vector<double> spill;
    std::vector<std::int64_t> batch;
    std::vector<double> static_ub;

    NodeId add(OperatorKind kind, std::int64_t out_rows, std::vector<NodeId> children,
               double width, double spill_frac = 0.0, std::int64_t batch_rows = 0,
               double ub = 0.0) {
        PlanNode n;
        n.id = static_cast<NodeId>(plan.nodes.size());
        n.kind = kind;
        n.children = std::move(children);
        n.est_row_width = width;
        plan.nodes.push_back(n);
        out.push_back(out_rows);
        spill.push_back(spill_frac);
        batch.push_back(batch_rows);
        static_ub.push_back(ub);
        return n.id;
    }
};

struct GenContext {
    Rng& rng;
    const WorkloadConfig& cfg;

    std::int64_t leaf(std::int64_t lo = 1000, std::int64_t hi = 12000) {
        std::int64_t base = std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
        return std::max<std::int64_t>(10, std::llround(static_cast<double>(base) * cfg.scale));
    }
    double sel(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
    double width() {
        return static_cast<double>(std::uniform_int_distribution<int>(8, 256)(rng));
    }
    std::int64_t shrink(std::int64_t in, double lo, double hi) {
        return std::max<std::int64_t>(1, std::llround(static_cast<double>(in) * sel(lo, hi)));
    }
};

using TemplateFn = std::function<TemplateBuild(GenContext&)>;

TemplateBuild t_scan_filter_agg(GenContext& g) {
    TemplateBuild b;
    std::int64_t scan = g.leaf();
    std::int64_t filt = g.shrink(scan, 0.1, 0.9);
    std::int64_t agg = g.shrink(filt, 0.001, 0.2);
    NodeId n0 = b.add(OperatorKind::TableScan, scan, {}, g.width(), 0, 0, double(scan));
    NodeId n1 = b.add(OperatorKind::Filter, filt, {n0}, g.width());
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {n1}, g.width());
    return b;
}

TemplateBuild t_scan_top(GenContext& g) {
    TemplateBuild b;
    std::int64_t scan = g.leaf();
    std::int64_t filt = g.shrink(scan, 0.1, 0.9);
    std::int64_t top = g.shrink(filt, 0.01, 0.3);
    NodeId n0 = b.add(OperatorKind::TableScan, scan, {}, g.width(), 0, 0, double(scan));
    NodeId n1 = b.add(OperatorKind::Filter, filt, {n0}, g.width());
    b.plan.root = b.add(OperatorKind::Top, top, {n1}, g.width());
    return b;
}

TemplateBuild t_hash_join(GenContext& g) {
    TemplateBuild b;
    std::int64_t build = g.leaf();
    std::int64_t probe = g.leaf();
    std::int64_t joined = std::max<std::int64_t>(1, std::llround(probe * g.sel(0.3, 2.5)));
    std::int64_t agg = g.shrink(joined, 0.001, 0.1);
    NodeId a = b.add(OperatorKind::TableScan, build, {}, g.width(), 0, 0, double(build));
    NodeId c = b.add(OperatorKind::TableScan, probe, {}, g.width(), 0, 0, double(probe));
    NodeId hj = b.add(OperatorKind::HashJoin, joined, {a, c}, g.width(), g.cfg.spill_fraction);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {hj}, g.width());
    return b;
}

TemplateBuild t_hash_chain(GenContext& g) {
    TemplateBuild b;
    std::int64_t sa = g.leaf();
    std::int64_t sb = g.leaf();
    std::int64_t sc = g.leaf();
    std::int64_t j2 = std::max<std::int64_t>(1, std::llround(sb * g.sel(0.3, 2.0)));
    std::int64_t j1 = std::max<std::int64_t>(1, std::llround(sc * g.sel(0.3, 2.0)));
    std::int64_t agg = g.shrink(j1, 0.001, 0.1);
    NodeId a = b.add(OperatorKind::TableScan, sa, {}, g.width(), 0, 0, double(sa));
    NodeId nb = b.add(OperatorKind::TableScan, sb, {}, g.width(), 0, 0, double(sb));
    NodeId h2 = b.add(OperatorKind::HashJoin, j2, {a, nb}, g.width(), g.cfg.spill_fraction);
    NodeId nc = b.add(OperatorKind::TableScan, sc, {}, g.width(), 0, 0, double(sc));
    NodeId h1 = b.add(OperatorKind::HashJoin, j1, {h2, nc}, g.width(), g.cfg.spill_fraction);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {h1}, g.width());
    return b;
}

TemplateBuild t_hash_agg(GenContext& g) {
    TemplateBuild b;
    std::int64_t scan = g.leaf();
    std::int64_t filt = g.shrink(scan, 0.2, 0.9);
    std::int64_t groups = g.shrink(filt, 0.005, 0.3);
    std::int64_t top = g.shrink(groups, 0.1, 1.0);
    NodeId n0 = b.add(OperatorKind::TableScan, scan, {}, g.width(), 0, 0, double(scan));
    NodeId n1 = b.add(OperatorKind::Filter, filt, {n0}, g.width());
    NodeId n2 = b.add(OperatorKind::HashAggregate, groups, {n1}, g.width(), g.cfg.spill_fraction);
    b.plan.root = b.add(OperatorKind::Top, top, {n2}, g.width());
    return b;
}

TemplateBuild t_merge_join(GenContext& g) {
    TemplateBuild b;
    std::int64_t sa = g.leaf();
    std::int64_t sb = g.leaf();
    std::int64_t fa = g.shrink(sa, 0.3, 0.9);
    std::int64_t joined = std::max<std::int64_t>(
        1, std::llround(static_cast<double>(std::min(fa, sb)) * g.sel(0.5, 2.5)));
    std::int64_t filt = g.shrink(joined, 0.1, 0.9);
    NodeId a = b.add(OperatorKind::IndexScan, sa, {}, g.width(), 0, 0, double(sa));
    NodeId f = b.add(OperatorKind::Filter, fa, {a}, g.width());
    NodeId c = b.add(OperatorKind::IndexScan, sb, {}, g.width(), 0, 0, double(sb));
    NodeId mj = b.add(OperatorKind::MergeJoin, joined, {f, c}, g.width());
    b.plan.root = b.add(OperatorKind::Filter, filt, {mj}, g.width());
    return b;
}

// Nested loops: the inner side's total is the join output; a wide static
// bound models the engine's inability to bound nested iteration.
TemplateBuild t_nlj_seek(GenContext& g) {
    TemplateBuild b;
    std::int64_t outer = g.leaf(200, 2500);
    double fan = g.sel(2.0, 30.0);
    std::int64_t joined = std::max<std::int64_t>(1, std::llround(outer * fan));
    std::int64_t agg = g.shrink(joined, 0.001, 0.1);
    double loose = static_cast<double>(outer) * static_cast<double>(joined) * 4.0;
    NodeId o = b.add(OperatorKind::TableScan, outer, {}, g.width(), 0, 0, double(outer));
    NodeId s = b.add(OperatorKind::IndexSeek, joined, {}, g.width(), 0, 0, loose);
    NodeId j = b.add(OperatorKind::NestedLoopJoin, joined, {o, s}, g.width(), 0, 0, loose);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {j}, g.width());
    return b;
}

TemplateBuild t_nlj_batchsort(GenContext& g) {
    TemplateBuild b;
    std::int64_t outer = g.leaf(200, 2500);
    double fan = g.sel(2.0, 30.0);
    std::int64_t joined = std::max<std::int64_t>(1, std::llround(outer * fan));
    std::int64_t agg = g.shrink(joined, 0.001, 0.1);
    std::int64_t batch = std::max<std::int64_t>(
        10, outer / std::uniform_int_distribution<std::int64_t>(3, 8)(g.rng));
    double loose = static_cast<double>(outer) * static_cast<double>(joined) * 4.0;
    NodeId o = b.add(OperatorKind::TableScan, outer, {}, g.width(), 0, 0, double(outer));
    NodeId bs = b.add(OperatorKind::BatchSort, outer, {o}, g.width(), 0, batch, double(outer));
    NodeId s = b.add(OperatorKind::IndexSeek, joined, {}, g.width(), 0, 0, loose);
    NodeId j = b.add(OperatorKind::NestedLoopJoin, joined, {bs, s}, g.width(), 0, 0, loose);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {j}, g.width());
    return b;
}

TemplateBuild t_nlj_filter(GenContext& g) {
    TemplateBuild b;
    std::int64_t outer = g.leaf(200, 2500);
    double fan = g.sel(2.0, 20.0);
    std::int64_t joined = std::max<std::int64_t>(1, std::llround(outer * fan));
    std::int64_t filt = g.shrink(joined, 0.1, 0.8);
    std::int64_t top = g.shrink(filt, 0.05, 0.5);
    double loose = static_cast<double>(outer) * static_cast<double>(joined) * 4.0;
    NodeId o = b.add(OperatorKind::TableScan, outer, {}, g.width(), 0, 0, double(outer));
    NodeId s = b.add(OperatorKind::IndexSeek, joined, {}, g.width(), 0, 0, loose);
    NodeId j = b.add(OperatorKind::NestedLoopJoin, joined, {o, s}, g.width(), 0, 0, loose);
    NodeId f = b.add(OperatorKind::Filter, filt, {j}, g.width());
    b.plan.root = b.add(OperatorKind::Top, top, {f}, g.width());
    return b;
}

TemplateBuild t_sort_pipeline(GenContext& g) {
    TemplateBuild b;
    std::int64_t scan = g.leaf();
    std::int64_t filt = g.shrink(scan, 0.2, 0.9);
    std::int64_t agg = g.shrink(filt, 0.001, 0.2);
    NodeId n0 = b.add(OperatorKind::TableScan, scan, {}, g.width(), 0, 0, double(scan));
    NodeId n1 = b.add(OperatorKind::Filter, filt, {n0}, g.width());
    NodeId n2 = b.add(OperatorKind::Sort, filt, {n1}, g.width(), g.cfg.spill_fraction);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {n2}, g.width());
    return b;
}

TemplateBuild t_hash_nlj(GenContext& g) {
    TemplateBuild b;
    std::int64_t build = g.leaf();
    std::int64_t outer = g.leaf(200, 2500);
    double fan = g.sel(2.0, 15.0);
    std::int64_t joined = std::max<std::int64_t>(1, std::llround(outer * fan));
    std::int64_t hj_out = std::max<std::int64_t>(1, std::llround(joined * g.sel(0.2, 1.0)));
    std::int64_t agg = g.shrink(hj_out, 0.001, 0.1);
    double loose = static_cast<double>(outer) * static_cast<double>(joined) * 4.0;
    NodeId bl = b.add(OperatorKind::TableScan, build, {}, g.width(), 0, 0, double(build));
    NodeId o = b.add(OperatorKind::TableScan, outer, {}, g.width(), 0, 0, double(outer));
    NodeId s = b.add(OperatorKind::IndexSeek, joined, {}, g.width(), 0, 0, loose);
    NodeId j = b.add(OperatorKind::NestedLoopJoin, joined, {o, s}, g.width(), 0, 0, loose);
    NodeId hj = b.add(OperatorKind::HashJoin, hj_out, {bl, j}, g.width(), g.cfg.spill_fraction);
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {hj}, g.width());
    return b;
}

TemplateBuild t_spool_report(GenContext& g) {
    TemplateBuild b;
    std::int64_t scan = g.leaf();
    std::int64_t filt = g.shrink(scan, 0.2, 0.9);
    std::int64_t top = g.shrink(filt, 0.05, 0.5);
    NodeId n0 = b.add(OperatorKind::TableScan, scan, {}, g.width(), 0, 0, double(scan));
    NodeId n1 = b.add(OperatorKind::Filter, filt, {n0}, g.width());
    NodeId n2 = b.add(OperatorKind::Spool, filt, {n1}, g.width());
    b.plan.root = b.add(OperatorKind::Top, top, {n2}, g.width());
    return b;
}

TemplateBuild t_merge_agg(GenContext& g) {
    TemplateBuild b;
    std::int64_t sa = g.leaf();
    std::int64_t sb = g.leaf();
    std::int64_t joined = std::max<std::int64_t>(
        1, std::llround(static_cast<double>(std::min(sa, sb)) * g.sel(0.5, 2.0)));
    std::int64_t agg = g.shrink(joined, 0.005, 0.2);
    NodeId a = b.add(OperatorKind::IndexScan, sa, {}, g.width(), 0, 0, double(sa));
    NodeId c = b.add(OperatorKind::IndexScan, sb, {}, g.width(), 0, 0, double(sb));
    NodeId mj = b.add(OperatorKind::MergeJoin, joined, {a, c}, g.width());
    b.plan.root = b.add(OperatorKind::StreamAggregate, agg, {mj}, g.width());
    return b;
}

const std::vector<std::pair<std::string, TemplateFn>>& plan_templates() {
    static const std::vector<std::pair<std::string, TemplateFn>> templates = {
        {"scan_filter_agg", t_scan_filter_agg},
        {"scan_top", t_scan_top},
        {"hash_join", t_hash_join},
        {"hash_chain", t_hash_chain},
        {"hash_agg", t_hash_agg},
        {"merge_join", t_merge_join},
        {"nlj_seek", t_nlj_seek},
        {"nlj_batchsort", t_nlj_batchsort},
        {"nlj_filter", t_nlj_filter},
        {"sort_pipeline", t_sort_pipeline},
        {"hash_nlj", t_hash_nlj},
        {"spool_report", t_spool_report},
        {"merge_agg", t_merge_agg},
    };
    return templates;
}

// Engine-visible upper bound on N_i at t_start, bottom-up.
std::vector<double> initial_upper_bounds(const Plan& plan, const QuerySpec& spec) {
    std::unordered_map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) index.emplace(plan.nodes[i].id, i);
    std::vector<double> ub(plan.nodes.size(), 0.0);
    // nodes are generated children-before-parents; walk until settled
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
            const PlanNode& n = plan.nodes[i];
            double v;
            switch (n.kind) {
                case OperatorKind::TableScan:
                case OperatorKind::IndexScan:
                case OperatorKind::IndexSeek:
                    v = spec.static_ub[i];
                    break;
                case OperatorKind::HashJoin:
                case OperatorKind::MergeJoin:
                case OperatorKind::NestedLoopJoin: {
                    v = 1.0;
                    for (NodeId c : n.children) v *= std::max(ub[index[c]], 1.0);
                    break;
                }
                default:
                    v = n.children.empty() ? spec.static_ub[i] : ub[index[n.children.front()]];
                    break;
            }
            if (spec.out_rows[i] > 0)
                v = std::ceil(v * (static_cast<double>(spec.true_cardinality[i]) / spec.out_rows[i]));
            if (spec.static_ub[i] > 0.0) v = std::min(v, spec.static_ub[i]);
            ub[i] = v;
        }
    }
    return ub;
}

}  // namespace

std::vector<std::string> plan_template_names() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : plan_templates()) names.push_back(name);
    return names;
}

std::vector<QuerySpec> generate_workload(const WorkloadConfig& config) {
    if (config.query_count < 1) throw ConfigError("query_count must be >= 1");
    if (config.scale <= 0.0) throw ConfigError("scale must be > 0");
    if (config.estimate_error_sigma < 0.0) throw ConfigError("estimate_error_sigma must be >= 0");
    if (config.observation_interval <= 0.0) throw ConfigError("observation_interval must be > 0");
    if (config.operator_mix.empty()) throw ConfigError("operator_mix must not be empty");

    std::vector<std::pair<TemplateFn, double>> mix;
    double weight_sum = 0.0;
    for (const auto& [name, weight] : config.operator_mix) {
        if (weight < 0.0) throw ConfigError("operator_mix weight must be >= 0: " + name);
        const TemplateFn* fn = nullptr;
        for (const auto& [tname, tfn] : plan_templates())
            if (tname == name) fn = &tfn;
        if (!fn) throw ConfigError("unknown plan template in operator_mix: " + name);
        mix.emplace_back(*fn, weight);
        weight_sum += weight;
    }
    if (weight_sum <= 0.0) throw ConfigError("operator_mix weights sum to zero");

    std::vector<QuerySpec> specs;
    specs.reserve(static_cast<std::size_t>(config.query_count));
    for (int q = 0; q < config.query_count; ++q) {
        Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(q)));
        double pick = std::uniform_real_distribution<double>(0.0, weight_sum)(rng);
        const TemplateFn* chosen = &mix.back().first;
        double acc = 0.0;
        for (const auto& [fn, weight] : mix) {
            acc += weight;
            if (pick <= acc) {
                chosen = &fn;
                break;
            }
        }
        GenContext g{rng, config};
        TemplateBuild build = (*chosen)(g);

        QuerySpec spec;
        char qid[64];
        std::snprintf(qid, sizeof(qid), "%s-q%04d", config.family_id.c_str(), q);
        spec.query_id = qid;
        spec.plan = std::move(build.plan);
        spec.plan.query_id = spec.query_id;
        spec.out_rows = build.out;
        spec.batch_size = build.batch;
        spec.static_ub = build.static_ub;
        spec.spill_fraction = build.spill;
        spec.skew_z = config.skew_z;
        spec.seed = mix_seed(config.seed, 0x5151 + static_cast<std::uint64_t>(q));

        std::size_t n = spec.plan.nodes.size();
        spec.true_cardinality.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::int64_t spill_calls = std::llround(static_cast<double>(spec.out_rows[i]) *
                                                    spec.spill_fraction[i]);
            spec.true_cardinality[i] = spec.out_rows[i] + spill_calls;
        }

        std::normal_distribution<double> gauss(0.0, 1.0);
        std::int64_t total_calls = std::accumulate(spec.true_cardinality.begin(),
                                                   spec.true_cardinality.end(), std::int64_t{0});
        double duration = config.target_duration *
                          std::uniform_real_distribution<double>(0.6, 1.4)(rng);
        double base_cost = duration / static_cast<double>(std::max<std::int64_t>(1, total_calls));
        spec.per_tuple_cost.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            spec.per_tuple_cost[i] = base_cost * std::exp(gauss(rng) * config.cost_sigma);

        auto ub0 = initial_upper_bounds(spec.plan, spec);
        for (std::size_t i = 0; i < n; ++i) {
            double sigma = config.estimate_error_sigma *
                           estimate_noise_factor(spec.plan.nodes[i].kind);
            double noisy = static_cast<double>(spec.true_cardinality[i]) *
                           std::exp(gauss(rng) * sigma);
            double est = std::ceil(noisy);
            spec.plan.nodes[i].est_cardinality = std::clamp(est, 0.0, ub0[i]);
        }
        specs.push_back(std::move(spec));
    }
    return specs;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

WorkloadConfig parse_workload_config(const std::string& text) {
    WorkloadConfig cfg;
    std::istringstream in(text);
    std::string line;
    bool saw_mix = false;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("malformed config line: " + line);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "family_id") cfg.family_id = value;
            else if (key == "query_count") cfg.query_count = std::stoi(value);
            else if (key == "scale") cfg.scale = std::stod(value);
            else if (key == "skew_z") cfg.skew_z = std::stod(value);
            else if (key == "estimate_error_sigma") cfg.estimate_error_sigma = std::stod(value);
            else if (key == "cost_sigma") cfg.cost_sigma = std::stod(value);
            else if (key == "spill_fraction") cfg.spill_fraction = std::stod(value);
            else if (key == "observation_interval") cfg.observation_interval = std::stod(value);
            else if (key == "target_duration") cfg.target_duration = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "operator_mix") {
                saw_mix = true;
                std::istringstream mixin(value);
                std::string item;
                while (std::getline(mixin, item, ',')) {
                    item = trim(item);
                    if (item.empty()) continue;
                    auto colon = item.find(':');
                    if (colon == std::string::npos)
                        throw ConfigError("operator_mix entries must be name:weight, got: " + item);
                    cfg.operator_mix.emplace_back(trim(item.substr(0, colon)),
                                                  std::stod(item.substr(colon + 1)));
                }
            } else {
                throw ConfigError("unknown config key: " + key);
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for config key " + key + ": " + value);
        } catch (const std::out_of_range&) {
            throw ConfigError("bad value for config key " + key + ": " + value);
        }
    }
    if (!saw_mix) throw ConfigError("config is missing operator_mix");
    return cfg;
}

WorkloadConfig read_workload_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_workload_config(buf.str());
}

std::string spec_to_json_line(const QuerySpec& spec) {
    json j;
    j["query_id"] = spec.query_id;
    j["plan"] = json::parse(plan_to_json_line(spec.plan));
    j["true_cardinality"] = spec.true_cardinality;
    j["out_rows"] = spec.out_rows;
    j["per_tuple_cost"] = spec.per_tuple_cost;
    j["spill_fraction"] = spec.spill_fraction;
    j["batch_size"] = spec.batch_size;
    j["static_ub"] = spec.static_ub;
    j["skew_z"] = spec.skew_z;
    j["seed"] = spec.seed;
    return j.dump();
}

QuerySpec spec_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed spec JSON: ") + e.what());
    }
    QuerySpec spec;
    try {
        spec.query_id = j.at("query_id").get<std::string>();
        spec.plan = plan_from_json_line(j.at("plan").dump());
        spec.true_cardinality = j.at("true_cardinality").get<std::vector<std::int64_t>>();
        spec.out_rows = j.at("out_rows").get<std::vector<std::int64_t>>();
        spec.per_tuple_cost = j.at("per_tuple_cost").get<std::vector<double>>();
        spec.spill_fraction = j.at("spill_fraction").get<std::vector<double>>();
        spec.batch_size = j.at("batch_size").get<std::vector<std::int64_t>>();
        spec.static_ub = j.at("static_ub").get<std::vector<double>>();
        spec.skew_z = j.at("skew_z").get<double>();
        spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("spec JSON missing field: ") + e.what());
    }
    return spec;
}

std::vector<QuerySpec> read_spec_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open spec file: " + path);
    std::vector<QuerySpec> specs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        specs.push_back(spec_from_json_line(line));
    }
    return specs;
}

void write_spec_file(const std::string& path, const std::vector<QuerySpec>& specs) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open spec file for writing: " + path);
    for (const auto& s : specs) out << spec_to_json_line(s) << '\n';
}

void write_trace_file(const std::string& path, const Trace& trace) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open trace file for writing: " + path);
    json header;
    header["query_id"] = trace.query_id;
    header["plan"] = json::parse(plan_to_json_line(trace.plan));
    header["pipelines"] = json::array();
    for (const auto& p : trace.pipelines) {
        json jp;
        jp["id"] = p.id;
        jp["nodes"] = p.nodes;
        jp["drivers"] = p.drivers;
        header["pipelines"].push_back(std::move(jp));
    }
    json truth;
    truth["n"] = trace.truth.n;
    truth["out_rows"] = trace.truth.out_rows;
    truth["total_r"] = trace.truth.total_r;
    truth["total_w"] = trace.truth.total_w;
    truth["windows"] = json::array();
    for (const auto& w : trace.truth.windows) {
        json jw;
        jw["t_begin"] = w.t_begin;
        jw["t_end"] = w.t_end;
        truth["windows"].push_back(std::move(jw));
    }
    header["truth"] = std::move(truth);
    out << header.dump() << '\n';
    for (const auto& s : trace.observations) {
        json js;
        js["time"] = s.time;
        js["k"] = s.k;
        js["e"] = s.e;
        js["lb"] = s.lb;
        js["ub"] = s.ub;
        js["r"] = s.r;
        js["w"] = s.w;
        out << js.dump() << '\n';
    }
}

Trace read_trace_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open trace file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("trace file is empty: " + path);
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed trace header: ") + e.what());
    }
    Trace trace;
    try {
        trace.query_id = header.at("query_id").get<std::string>();
        trace.plan = plan_from_json_line(header.at("plan").dump());
        for (const auto& jp : header.at("pipelines")) {
            Pipeline p;
            p.id = jp.at("id").get<int>();
            p.nodes = jp.at("nodes").get<std::vector<NodeId>>();
            p.drivers = jp.at("drivers").get<std::vector<NodeId>>();
            trace.pipelines.push_back(std::move(p));
        }
        const auto& truth = header.at("truth");
        trace.truth.n = truth.at("n").get<std::vector<std::int64_t>>();
        trace.truth.out_rows = truth.at("out_rows").get<std::vector<std::int64_t>>();
        trace.truth.total_r = truth.at("total_r").get<std::vector<double>>();
        trace.truth.total_w = truth.at("total_w").get<std::vector<double>>();
        for (const auto& jw : truth.at("windows")) {
            PipelineWindow w;
            w.t_begin = jw.at("t_begin").get<double>();
            w.t_end = jw.at("t_end").get<double>();
            trace.truth.windows.push_back(w);
        }
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json js = json::parse(line);
            CounterSnapshot s;
            s.time = js.at("time").get<double>();
            s.k = js.at("k").get<std::vector<std::int64_t>>();
            s.e = js.at("e").get<std::vector<double>>();
            s.lb = js.at("lb").get<std::vector<double>>();
            s.ub = js.at("ub").get<std::vector<double>>();
            s.r = js.at("r").get<std::vector<double>>();
            s.w = js.at("w").get<std::vector<double>>();
            trace.observations.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("trace file missing field: ") + e.what());
    }
    return trace;
}

}  // namespace qpe
