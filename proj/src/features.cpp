#include "qpe/features.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>
#include <unordered_set>

namespace qpe {

namespace {

std::string format_percent(double x) {
    if (x == std::floor(x)) return std::to_string(static_cast<long long>(x));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", x);
    return buf;
}

}  // namespace

FeatureSchema FeatureSchema::make(const FeatureConfig& config) {
    FeatureSchema schema;
    schema.config = config;
    if (config.all_pairs) {
        schema.config.pairs.clear();
        auto cands = default_candidates();
        for (std::size_t a = 0; a < cands.size(); ++a)
            for (std::size_t b = a + 1; b < cands.size(); ++b)
                schema.config.pairs.emplace_back(cands[a], cands[b]);
    }
    for (int op = 0; op < kOperatorKindCount; ++op) {
        std::string name = to_string(static_cast<OperatorKind>(op));
        schema.names.push_back("Count_" + name);
        schema.names.push_back("Card_" + name);
        schema.names.push_back("SelAt_" + name);
        schema.names.push_back("SelAbove_" + name);
        schema.names.push_back("SelBelow_" + name);
    }
    schema.names.push_back("SelAt_DN");
    schema.static_count = schema.names.size();
    for (const auto& [a, b] : schema.config.pairs)
        for (double x : config.checkpoints)
            schema.names.push_back(std::string(to_string(a)) + "vs" + to_string(b) + "_" +
                                   format_percent(x));
    for (EstimatorId est : config.cor_estimators)
        for (int i = 1; i <= config.cor_segments; ++i)
            for (double x : config.checkpoints)
                schema.names.push_back("Cor_" + std::string(to_string(est)) + "_" +
                                       std::to_string(i) + "_" + format_percent(x));
    return schema;
}

std::size_t FeatureSchema::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return i;
    throw SchemaError("unknown feature name: " + name);
}

FeatureVector FeatureVector::undefined_of(const FeatureSchema& schema) {
    FeatureVector v;
    v.schema_version = schema.version;
    v.values.assign(schema.size(), 0.0);
    v.defined.assign(schema.size(), 0);
    return v;
}

FeatureVector static_features(const Plan& plan, const Pipeline& pipeline,
                              const FeatureSchema& schema) {
    FeatureVector out = FeatureVector::undefined_of(schema);

    std::vector<std::size_t> members;
    std::unordered_set<NodeId> member_ids(pipeline.nodes.begin(), pipeline.nodes.end());
    for (NodeId id : pipeline.nodes) {
        std::size_t idx = plan.index_of(id);
        if (idx == static_cast<std::size_t>(-1))
            throw ValidationError("pipeline references unknown node " + std::to_string(id));
        members.push_back(idx);
    }

    double total = 0.0;
    for (std::size_t idx : members) total += plan.nodes[idx].est_cardinality;
    if (total <= 0.0)
        throw DegenerateInputError("zero pipeline estimate sum in static features");

    // has_below[i][op]: some op-node lies strictly below node i (within the
    // pipeline); has_above[i][op]: node i lies below some op-node.
    std::unordered_map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) index.emplace(plan.nodes[i].id, i);
    std::vector<std::vector<char>> has_below(members.size(),
                                             std::vector<char>(kOperatorKindCount, 0));
    std::vector<std::vector<char>> has_above(members.size(),
                                             std::vector<char>(kOperatorKindCount, 0));
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
        // walk the subtree under members[mi], restricted to pipeline members
        std::vector<std::size_t> stack;
        for (NodeId c : plan.nodes[members[mi]].children)
            if (member_ids.count(c)) stack.push_back(index[c]);
        while (!stack.empty()) {
            std::size_t cur = stack.back();
            stack.pop_back();
            has_below[mi][static_cast<int>(plan.nodes[cur].kind)] = 1;
            auto it = std::find(members.begin(), members.end(), cur);
            std::size_t ci = static_cast<std::size_t>(it - members.begin());
            has_above[ci][static_cast<int>(plan.nodes[members[mi]].kind)] = 1;
            for (NodeId c : plan.nodes[cur].children)
                if (member_ids.count(c)) stack.push_back(index[c]);
        }
    }

    for (int op = 0; op < kOperatorKindCount; ++op) {
        double count = 0.0, card = 0.0, above = 0.0, below = 0.0;
        for (std::size_t mi = 0; mi < members.size(); ++mi) {
            const PlanNode& node = plan.nodes[members[mi]];
            if (static_cast<int>(node.kind) == op) {
                count += 1.0;
                card += node.est_cardinality;
            }
            if (has_below[mi][op]) above += node.est_cardinality;
            if (has_above[mi][op]) below += node.est_cardinality;
        }
        std::size_t base = static_cast<std::size_t>(op) * 5;
        out.values[base + 0] = count;
        out.values[base + 1] = card;
        out.values[base + 2] = card / total;
        out.values[base + 3] = above / total;
        out.values[base + 4] = below / total;
        for (int f = 0; f < 5; ++f) out.defined[base + f] = 1;
    }

    double driver_card = 0.0;
    for (std::size_t mi = 0; mi < members.size(); ++mi)
        if (pipeline.is_driver(plan.nodes[members[mi]].id))
            driver_card += plan.nodes[members[mi]].est_cardinality;
    std::size_t dn = static_cast<std::size_t>(kOperatorKindCount) * 5;
    out.values[dn] = driver_card / total;
    out.defined[dn] = 1;
    return out;
}

std::optional<std::size_t> checkpoint(const Trace& trace, const Pipeline& pipeline,
                                      double x_percent, std::size_t prefix_len) {
    prefix_len = std::min(prefix_len, trace.observations.size());
    std::vector<std::size_t> driver_idx;
    for (NodeId id : pipeline.drivers) driver_idx.push_back(trace.plan.index_of(id));
    for (std::size_t t = 0; t < prefix_len; ++t) {
        const CounterSnapshot& obs = trace.observations[t];
        double num = 0.0, den = 0.0;
        for (std::size_t idx : driver_idx) {
            num += static_cast<double>(obs.k[idx]);
            den += obs.e[idx];
        }
        if (den <= 0.0)
            throw DegenerateInputError("zero driver estimate sum at checkpoint scan");
        if (num / den >= x_percent / 100.0) return t;
    }
    return std::nullopt;
}

namespace {

// Shared lazy evaluation state for one (trace, pipeline, prefix).
class DynamicContext {
  public:
    DynamicContext(const Trace& trace, const Pipeline& pipeline, std::size_t prefix_len)
        : trace_(trace), pipeline_(pipeline),
          prefix_(std::min(prefix_len, trace.observations.size())) {}

    std::optional<std::size_t> at(double x) {
        auto it = checkpoints_.find(x);
        if (it != checkpoints_.end()) return it->second;
        std::optional<std::size_t> v;
        try {
            v = checkpoint(trace_, pipeline_, x, prefix_);
        } catch (const DegenerateInputError&) {
            v = std::nullopt;
        }
        checkpoints_.emplace(x, v);
        return v;
    }

    // Raw (unclamped) estimator value; nullopt when degenerate.
    std::optional<double> value(EstimatorId id, std::size_t obs) {
        auto key = std::make_pair(static_cast<int>(id), obs);
        auto it = values_.find(key);
        if (it != values_.end()) return it->second;
        std::optional<double> v;
        try {
            EstimateOptions opt;
            opt.clamp = false;
            double raw = estimate(id, trace_, obs, pipeline_, opt);
            if (std::isfinite(raw)) v = raw;
        } catch (const DegenerateInputError&) {
        }
        values_.emplace(key, v);
        return v;
    }

    double time(std::size_t obs) const { return trace_.observations[obs].time; }
    double t_start() const { return trace_.observations.front().time; }

  private:
    const Trace& trace_;
    const Pipeline& pipeline_;
    std::size_t prefix_;
    std::map<double, std::optional<std::size_t>> checkpoints_;
    std::map<std::pair<int, std::size_t>, std::optional<double>> values_;
};

void fill_pairwise(DynamicContext& ctx, const FeatureSchema& schema, FeatureVector& out) {
    std::size_t slot = schema.static_count;
    for (const auto& [a, b] : schema.config.pairs) {
        for (double x : schema.config.checkpoints) {
            auto t = ctx.at(x);
            if (t) {
                auto va = ctx.value(a, *t);
                auto vb = ctx.value(b, *t);
                if (va && vb) {
                    out.values[slot] = std::fabs(*va - *vb);
                    out.defined[slot] = 1;
                }
            }
            ++slot;
        }
    }
}

void fill_correlation(DynamicContext& ctx, const FeatureSchema& schema, FeatureVector& out) {
    std::size_t slot = schema.static_count +
                       schema.config.pairs.size() * schema.config.checkpoints.size();
    int k = schema.config.cor_segments;
    for (EstimatorId est : schema.config.cor_estimators) {
        for (int i = 1; i <= k; ++i) {
            for (double x : schema.config.checkpoints) {
                auto t_num = ctx.at(static_cast<double>(i) * x / k);
                auto t_den = schema.config.cor_alternative_form ? ctx.at(x) : ctx.at(x / k);
                auto t_est = schema.config.cor_alternative_form
                                 ? ctx.at(static_cast<double>(i) * x / k)
                                 : ctx.at(x);
                if (t_num && t_den && t_est) {
                    double num = ctx.time(*t_num) - ctx.t_start();
                    double den = ctx.time(*t_den) - ctx.t_start();
                    auto v = ctx.value(est, *t_est);
                    if (den > 0.0 && v && *v > 0.0) {
                        double value = (num / den) / *v;
                        if (std::isfinite(value)) {
                            out.values[slot] = value;
                            out.defined[slot] = 1;
                        }
                    }
                }
                ++slot;
            }
        }
    }
}

}  // namespace

FeatureVector pairwise_diff_features(const Trace& trace, const Pipeline& pipeline,
                                     std::size_t prefix_len, const FeatureSchema& schema) {
    FeatureVector out = FeatureVector::undefined_of(schema);
    DynamicContext ctx(trace, pipeline, prefix_len);
    fill_pairwise(ctx, schema, out);
    return out;
}

FeatureVector time_correlation_features(const Trace& trace, const Pipeline& pipeline,
                                        std::size_t prefix_len, const FeatureSchema& schema) {
    FeatureVector out = FeatureVector::undefined_of(schema);
    DynamicContext ctx(trace, pipeline, prefix_len);
    fill_correlation(ctx, schema, out);
    return out;
}

FeatureVector dynamic_features(const Trace& trace, const Pipeline& pipeline,
                               std::size_t prefix_len, const FeatureSchema& schema) {
    FeatureVector out = FeatureVector::undefined_of(schema);
    DynamicContext ctx(trace, pipeline, prefix_len);
    fill_pairwise(ctx, schema, out);
    fill_correlation(ctx, schema, out);
    return out;
}

FeatureVector assemble(const FeatureVector& static_part, const FeatureVector& dynamic_part) {
    if (static_part.schema_version != dynamic_part.schema_version)
        throw SchemaError("feature schema version mismatch in assemble");
    if (static_part.values.size() != dynamic_part.values.size())
        throw SchemaError("feature vector size mismatch in assemble");
    FeatureVector out = static_part;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!out.defined[i] && dynamic_part.defined[i]) {
            out.values[i] = dynamic_part.values[i];
            out.defined[i] = 1;
        }
    }
    for (std::size_t i = 0; i < out.values.size(); ++i)
        if (!out.defined[i]) out.values[i] = 0.0;
    return out;
}

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> stages = {Stage::Static, Stage::X1,  Stage::X2,
                                              Stage::X5,     Stage::X10, Stage::X20};
    return stages;
}

double stage_percent(Stage stage) {
    switch (stage) {
        case Stage::Static: return 0.0;
        case Stage::X1: return 1.0;
        case Stage::X2: return 2.0;
        case Stage::X5: return 5.0;
        case Stage::X10: return 10.0;
        case Stage::X20: return 20.0;
    }
    return 0.0;
}

const char* to_string(Stage stage) {
    switch (stage) {
        case Stage::Static: return "static";
        case Stage::X1: return "x1";
        case Stage::X2: return "x2";
        case Stage::X5: return "x5";
        case Stage::X10: return "x10";
        case Stage::X20: return "x20";
    }
    return "static";
}

FeatureVector extract_at_stage(const Trace& trace, const Pipeline& pipeline, Stage stage,
                               const FeatureSchema& schema) {
    FeatureVector stat = static_features(trace.plan, pipeline, schema);
    if (stage == Stage::Static)
        return assemble(stat, FeatureVector::undefined_of(schema));
    auto t = checkpoint(trace, pipeline, stage_percent(stage), trace.observations.size());
    std::size_t prefix = t ? *t + 1 : trace.observations.size();
    return assemble(stat, dynamic_features(trace, pipeline, prefix, schema));
}

}  // namespace qpe
