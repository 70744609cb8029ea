#include "qpe/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "qpe/eval.hpp"

namespace qpe {

namespace {

using json = nlohmann::ordered_json;

void parallel_over(std::size_t count, std::size_t min_serial,
                   const std::function<void(std::size_t, std::size_t)>& fn) {
    unsigned hw = std::min<unsigned>(std::max(1u, std::thread::hardware_concurrency()), 8);
    if (hw <= 1 || count < 2 || count <= min_serial) {
        fn(0, count);
        return;
    }
    std::size_t chunk = (count + hw - 1) / hw;
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < hw; ++t) {
        std::size_t begin = t * chunk;
        std::size_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        workers.emplace_back(fn, begin, end);
    }
    for (auto& w : workers) w.join();
}

struct SplitCandidate {
    double gain = -1.0;
    int col = -1;  // matrix column id
    double threshold = 0.0;
};

bool better(const SplitCandidate& a, const SplitCandidate& b) {
    if (a.gain != b.gain) return a.gain > b.gain;
    if (a.col != b.col) return a.col < b.col;
    return a.threshold < b.threshold;
}

struct LeafState {
    std::vector<std::vector<std::int32_t>> sorted;  // per active column
    double sum = 0.0;
    std::int64_t count = 0;
    SplitCandidate best;
    int parent = -1;  // internal node to patch, -1 = root
    bool right_child = false;
};

SplitCandidate scan_column(const double* values, const std::vector<std::int32_t>& sorted,
                           const double* targets, double total_sum, int min_leaf, int col) {
    SplitCandidate best;
    std::size_t n = sorted.size();
    if (n < 2 || values[sorted.front()] == values[sorted.back()]) return best;
    double parent_term = total_sum * total_sum / static_cast<double>(n);
    double lsum = 0.0;
    for (std::size_t pos = 0; pos + 1 < n; ++pos) {
        lsum += targets[sorted[pos]];
        double v = values[sorted[pos]];
        double vn = values[sorted[pos + 1]];
        if (v == vn) continue;
        std::int64_t nl = static_cast<std::int64_t>(pos) + 1;
        std::int64_t nr = static_cast<std::int64_t>(n) - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        double rsum = total_sum - lsum;
        double gain = lsum * lsum / static_cast<double>(nl) +
                      rsum * rsum / static_cast<double>(nr) - parent_term;
        if (gain > best.gain) {
            double thr = 0.5 * (v + vn);
            if (thr <= v) thr = vn;
            best.gain = gain;
            best.col = col;
            best.threshold = thr;
        }
    }
    return best;
}

void compute_best_split(LeafState& leaf, const TrainingMatrix& matrix,
                        const std::vector<std::int32_t>& active_cols, const double* targets,
                        int min_leaf) {
    std::size_t c = active_cols.size();
    std::vector<SplitCandidate> per_col(c);
    std::size_t work = leaf.sorted.empty() ? 0 : leaf.sorted.front().size();
    parallel_over(c, work > 4096 ? 0 : c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t a = begin; a < end; ++a) {
            per_col[a] = scan_column(matrix.columns[active_cols[a]].data(), leaf.sorted[a],
                                     targets, leaf.sum, min_leaf, active_cols[a]);
        }
    });
    leaf.best = SplitCandidate{};
    for (const auto& cand : per_col)
        if (cand.col >= 0 && better(cand, leaf.best)) leaf.best = cand;
}

RegressionTree grow_tree(const TrainingMatrix& matrix,
                         const std::vector<std::int32_t>& active_cols, const double* targets,
                         std::vector<std::vector<std::int32_t>> root_sorted,
                         const std::vector<std::int32_t>& rows, const TreeParams& params) {
    RegressionTree tree;
    tree.leaves.clear();

    std::vector<LeafState> leaves;
    LeafState root;
    root.sorted = std::move(root_sorted);
    for (std::int32_t r : rows) root.sum += targets[r];
    root.count = static_cast<std::int64_t>(rows.size());
    compute_best_split(root, matrix, active_cols, targets, params.min_examples_per_leaf);

    double root_mean = root.sum / static_cast<double>(root.count);
    double root_sse = 0.0;
    for (std::int32_t r : rows) {
        double d = targets[r] - root_mean;
        root_sse += d * d;
    }
    // splits below double-summation noise are not real reductions
    const double gain_floor = 1e-12 + 1e-9 * root_sse;

    leaves.push_back(std::move(root));

    while (static_cast<int>(leaves.size()) < params.max_leaves) {
        std::size_t pick = leaves.size();
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            if (leaves[i].best.col < 0 || leaves[i].best.gain <= gain_floor) continue;
            if (pick == leaves.size() || leaves[i].best.gain > leaves[pick].best.gain)
                pick = i;
        }
        if (pick == leaves.size()) break;

        LeafState& parent = leaves[pick];
        int node_id = static_cast<int>(tree.nodes.size());
        SplitNode node;
        node.feature = parent.best.col;
        node.threshold = parent.best.threshold;
        tree.nodes.push_back(node);
        if (parent.parent >= 0) {
            if (parent.right_child) tree.nodes[parent.parent].right = node_id;
            else tree.nodes[parent.parent].left = node_id;
        }

        const double* split_values = matrix.columns[parent.best.col].data();
        double thr = parent.best.threshold;
        std::size_t c = active_cols.size();

        LeafState left, right;
        left.sorted.resize(c);
        right.sorted.resize(c);
        left.parent = node_id;
        right.parent = node_id;
        right.right_child = true;

        std::size_t work = parent.sorted.front().size();
        parallel_over(c, work > 4096 ? 0 : c, [&](std::size_t begin, std::size_t end) {
            for (std::size_t a = begin; a < end; ++a) {
                const auto& src = parent.sorted[a];
                auto& l = left.sorted[a];
                auto& r = right.sorted[a];
                for (std::int32_t row : src)
                    (split_values[row] < thr ? l : r).push_back(row);
            }
        });
        for (std::int32_t row : left.sorted.front()) left.sum += targets[row];
        left.count = static_cast<std::int64_t>(left.sorted.front().size());
        right.sum = parent.sum - left.sum;
        right.count = parent.count - left.count;

        compute_best_split(left, matrix, active_cols, targets, params.min_examples_per_leaf);
        compute_best_split(right, matrix, active_cols, targets, params.min_examples_per_leaf);

        leaves[pick] = std::move(left);
        leaves.push_back(std::move(right));
    }

    for (std::size_t i = 0; i < leaves.size(); ++i) {
        int leaf_id = static_cast<int>(tree.leaves.size());
        tree.leaves.push_back(leaves[i].count > 0
                                  ? leaves[i].sum / static_cast<double>(leaves[i].count)
                                  : 0.0);
        if (leaves[i].parent >= 0) {
            if (leaves[i].right_child) tree.nodes[leaves[i].parent].right = -1 - leaf_id;
            else tree.nodes[leaves[i].parent].left = -1 - leaf_id;
        }
    }
    return tree;
}

double tree_predict_columns(const RegressionTree& tree, const TrainingMatrix& matrix,
                            std::size_t row) {
    if (tree.nodes.empty()) return tree.leaves.front();
    int cur = 0;
    while (true) {
        const SplitNode& n = tree.nodes[cur];
        int next = matrix.columns[n.feature][row] < n.threshold ? n.left : n.right;
        if (next < 0) return tree.leaves[-1 - next];
        cur = next;
    }
}

std::vector<std::int32_t> all_indices(std::size_t n) {
    std::vector<std::int32_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

std::vector<std::vector<std::int32_t>> presort_columns(const TrainingMatrix& matrix,
                                                       const std::vector<std::int32_t>& cols,
                                                       const std::vector<std::int32_t>& rows) {
    std::vector<std::vector<std::int32_t>> sorted(cols.size());
    parallel_over(cols.size(), 4, [&](std::size_t begin, std::size_t end) {
        for (std::size_t a = begin; a < end; ++a) {
            const double* values = matrix.columns[cols[a]].data();
            auto& order = sorted[a];
            order = rows;
            std::stable_sort(order.begin(), order.end(), [&](std::int32_t x, std::int32_t y) {
                return values[x] < values[y];
            });
        }
    });
    return sorted;
}

}  // namespace

double RegressionTree::predict(const std::vector<double>& row) const {
    if (nodes.empty()) return leaves.front();
    int cur = 0;
    while (true) {
        const SplitNode& n = nodes[cur];
        int next = row[n.feature] < n.threshold ? n.left : n.right;
        if (next < 0) return leaves[-1 - next];
        cur = next;
    }
}

double MartModel::predict_row(const std::vector<double>& row) const {
    double out = base;
    for (const auto& tree : trees) out += params.shrinkage * tree.predict(row);
    return out;
}

std::vector<double> TrainingMatrix::row_values(std::size_t row) const {
    std::vector<double> out(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) out[c] = columns[c][row];
    return out;
}

TrainingMatrix build_matrix(const std::vector<TrainingExample>& examples,
                            const FeatureSchema& schema) {
    TrainingMatrix m;
    m.rows = examples.size();
    std::size_t f = schema.size();
    m.column_names.reserve(2 * f);
    for (const auto& name : schema.names) m.column_names.push_back(name);
    for (const auto& name : schema.names) m.column_names.push_back("def_" + name);
    m.columns.assign(2 * f, std::vector<double>(m.rows, 0.0));
    for (std::size_t r = 0; r < examples.size(); ++r) {
        const FeatureVector& v = examples[r].features;
        if (v.values.size() != f)
            throw SchemaError("training example does not match feature schema");
        for (std::size_t c = 0; c < f; ++c) {
            m.columns[c][r] = v.values[c];
            m.columns[f + c][r] = v.defined[c] ? 1.0 : 0.0;
        }
    }
    return m;
}

std::vector<double> feature_row(const FeatureVector& features) {
    std::size_t f = features.values.size();
    std::vector<double> row(2 * f);
    for (std::size_t c = 0; c < f; ++c) {
        row[c] = features.values[c];
        row[f + c] = features.defined[c] ? 1.0 : 0.0;
    }
    return row;
}

RegressionTree fit_tree(const TrainingMatrix& matrix, const std::vector<double>& targets,
                        const TreeParams& params, const std::vector<std::int32_t>* row_subset,
                        const std::vector<std::int32_t>* column_subset) {
    if (targets.size() != matrix.rows)
        throw ValidationError("fit_tree: targets misaligned with matrix");
    std::vector<std::int32_t> rows =
        row_subset ? *row_subset : all_indices(matrix.rows);
    if (rows.empty()) throw ConfigError("fit_tree: empty input");
    std::vector<std::int32_t> cols =
        column_subset ? *column_subset : all_indices(matrix.columns.size());
    auto sorted = presort_columns(matrix, cols, rows);
    return grow_tree(matrix, cols, targets.data(), std::move(sorted), rows, params);
}

MartModel train_mart(const TrainingMatrix& matrix, const std::vector<double>& labels,
                     const MartParams& params, const std::vector<std::int32_t>* column_subset) {
    if (matrix.rows == 0) throw ConfigError("train_mart: empty training set");
    if (labels.size() != matrix.rows)
        throw ValidationError("train_mart: labels misaligned with matrix");
    if (params.shrinkage <= 0.0 || params.shrinkage > 1.0)
        throw ConfigError("train_mart: shrinkage must be in (0,1]");
    if (params.subsample <= 0.0 || params.subsample > 1.0)
        throw ConfigError("train_mart: subsample_fraction must be in (0,1]");
    if (params.iterations < 0 || params.tree.max_leaves < 1)
        throw ConfigError("train_mart: invalid iteration or leaf parameters");

    std::size_t n = matrix.rows;
    MartModel model;
    model.params = params;
    model.base = std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(n);
    model.trees.reserve(static_cast<std::size_t>(params.iterations));

    // Globally constant columns can never split any subset.
    std::vector<std::int32_t> cols;
    {
        std::vector<std::int32_t> requested =
            column_subset ? *column_subset : all_indices(matrix.columns.size());
        for (std::int32_t c : requested) {
            const auto& col = matrix.columns[c];
            auto [lo, hi] = std::minmax_element(col.begin(), col.end());
            if (*lo != *hi) cols.push_back(c);
        }
    }
    auto global_sorted = presort_columns(matrix, cols, all_indices(n));

    std::vector<double> pred(n, model.base);
    std::vector<double> residual(n, 0.0);
    std::vector<char> in_sample(n, 1);
    std::vector<std::int32_t> pool;
    Rng rng(params.seed);
    std::size_t take = n;
    bool subsampling = params.subsample < 1.0;
    if (subsampling)
        take = std::max<std::size_t>(1, static_cast<std::size_t>(
                                            std::llround(params.subsample * static_cast<double>(n))));

    auto record_mse = [&]() {
        double sum = 0.0, comp = 0.0;  // Kahan
        for (std::size_t i = 0; i < n; ++i) {
            double d = labels[i] - pred[i];
            double term = d * d - comp;
            double next = sum + term;
            comp = (next - sum) - term;
            sum = next;
        }
        model.mse_history.push_back(sum / static_cast<double>(n));
    };
    record_mse();

    std::vector<std::int32_t> all_rows = all_indices(n);
    for (int iter = 0; iter < params.iterations; ++iter) {
        std::vector<std::int32_t> rows_m;
        if (subsampling) {
            pool = all_indices(n);
            std::fill(in_sample.begin(), in_sample.end(), 0);
            for (std::size_t i = 0; i < take; ++i) {
                std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
                std::swap(pool[i], pool[j]);
                in_sample[pool[i]] = 1;
            }
            rows_m.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
            std::sort(rows_m.begin(), rows_m.end());
        }
        const std::vector<std::int32_t>& rows = subsampling ? rows_m : all_rows;
        for (std::int32_t i : rows) residual[i] = labels[i] - pred[i];

        std::vector<std::vector<std::int32_t>> root_sorted(cols.size());
        parallel_over(cols.size(), 4, [&](std::size_t begin, std::size_t end) {
            for (std::size_t a = begin; a < end; ++a) {
                auto& dst = root_sorted[a];
                dst.reserve(take);
                for (std::int32_t row : global_sorted[a])
                    if (in_sample[row]) dst.push_back(row);
            }
        });

        RegressionTree tree = grow_tree(matrix, cols, residual.data(), std::move(root_sorted),
                                        rows, params.tree);
        if (tree.nodes.empty()) tree.leaves.assign(1, 0.0);  // zero-gain iteration
        bool changes = !tree.nodes.empty() || tree.leaves.front() != 0.0;
        if (changes) {
            for (std::size_t row = 0; row < n; ++row)
                pred[row] += params.shrinkage * tree_predict_columns(tree, matrix, row);
        }
        model.trees.push_back(std::move(tree));
        record_mse();
    }
    return model;
}

double predict(const MartModel& model, const FeatureVector& features) {
    if (model.schema_version != features.schema_version)
        throw SchemaError("feature schema version does not match model");
    return model.predict_row(feature_row(features));
}

const MartModel& SelectionModel::model_for(EstimatorId id) const {
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (candidates[i] == id) return models[i];
    throw ConfigError(std::string("no model for estimator ") + to_string(id));
}

std::vector<TrainingExample> build_training_set(const std::vector<Trace>& traces,
                                                const std::vector<std::string>& group_ids,
                                                const std::vector<EstimatorId>& candidates,
                                                const FeatureSchema& schema) {
    if (!group_ids.empty() && group_ids.size() != traces.size())
        throw ValidationError("build_training_set: one group id per trace required");
    std::vector<TrainingExample> examples;
    for (std::size_t t = 0; t < traces.size(); ++t) {
        const Trace& trace = traces[t];
        for (const Pipeline& pipeline : trace.pipelines) {
            std::vector<std::optional<double>> labels;
            bool any = false;
            for (EstimatorId id : candidates) {
                auto err = pipeline_l1_error(trace, pipeline, id);
                labels.push_back(err);
                any = any || err.has_value();
            }
            if (!any) continue;  // all candidates degenerate: drop the pipeline

            FeatureVector stat;
            try {
                stat = static_features(trace.plan, pipeline, schema);
            } catch (const DegenerateInputError&) {
                continue;
            }
            for (Stage stage : all_stages()) {
                TrainingExample ex;
                ex.query_id = trace.query_id;
                ex.pipeline_id = pipeline.id;
                ex.stage = stage;
                ex.group_id = group_ids.empty() ? std::string() : group_ids[t];
                ex.labels = labels;
                if (stage == Stage::Static) {
                    ex.features = assemble(stat, FeatureVector::undefined_of(schema));
                } else {
                    std::size_t prefix = trace.observations.size();
                    try {
                        auto cp = checkpoint(trace, pipeline, stage_percent(stage),
                                             trace.observations.size());
                        if (cp) prefix = *cp + 1;
                    } catch (const DegenerateInputError&) {
                    }
                    ex.features = assemble(stat, dynamic_features(trace, pipeline, prefix, schema));
                }
                examples.push_back(std::move(ex));
            }
        }
    }
    return examples;
}

SelectionModel train_selection_model(const std::vector<TrainingExample>& examples,
                                     const std::vector<EstimatorId>& candidates,
                                     const FeatureSchema& schema, const MartParams& params) {
    if (examples.empty()) throw ConfigError("train_selection_model: empty training set");
    SelectionModel model;
    model.schema = schema;
    model.candidates = candidates;
    std::sort(model.candidates.begin(), model.candidates.end());  // canonical order
    model.params = params;

    TrainingMatrix matrix = build_matrix(examples, schema);
    for (std::size_t c = 0; c < model.candidates.size(); ++c) {
        std::vector<std::int32_t> rows;
        std::vector<double> labels;
        // estimator position in the example's label vector mirrors `candidates`
        std::size_t pos = static_cast<std::size_t>(
            std::find(candidates.begin(), candidates.end(), model.candidates[c]) -
            candidates.begin());
        for (std::size_t r = 0; r < examples.size(); ++r) {
            const auto& label = examples[r].labels.at(pos);
            if (!label) continue;
            rows.push_back(static_cast<std::int32_t>(r));
        }
        if (rows.empty())
            throw ConfigError(std::string("no defined labels for estimator ") +
                              to_string(model.candidates[c]));
        // Build a compacted matrix for this estimator's defined rows.
        TrainingMatrix sub;
        sub.rows = rows.size();
        sub.column_names = matrix.column_names;
        sub.columns.assign(matrix.columns.size(), std::vector<double>(sub.rows));
        for (std::size_t col = 0; col < matrix.columns.size(); ++col)
            for (std::size_t i = 0; i < rows.size(); ++i)
                sub.columns[col][i] = matrix.columns[col][rows[i]];
        labels.reserve(rows.size());
        for (std::int32_t r : rows) labels.push_back(*examples[r].labels[pos]);
        model.models.push_back(train_mart(sub, labels, params));
    }
    return model;
}

std::vector<std::pair<EstimatorId, double>> ranked_candidates(const SelectionModel& model,
                                                              const FeatureVector& features) {
    std::vector<std::pair<EstimatorId, double>> ranked;
    for (std::size_t i = 0; i < model.candidates.size(); ++i)
        ranked.emplace_back(model.candidates[i], predict(model.models[i], features));
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return static_cast<int>(a.first) < static_cast<int>(b.first);
    });
    return ranked;
}

EstimatorId select_estimator(const SelectionModel& model, const FeatureVector& features) {
    if (model.models.size() != model.candidates.size() || model.candidates.empty())
        throw ConfigError("selection model is missing candidate models");
    return ranked_candidates(model, features).front().first;
}

std::vector<ScheduleEntry> select_online(const SelectionModel& model, const Trace& trace,
                                         const Pipeline& pipeline) {
    std::vector<ScheduleEntry> schedule;
    FeatureVector stat = static_features(trace.plan, pipeline, model.schema);

    auto choose = [&](const FeatureVector& fv,
                      std::optional<std::size_t> obs) -> EstimatorId {
        auto ranked = ranked_candidates(model, fv);
        for (const auto& [id, pred] : ranked) {
            if (!obs) return id;  // static stage: nothing to probe yet
            try {
                estimate(id, trace, *obs, pipeline);
                return id;
            } catch (const DegenerateInputError&) {
                continue;  // degenerate at selection time: next-best candidate
            }
        }
        return EstimatorId::TGN;  // last resort, with clamped estimates
    };

    schedule.push_back(
        {Stage::Static, choose(assemble(stat, FeatureVector::undefined_of(model.schema)),
                               std::nullopt)});

    const auto& window = trace.truth.windows.at(static_cast<std::size_t>(pipeline.id));
    for (Stage stage : all_stages()) {
        if (stage == Stage::Static) continue;
        std::optional<std::size_t> cp;
        try {
            cp = checkpoint(trace, pipeline, stage_percent(stage), trace.observations.size());
        } catch (const DegenerateInputError&) {
            break;
        }
        if (!cp) break;
        // A checkpoint only first observed at or after the pipeline's end
        // cannot revise anything.
        if (trace.observations[*cp].time >= window.t_end) break;
        FeatureVector fv =
            assemble(stat, dynamic_features(trace, pipeline, *cp + 1, model.schema));
        schedule.push_back({stage, choose(fv, cp)});
    }
    return schedule;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json tree_to_json(const RegressionTree& tree) {
    json jt;
    jt["nodes"] = json::array();
    for (const auto& n : tree.nodes)
        jt["nodes"].push_back(json::array({n.feature, n.threshold, n.left, n.right}));
    jt["leaves"] = tree.leaves;
    return jt;
}

RegressionTree tree_from_json(const json& jt) {
    RegressionTree tree;
    tree.nodes.clear();
    for (const auto& jn : jt.at("nodes")) {
        SplitNode n;
        n.feature = jn.at(0).get<int>();
        n.threshold = jn.at(1).get<double>();
        n.left = jn.at(2).get<int>();
        n.right = jn.at(3).get<int>();
        tree.nodes.push_back(n);
    }
    tree.leaves = jt.at("leaves").get<std::vector<double>>();
    return tree;
}

json params_to_json(const MartParams& p) {
    json jp;
    jp["iterations"] = p.iterations;
    jp["max_leaves"] = p.tree.max_leaves;
    jp["min_examples_per_leaf"] = p.tree.min_examples_per_leaf;
    jp["shrinkage"] = p.shrinkage;
    jp["subsample"] = p.subsample;
    jp["seed"] = p.seed;
    return jp;
}

MartParams params_from_json(const json& jp) {
    MartParams p;
    p.iterations = jp.at("iterations").get<int>();
    p.tree.max_leaves = jp.at("max_leaves").get<int>();
    p.tree.min_examples_per_leaf = jp.at("min_examples_per_leaf").get<int>();
    p.shrinkage = jp.at("shrinkage").get<double>();
    p.subsample = jp.at("subsample").get<double>();
    p.seed = jp.at("seed").get<std::uint64_t>();
    return p;
}

}  // namespace

std::string selection_model_to_json(const SelectionModel& model) {
    json j;
    j["schema_version"] = model.schema_version;
    j["params"] = params_to_json(model.params);
    json fc;
    fc["pairs"] = json::array();
    for (const auto& [a, b] : model.schema.config.pairs)
        fc["pairs"].push_back(json::array({to_string(a), to_string(b)}));
    fc["cor_estimators"] = json::array();
    for (EstimatorId id : model.schema.config.cor_estimators)
        fc["cor_estimators"].push_back(to_string(id));
    fc["checkpoints"] = model.schema.config.checkpoints;
    fc["cor_segments"] = model.schema.config.cor_segments;
    fc["all_pairs"] = model.schema.config.all_pairs;
    fc["cor_alternative_form"] = model.schema.config.cor_alternative_form;
    j["feature_config"] = std::move(fc);
    j["candidates"] = json::array();
    for (EstimatorId id : model.candidates) j["candidates"].push_back(to_string(id));
    j["models"] = json::array();
    for (std::size_t i = 0; i < model.models.size(); ++i) {
        json jm;
        jm["estimator"] = to_string(model.candidates[i]);
        jm["base"] = model.models[i].base;
        jm["trees"] = json::array();
        for (const auto& tree : model.models[i].trees) jm["trees"].push_back(tree_to_json(tree));
        j["models"].push_back(std::move(jm));
    }
    return j.dump();
}

SelectionModel selection_model_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed model JSON: ") + e.what());
    }
    SelectionModel model;
    try {
        model.schema_version = j.at("schema_version").get<int>();
        if (model.schema_version != kSchemaVersion)
            throw SchemaError("model schema version " + std::to_string(model.schema_version) +
                              " does not match " + std::to_string(kSchemaVersion));
        model.params = params_from_json(j.at("params"));
        FeatureConfig fc;
        fc.pairs.clear();
        for (const auto& jp : j.at("feature_config").at("pairs"))
            fc.pairs.emplace_back(estimator_from_string(jp.at(0).get<std::string>()),
                                  estimator_from_string(jp.at(1).get<std::string>()));
        fc.cor_estimators.clear();
        for (const auto& je : j.at("feature_config").at("cor_estimators"))
            fc.cor_estimators.push_back(estimator_from_string(je.get<std::string>()));
        fc.checkpoints = j.at("feature_config").at("checkpoints").get<std::vector<double>>();
        fc.cor_segments = j.at("feature_config").at("cor_segments").get<int>();
        fc.all_pairs = j.at("feature_config").at("all_pairs").get<bool>();
        fc.cor_alternative_form = j.at("feature_config").at("cor_alternative_form").get<bool>();
        model.schema = FeatureSchema::make(fc);
        for (const auto& jc : j.at("candidates"))
            model.candidates.push_back(estimator_from_string(jc.get<std::string>()));
        for (const auto& jm : j.at("models")) {
            MartModel mm;
            mm.params = model.params;
            mm.base = jm.at("base").get<double>();
            for (const auto& jt : jm.at("trees")) mm.trees.push_back(tree_from_json(jt));
            model.models.push_back(std::move(mm));
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model JSON missing field: ") + e.what());
    }
    if (model.models.size() != model.candidates.size())
        throw SchemaError("model JSON: one model per candidate required");
    return model;
}

void write_selection_model(const std::string& path, const SelectionModel& model) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open model file for writing: " + path);
    out << selection_model_to_json(model) << '\n';
}

SelectionModel read_selection_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return selection_model_from_json(buf.str());
}

void write_feature_matrix(const std::string& path, const std::vector<TrainingExample>& examples,
                          const FeatureSchema& schema,
                          const std::vector<EstimatorId>& candidates) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open feature matrix file for writing: " + path);
    out << "query_id\tpipeline\tstage";
    for (const auto& name : schema.names) out << '\t' << name;
    for (const auto& name : schema.names) out << "\tdef_" << name;
    for (EstimatorId id : candidates) out << "\tlabel_" << to_string(id);
    out << '\n';
    char buf[64];
    for (const auto& ex : examples) {
        out << ex.query_id << '\t' << ex.pipeline_id << '\t' << to_string(ex.stage);
        for (double v : ex.features.values) {
            std::snprintf(buf, sizeof(buf), "%.9g", v);
            out << '\t' << buf;
        }
        for (char d : ex.features.defined) out << '\t' << (d ? 1 : 0);
        for (const auto& label : ex.labels) {
            if (label) {
                std::snprintf(buf, sizeof(buf), "%.9g", *label);
                out << '\t' << buf;
            } else {
                out << "\tNA";
            }
        }
        out << '\n';
    }
}

}  // namespace qpe
