#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qpe/common.hpp"
#include "qpe/estimators.hpp"
#include "qpe/features.hpp"
#include "qpe/sim.hpp"

namespace qpe {

struct TrainingExample {
    std::string query_id;
    int pipeline_id = 0;
    Stage stage = Stage::Static;
    std::string group_id;  // workload family, for group-aware splits
    FeatureVector features;
    std::vector<std::optional<double>> labels;  // per candidate; masked when degenerate
};

struct TreeParams {
    int max_leaves = 30;
    int min_examples_per_leaf = 5;
};

struct MartParams {
    int iterations = 200;
    TreeParams tree;
    double shrinkage = 0.1;
    double subsample = 0.7;
    std::uint64_t seed = 0;
};

/// Binary regression tree. Child links >= 0 index internal nodes; negative
/// links encode leaves as -1 - leaf_index. Rows go left when
/// value[feature] < threshold.
struct SplitNode {
    int feature = 0;
    double threshold = 0.0;
    int left = -1;
    int right = -2;
};

struct RegressionTree {
    std::vector<SplitNode> nodes;
    std::vector<double> leaves{0.0};

    double predict(const std::vector<double>& row) const;
};

struct MartModel {
    int schema_version = kSchemaVersion;
    MartParams params;
    double base = 0.0;
    std::vector<RegressionTree> trees;
    std::vector<double> mse_history;  // training MSE after each iteration

    double predict_row(const std::vector<double>& row) const;
};

/// Column-major training data: one column per schema feature, then one 0/1
/// mask column per feature so trees can split on definedness.
struct TrainingMatrix {
    std::size_t rows = 0;
    std::vector<std::string> column_names;
    std::vector<std::vector<double>> columns;

    std::vector<double> row_values(std::size_t row) const;
};

TrainingMatrix build_matrix(const std::vector<TrainingExample>& examples,
                            const FeatureSchema& schema);

/// Flattens a feature vector to the matrix column layout (values then masks).
std::vector<double> feature_row(const FeatureVector& features);

/// Exact greedy regression tree: repeatedly splits the leaf whose best split
/// most reduces squared error; candidate thresholds are midpoints between
/// consecutive distinct sorted feature values; leaf values are mean targets.
RegressionTree fit_tree(const TrainingMatrix& matrix, const std::vector<double>& targets,
                        const TreeParams& params,
                        const std::vector<std::int32_t>* row_subset = nullptr,
                        const std::vector<std::int32_t>* column_subset = nullptr);

/// MSE gradient boosting over regression trees. Deterministic given the seed.
MartModel train_mart(const TrainingMatrix& matrix, const std::vector<double>& labels,
                     const MartParams& params,
                     const std::vector<std::int32_t>* column_subset = nullptr);

double predict(const MartModel& model, const FeatureVector& features);

struct SelectionModel {
    int schema_version = kSchemaVersion;
    FeatureSchema schema;
    std::vector<EstimatorId> candidates;  // canonical order
    MartParams params;
    std::vector<MartModel> models;  // aligned with candidates

    const MartModel& model_for(EstimatorId id) const;
};

/// One example per (pipeline, stage); labels are each candidate's mean
/// absolute estimation error over the pipeline's full execution window.
std::vector<TrainingExample> build_training_set(const std::vector<Trace>& traces,
                                                const std::vector<std::string>& group_ids,
                                                const std::vector<EstimatorId>& candidates,
                                                const FeatureSchema& schema);

SelectionModel train_selection_model(const std::vector<TrainingExample>& examples,
                                     const std::vector<EstimatorId>& candidates,
                                     const FeatureSchema& schema, const MartParams& params);

/// Argmin of predicted error; ties break in canonical estimator order.
EstimatorId select_estimator(const SelectionModel& model, const FeatureVector& features);

/// Candidates ordered by (predicted error, canonical order).
std::vector<std::pair<EstimatorId, double>> ranked_candidates(const SelectionModel& model,
                                                              const FeatureVector& features);

struct ScheduleEntry {
    Stage stage = Stage::Static;
    EstimatorId choice = EstimatorId::TGN;
};

/// Emits a choice at the static stage and at each checkpoint the pipeline
/// reaches before finishing; the choice freezes after the 20% stage.
/// Candidates that are degenerate at selection time fall back to the
/// next-best prediction; TGN is the last resort.
std::vector<ScheduleEntry> select_online(const SelectionModel& model, const Trace& trace,
                                         const Pipeline& pipeline);

// --- serialization (versioned JSON, bit-exact round trip) -------------------

std::string selection_model_to_json(const SelectionModel& model);
SelectionModel selection_model_from_json(const std::string& text);
void write_selection_model(const std::string& path, const SelectionModel& model);
SelectionModel read_selection_model(const std::string& path);

/// Feature-matrix dump: header row of schema names, then one row per
/// (pipeline, stage) instance with values, masks and labels.
void write_feature_matrix(const std::string& path, const std::vector<TrainingExample>& examples,
                          const FeatureSchema& schema,
                          const std::vector<EstimatorId>& candidates);

}  // namespace qpe
