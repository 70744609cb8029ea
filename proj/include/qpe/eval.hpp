#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qpe/common.hpp"
#include "qpe/estimators.hpp"
#include "qpe/selection.hpp"
#include "qpe/sim.hpp"

namespace qpe {

/// L_p error of an estimate series against a truth series. With mean
/// normalization (the default) p=1 is the mean absolute deviation.
double lp_error_series(const std::vector<double>& estimates, const std::vector<double>& truth,
                       int p, bool mean_normalize = true);

/// Query-level form: one estimate per observation, truth is elapsed-time
/// progress.
double lp_error(const Trace& trace, const std::vector<double>& estimates, int p,
                bool mean_normalize = true);

/// Observation indices inside the pipeline's execution window.
std::vector<std::size_t> pipeline_observation_range(const Trace& trace, const Pipeline& pipeline);

/// Estimator value (clamped) at each window observation; nullopt when the
/// estimator is degenerate anywhere in the window or the window is empty.
std::optional<std::vector<double>> pipeline_estimate_series(const Trace& trace,
                                                            const Pipeline& pipeline,
                                                            EstimatorId id);

std::optional<double> pipeline_lp_error(const Trace& trace, const Pipeline& pipeline,
                                        EstimatorId id, int p);
std::optional<double> pipeline_l1_error(const Trace& trace, const Pipeline& pipeline,
                                        EstimatorId id);

struct OraclePick {
    double error = 0.0;
    std::size_t index = 0;  // into the candidate array, canonical tie-break
};

/// Smallest defined error and its candidate; throws DegenerateInputError when
/// every candidate is masked.
OraclePick oracle_policy(const std::vector<std::optional<double>>& errors);

/// Fraction of pipelines where the policy's choice attains the minimum error
/// (ties count as optimal). policy_choice indexes the candidate array.
double percent_optimal(const std::vector<std::vector<std::optional<double>>>& candidate_errors,
                       const std::vector<std::optional<std::size_t>>& policy_choice);

struct RatioTable {
    std::vector<double> thresholds;
    std::vector<double> exceed_fraction;  // aligned with thresholds
    std::size_t included = 0;
    std::size_t excluded = 0;  // pipelines whose minimum error is below 1e-6
};

/// Fraction of pipelines whose policy error exceeds threshold x the minimum
/// candidate error. Thresholds must be strictly ascending.
RatioTable ratio_table(const std::vector<std::vector<std::optional<double>>>& candidate_errors,
                       const std::vector<std::optional<double>>& policy_errors,
                       const std::vector<double>& thresholds = {2.0, 5.0, 10.0});

struct NearOptimalRow {
    double almost_optimal = 0.0;
    double significantly_outperforms = 0.0;
};

/// Per candidate: fraction of pipelines where it is (nearly) optimal
/// (optimal, or within 0.01 absolute, or within 1% relative), and where it
/// strictly beats the next-best by more than 0.01 absolute and 1% relative.
std::vector<NearOptimalRow> near_optimality_table(
    const std::vector<std::vector<std::optional<double>>>& candidate_errors);

struct GreedyRound {
    std::string feature;
    double cv_mse = 0.0;
};

/// Incremental forward feature selection: each round adds the feature that
/// minimizes 2-fold cross-validated MSE of the per-estimator error models,
/// trained with a reduced boosting budget.
std::vector<GreedyRound> greedy_feature_selection(const std::vector<TrainingExample>& examples,
                                                  const FeatureSchema& schema,
                                                  const std::vector<EstimatorId>& candidates,
                                                  int rounds, MartParams params);

struct ExperimentConfig {
    std::vector<EstimatorId> candidates = default_candidates();
    FeatureConfig features;
    MartParams params;
    std::vector<double> ratio_thresholds = {2.0, 5.0, 10.0};
    bool mean_normalize = true;
    std::string series_dir;  // when set, per-observation series files are written here
};

struct FoldResult {
    std::string held_out;
    std::size_t pipeline_count = 0;
    // aligned with candidates
    std::vector<double> estimator_l1, estimator_l2, estimator_pct_optimal;
    std::vector<NearOptimalRow> near_optimal;
    double oracle_l1 = 0.0, oracle_l2 = 0.0;
    double static_l1 = 0.0, static_l2 = 0.0;
    double dynamic_l1 = 0.0, dynamic_l2 = 0.0;
    double pct_optimal_oracle = 0.0, pct_optimal_static = 0.0, pct_optimal_dynamic = 0.0;
    RatioTable ratios_static, ratios_dynamic;
    std::vector<RatioTable> ratios_estimators;  // aligned with candidates
};

struct ErrorReport {
    std::vector<EstimatorId> candidates;
    std::vector<FoldResult> folds;
};

/// Evaluates a trained model on one set of test traces.
FoldResult evaluate_with_model(const std::vector<const Trace*>& test_traces,
                               const SelectionModel& model, const ExperimentConfig& config,
                               const std::string& fold_name);

/// Leave-one-family-out protocol: each distinct group id is held out once,
/// the selection model trains on the remaining groups and is evaluated on the
/// held-out pipelines.
ErrorReport run_experiment(const std::vector<Trace>& traces,
                           const std::vector<std::string>& groups,
                           const ExperimentConfig& config);

/// Writes the report tables (summary, ratio table, near-optimality) as TSV.
void write_report_files(const std::string& dir, const ErrorReport& report);

}  // namespace qpe
