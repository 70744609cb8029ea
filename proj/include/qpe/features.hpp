#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qpe/common.hpp"
#include "qpe/estimators.hpp"
#include "qpe/plan.hpp"
#include "qpe/sim.hpp"

namespace qpe {

struct FeatureConfig {
    // Pairwise-difference features; defaults to the three pairs used in the
    // evaluation setup. all_pairs expands to every ordered candidate pair.
    std::vector<std::pair<EstimatorId, EstimatorId>> pairs = {
        {EstimatorId::DNE, EstimatorId::TGN},
        {EstimatorId::DNE, EstimatorId::TGNINT},
        {EstimatorId::TGN, EstimatorId::TGNINT},
    };
    std::vector<EstimatorId> cor_estimators = default_candidates();
    std::vector<double> checkpoints = {1, 2, 5, 10, 20};  // percent of driver input
    int cor_segments = 4;                                 // i = 1..k
    bool all_pairs = false;
    bool cor_alternative_form = false;  // normalize by t{x}, estimator at t{ix/k}
};

/// Fixed, versioned feature ordering: per-operator plan-shape features, the
/// driver-cardinality share, pairwise estimator differences at checkpoints,
/// and estimator/time correlation features.
struct FeatureSchema {
    int version = kSchemaVersion;
    FeatureConfig config;
    std::vector<std::string> names;
    std::size_t static_count = 0;  // leading entries that need no execution feedback

    std::size_t size() const { return names.size(); }
    std::size_t index_of(const std::string& name) const;  // throws SchemaError if absent

    static FeatureSchema make(const FeatureConfig& config = FeatureConfig{});
};

/// Values plus a per-entry defined mask; undefined entries hold sentinel 0.
struct FeatureVector {
    int schema_version = kSchemaVersion;
    std::vector<double> values;
    std::vector<char> defined;

    static FeatureVector undefined_of(const FeatureSchema& schema);
};

/// Plan-shape features of one pipeline from initial optimizer estimates.
/// Throws DegenerateInputError when the pipeline estimate sum is zero.
FeatureVector static_features(const Plan& plan, const Pipeline& pipeline,
                              const FeatureSchema& schema);

/// First observation in the prefix at which x% of the driver input was
/// consumed; nullopt when the prefix ends earlier.
std::optional<std::size_t> checkpoint(const Trace& trace, const Pipeline& pipeline,
                                      double x_percent, std::size_t prefix_len);

FeatureVector pairwise_diff_features(const Trace& trace, const Pipeline& pipeline,
                                     std::size_t prefix_len, const FeatureSchema& schema);

FeatureVector time_correlation_features(const Trace& trace, const Pipeline& pipeline,
                                        std::size_t prefix_len, const FeatureSchema& schema);

/// Both dynamic feature groups over one trace prefix.
FeatureVector dynamic_features(const Trace& trace, const Pipeline& pipeline,
                               std::size_t prefix_len, const FeatureSchema& schema);

/// Merges the static and dynamic portions. Throws SchemaError on version or
/// size mismatch.
FeatureVector assemble(const FeatureVector& static_part, const FeatureVector& dynamic_part);

/// Extraction stages: before execution, then at each driver-input checkpoint.
enum class Stage : int { Static = 0, X1, X2, X5, X10, X20 };

const std::vector<Stage>& all_stages();
double stage_percent(Stage stage);  // 0 for Static
const char* to_string(Stage stage);

/// Full feature vector for one (pipeline, stage): static features assembled
/// with the dynamic features of the prefix ending at the stage's checkpoint.
FeatureVector extract_at_stage(const Trace& trace, const Pipeline& pipeline, Stage stage,
                               const FeatureSchema& schema);

}  // namespace qpe
