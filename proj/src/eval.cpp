#include "qpe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace qpe {

namespace {

constexpr double kRatioMinError = 1e-6;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

double lp_error_series(const std::vector<double>& estimates, const std::vector<double>& truth,
                       int p, bool mean_normalize) {
    if (p != 1 && p != 2) throw ConfigError("lp_error: p must be 1 or 2");
    if (estimates.empty() || estimates.size() != truth.size())
        throw DegenerateInputError("lp_error: empty or misaligned observation set");
    double sum = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        double d = std::fabs(estimates[i] - truth[i]);
        sum += p == 1 ? d : d * d;
    }
    if (mean_normalize) sum /= static_cast<double>(estimates.size());
    return p == 1 ? sum : std::sqrt(sum);
}

double lp_error(const Trace& trace, const std::vector<double>& estimates, int p,
                bool mean_normalize) {
    if (estimates.size() != trace.observations.size())
        throw DegenerateInputError("lp_error: one estimate per observation required");
    std::vector<double> truth(estimates.size());
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = ground_truth_progress(trace, i);
    return lp_error_series(estimates, truth, p, mean_normalize);
}

std::vector<std::size_t> pipeline_observation_range(const Trace& trace,
                                                    const Pipeline& pipeline) {
    const auto& win = trace.truth.windows.at(static_cast<std::size_t>(pipeline.id));
    std::vector<std::size_t> range;
    for (std::size_t i = 0; i < trace.observations.size(); ++i) {
        double t = trace.observations[i].time;
        if (t >= win.t_begin - 1e-12 && t <= win.t_end + 1e-12) range.push_back(i);
    }
    return range;
}

std::optional<std::vector<double>> pipeline_estimate_series(const Trace& trace,
                                                            const Pipeline& pipeline,
                                                            EstimatorId id) {
    auto range = pipeline_observation_range(trace, pipeline);
    if (range.size() < 2) return std::nullopt;
    std::vector<double> series;
    series.reserve(range.size());
    try {
        for (std::size_t i : range) series.push_back(estimate(id, trace, i, pipeline));
    } catch (const DegenerateInputError&) {
        return std::nullopt;
    }
    return series;
}

std::optional<double> pipeline_lp_error(const Trace& trace, const Pipeline& pipeline,
                                        EstimatorId id, int p) {
    auto series = pipeline_estimate_series(trace, pipeline, id);
    if (!series) return std::nullopt;
    auto range = pipeline_observation_range(trace, pipeline);
    std::vector<double> truth;
    truth.reserve(range.size());
    try {
        for (std::size_t i : range) truth.push_back(pipeline_truth_progress(trace, i, pipeline.id));
    } catch (const DegenerateInputError&) {
        return std::nullopt;
    }
    return lp_error_series(*series, truth, p);
}

std::optional<double> pipeline_l1_error(const Trace& trace, const Pipeline& pipeline,
                                        EstimatorId id) {
    return pipeline_lp_error(trace, pipeline, id, 1);
}

OraclePick oracle_policy(const std::vector<std::optional<double>>& errors) {
    OraclePick pick;
    bool found = false;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i]) continue;
        if (!found || *errors[i] < pick.error) {
            pick.error = *errors[i];
            pick.index = i;
            found = true;
        }
    }
    if (!found) throw DegenerateInputError("oracle_policy: all candidates masked");
    return pick;
}

double percent_optimal(const std::vector<std::vector<std::optional<double>>>& candidate_errors,
                       const std::vector<std::optional<std::size_t>>& policy_choice) {
    if (candidate_errors.size() != policy_choice.size())
        throw ValidationError("percent_optimal: one choice per pipeline required");
    if (candidate_errors.empty()) return 0.0;
    std::size_t optimal = 0;
    for (std::size_t p = 0; p < candidate_errors.size(); ++p) {
        if (!policy_choice[p]) continue;
        const auto& errs = candidate_errors[p];
        const auto& chosen = errs.at(*policy_choice[p]);
        if (!chosen) continue;
        double min_err = oracle_policy(errs).error;
        if (*chosen <= min_err) ++optimal;
    }
    return static_cast<double>(optimal) / static_cast<double>(candidate_errors.size());
}

RatioTable ratio_table(const std::vector<std::vector<std::optional<double>>>& candidate_errors,
                       const std::vector<std::optional<double>>& policy_errors,
                       const std::vector<double>& thresholds) {
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] <= thresholds[i - 1])
            throw ConfigError("ratio_table: thresholds must be strictly ascending");
    if (candidate_errors.size() != policy_errors.size())
        throw ValidationError("ratio_table: one policy error per pipeline required");
    RatioTable table;
    table.thresholds = thresholds;
    table.exceed_fraction.assign(thresholds.size(), 0.0);
    std::vector<std::size_t> counts(thresholds.size(), 0);
    for (std::size_t p = 0; p < candidate_errors.size(); ++p) {
        if (!policy_errors[p]) continue;
        double min_err = oracle_policy(candidate_errors[p]).error;
        if (min_err < kRatioMinError) {
            ++table.excluded;
            continue;
        }
        ++table.included;
        double ratio = *policy_errors[p] / min_err;
        for (std::size_t t = 0; t < thresholds.size(); ++t)
            if (ratio > thresholds[t]) ++counts[t];
    }
    if (table.included > 0)
        for (std::size_t t = 0; t < thresholds.size(); ++t)
            table.exceed_fraction[t] =
                static_cast<double>(counts[t]) / static_cast<double>(table.included);
    return table;
}

std::vector<NearOptimalRow> near_optimality_table(
    const std::vector<std::vector<std::optional<double>>>& candidate_errors) {
    std::size_t n_candidates = candidate_errors.empty() ? 0 : candidate_errors.front().size();
    std::vector<NearOptimalRow> rows(n_candidates);
    if (candidate_errors.empty()) return rows;
    std::vector<std::size_t> almost(n_candidates, 0), outperforms(n_candidates, 0);
    std::size_t pipelines = 0;
    for (const auto& errs : candidate_errors) {
        std::vector<double> defined;
        for (const auto& e : errs)
            if (e) defined.push_back(*e);
        if (defined.empty()) continue;
        ++pipelines;
        std::sort(defined.begin(), defined.end());
        double best = defined.front();
        double second = defined.size() > 1 ? defined[1] : defined[0];
        for (std::size_t c = 0; c < n_candidates; ++c) {
            if (!errs[c]) continue;
            double err = *errs[c];
            bool is_optimal = err <= best;
            double abs_diff = err - best;
            bool rel_small = best > 0.0 && abs_diff / best < 0.01;
            if (is_optimal || abs_diff < 0.01 || rel_small) ++almost[c];
            if (defined.size() > 1 && err <= best && second > err) {
                double margin = second - err;
                bool rel_large = err > 0.0 ? margin / err > 0.01 : second > 0.0;
                if (margin > 0.01 && rel_large) ++outperforms[c];
            }
        }
    }
    for (std::size_t c = 0; c < n_candidates; ++c) {
        rows[c].almost_optimal = static_cast<double>(almost[c]) / static_cast<double>(pipelines);
        rows[c].significantly_outperforms =
            static_cast<double>(outperforms[c]) / static_cast<double>(pipelines);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Greedy feature selection

namespace {

// Mean squared prediction error over the two parity folds, summed across the
// per-estimator models.
double cv_mse_for(const TrainingMatrix& matrix,
                  const std::vector<std::vector<std::pair<std::int32_t, double>>>& est_rows,
                  const std::vector<std::int32_t>& cols, const MartParams& params) {
    double sq_sum = 0.0;
    std::size_t count = 0;
    for (const auto& rows : est_rows) {
        for (int fold = 0; fold < 2; ++fold) {
            std::vector<std::int32_t> train_rows;
            std::vector<double> train_labels;
            std::vector<std::pair<std::int32_t, double>> test;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (static_cast<int>(i % 2) == fold) {
                    test.push_back(rows[i]);
                } else {
                    train_rows.push_back(rows[i].first);
                    train_labels.push_back(rows[i].second);
                }
            }
            if (train_rows.empty() || test.empty()) continue;
            TrainingMatrix sub;
            sub.rows = train_rows.size();
            sub.columns.assign(matrix.columns.size(), {});
            for (std::int32_t c : cols) {
                sub.columns[c].resize(sub.rows);
                for (std::size_t i = 0; i < train_rows.size(); ++i)
                    sub.columns[c][i] = matrix.columns[c][train_rows[i]];
            }
            std::vector<double> labels = train_labels;
            MartModel model = train_mart(sub, labels, params, &cols);
            for (const auto& [row, label] : test) {
                double out = model.base;
                for (const auto& tree : model.trees) {
                    if (tree.nodes.empty()) {
                        out += params.shrinkage * tree.leaves.front();
                        continue;
                    }
                    int cur = 0;
                    while (true) {
                        const SplitNode& n = tree.nodes[cur];
                        int next = matrix.columns[n.feature][row] < n.threshold ? n.left : n.right;
                        if (next < 0) {
                            out += params.shrinkage * tree.leaves[-1 - next];
                            break;
                        }
                        cur = next;
                    }
                }
                double d = label - out;
                sq_sum += d * d;
                ++count;
            }
        }
    }
    return count > 0 ? sq_sum / static_cast<double>(count) : 0.0;
}

}  // namespace

std::vector<GreedyRound> greedy_feature_selection(const std::vector<TrainingExample>& examples,
                                                  const FeatureSchema& schema,
                                                  const std::vector<EstimatorId>& candidates,
                                                  int rounds, MartParams params) {
    if (rounds < 1) throw ConfigError("greedy_feature_selection: rounds must be >= 1");
    if (rounds > static_cast<int>(schema.size()))
        throw ConfigError("greedy_feature_selection: more rounds than features");
    if (examples.empty()) throw ConfigError("greedy_feature_selection: empty training set");

    TrainingMatrix matrix = build_matrix(examples, schema);
    std::vector<std::vector<std::pair<std::int32_t, double>>> est_rows(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c)
        for (std::size_t r = 0; r < examples.size(); ++r)
            if (examples[r].labels.at(c))
                est_rows[c].emplace_back(static_cast<std::int32_t>(r), *examples[r].labels[c]);

    std::size_t f = schema.size();
    std::vector<char> selected(f, 0);
    std::vector<std::int32_t> selected_cols;
    std::vector<GreedyRound> result;
    for (int round = 0; round < rounds; ++round) {
        double best_mse = 0.0;
        std::size_t best_feature = f;
        for (std::size_t cand = 0; cand < f; ++cand) {
            if (selected[cand]) continue;
            std::vector<std::int32_t> cols = selected_cols;
            cols.push_back(static_cast<std::int32_t>(cand));
            cols.push_back(static_cast<std::int32_t>(f + cand));  // its mask column
            double mse = cv_mse_for(matrix, est_rows, cols, params);
            if (best_feature == f || mse < best_mse) {
                best_mse = mse;
                best_feature = cand;
            }
        }
        selected[best_feature] = 1;
        selected_cols.push_back(static_cast<std::int32_t>(best_feature));
        selected_cols.push_back(static_cast<std::int32_t>(f + best_feature));
        result.push_back({schema.names[best_feature], best_mse});
    }
    return result;
}

// ---------------------------------------------------------------------------
// Experiment harness

namespace {

struct PipelineEval {
    std::string query_id;
    int pipeline_id = 0;
    std::vector<std::optional<double>> l1, l2;  // per candidate
    std::optional<std::size_t> static_choice, dynamic_choice;
    std::optional<double> static_l1, static_l2, dynamic_l1, dynamic_l2;
};

double mean_defined(const std::vector<std::optional<double>>& values) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++count;
        }
    return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace

FoldResult evaluate_with_model(const std::vector<const Trace*>& test_traces,
                               const SelectionModel& model, const ExperimentConfig& config,
                               const std::string& fold_name) {
    if (model.candidates != config.candidates)
        throw SchemaError("evaluate_with_model: model candidates do not match the experiment");
    const FeatureSchema& schema = model.schema;
    {
        FoldResult fold;
        fold.held_out = fold_name;
        std::vector<PipelineEval> evals;

        std::ofstream series;
        if (!config.series_dir.empty()) {
            std::filesystem::create_directories(config.series_dir);
            series.open(config.series_dir + "/series_" + fold_name + ".tsv");
            series << "query_id\tpipeline\ttime_fraction\ttrue_progress";
            for (EstimatorId id : config.candidates) series << '\t' << to_string(id);
            series << "\tselected\n";
        }

        for (const Trace* trace : test_traces) {
            for (const Pipeline& pipeline : trace->pipelines) {
                PipelineEval ev;
                ev.query_id = trace->query_id;
                ev.pipeline_id = pipeline.id;
                bool any = false;
                for (EstimatorId id : config.candidates) {
                    ev.l1.push_back(pipeline_lp_error(*trace, pipeline, id, 1));
                    ev.l2.push_back(pipeline_lp_error(*trace, pipeline, id, 2));
                    any = any || ev.l1.back().has_value();
                }
                if (!any) continue;

                std::vector<ScheduleEntry> schedule;
                try {
                    schedule = select_online(model, *trace, pipeline);
                } catch (const DegenerateInputError&) {
                    continue;
                }
                auto realize = [&](EstimatorId chosen, const FeatureVector& fv)
                    -> std::optional<std::size_t> {
                    // the chosen estimator, or the next-best with a defined error
                    std::vector<EstimatorId> order{chosen};
                    for (const auto& [id, pred] : ranked_candidates(model, fv))
                        if (id != chosen) order.push_back(id);
                    for (EstimatorId id : order) {
                        std::size_t idx = static_cast<std::size_t>(
                            std::find(config.candidates.begin(), config.candidates.end(), id) -
                            config.candidates.begin());
                        if (idx < ev.l1.size() && ev.l1[idx]) return idx;
                    }
                    return std::nullopt;
                };
                FeatureVector stat = static_features(trace->plan, pipeline, schema);
                FeatureVector static_fv = assemble(stat, FeatureVector::undefined_of(schema));
                ev.static_choice = realize(schedule.front().choice, static_fv);
                ev.dynamic_choice = realize(schedule.back().choice, static_fv);
                if (ev.static_choice) {
                    ev.static_l1 = ev.l1[*ev.static_choice];
                    ev.static_l2 = ev.l2[*ev.static_choice];
                }
                if (ev.dynamic_choice) {
                    ev.dynamic_l1 = ev.l1[*ev.dynamic_choice];
                    ev.dynamic_l2 = ev.l2[*ev.dynamic_choice];
                }
                evals.push_back(std::move(ev));

                if (series.is_open()) {
                    auto range = pipeline_observation_range(*trace, pipeline);
                    for (std::size_t i : range) {
                        series << trace->query_id << '\t' << pipeline.id << '\t'
                               << fmt(ground_truth_progress(*trace, i)) << '\t'
                               << fmt(pipeline_truth_progress(*trace, i, pipeline.id));
                        for (EstimatorId id : config.candidates) {
                            try {
                                series << '\t' << fmt(estimate(id, *trace, i, pipeline));
                            } catch (const DegenerateInputError&) {
                                series << "\tNA";
                            }
                        }
                        const auto& chosen = evals.back().dynamic_choice;
                        if (chosen) {
                            try {
                                series << '\t'
                                       << fmt(estimate(config.candidates[*chosen], *trace, i,
                                                       pipeline));
                            } catch (const DegenerateInputError&) {
                                series << "\tNA";
                            }
                        } else {
                            series << "\tNA";
                        }
                        series << '\n';
                    }
                }
            }
        }

        fold.pipeline_count = evals.size();
        std::size_t nc = config.candidates.size();
        fold.estimator_l1.assign(nc, 0.0);
        fold.estimator_l2.assign(nc, 0.0);
        fold.estimator_pct_optimal.assign(nc, 0.0);

        std::vector<std::vector<std::optional<double>>> cand_l1;
        std::vector<std::optional<double>> static_errs, dynamic_errs;
        std::vector<std::optional<std::size_t>> static_choices, dynamic_choices, oracle_choices;
        for (const auto& ev : evals) {
            cand_l1.push_back(ev.l1);
            static_errs.push_back(ev.static_l1);
            dynamic_errs.push_back(ev.dynamic_l1);
            static_choices.push_back(ev.static_choice);
            dynamic_choices.push_back(ev.dynamic_choice);
            oracle_choices.push_back(oracle_policy(ev.l1).index);
        }

        for (std::size_t c = 0; c < nc; ++c) {
            std::vector<std::optional<double>> l1s, l2s;
            std::size_t optimal = 0;
            for (const auto& ev : evals) {
                l1s.push_back(ev.l1[c]);
                l2s.push_back(ev.l2[c]);
                if (ev.l1[c] && *ev.l1[c] <= oracle_policy(ev.l1).error) ++optimal;
            }
            fold.estimator_l1[c] = mean_defined(l1s);
            fold.estimator_l2[c] = mean_defined(l2s);
            fold.estimator_pct_optimal[c] =
                evals.empty() ? 0.0
                              : static_cast<double>(optimal) / static_cast<double>(evals.size());
            fold.ratios_estimators.push_back(
                ratio_table(cand_l1, l1s, config.ratio_thresholds));
        }

        std::vector<std::optional<double>> oracle_l1s, oracle_l2s;
        for (const auto& ev : evals) {
            auto pick = oracle_policy(ev.l1);
            oracle_l1s.push_back(pick.error);
            oracle_l2s.push_back(ev.l2[pick.index]);
        }
        fold.oracle_l1 = mean_defined(oracle_l1s);
        fold.oracle_l2 = mean_defined(oracle_l2s);
        fold.static_l1 = mean_defined(static_errs);
        fold.dynamic_l1 = mean_defined(dynamic_errs);
        {
            std::vector<std::optional<double>> s2, d2;
            for (const auto& ev : evals) {
                s2.push_back(ev.static_l2);
                d2.push_back(ev.dynamic_l2);
            }
            fold.static_l2 = mean_defined(s2);
            fold.dynamic_l2 = mean_defined(d2);
        }
        fold.pct_optimal_oracle = percent_optimal(cand_l1, oracle_choices);
        fold.pct_optimal_static = percent_optimal(cand_l1, static_choices);
        fold.pct_optimal_dynamic = percent_optimal(cand_l1, dynamic_choices);
        fold.ratios_static = ratio_table(cand_l1, static_errs, config.ratio_thresholds);
        fold.ratios_dynamic = ratio_table(cand_l1, dynamic_errs, config.ratio_thresholds);
        fold.near_optimal = near_optimality_table(cand_l1);
        return fold;
    }
}

ErrorReport run_experiment(const std::vector<Trace>& traces,
                           const std::vector<std::string>& groups,
                           const ExperimentConfig& config) {
    if (traces.size() != groups.size())
        throw ValidationError("run_experiment: one group id per trace required");
    if (traces.empty()) throw ConfigError("run_experiment: no traces");

    std::set<std::string> family_set(groups.begin(), groups.end());
    std::vector<std::string> families(family_set.begin(), family_set.end());
    if (families.size() < 2)
        throw ConfigError("run_experiment: need at least two workload families");

    FeatureSchema schema = FeatureSchema::make(config.features);
    ErrorReport report;
    report.candidates = config.candidates;

    for (const std::string& held : families) {
        std::vector<Trace> train_traces;
        std::vector<std::string> train_groups;
        std::vector<const Trace*> test_traces;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            if (groups[i] == held) test_traces.push_back(&traces[i]);
            else {
                train_traces.push_back(traces[i]);
                train_groups.push_back(groups[i]);
            }
        }
        if (test_traces.empty())
            throw ConfigError("run_experiment: held-out family has no traces: " + held);
        auto examples = build_training_set(train_traces, train_groups, config.candidates, schema);
        SelectionModel model =
            train_selection_model(examples, config.candidates, schema, config.params);
        report.folds.push_back(evaluate_with_model(test_traces, model, config, held));
    }
    return report;
}

void write_report_files(const std::string& dir, const ErrorReport& report) {
    std::filesystem::create_directories(dir);

    std::ofstream summary(dir + "/summary.tsv");
    summary << "fold\tpipelines\tpolicy\tl1\tl2\tpct_optimal\n";
    for (const auto& fold : report.folds) {
        for (std::size_t c = 0; c < report.candidates.size(); ++c)
            summary << fold.held_out << '\t' << fold.pipeline_count << '\t'
                    << to_string(report.candidates[c]) << '\t' << fmt(fold.estimator_l1[c])
                    << '\t' << fmt(fold.estimator_l2[c]) << '\t'
                    << fmt(fold.estimator_pct_optimal[c]) << '\n';
        summary << fold.held_out << '\t' << fold.pipeline_count << "\tORACLE\t"
                << fmt(fold.oracle_l1) << '\t' << fmt(fold.oracle_l2) << '\t'
                << fmt(fold.pct_optimal_oracle) << '\n';
        summary << fold.held_out << '\t' << fold.pipeline_count << "\tSEL_STATIC\t"
                << fmt(fold.static_l1) << '\t' << fmt(fold.static_l2) << '\t'
                << fmt(fold.pct_optimal_static) << '\n';
        summary << fold.held_out << '\t' << fold.pipeline_count << "\tSEL_DYNAMIC\t"
                << fmt(fold.dynamic_l1) << '\t' << fmt(fold.dynamic_l2) << '\t'
                << fmt(fold.pct_optimal_dynamic) << '\n';
    }

    std::ofstream ratios(dir + "/ratio_table.tsv");
    ratios << "fold\tpolicy";
    if (!report.folds.empty())
        for (double t : report.folds.front().ratios_dynamic.thresholds)
            ratios << "\tover_" << fmt(t) << "x";
    ratios << "\tincluded\texcluded\n";
    auto ratio_row = [&](const std::string& fold, const std::string& name,
                         const RatioTable& table) {
        ratios << fold << '\t' << name;
        for (double v : table.exceed_fraction) ratios << '\t' << fmt(v);
        ratios << '\t' << table.included << '\t' << table.excluded << '\n';
    };
    for (const auto& fold : report.folds) {
        for (std::size_t c = 0; c < report.candidates.size(); ++c)
            ratio_row(fold.held_out, to_string(report.candidates[c]),
                      fold.ratios_estimators[c]);
        ratio_row(fold.held_out, "SEL_STATIC", fold.ratios_static);
        ratio_row(fold.held_out, "SEL_DYNAMIC", fold.ratios_dynamic);
    }

    std::ofstream near(dir + "/near_optimal.tsv");
    near << "fold\testimator\talmost_optimal\tsignificantly_outperforms\n";
    for (const auto& fold : report.folds)
        for (std::size_t c = 0; c < report.candidates.size(); ++c)
            near << fold.held_out << '\t' << to_string(report.candidates[c]) << '\t'
                 << fmt(fold.near_optimal[c].almost_optimal) << '\t'
                 << fmt(fold.near_optimal[c].significantly_outperforms) << '\n';
}

}  // namespace qpe
