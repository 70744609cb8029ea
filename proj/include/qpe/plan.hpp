#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qpe/common.hpp"

namespace qpe {

using NodeId = std::int64_t;

/// Physical operator vocabulary. Closed: unknown names parse as Other.
enum class OperatorKind : int {
    TableScan = 0,
    IndexScan,
    IndexSeek,
    Filter,
    Sort,
    BatchSort,
    HashJoin,
    HashAggregate,
    MergeJoin,
    NestedLoopJoin,
    StreamAggregate,
    Top,
    Spool,
    Other,
};

inline constexpr int kOperatorKindCount = static_cast<int>(OperatorKind::Other) + 1;

const char* to_string(OperatorKind kind);
OperatorKind operator_kind_from_string(const std::string& name);

/// One node of a physical operator tree. For NestedLoopJoin the first child
/// is the outer input.
struct PlanNode {
    NodeId id = 0;
    OperatorKind kind = OperatorKind::Other;
    std::vector<NodeId> children;
    double est_cardinality = 0.0;  // initial optimizer estimate E_i
    double est_row_width = 1.0;    // bytes per row
};

struct Plan {
    std::string query_id;
    NodeId root = 0;
    std::vector<PlanNode> nodes;

    const PlanNode* find(NodeId id) const;
    const PlanNode& at(NodeId id) const;
    /// Position of `id` in `nodes`, or npos.
    std::size_t index_of(NodeId id) const;
};

/// Maximal subtree of consecutively executing nodes, with its driver set.
struct Pipeline {
    int id = 0;
    std::vector<NodeId> nodes;    // in plan post-order
    std::vector<NodeId> drivers;  // subset of nodes

    bool contains(NodeId id) const;
    bool is_driver(NodeId id) const;
};

/// Empty result means the plan satisfies all structural invariants; otherwise
/// one message per violation, naming the offending node.
std::vector<std::string> validate_plan(const Plan& plan);

/// Splits the plan at blocking boundaries (Sort terminates its pipeline as
/// pipeline root; HashJoin/HashAggregate push their build-side child subtree
/// into a preceding pipeline) and returns pipelines in execution order.
/// Throws ValidationError on a malformed plan.
std::vector<Pipeline> decompose_pipelines(const Plan& plan);

/// Parent lookup table: parent[i] = index of the parent of nodes[i], or -1 for
/// the root. Throws ValidationError if a child id is dangling.
std::vector<std::ptrdiff_t> parent_index(const Plan& plan);

// Plan files are line-delimited JSON:
//   {"query_id":..., "root":..., "nodes":[{"id","kind","children","est_cardinality","est_row_width"}]}
Plan plan_from_json_line(const std::string& line);
std::string plan_to_json_line(const Plan& plan);
std::vector<Plan> read_plan_file(const std::string& path);
void write_plan_file(const std::string& path, const std::vector<Plan>& plans);

}  // namespace qpe
