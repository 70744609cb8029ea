#include "qpe/plan.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace qpe {

namespace {

constexpr const char* kKindNames[kOperatorKindCount] = {
    "TableScan",     "IndexScan", "IndexSeek",      "Filter",
    "Sort",          "BatchSort", "HashJoin",       "HashAggregate",
    "MergeJoin",     "NestedLoopJoin", "StreamAggregate", "Top",
    "Spool",         "Other",
};

}  // namespace

const char* to_string(OperatorKind kind) {
    return kKindNames[static_cast<int>(kind)];
}

OperatorKind operator_kind_from_string(const std::string& name) {
    for (int i = 0; i < kOperatorKindCount; ++i) {
        if (name == kKindNames[i]) return static_cast<OperatorKind>(i);
    }
    return OperatorKind::Other;
}

const PlanNode* Plan::find(NodeId id) const {
    for (const auto& n : nodes) {
        if (n.id == id) return &n;
    }
    return nullptr;
}

const PlanNode& Plan::at(NodeId id) const {
    const PlanNode* n = find(id);
    if (!n) throw ValidationError("plan " + query_id + ": unknown node id " + std::to_string(id));
    return *n;
}

std::size_t Plan::index_of(NodeId id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].id == id) return i;
    }
    return static_cast<std::size_t>(-1);
}

bool Pipeline::contains(NodeId id) const {
    return std::find(nodes.begin(), nodes.end(), id) != nodes.end();
}

bool Pipeline::is_driver(NodeId id) const {
    return std::find(drivers.begin(), drivers.end(), id) != drivers.end();
}

std::vector<std::string> validate_plan(const Plan& plan) {
    std::vector<std::string> violations;
    auto complain = [&](const std::string& msg) { violations.push_back(msg); };

    std::unordered_map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
        const auto& n = plan.nodes[i];
        if (!index.emplace(n.id, i).second)
            complain("duplicate node id " + std::to_string(n.id));
        if (n.est_cardinality < 0.0)
            complain("node " + std::to_string(n.id) + ": est_cardinality must be >= 0");
        if (n.est_row_width < 1.0)
            complain("node " + std::to_string(n.id) + ": est_row_width must be >= 1");
    }
    if (plan.nodes.empty()) {
        complain("plan has no nodes");
        return violations;
    }
    if (!index.count(plan.root))
        complain("root id " + std::to_string(plan.root) + " does not reference a node");

    std::unordered_map<NodeId, int> parent_count;
    for (const auto& n : plan.nodes) {
        for (NodeId c : n.children) {
            if (!index.count(c)) {
                complain("node " + std::to_string(n.id) + ": child id " + std::to_string(c) +
                         " references a missing node");
                continue;
            }
            if (c == plan.root)
                complain("root node " + std::to_string(c) + " appears as a child of node " +
                         std::to_string(n.id));
            if (++parent_count[c] > 1)
                complain("node " + std::to_string(c) + " has more than one parent");
        }
    }
    if (!violations.empty()) return violations;

    // Reachability from the root; with single parents and no dangling ids, an
    // unreachable node indicates a disconnected component or a cycle.
    std::unordered_set<NodeId> seen;
    std::vector<NodeId> stack{plan.root};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        if (!seen.insert(id).second) continue;
        for (NodeId c : plan.nodes[index[id]].children) stack.push_back(c);
    }
    if (seen.size() != plan.nodes.size()) {
        for (const auto& n : plan.nodes) {
            if (!seen.count(n.id))
                complain("node " + std::to_string(n.id) + " is not reachable from the root");
        }
    }
    return violations;
}

std::vector<std::ptrdiff_t> parent_index(const Plan& plan) {
    std::unordered_map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) index.emplace(plan.nodes[i].id, i);
    std::vector<std::ptrdiff_t> parent(plan.nodes.size(), -1);
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
        for (NodeId c : plan.nodes[i].children) {
            auto it = index.find(c);
            if (it == index.end())
                throw ValidationError("plan " + plan.query_id + ": node " +
                                      std::to_string(plan.nodes[i].id) + " has dangling child " +
                                      std::to_string(c));
            parent[it->second] = static_cast<std::ptrdiff_t>(i);
        }
    }
    return parent;
}

std::vector<Pipeline> decompose_pipelines(const Plan& plan) {
    auto violations = validate_plan(plan);
    if (!violations.empty())
        throw ValidationError("plan " + plan.query_id + ": " + violations.front());

    std::unordered_map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) index.emplace(plan.nodes[i].id, i);

    // Iterative post-order over the tree, children visited in declared order.
    std::vector<std::size_t> post_order;  // node indexes in post-order
    std::vector<std::size_t> post_rank(plan.nodes.size(), 0);
    {
        std::vector<std::pair<std::size_t, std::size_t>> stack;  // (node index, next child)
        stack.emplace_back(index[plan.root], 0);
        while (!stack.empty()) {
            auto& [ni, next] = stack.back();
            const auto& node = plan.nodes[ni];
            if (next < node.children.size()) {
                std::size_t ci = index[node.children[next]];
                ++next;
                stack.emplace_back(ci, 0);
            } else {
                post_rank[ni] = post_order.size();
                post_order.push_back(ni);
                stack.pop_back();
            }
        }
    }

    auto parent = parent_index(plan);

    // An edge parent->child is a pipeline boundary when the child side starts
    // a separate execution phase.
    auto is_boundary = [&](std::size_t pi, std::size_t ci) {
        const auto& p = plan.nodes[pi];
        const auto& c = plan.nodes[ci];
        if (c.kind == OperatorKind::Sort) return true;  // Sort roots its own pipeline
        if ((p.kind == OperatorKind::HashJoin || p.kind == OperatorKind::HashAggregate) &&
            !p.children.empty() && p.children.front() == c.id)
            return true;  // build side
        return false;
    };

    // Group nodes into components over non-boundary edges.
    std::vector<int> component(plan.nodes.size(), -1);
    int n_components = 0;
    for (std::size_t ni : post_order) {
        std::ptrdiff_t pi = parent[ni];
        if (pi >= 0 && !is_boundary(static_cast<std::size_t>(pi), ni)) continue;
        // ni roots a pipeline: collect its subtree, stopping at boundaries.
        int comp = n_components++;
        std::vector<std::size_t> stack{ni};
        while (!stack.empty()) {
            std::size_t cur = stack.back();
            stack.pop_back();
            component[cur] = comp;
            for (NodeId child : plan.nodes[cur].children) {
                std::size_t ci = index[child];
                if (!is_boundary(cur, ci)) stack.push_back(ci);
            }
        }
    }

    // Execution order: ascending maximal post-order rank of member nodes (the
    // pipeline root), which topologically orders the dependency DAG.
    std::vector<std::size_t> comp_max_rank(n_components, 0);
    for (std::size_t ni = 0; ni < plan.nodes.size(); ++ni)
        comp_max_rank[component[ni]] = std::max(comp_max_rank[component[ni]], post_rank[ni]);
    std::vector<int> comp_order(n_components);
    for (int c = 0; c < n_components; ++c) comp_order[c] = c;
    std::sort(comp_order.begin(), comp_order.end(),
              [&](int a, int b) { return comp_max_rank[a] < comp_max_rank[b]; });

    std::vector<Pipeline> pipelines(n_components);
    std::vector<int> comp_to_pipeline(n_components);
    for (int p = 0; p < n_components; ++p) comp_to_pipeline[comp_order[p]] = p;
    for (std::size_t ni : post_order) {
        int p = comp_to_pipeline[component[ni]];
        pipelines[p].id = p;
        pipelines[p].nodes.push_back(plan.nodes[ni].id);
    }

    // Drivers: in-pipeline leaves, excluding nodes under the inner (non-first)
    // child of a NestedLoopJoin belonging to the same pipeline.
    for (auto& pl : pipelines) {
        std::unordered_set<NodeId> members(pl.nodes.begin(), pl.nodes.end());
        std::unordered_set<NodeId> excluded;
        for (NodeId id : pl.nodes) {
            const auto& n = plan.nodes[index[id]];
            if (n.kind != OperatorKind::NestedLoopJoin) continue;
            for (std::size_t k = 1; k < n.children.size(); ++k) {
                std::vector<NodeId> stack{n.children[k]};
                while (!stack.empty()) {
                    NodeId cur = stack.back();
                    stack.pop_back();
                    if (!members.count(cur)) continue;
                    excluded.insert(cur);
                    for (NodeId c : plan.nodes[index[cur]].children) stack.push_back(c);
                }
            }
        }
        for (NodeId id : pl.nodes) {
            const auto& n = plan.nodes[index[id]];
            bool leaf = true;
            for (NodeId c : n.children)
                if (members.count(c)) leaf = false;
            if (leaf && !excluded.count(id)) pl.drivers.push_back(id);
        }
    }
    return pipelines;
}

// ---------------------------------------------------------------------------
// JSON I/O

using json = nlohmann::ordered_json;

Plan plan_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed plan JSON: ") + e.what());
    }
    Plan plan;
    try {
        plan.query_id = j.at("query_id").get<std::string>();
        plan.root = j.at("root").get<NodeId>();
        for (const auto& jn : j.at("nodes")) {
            PlanNode n;
            n.id = jn.at("id").get<NodeId>();
            n.kind = operator_kind_from_string(jn.at("kind").get<std::string>());
            for (const auto& c : jn.at("children")) n.children.push_back(c.get<NodeId>());
            n.est_cardinality = jn.at("est_cardinality").get<double>();
            n.est_row_width = jn.at("est_row_width").get<double>();
            plan.nodes.push_back(std::move(n));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("plan JSON missing field: ") + e.what());
    }
    return plan;
}

std::string plan_to_json_line(const Plan& plan) {
    json j;
    j["query_id"] = plan.query_id;
    j["root"] = plan.root;
    j["nodes"] = json::array();
    for (const auto& n : plan.nodes) {
        json jn;
        jn["id"] = n.id;
        jn["kind"] = to_string(n.kind);
        jn["children"] = n.children;
        jn["est_cardinality"] = n.est_cardinality;
        jn["est_row_width"] = n.est_row_width;
        j["nodes"].push_back(std::move(jn));
    }
    return j.dump();
}

std::vector<Plan> read_plan_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open plan file: " + path);
    std::vector<Plan> plans;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        plans.push_back(plan_from_json_line(line));
    }
    return plans;
}

void write_plan_file(const std::string& path, const std::vector<Plan>& plans) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open plan file for writing: " + path);
    for (const auto& p : plans) out << plan_to_json_line(p) << '\n';
}

}  // namespace qpe
