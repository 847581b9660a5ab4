#pragma once

#include <string>
#include <vector>

#include "moekit/train.hpp"

namespace moekit {

/// Restricted-routing view of a model: weights are shared, only the router's
/// candidate set shrinks. k_eff = min(k, |kept|) per layer.
struct PrunedView {
    const System<float> * sys;
    PruneSpec spec;

    RunOptions options(std::vector<RoutingDecision> * log = nullptr) const {
        RunOptions o;
        o.prune = &spec;
        o.route_log = log;
        return o;
    }
};

PrunedView prune_experts(const System<float> & sys, PruneSpec spec);

struct SweepRow {
    int value = 0;  // k or n
    int run = 1;
    double metric = 0; // masked CE on the eval set
};

struct SweepSummary {
    int value = 0;
    double mean = 0;
    double variance = 0; // population variance over runs
};

/// Same model, same eval set, varying only the number of active experts.
std::vector<SweepRow> sweep_active_experts(const System<float> & sys, const MediaPool & pool,
                                           const std::vector<const PreparedSample *> & eval_set,
                                           const std::vector<int> & k_values);

/// For each retained-expert count n: `runs` independent random kept-sets per
/// layer, metric per run plus mean/variance.
struct PruneSweepResult {
    std::vector<SweepRow> rows;
    std::vector<SweepSummary> summaries;
};
PruneSweepResult prune_sweep(const System<float> & sys, const MediaPool & pool,
                             const std::vector<const PreparedSample *> & eval_set,
                             const std::vector<int> & n_values, int runs, uint64_t seed);

/// Runs the eval set with tracing and folds all decisions into one trace.
RoutingTrace trace_dataset(const System<float> & sys, const MediaPool & pool,
                           const std::vector<const PreparedSample *> & samples,
                           const PruneSpec * prune = nullptr);

// evaluation with a k override (spec-free view over the same weights)
double evaluate_loss_with_k(const System<float> & sys, const MediaPool & pool,
                            const std::vector<const PreparedSample *> & samples, int k);

} // namespace moekit
