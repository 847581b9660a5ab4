#include "moekit/routing_lab.hpp"

#include <cmath>

namespace moekit {

PrunedView prune_experts(const System<float> & sys, PruneSpec spec) {
    spec.validate(sys.cfg.model.n_layers, sys.cfg.model.n_experts);
    return PrunedView{&sys, std::move(spec)};
}

double evaluate_loss_with_k(const System<float> & sys, const MediaPool & pool,
                            const std::vector<const PreparedSample *> & samples, int k) {
    if (k < 1 || k > sys.cfg.model.n_experts) throw config_error("k out of range for sweep");
    RunOptions opts;
    opts.k_override = k;
    return evaluate_loss(sys, pool, samples, opts);
}

std::vector<SweepRow> sweep_active_experts(const System<float> & sys, const MediaPool & pool,
                                           const std::vector<const PreparedSample *> & eval_set,
                                           const std::vector<int> & k_values) {
    std::vector<SweepRow> rows;
    for (int k : k_values) rows.push_back({k, 1, evaluate_loss_with_k(sys, pool, eval_set, k)});
    return rows;
}

PruneSweepResult prune_sweep(const System<float> & sys, const MediaPool & pool,
                             const std::vector<const PreparedSample *> & eval_set,
                             const std::vector<int> & n_values, int runs, uint64_t seed) {
    if (runs < 1) throw config_error("prune_sweep: runs must be >= 1");
    PruneSweepResult out;
    for (int n : n_values) {
        std::vector<double> metrics;
        for (int run = 1; run <= runs; ++run) {
            const PruneSpec spec = PruneSpec::random_keep(
                sys.cfg.model.n_layers, sys.cfg.model.n_experts, n,
                seed ^ hash_str("prune:" + std::to_string(n) + ":" + std::to_string(run)));
            RunOptions opts;
            opts.prune = &spec;
            const double m = evaluate_loss(sys, pool, eval_set, opts);
            metrics.push_back(m);
            out.rows.push_back({n, run, m});
        }
        SweepSummary s;
        s.value = n;
        for (double m : metrics) s.mean += m;
        s.mean /= static_cast<double>(metrics.size());
        for (double m : metrics) s.variance += (m - s.mean) * (m - s.mean);
        s.variance /= static_cast<double>(metrics.size());
        out.summaries.push_back(s);
    }
    return out;
}

RoutingTrace trace_dataset(const System<float> & sys, const MediaPool & pool,
                           const std::vector<const PreparedSample *> & samples,
                           const PruneSpec * prune) {
    RoutingTrace trace(sys.cfg.model.n_layers, sys.cfg.model.n_experts);
    for (const PreparedSample * s : samples) {
        ComposedSequence seq =
            compose_sequence(s->tok.ids, s->tok.loss_mask, s->tok.media_slots, s->media, pool, sys);
        std::vector<RoutingDecision> log;
        RunOptions opts;
        opts.prune = prune;
        opts.route_log = &log;
        sys.lm->forward(seq.emb, opts);
        trace.merge(build_trace(log, sequence_tags(seq, s->domain), sys.cfg.model.n_layers,
                                sys.cfg.model.n_experts));
    }
    return trace;
}

} // namespace moekit
