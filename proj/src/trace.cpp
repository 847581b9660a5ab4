#include "moekit/trace.hpp"

#include <cmath>
#include <set>

namespace moekit {

void RoutingTrace::merge(const RoutingTrace & other) {
    if (n_layers_ == 0 && n_experts_ == 0) {
        n_layers_ = other.n_layers_;
        n_experts_ = other.n_experts_;
    }
    if (other.n_layers_ != n_layers_ || other.n_experts_ != n_experts_)
        throw config_error("cannot merge traces with different shapes");
    for (const auto & [key, b] : other.buckets_) {
        auto & mine = bucket(key.first, key.second);
        for (size_t e = 0; e < b.counts.size(); ++e) {
            mine.counts[e] += b.counts[e];
            mine.gate_mass[e] += b.gate_mass[e];
        }
        mine.slots += b.slots;
    }
}

long RoutingTrace::total_slots(int layer, const TraceTag & tag) const {
    auto it = buckets_.find(std::make_pair(layer, tag));
    return it == buckets_.end() ? 0 : it->second.slots;
}

long RoutingTrace::count(int layer, int expert, const TraceTag & tag) const {
    auto it = buckets_.find(std::make_pair(layer, tag));
    return it == buckets_.end() ? 0 : it->second.counts[static_cast<size_t>(expert)];
}

std::vector<TraceTag> RoutingTrace::tags() const {
    std::set<TraceTag> seen;
    for (const auto & [key, b] : buckets_) seen.insert(key.second);
    return {seen.begin(), seen.end()};
}

std::vector<double> RoutingTrace::usage_distribution(int layer, const TraceTag & tag,
                                                     bool gate_weighted) const {
    auto it = buckets_.find(std::make_pair(layer, tag));
    if (it == buckets_.end() || it->second.slots == 0)
        throw validation_error("no routed slots for layer " + std::to_string(layer) + " tag " +
                               tag.key());
    const Bucket & b = it->second;
    std::vector<double> out(static_cast<size_t>(n_experts_), 0.0);
    if (gate_weighted) {
        double total = 0;
        for (double m : b.gate_mass) total += m;
        for (int e = 0; e < n_experts_; ++e) out[static_cast<size_t>(e)] = b.gate_mass[static_cast<size_t>(e)] / total;
    } else {
        for (int e = 0; e < n_experts_; ++e)
            out[static_cast<size_t>(e)] =
                static_cast<double>(b.counts[static_cast<size_t>(e)]) / static_cast<double>(b.slots);
    }
    return out;
}

std::vector<double> RoutingTrace::entropy_profile(const TraceTag & tag, bool gate_weighted) const {
    std::vector<double> out;
    for (int l = 0; l < n_layers_; ++l)
        out.push_back(entropy_nats(usage_distribution(l, tag, gate_weighted)));
    return out;
}

std::vector<RoutingTrace::Row> RoutingTrace::rows() const {
    std::vector<Row> out;
    for (const auto & [key, b] : buckets_) {
        for (int e = 0; e < n_experts_; ++e) {
            Row r;
            r.layer = key.first;
            r.expert = e;
            r.tag = key.second;
            r.count = b.counts[static_cast<size_t>(e)];
            r.slots = b.slots;
            r.fraction = b.slots ? static_cast<double>(r.count) / static_cast<double>(b.slots) : 0.0;
            out.push_back(std::move(r));
        }
    }
    return out;
}

RoutingTrace build_trace(const std::vector<RoutingDecision> & log,
                         const std::vector<TraceTag> & token_tags, int n_layers, int n_experts) {
    RoutingTrace trace(n_layers, n_experts);
    for (const auto & d : log) {
        if (d.token_index < 0 || d.token_index >= static_cast<int>(token_tags.size()))
            throw input_error("routing decision token index out of range");
        const TraceTag & tag = token_tags[static_cast<size_t>(d.token_index)];
        for (size_t i = 0; i < d.expert_indices.size(); ++i)
            trace.record_slot(d.layer, d.expert_indices[i], tag,
                              static_cast<double>(d.gate_weights[i]));
    }
    return trace;
}

double entropy_nats(const std::vector<double> & p) {
    double h = 0;
    for (double v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

} // namespace moekit
