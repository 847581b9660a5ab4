#pragma once

#include <map>
#include <string>
#include <vector>

#include "moekit/errors.hpp"
#include "moekit/model.hpp"

namespace moekit {

struct TraceTag {
    std::string modality; // "vision" | "language"
    std::string domain;

    bool operator<(const TraceTag & o) const {
        if (modality != o.modality) return modality < o.modality;
        return domain < o.domain;
    }
    bool operator==(const TraceTag & o) const {
        return modality == o.modality && domain == o.domain;
    }
    std::string key() const { return modality + ":" + domain; }
};

/// Per-(layer, tag) expert usage statistics. Usage counts each selected
/// (token, expert) slot once; gate mass is kept alongside as the secondary,
/// weight-sensitive statistic.
class RoutingTrace {
  public:
    RoutingTrace(int n_layers = 0, int n_experts = 0) : n_layers_(n_layers), n_experts_(n_experts) {}

    int n_layers() const { return n_layers_; }
    int n_experts() const { return n_experts_; }

    void record_slot(int layer, int expert, const TraceTag & tag, double gate) {
        auto & b = bucket(layer, tag);
        b.counts[static_cast<size_t>(expert)] += 1;
        b.gate_mass[static_cast<size_t>(expert)] += gate;
        b.slots += 1;
    }

    void merge(const RoutingTrace & other); // associative, commutative

    long total_slots(int layer, const TraceTag & tag) const;
    long count(int layer, int expert, const TraceTag & tag) const;
    std::vector<TraceTag> tags() const;

    /// Fraction of routed slots per expert; sums to 1. gate_weighted selects
    /// the gate-mass variant.
    std::vector<double> usage_distribution(int layer, const TraceTag & tag,
                                           bool gate_weighted = false) const;

    /// Shannon entropy (nats) of the usage distribution per layer, in [0, ln E].
    std::vector<double> entropy_profile(const TraceTag & tag, bool gate_weighted = false) const;

    struct Row {
        int layer;
        int expert;
        TraceTag tag;
        long count;
        long slots;
        double fraction;
    };
    std::vector<Row> rows() const;

  private:
    struct Bucket {
        std::vector<long> counts;
        std::vector<double> gate_mass;
        long slots = 0;
    };
    Bucket & bucket(int layer, const TraceTag & tag) {
        auto key = std::make_pair(layer, tag);
        auto it = buckets_.find(key);
        if (it == buckets_.end()) {
            Bucket b;
            b.counts.assign(static_cast<size_t>(n_experts_), 0);
            b.gate_mass.assign(static_cast<size_t>(n_experts_), 0.0);
            it = buckets_.emplace(key, std::move(b)).first;
        }
        return it->second;
    }

    int n_layers_;
    int n_experts_;
    std::map<std::pair<int, TraceTag>, Bucket> buckets_;
};

/// Folds a raw routing decision log into a trace. token_tags[i] labels
/// position i of the traced sequence.
RoutingTrace build_trace(const std::vector<RoutingDecision> & log,
                         const std::vector<TraceTag> & token_tags, int n_layers, int n_experts);

double entropy_nats(const std::vector<double> & p);

} // namespace moekit
