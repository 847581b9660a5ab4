#pragma once

#include <string>
#include <vector>

#include "moekit/routing_lab.hpp"
#include "moekit/trace.hpp"

namespace moekit {

// CSV layouts used by the CLI:
//   usage:  layer,expert,tag,fraction
//   sweep:  k|n,run,metric   (+ "mean" / "var" rows for prune sweeps)
void write_usage_csv(const std::string & path, const RoutingTrace & trace);
void write_sweep_csv(const std::string & path, const std::string & value_name,
                     const std::vector<SweepRow> & rows,
                     const std::vector<SweepSummary> & summaries = {});

struct UsageCsvRow {
    int layer;
    int expert;
    std::string tag;
    double fraction;
};
std::vector<UsageCsvRow> read_usage_csv(const std::string & path);

/// Bar-chart panels, one per layer, grouped by tag.
void write_usage_svg(const std::string & path, const std::vector<UsageCsvRow> & rows);

/// Single-panel line plot of metric vs swept value (mean over runs).
void write_sweep_svg(const std::string & path, const std::string & value_name,
                     const std::vector<SweepRow> & rows);

} // namespace moekit
