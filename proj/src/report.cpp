#include "moekit/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace moekit {

void write_usage_csv(const std::string & path, const RoutingTrace & trace) {
    std::ofstream f(path);
    if (!f) throw input_error("cannot write " + path);
    f << "layer,expert,tag,fraction\n";
    for (const auto & r : trace.rows())
        f << r.layer << "," << r.expert << "," << r.tag.key() << "," << r.fraction << "\n";
}

void write_sweep_csv(const std::string & path, const std::string & value_name,
                     const std::vector<SweepRow> & rows,
                     const std::vector<SweepSummary> & summaries) {
    std::ofstream f(path);
    if (!f) throw input_error("cannot write " + path);
    f << value_name << ",run,metric\n";
    for (const auto & r : rows) f << r.value << "," << r.run << "," << r.metric << "\n";
    for (const auto & s : summaries) {
        f << s.value << ",mean," << s.mean << "\n";
        f << s.value << ",var," << s.variance << "\n";
    }
}

std::vector<UsageCsvRow> read_usage_csv(const std::string & path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot read " + path);
    std::vector<UsageCsvRow> rows;
    std::string line;
    std::getline(f, line); // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string layer, expert, tag, fraction;
        if (!std::getline(ss, layer, ',') || !std::getline(ss, expert, ',') ||
            !std::getline(ss, tag, ',') || !std::getline(ss, fraction))
            throw validation_error("malformed usage csv row: " + line);
        rows.push_back({std::stoi(layer), std::stoi(expert), tag, std::stod(fraction)});
    }
    return rows;
}

namespace {

const char * palette(size_t i) {
    static const char * colors[] = {"#4c78a8", "#f58518", "#54a24b", "#e45756",
                                    "#72b7b2", "#b279a2", "#eeca3b", "#9d755d"};
    return colors[i % 8];
}

} // namespace

void write_usage_svg(const std::string & path, const std::vector<UsageCsvRow> & rows) {
    std::set<int> layers;
    std::set<std::string> tags;
    int n_experts = 0;
    for (const auto & r : rows) {
        layers.insert(r.layer);
        tags.insert(r.tag);
        n_experts = std::max(n_experts, r.expert + 1);
    }
    const int panel_w = 280, panel_h = 150, margin = 40;
    const int width = panel_w + 2 * margin;
    const int height = static_cast<int>(layers.size()) * (panel_h + margin) + margin;

    std::ofstream f(path);
    if (!f) throw input_error("cannot write " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";

    int panel = 0;
    for (int layer : layers) {
        const int ox = margin;
        const int oy = margin + panel * (panel_h + margin);
        f << "<text x='" << ox << "' y='" << oy - 8 << "' font-size='12'>layer " << layer
          << "</text>\n";
        f << "<line x1='" << ox << "' y1='" << oy + panel_h << "' x2='" << ox + panel_w << "' y2='"
          << oy + panel_h << "' stroke='black'/>\n";
        size_t tag_i = 0;
        const double group_w = static_cast<double>(panel_w) / std::max(1, n_experts);
        for (const auto & tag : tags) {
            const double bar_w = group_w / static_cast<double>(tags.size() + 1);
            for (const auto & r : rows) {
                if (r.layer != layer || r.tag != tag) continue;
                const double x = ox + r.expert * group_w + static_cast<double>(tag_i) * bar_w;
                const double h = r.fraction * panel_h;
                f << "<rect x='" << x << "' y='" << oy + panel_h - h << "' width='" << bar_w * 0.9
                  << "' height='" << h << "' fill='" << palette(tag_i) << "'/>\n";
            }
            ++tag_i;
        }
        for (int e = 0; e < n_experts; ++e)
            f << "<text x='" << ox + e * group_w + group_w / 3 << "' y='" << oy + panel_h + 12
              << "' font-size='9'>" << e << "</text>\n";
        ++panel;
    }
    // legend
    size_t tag_i = 0;
    for (const auto & tag : tags) {
        f << "<rect x='" << width - margin + 4 << "' y='" << margin + tag_i * 16 << "' width='10' "
          << "height='10' fill='" << palette(tag_i) << "'/>\n";
        ++tag_i;
    }
    f << "</svg>\n";
}

void write_sweep_svg(const std::string & path, const std::string & value_name,
                     const std::vector<SweepRow> & rows) {
    std::map<int, std::pair<double, int>> agg; // value -> (sum, count)
    for (const auto & r : rows) {
        agg[r.value].first += r.metric;
        agg[r.value].second += 1;
    }
    if (agg.empty()) throw input_error("empty sweep");
    double lo = 1e30, hi = -1e30;
    for (auto & [v, sc] : agg) {
        const double m = sc.first / sc.second;
        lo = std::min(lo, m);
        hi = std::max(hi, m);
    }
    if (hi <= lo) hi = lo + 1;

    const int w = 420, h = 260, margin = 46;
    std::ofstream f(path);
    if (!f) throw input_error("cannot write " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    f << "<line x1='" << margin << "' y1='" << h - margin << "' x2='" << w - margin << "' y2='"
      << h - margin << "' stroke='black'/>\n";
    f << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
      << h - margin << "' stroke='black'/>\n";

    const double x0 = agg.begin()->first, x1 = agg.rbegin()->first;
    auto px = [&](double v) {
        return margin + (v - x0) / std::max(1.0, x1 - x0) * (w - 2 * margin);
    };
    auto py = [&](double m) { return h - margin - (m - lo) / (hi - lo) * (h - 2 * margin); };

    std::string pts;
    for (auto & [v, sc] : agg) {
        const double m = sc.first / sc.second;
        pts += std::to_string(px(v)) + "," + std::to_string(py(m)) + " ";
        f << "<circle cx='" << px(v) << "' cy='" << py(m) << "' r='3' fill='#4c78a8'/>\n";
        f << "<text x='" << px(v) - 4 << "' y='" << h - margin + 14 << "' font-size='10'>" << v
          << "</text>\n";
    }
    f << "<polyline points='" << pts << "' fill='none' stroke='#4c78a8'/>\n";
    f << "<text x='" << w / 2 - 10 << "' y='" << h - 8 << "' font-size='11'>" << value_name
      << "</text>\n";
    f << "</svg>\n";
}

} // namespace moekit
