#include "moekit/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "moekit/errors.hpp"
#include "json.hpp"

namespace moekit {

int PartitionPlan::count(SlotKind k) const {
    int n = 0;
    for (const auto & s : slots)
        if (s.kind == k) ++n;
    return n;
}

static int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

PartitionPlan plan_partition(int width, int height, int target_res, int sub_res) {
    if (target_res <= 0 || sub_res <= 0 || target_res % sub_res != 0)
        throw config_error("target_res must be a positive multiple of sub_res, got " +
                           std::to_string(target_res) + "/" + std::to_string(sub_res));
    if (width < 1 || height < 1)
        throw input_error("image dimensions must be >= 1, got " + std::to_string(width) + "x" +
                          std::to_string(height));

    PartitionPlan plan;
    plan.source_w = width;
    plan.source_h = height;
    plan.target_res = target_res;
    plan.sub_res = sub_res;
    plan.grid = target_res / sub_res;

    const double scale = static_cast<double>(target_res) / std::max(width, height);
    plan.resized_w = std::max(1, round_half_up(width * scale));
    plan.resized_h = std::max(1, round_half_up(height * scale));

    plan.slots.reserve(static_cast<size_t>(plan.grid) * plan.grid);
    for (int r = 0; r < plan.grid; ++r) {
        for (int c = 0; c < plan.grid; ++c) {
            // Top-left anchored image occupies [0, resized_w) x [0, resized_h);
            // slot (r, c) occupies [c*sub, (c+1)*sub) x [r*sub, (r+1)*sub).
            const bool touches = c * sub_res < plan.resized_w && r * sub_res < plan.resized_h;
            plan.slots.push_back({touches ? SlotKind::Real : SlotKind::FullyPadded, r, c});
        }
    }
    return plan;
}

long assembled_length(const PartitionPlan & plan, long tokens_per_image) {
    return tokens_per_image * (1 + plan.real_count()) + plan.padded_count();
}

std::string PartitionPlan::to_json() const {
    nlohmann::json j;
    j["source"] = {source_w, source_h};
    j["target"] = target_res;
    j["sub"] = sub_res;
    j["grid"] = grid;
    j["resized"] = {resized_w, resized_h};
    auto padded = nlohmann::json::array();
    for (const auto & s : slots)
        if (s.kind == SlotKind::FullyPadded) padded.push_back({s.row, s.col});
    j["padded_slots"] = padded;
    return j.dump();
}

PartitionPlan PartitionPlan::from_json(const std::string & text) {
    nlohmann::json j = nlohmann::json::parse(text);
    PartitionPlan plan;
    plan.source_w = j.at("source").at(0).get<int>();
    plan.source_h = j.at("source").at(1).get<int>();
    plan.target_res = j.at("target").get<int>();
    plan.sub_res = j.at("sub").get<int>();
    plan.grid = j.at("grid").get<int>();
    plan.resized_w = j.at("resized").at(0).get<int>();
    plan.resized_h = j.at("resized").at(1).get<int>();
    std::vector<std::pair<int, int>> padded;
    for (const auto & p : j.at("padded_slots")) padded.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    for (int r = 0; r < plan.grid; ++r)
        for (int c = 0; c < plan.grid; ++c) {
            const bool is_padded =
                std::find(padded.begin(), padded.end(), std::make_pair(r, c)) != padded.end();
            plan.slots.push_back({is_padded ? SlotKind::FullyPadded : SlotKind::Real, r, c});
        }
    return plan;
}

} // namespace moekit
