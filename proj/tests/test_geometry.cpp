#include "doctest.h"

#include <set>

#include "moekit/errors.hpp"
#include "moekit/geometry.hpp"
#include "moekit/image.hpp"
#include "moekit/rng.hpp"

using namespace moekit;

namespace {

// Brute-force oracle: paint the resized rectangle onto the padded canvas and
// test every slot for any covered pixel.
std::set<std::pair<int, int>> rasterize_padded_slots(int width, int height, int target, int sub) {
    const double scale = static_cast<double>(target) / std::max(width, height);
    const int rw = std::max(1, static_cast<int>(std::floor(width * scale + 0.5)));
    const int rh = std::max(1, static_cast<int>(std::floor(height * scale + 0.5)));
    std::vector<uint8_t> canvas(static_cast<size_t>(target) * target, 0);
    for (int y = 0; y < rh; ++y)
        for (int x = 0; x < rw; ++x) canvas[static_cast<size_t>(y) * target + x] = 1;
    const int grid = target / sub;
    std::set<std::pair<int, int>> padded;
    for (int r = 0; r < grid; ++r)
        for (int c = 0; c < grid; ++c) {
            bool any = false;
            for (int y = r * sub; y < (r + 1) * sub && !any; ++y)
                for (int x = c * sub; x < (c + 1) * sub && !any; ++x)
                    any = canvas[static_cast<size_t>(y) * target + x] != 0;
            if (!any) padded.insert({r, c});
        }
    return padded;
}

std::set<std::pair<int, int>> plan_padded_slots(const PartitionPlan & plan) {
    std::set<std::pair<int, int>> out;
    for (const auto & s : plan.slots)
        if (s.kind == SlotKind::FullyPadded) out.insert({s.row, s.col});
    return out;
}

} // namespace

TEST_CASE("plan_partition matches the documented cases") {
    // 2:1 aspect: bottom row fully padded
    auto plan = plan_partition(896, 448, 448, 224);
    CHECK(plan.resized_w == 448);
    CHECK(plan.resized_h == 224);
    CHECK(plan.real_count() == 2);
    CHECK(plan.padded_count() == 2);
    CHECK(plan.slot(1, 0).kind == SlotKind::FullyPadded);
    CHECK(plan.slot(1, 1).kind == SlotKind::FullyPadded);

    plan = plan_partition(448, 448, 448, 224);
    CHECK(plan.resized_w == 448);
    CHECK(plan.resized_h == 448);
    CHECK(plan.real_count() == 4);
    CHECK(plan.padded_count() == 0);

    plan = plan_partition(1344, 448, 672, 224);
    CHECK(plan.grid == 3);
    CHECK(plan.resized_w == 672);
    CHECK(plan.resized_h == 224);
    CHECK(plan.real_count() == 3);
    CHECK(plan.padded_count() == 6);
    CHECK(plan_padded_slots(plan) == rasterize_padded_slots(1344, 448, 672, 224));

    plan = plan_partition(448, 300, 448, 224);
    CHECK(plan.resized_w == 448);
    CHECK(plan.resized_h == 300);
    CHECK(plan.real_count() == 4);
    CHECK(plan.padded_count() == 0);
    CHECK(plan_padded_slots(plan) == rasterize_padded_slots(448, 300, 448, 224));
}

TEST_CASE("plan_partition rejects bad inputs") {
    CHECK_THROWS_AS(plan_partition(100, 100, 448, 100), config_error);
    CHECK_THROWS_AS(plan_partition(0, 100, 448, 224), input_error);
    CHECK_THROWS_AS(plan_partition(100, -3, 448, 224), input_error);
}

TEST_CASE("plan invariants hold on random shapes") {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const int target = rng.next_bool(0.5) ? 448 : 672;
        const int w = rng.next_int(1, 2000);
        const int h = rng.next_int(1, 2000);
        const auto plan = plan_partition(w, h, target, 224);
        CHECK(plan.grid * plan.sub_res == plan.target_res);
        CHECK(std::max(plan.resized_w, plan.resized_h) == target);
        CHECK(plan.resized_w <= target);
        CHECK(plan.resized_h <= target);
        CHECK(static_cast<int>(plan.slots.size()) == plan.grid * plan.grid);
        CHECK(plan_padded_slots(plan) == rasterize_padded_slots(w, h, target, 224));
    }
}

TEST_CASE("plan_partition is a pure function") {
    const auto a = plan_partition(777, 333, 448, 224);
    const auto b = plan_partition(777, 333, 448, 224);
    CHECK(a.to_json() == b.to_json());
}

TEST_CASE("decreasing height only adds padded slots (landscape)") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const int w = rng.next_int(224, 2000);
        int h = w;
        int prev_padded = plan_partition(w, h, 448, 224).padded_count();
        while (h > 8) {
            h = std::max(1, h - rng.next_int(1, h / 2 + 1));
            const int padded = plan_partition(w, h, 448, 224).padded_count();
            CHECK(padded >= prev_padded);
            prev_padded = padded;
        }
    }
}

TEST_CASE("plan serializes to the documented JSON shape") {
    const auto plan = plan_partition(896, 448, 448, 224);
    const std::string j = plan.to_json();
    CHECK(j.find("\"source\":[896,448]") != std::string::npos);
    CHECK(j.find("\"target\":448") != std::string::npos);
    CHECK(j.find("\"sub\":224") != std::string::npos);
    CHECK(j.find("\"grid\":2") != std::string::npos);
    CHECK(j.find("\"resized\":[448,224]") != std::string::npos);
    CHECK(j.find("\"padded_slots\":[[1,0],[1,1]]") != std::string::npos);
    const auto round = PartitionPlan::from_json(j);
    CHECK(round.to_json() == j);
}

TEST_CASE("pad_and_split produces the right pieces") {
    // square input: 1 global + 4 sub-images
    Image img(448, 448, 3);
    Rng rng(3);
    for (auto & v : img.data) v = static_cast<float>(rng.next_real());
    auto plan = plan_partition(448, 448, 448, 224);
    auto split = pad_and_split(img, plan);
    CHECK(split.global_image.w == 224);
    CHECK(split.global_image.h == 224);
    CHECK(split.real_subimages.size() == 4);
    for (const auto & s : split.real_subimages) {
        CHECK(s.w == 224);
        CHECK(s.h == 224);
    }

    // 2:1 input: 1 global + 2 sub-images; padded area stays zero
    Image wide(896, 448, 3, 0.5f);
    plan = plan_partition(896, 448, 448, 224);
    split = pad_and_split(wide, plan);
    CHECK(split.real_subimages.size() == 2);
    CHECK(split.coords == std::vector<std::pair<int, int>>{{0, 0}, {0, 1}});
    // global image bottom half comes from padding only
    float bottom_sum = 0;
    for (int y = 112; y < 224; ++y)
        for (int x = 0; x < 224; ++x)
            for (int c = 0; c < 3; ++c) bottom_sum += std::abs(split.global_image.at(y, x, c));
    CHECK(bottom_sum == 0.f);
}

TEST_CASE("padding state is geometry, not pixel content") {
    Image zeros(448, 448, 3, 0.f);
    auto plan = plan_partition(448, 448, 448, 224);
    auto split = pad_and_split(zeros, plan);
    CHECK(split.real_subimages.size() == 4); // all-zero pixels stay Real slots
}

TEST_CASE("pad_and_split validates dimensions") {
    Image img(100, 100, 3);
    const auto plan = plan_partition(448, 448, 448, 224);
    CHECK_THROWS_AS(pad_and_split(img, plan), input_error);
}
