#pragma once

#include <string>
#include <vector>

namespace moekit {

enum class SlotKind { Real, FullyPadded };

struct SlotState {
    SlotKind kind;
    int row;
    int col;
};

/// Geometry of one image's scale-pad-divide result. The source is scaled so
/// that its long side equals target_res, anchored at the top-left of a
/// target_res x target_res canvas, and the canvas is divided into a
/// grid x grid arrangement of sub_res x sub_res slots. A slot whose rectangle
/// never touches the resized image is FullyPadded.
struct PartitionPlan {
    int source_w = 0;
    int source_h = 0;
    int target_res = 448;
    int sub_res = 224;
    int grid = 2;
    int resized_w = 0;
    int resized_h = 0;
    std::vector<SlotState> slots; // row-major, grid*grid entries

    const SlotState & slot(int row, int col) const { return slots[row * grid + col]; }
    int count(SlotKind k) const;
    int real_count() const { return count(SlotKind::Real); }
    int padded_count() const { return count(SlotKind::FullyPadded); }

    std::string to_json() const;
    static PartitionPlan from_json(const std::string & text);
};

PartitionPlan plan_partition(int width, int height, int target_res = 448, int sub_res = 224);

// Sequence length of the assembled visual block: the global image contributes
// tokens_per_image tokens, every Real slot the same, every FullyPadded slot
// exactly one skip token.
long assembled_length(const PartitionPlan & plan, long tokens_per_image);

} // namespace moekit
