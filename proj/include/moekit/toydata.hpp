#pragma once

#include <string>
#include <vector>

#include "moekit/dialog.hpp"
#include "moekit/image.hpp"

namespace moekit {

/// Small synthetic multimodal instruction set: colored blocks on a plain
/// background with detection / grounding / VQA records over them. Used by
/// demos and overfit sanity runs.
struct ToyDataset {
    std::string dir;
    std::vector<ConversationRecord> records;
};

ToyDataset make_toy_dataset(const std::string & dir, uint64_t seed, int n_samples);

void write_records_jsonl(const std::string & path, const std::vector<ConversationRecord> & records);
std::vector<ConversationRecord> read_records_jsonl(const std::string & path);

} // namespace moekit
