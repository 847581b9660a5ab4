#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moekit/dialog.hpp"

namespace moekit {

/// Intersection over union of two boxes (any consistent coordinate space).
/// Degenerate boxes score 0 (with a stderr warning) rather than erroring.
double iou(const Box & a, const Box & b);

struct EvalResult {
    std::string metric_name;
    double value = 0;
    long n_samples = 0;
    std::vector<double> per_sample;

    std::string to_json() const; // one machine-readable summary line
};

/// REC scoring: a sample is correct iff the generated text parses to a box
/// with IoU >= 0.5 against the ground truth (threshold inclusive);
/// unparseable generations count as wrong.
EvalResult eval_rec(const std::vector<Box> & ground_truth,
                    const std::vector<std::string> & generated, double threshold = 0.5);

/// Record-level REC scoring: ground-truth boxes are read from each record's
/// assistant turns; `generated` aligns with assistant turns flattened across
/// records.
EvalResult eval_rec_records(const std::vector<ConversationRecord> & records,
                            const std::vector<std::string> & generated, double threshold = 0.5);

/// Case-folded, whitespace-normalized string match.
EvalResult eval_exact_match(const std::vector<std::string> & ground_truth,
                            const std::vector<std::string> & generated);

std::string normalize_answer(const std::string & s);

/// Ground-truth assistant answers of a record, in order.
std::vector<std::string> assistant_answers(const ConversationRecord & rec);

} // namespace moekit
