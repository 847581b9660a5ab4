#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moekit/dialog.hpp"

namespace moekit {

struct TextSpan {
    std::string text;
    Box box; // page points
    std::optional<int> line_hint;
};

/// A document page as positioned text spans.
struct PageRecord {
    std::string page_id;
    double width = 612, height = 792;
    std::vector<TextSpan> spans;

    std::string to_json() const;
    static PageRecord from_json(const std::string & line);
};

struct UnicodeCheck {
    bool keep = false;
    double printable_ratio = 0;
    std::string reason; // empty when kept
};

/// keep iff the text decodes as UTF-8 and printable-and-assigned codepoints
/// make up at least min_printable_ratio of it.
UnicodeCheck check_unicode(const TextSpan & span, double min_printable_ratio = 0.95);

/// Line-clusters spans (vertical overlap >= 50% of the shorter span), then
/// merges horizontally adjacent spans whose gap is <= 0.6x the line's median
/// character width. Abutting spans join directly, hyphen-terminated spans
/// join without a space, everything else joins with one space.
std::vector<TextSpan> merge_splits(const std::vector<TextSpan> & spans);

/// Column-aware ordering: gutters wider than 3x the page median char width
/// split columns; columns read left to right, lines top to bottom, spans left
/// to right.
std::vector<std::vector<TextSpan>> ordered_lines(const std::vector<TextSpan> & spans);
std::vector<TextSpan> reading_order(const std::vector<TextSpan> & spans);

enum class QaMode { FullText, Spotting, Layout };
QaMode qa_mode_from_name(const std::string & name);

struct OcrPipelineResult {
    std::vector<size_t> dropped_span_indices; // indices into page.spans
    std::vector<TextSpan> merged;             // reading order
    std::vector<std::vector<TextSpan>> lines; // reading order, grouped
    std::string text;                         // lines joined with \n
};

OcrPipelineResult run_ocr_pipeline(const PageRecord & page, double min_printable_ratio = 0.95);

/// nullopt when the page is empty after filtering (skip with warning).
std::optional<ConversationRecord> page_to_qa(const PageRecord & page, QaMode mode,
                                             const ConvertContext & ctx);

// ---- synthetic corpus ----------------------------------------------------------

struct SynthParams {
    int n_lines = 12; // per column
    int n_cols = 1;
    double split_prob = 0.0;
    double noise_prob = 0.0;
};

struct SynthGroundTruth {
    std::string text;                      // expected full-text output
    std::vector<size_t> noise_span_indices; // indices into the emitted spans
    int n_words = 0;
};

/// Deterministic page generator with known-correct output; injects word
/// splits (zero-gap, plus small-gap hyphen continuations) and control-char
/// noise spans.
std::pair<PageRecord, SynthGroundTruth> synth_page(uint64_t seed, const SynthParams & params);

} // namespace moekit
