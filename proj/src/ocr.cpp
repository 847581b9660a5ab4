#include "moekit/ocr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moekit/rng.hpp"
#include "json.hpp"

namespace moekit {

std::string PageRecord::to_json() const {
    nlohmann::json j;
    j["page_id"] = page_id;
    j["size"] = {width, height};
    auto js = nlohmann::json::array();
    for (const auto & s : spans) {
        nlohmann::json e;
        e["text"] = s.text;
        e["box"] = {s.box.x1, s.box.y1, s.box.x2, s.box.y2};
        if (s.line_hint) e["line_hint"] = *s.line_hint;
        js.push_back(std::move(e));
    }
    j["spans"] = js;
    return j.dump();
}

PageRecord PageRecord::from_json(const std::string & line) {
    nlohmann::json j = nlohmann::json::parse(line);
    PageRecord page;
    page.page_id = j.at("page_id").get<std::string>();
    page.width = j.at("size").at(0).get<double>();
    page.height = j.at("size").at(1).get<double>();
    for (const auto & e : j.at("spans")) {
        TextSpan s;
        s.text = e.at("text").get<std::string>();
        s.box = {e.at("box").at(0).get<double>(), e.at("box").at(1).get<double>(),
                 e.at("box").at(2).get<double>(), e.at("box").at(3).get<double>()};
        if (e.contains("line_hint")) s.line_hint = e.at("line_hint").get<int>();
        if (s.text.empty()) throw validation_error("page " + page.page_id + ": empty span text");
        if (!(s.box.x1 < s.box.x2) || !(s.box.y1 < s.box.y2))
            throw validation_error("page " + page.page_id + ": degenerate span box");
        page.spans.push_back(std::move(s));
    }
    return page;
}

// ---- unicode checking ----------------------------------------------------------

namespace {

// Decodes one UTF-8 codepoint; returns false on malformed input.
bool decode_utf8(const std::string & s, size_t & i, uint32_t & cp) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int extra;
    if (b0 < 0x80) {
        cp = b0;
        extra = 0;
    } else if ((b0 >> 5) == 0x6) {
        cp = b0 & 0x1f;
        extra = 1;
    } else if ((b0 >> 4) == 0xe) {
        cp = b0 & 0x0f;
        extra = 2;
    } else if ((b0 >> 3) == 0x1e) {
        cp = b0 & 0x07;
        extra = 3;
    } else {
        return false;
    }
    for (int k = 1; k <= extra; ++k) {
        if (i + static_cast<size_t>(k) >= s.size()) return false;
        const auto b = static_cast<unsigned char>(s[i + static_cast<size_t>(k)]);
        if ((b >> 6) != 0x2) return false;
        cp = (cp << 6) | (b & 0x3f);
    }
    // reject overlong encodings and surrogates
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000))
        return false;
    if (cp >= 0xD800 && cp <= 0xDFFF) return false;
    if (cp > 0x10FFFF) return false;
    i += static_cast<size_t>(extra) + 1;
    return true;
}

bool printable_assigned(uint32_t cp) {
    if (cp < 0x20) return false;                  // C0 controls
    if (cp == 0x7f) return false;                 // DEL
    if (cp >= 0x80 && cp <= 0x9f) return false;   // C1 controls
    if (cp >= 0xFDD0 && cp <= 0xFDEF) return false;
    if ((cp & 0xFFFF) == 0xFFFE || (cp & 0xFFFF) == 0xFFFF) return false;
    return true;
}

size_t codepoint_count(const std::string & s) {
    size_t n = 0, i = 0;
    uint32_t cp;
    while (i < s.size() && decode_utf8(s, i, cp)) ++n;
    return n;
}

} // namespace

UnicodeCheck check_unicode(const TextSpan & span, double min_printable_ratio) {
    UnicodeCheck out;
    size_t i = 0, total = 0, printable = 0;
    uint32_t cp;
    while (i < span.text.size()) {
        if (!decode_utf8(span.text, i, cp)) {
            out.keep = false;
            out.reason = "invalid utf-8";
            return out;
        }
        ++total;
        if (printable_assigned(cp)) ++printable;
    }
    out.printable_ratio = total ? static_cast<double>(printable) / static_cast<double>(total) : 0.0;
    if (out.printable_ratio >= min_printable_ratio) {
        out.keep = true;
    } else {
        out.keep = false;
        out.reason = "printable ratio " + std::to_string(out.printable_ratio) + " below threshold";
    }
    return out;
}

// ---- geometry helpers ------------------------------------------------------------

namespace {

double vertical_overlap(const Box & a, const Box & b) {
    return std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
}

bool same_line(const TextSpan & a, const TextSpan & b) {
    const double ha = a.box.y2 - a.box.y1;
    const double hb = b.box.y2 - b.box.y1;
    return vertical_overlap(a.box, b.box) >= 0.5 * std::min(ha, hb);
}

double char_width(const TextSpan & s) {
    const size_t n = std::max<size_t>(1, codepoint_count(s.text));
    return (s.box.x2 - s.box.x1) / static_cast<double>(n);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Transitive clustering by the same_line relation; returns groups of indices.
std::vector<std::vector<size_t>> cluster_lines(const std::vector<TextSpan> & spans) {
    std::vector<size_t> order(spans.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const double ca = 0.5 * (spans[a].box.y1 + spans[a].box.y2);
        const double cb = 0.5 * (spans[b].box.y1 + spans[b].box.y2);
        if (ca != cb) return ca < cb;
        return spans[a].box.x1 < spans[b].box.x1;
    });
    std::vector<std::vector<size_t>> groups;
    for (size_t idx : order) {
        bool placed = false;
        for (auto & g : groups) {
            if (std::any_of(g.begin(), g.end(),
                            [&](size_t other) { return same_line(spans[idx], spans[other]); })) {
                g.push_back(idx);
                placed = true;
                break;
            }
        }
        if (!placed) groups.push_back({idx});
    }
    return groups;
}

constexpr double zero_gap_eps = 0.5; // points; abutting split halves join directly

} // namespace

std::vector<TextSpan> merge_splits(const std::vector<TextSpan> & spans) {
    if (spans.size() <= 1) return spans;
    std::vector<TextSpan> out;
    for (const auto & group : cluster_lines(spans)) {
        std::vector<TextSpan> line;
        for (size_t idx : group) line.push_back(spans[idx]);
        std::sort(line.begin(), line.end(),
                  [](const TextSpan & a, const TextSpan & b) { return a.box.x1 < b.box.x1; });
        std::vector<double> widths;
        for (const auto & s : line) widths.push_back(char_width(s));
        const double threshold = 0.6 * median(widths);

        TextSpan cur = line[0];
        for (size_t i = 1; i < line.size(); ++i) {
            const TextSpan & next = line[i];
            const double gap = next.box.x1 - cur.box.x2;
            if (gap <= threshold) {
                std::string sep;
                if (gap >= zero_gap_eps && !cur.text.empty() && cur.text.back() != '-') sep = " ";
                cur.text += sep + next.text;
                cur.box.x2 = std::max(cur.box.x2, next.box.x2);
                cur.box.y1 = std::min(cur.box.y1, next.box.y1);
                cur.box.y2 = std::max(cur.box.y2, next.box.y2);
            } else {
                out.push_back(std::move(cur));
                cur = next;
            }
        }
        out.push_back(std::move(cur));
    }
    return out;
}

std::vector<std::vector<TextSpan>> ordered_lines(const std::vector<TextSpan> & spans) {
    if (spans.empty()) return {};
    std::vector<double> widths;
    for (const auto & s : spans) widths.push_back(char_width(s));
    const double gutter = 3.0 * median(widths);

    // column components over x-intervals
    std::vector<size_t> order(spans.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return spans[a].box.x1 < spans[b].box.x1; });
    std::vector<std::vector<size_t>> columns;
    double col_right = -1e30;
    for (size_t idx : order) {
        if (columns.empty() || spans[idx].box.x1 - col_right > gutter) {
            columns.emplace_back();
            col_right = spans[idx].box.x2;
        } else {
            col_right = std::max(col_right, spans[idx].box.x2);
        }
        columns.back().push_back(idx);
    }

    std::vector<std::vector<TextSpan>> out;
    for (const auto & col : columns) {
        std::vector<TextSpan> col_spans;
        for (size_t idx : col) col_spans.push_back(spans[idx]);
        auto groups = cluster_lines(col_spans);
        std::sort(groups.begin(), groups.end(), [&](const auto & a, const auto & b) {
            double ta = 1e30, tb = 1e30;
            for (size_t i : a) ta = std::min(ta, col_spans[i].box.y1);
            for (size_t i : b) tb = std::min(tb, col_spans[i].box.y1);
            return ta < tb;
        });
        for (const auto & g : groups) {
            std::vector<TextSpan> line;
            for (size_t i : g) line.push_back(col_spans[i]);
            std::sort(line.begin(), line.end(),
                      [](const TextSpan & a, const TextSpan & b) { return a.box.x1 < b.box.x1; });
            out.push_back(std::move(line));
        }
    }
    return out;
}

std::vector<TextSpan> reading_order(const std::vector<TextSpan> & spans) {
    std::vector<TextSpan> out;
    for (auto & line : ordered_lines(spans))
        for (auto & s : line) out.push_back(std::move(s));
    return out;
}

QaMode qa_mode_from_name(const std::string & name) {
    if (name == "full_text") return QaMode::FullText;
    if (name == "spotting") return QaMode::Spotting;
    if (name == "layout") return QaMode::Layout;
    throw config_error("unknown ocr mode: " + name + " (full_text|spotting|layout)");
}

OcrPipelineResult run_ocr_pipeline(const PageRecord & page, double min_printable_ratio) {
    OcrPipelineResult res;
    std::vector<TextSpan> kept;
    for (size_t i = 0; i < page.spans.size(); ++i) {
        if (check_unicode(page.spans[i], min_printable_ratio).keep)
            kept.push_back(page.spans[i]);
        else
            res.dropped_span_indices.push_back(i);
    }
    const auto merged = merge_splits(kept);
    res.lines = ordered_lines(merged);
    for (const auto & line : res.lines) {
        if (!res.text.empty()) res.text += "\n";
        for (size_t i = 0; i < line.size(); ++i) {
            if (i) res.text += " ";
            res.text += line[i].text;
            res.merged.push_back(line[i]);
        }
    }
    return res;
}

std::optional<ConversationRecord> page_to_qa(const PageRecord & page, QaMode mode,
                                             const ConvertContext & ctx) {
    OcrPipelineResult pipe = run_ocr_pipeline(page);
    if (pipe.merged.empty()) return std::nullopt;

    const int w = static_cast<int>(page.width);
    const int h = static_cast<int>(page.height);
    ConversationRecord rec;
    rec.id = page.page_id;
    rec.media.push_back({page.page_id});
    rec.tags.source = ctx.source.empty() ? "ocr-forge" : ctx.source;

    std::string prompt, answer;
    switch (mode) {
        case QaMode::FullText:
            rec.tags.domain = "ocr_full_text";
            prompt = ctx.tpl().get("ocr_full_text");
            answer = pipe.text;
            break;
        case QaMode::Spotting: {
            rec.tags.domain = "ocr_spotting";
            prompt = ctx.tpl().get("ocr_spotting");
            for (const auto & s : pipe.merged) {
                if (!answer.empty()) answer += " ";
                answer += s.text + " " + textualize_box(s.box, w, h, ctx.precision) + ";";
            }
            break;
        }
        case QaMode::Layout: {
            rec.tags.domain = "ocr_layout";
            prompt = ctx.tpl().get("ocr_layout");
            // blocks: consecutive lines whose vertical gap stays under 1.5x the
            // median line height
            std::vector<double> heights;
            for (const auto & line : pipe.lines)
                for (const auto & s : line) heights.push_back(s.box.y2 - s.box.y1);
            const double block_gap = 1.5 * median(heights);
            struct Block {
                Box box;
                int n_lines = 0;
            };
            std::vector<Block> blocks;
            double prev_bottom = -1e30;
            for (const auto & line : pipe.lines) {
                Box lb{1e30, 1e30, -1e30, -1e30};
                for (const auto & s : line) {
                    lb.x1 = std::min(lb.x1, s.box.x1);
                    lb.y1 = std::min(lb.y1, s.box.y1);
                    lb.x2 = std::max(lb.x2, s.box.x2);
                    lb.y2 = std::max(lb.y2, s.box.y2);
                }
                const bool new_block =
                    blocks.empty() || lb.y1 - prev_bottom > block_gap || lb.y1 < prev_bottom - block_gap;
                if (new_block) {
                    blocks.push_back({lb, 1});
                } else {
                    auto & b = blocks.back();
                    b.box.x1 = std::min(b.box.x1, lb.x1);
                    b.box.y1 = std::min(b.box.y1, lb.y1);
                    b.box.x2 = std::max(b.box.x2, lb.x2);
                    b.box.y2 = std::max(b.box.y2, lb.y2);
                    ++b.n_lines;
                }
                prev_bottom = lb.y2;
            }
            for (size_t i = 0; i < blocks.size(); ++i) {
                const char * cls = (i == 0 && blocks[i].n_lines == 1) ? "title" : "paragraph";
                if (!answer.empty()) answer += " ";
                answer += std::string(cls) + " " + textualize_box(blocks[i].box, w, h, ctx.precision) + ";";
            }
            break;
        }
    }

    Turn user;
    user.role = Role::User;
    user.segments.push_back(Segment::make_image(0));
    user.segments.push_back(Segment::make_text(prompt));
    rec.turns.push_back(std::move(user));
    Turn ans;
    ans.role = Role::Assistant;
    ans.segments.push_back(Segment::make_text(answer));
    rec.turns.push_back(std::move(ans));
    return rec;
}

// ---- synthetic pages -------------------------------------------------------------

std::pair<PageRecord, SynthGroundTruth> synth_page(uint64_t seed, const SynthParams & params) {
    Rng rng(seed);
    const double char_w = 6.0, char_h = 10.0, leading = 14.0;
    const double margin = 50.0, col_gap = 40.0;

    PageRecord page;
    page.page_id = "synth-" + std::to_string(seed);
    page.width = 612;
    page.height = 792;

    const int n_cols = std::max(1, params.n_cols);
    const double col_w = (page.width - 2 * margin - (n_cols - 1) * col_gap) / n_cols;
    const int max_chars = static_cast<int>(col_w / char_w);

    SynthGroundTruth gt;
    std::vector<TextSpan> real_spans;
    std::vector<TextSpan> noise_spans;

    for (int col = 0; col < n_cols; ++col) {
        const double x0 = margin + col * (col_w + col_gap);
        for (int li = 0; li < params.n_lines; ++li) {
            const double y0 = margin + li * leading;
            std::string line_text;
            double x = x0;
            int budget = max_chars;
            while (true) {
                // word: lowercase letters, sometimes with an inner hyphen
                const int len = rng.next_int(2, 9);
                std::string word;
                for (int i = 0; i < len; ++i)
                    word.push_back(static_cast<char>('a' + rng.next_below(26)));
                if (len >= 5 && rng.next_bool(0.15))
                    word[static_cast<size_t>(len / 2)] = '-';
                const int need = static_cast<int>(word.size()) + (line_text.empty() ? 0 : 1);
                if (need > budget) break;
                if (!line_text.empty()) {
                    line_text += " ";
                    x += char_w;
                }
                budget -= need;

                const Box wb{x, y0, x + char_w * static_cast<double>(word.size()), y0 + char_h};
                const size_t hyphen_at = word.find('-');
                if (rng.next_bool(params.split_prob) && word.size() >= 2) {
                    size_t cut;
                    double gap = 0.0; // abutting halves by default
                    if (hyphen_at != std::string::npos && hyphen_at + 1 < word.size() &&
                        rng.next_bool(0.5)) {
                        cut = hyphen_at + 1; // split after the hyphen, small positive gap
                        gap = 1.5;
                    } else {
                        cut = 1 + rng.next_below(word.size() - 1);
                    }
                    const double xm = x + char_w * static_cast<double>(cut);
                    real_spans.push_back({word.substr(0, cut), {x, y0, xm, y0 + char_h}, li});
                    real_spans.push_back(
                        {word.substr(cut), {xm + gap, y0, wb.x2 + gap, y0 + char_h}, li});
                } else {
                    real_spans.push_back({word, wb, li});
                }
                line_text += word;
                x = wb.x2;
                ++gt.n_words;
            }
            if (line_text.empty()) continue;
            if (!gt.text.empty()) gt.text += "\n";
            gt.text += line_text;

            if (rng.next_bool(params.noise_prob)) {
                // mostly control characters; printable ratio well below 0.95
                const int n = rng.next_int(3, 6);
                std::string junk;
                for (int i = 0; i < n; ++i) {
                    if (i % 2 == 0)
                        junk.push_back(static_cast<char>(1 + rng.next_below(8)));
                    else
                        junk.push_back(static_cast<char>('a' + rng.next_below(26)));
                }
                noise_spans.push_back(
                    {junk, {x + 2 * char_w, y0, x + 2 * char_w + char_w * n, y0 + char_h}, li});
            }
        }
    }

    // interleave deterministically so the pipeline cannot rely on input order
    std::vector<std::pair<TextSpan, bool>> all;
    for (auto & s : real_spans) all.emplace_back(std::move(s), false);
    for (auto & s : noise_spans) all.emplace_back(std::move(s), true);
    rng.shuffle(all.begin(), all.end());
    for (size_t i = 0; i < all.size(); ++i) {
        if (all[i].second) gt.noise_span_indices.push_back(i);
        page.spans.push_back(std::move(all[i].first));
    }
    return {std::move(page), std::move(gt)};
}

} // namespace moekit
