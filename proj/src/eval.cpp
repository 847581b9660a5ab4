#include "moekit/eval.hpp"

#include <algorithm>
#include <cctype>
#include <iostream>

#include "json.hpp"

namespace moekit {

double iou(const Box & a, const Box & b) {
    if (!(a.x1 < a.x2) || !(a.y1 < a.y2) || !(b.x1 < b.x2) || !(b.y1 < b.y2)) {
        std::cerr << "[moekit] warning: degenerate box in iou, scoring 0\n";
        return 0.0;
    }
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::string EvalResult::to_json() const {
    nlohmann::json j;
    j["metric"] = metric_name;
    j["value"] = value;
    j["n_samples"] = n_samples;
    return j.dump();
}

EvalResult eval_rec(const std::vector<Box> & ground_truth, const std::vector<std::string> & generated,
                    double threshold) {
    if (ground_truth.size() != generated.size())
        throw input_error("eval_rec: ground truth / generation count mismatch");
    EvalResult res;
    res.metric_name = "rec_accuracy@" + std::to_string(threshold).substr(0, 3);
    res.n_samples = static_cast<long>(ground_truth.size());
    long correct = 0;
    for (size_t i = 0; i < ground_truth.size(); ++i) {
        double score = 0;
        try {
            const ParsedBox pb = parse_box(generated[i]);
            score = iou(pb.box, ground_truth[i]);
        } catch (const parse_error &) {
            score = -1; // unparseable counts as incorrect
        }
        res.per_sample.push_back(score);
        if (score >= threshold) ++correct;
    }
    res.value = res.n_samples ? static_cast<double>(correct) / static_cast<double>(res.n_samples) : 0;
    return res;
}

std::vector<std::string> assistant_answers(const ConversationRecord & rec) {
    std::vector<std::string> out;
    for (const auto & t : rec.turns) {
        if (t.role != Role::Assistant) continue;
        std::string text;
        for (const auto & s : t.segments)
            if (!s.is_image) text += s.text;
        out.push_back(std::move(text));
    }
    return out;
}

EvalResult eval_rec_records(const std::vector<ConversationRecord> & records,
                            const std::vector<std::string> & generated, double threshold) {
    std::vector<Box> gt;
    for (const auto & rec : records) {
        for (const auto & answer : assistant_answers(rec)) {
            try {
                gt.push_back(parse_box(answer).box);
            } catch (const parse_error &) {
                throw validation_error("record " + rec.id +
                                       ": assistant turn has no parseable ground-truth box");
            }
        }
    }
    return eval_rec(gt, generated, threshold);
}

std::string normalize_answer(const std::string & s) {
    std::string out;
    bool in_space = true; // strips leading whitespace
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

EvalResult eval_exact_match(const std::vector<std::string> & ground_truth,
                            const std::vector<std::string> & generated) {
    if (ground_truth.size() != generated.size())
        throw input_error("eval_exact_match: count mismatch");
    EvalResult res;
    res.metric_name = "exact_match";
    res.n_samples = static_cast<long>(ground_truth.size());
    long correct = 0;
    for (size_t i = 0; i < ground_truth.size(); ++i) {
        const bool ok = !normalize_answer(generated[i]).empty() &&
                        normalize_answer(ground_truth[i]) == normalize_answer(generated[i]);
        res.per_sample.push_back(ok ? 1.0 : 0.0);
        if (ok) ++correct;
    }
    res.value = res.n_samples ? static_cast<double>(correct) / static_cast<double>(res.n_samples) : 0;
    return res;
}

} // namespace moekit
