#include "moekit/dialog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace moekit {

std::string role_name(Role r) {
    switch (r) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    return "user";
}

Role role_from_name(const std::string & name) {
    if (name == "system") return Role::System;
    if (name == "user") return Role::User;
    if (name == "assistant") return Role::Assistant;
    throw validation_error("unknown role: " + name);
}

std::string ConversationRecord::to_json() const {
    nlohmann::json j;
    j["id"] = id;
    auto jm = nlohmann::json::array();
    for (const auto & m : media) jm.push_back({{"path", m.path}});
    j["media"] = jm;
    auto jt = nlohmann::json::array();
    for (const auto & t : turns) {
        nlohmann::json seg = nlohmann::json::array();
        for (const auto & s : t.segments) {
            if (s.is_image)
                seg.push_back({{"image", s.image}});
            else
                seg.push_back({{"text", s.text}});
        }
        jt.push_back({{"role", role_name(t.role)}, {"segments", seg}});
    }
    j["turns"] = jt;
    j["tags"] = {{"domain", tags.domain}, {"source", tags.source}};
    return j.dump();
}

ConversationRecord ConversationRecord::from_json(const std::string & line) {
    nlohmann::json j = nlohmann::json::parse(line);
    ConversationRecord rec;
    rec.id = j.value("id", "");
    for (const auto & m : j.value("media", nlohmann::json::array()))
        rec.media.push_back({m.at("path").get<std::string>()});
    for (const auto & t : j.at("turns")) {
        Turn turn;
        turn.role = role_from_name(t.at("role").get<std::string>());
        for (const auto & s : t.at("segments")) {
            if (s.contains("image"))
                turn.segments.push_back(Segment::make_image(s.at("image").get<int>()));
            else
                turn.segments.push_back(Segment::make_text(s.at("text").get<std::string>()));
        }
        rec.turns.push_back(std::move(turn));
    }
    if (j.contains("tags")) {
        rec.tags.domain = j["tags"].value("domain", "");
        rec.tags.source = j["tags"].value("source", "");
    }
    return rec;
}

void validate_record(const ConversationRecord & rec) {
    size_t i = 0;
    if (i < rec.turns.size() && rec.turns[i].role == Role::System) ++i;
    bool any_assistant = false;
    Role expect = Role::User;
    for (; i < rec.turns.size(); ++i) {
        const Turn & t = rec.turns[i];
        if (t.role != expect)
            throw validation_error("record " + rec.id + ": turn " + std::to_string(i) +
                                   " breaks user/assistant alternation");
        if (t.role == Role::Assistant) {
            any_assistant = true;
            for (const auto & s : t.segments)
                if (s.is_image)
                    throw validation_error("record " + rec.id + ": assistant turn carries an image");
        }
        for (const auto & s : t.segments)
            if (s.is_image && (s.image < 0 || s.image >= static_cast<int>(rec.media.size())))
                throw validation_error("record " + rec.id + ": unresolved media index " +
                                       std::to_string(s.image));
        expect = expect == Role::User ? Role::Assistant : Role::User;
    }
    if (!any_assistant) throw validation_error("record " + rec.id + ": no assistant turn");
}

// ---- textualization ------------------------------------------------------------

static std::string fmt_coord(double v, int precision) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

static void check_box(const Box & b, int img_w, int img_h) {
    if (!(b.x1 < b.x2) || !(b.y1 < b.y2))
        throw validation_error("degenerate box: x1 < x2 and y1 < y2 required");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > img_w || b.y2 > img_h)
        throw validation_error("box outside image bounds");
}

std::string textualize_box(const Box & box, int img_w, int img_h, int precision) {
    check_box(box, img_w, img_h);
    return "[" + fmt_coord(box.x1 / img_w, precision) + "," + fmt_coord(box.y1 / img_h, precision) +
           "," + fmt_coord(box.x2 / img_w, precision) + "," + fmt_coord(box.y2 / img_h, precision) +
           "]";
}

std::string textualize_keypoint(const Keypoint & kp, int img_w, int img_h, int precision) {
    if (kp.x < 0 || kp.y < 0 || kp.x > img_w || kp.y > img_h)
        throw validation_error("keypoint outside image bounds");
    return "(" + kp.name + ": [" + fmt_coord(kp.x / img_w, precision) + "," +
           fmt_coord(kp.y / img_h, precision) + "])";
}

std::string textualize_polygon(const std::vector<double> & xy, int img_w, int img_h, int precision) {
    if (xy.size() < 6 || xy.size() % 2 != 0)
        throw validation_error("polygon needs at least 3 (x,y) pairs");
    std::string out = "[";
    for (size_t i = 0; i < xy.size(); i += 2) {
        if (i) out += " ";
        out += fmt_coord(xy[i] / img_w, precision) + "," + fmt_coord(xy[i + 1] / img_h, precision);
    }
    return out + "]";
}

// ---- parsing ---------------------------------------------------------------------

namespace {

// parses a decimal number at pos; advances pos on success
bool scan_number(const std::string & s, size_t & pos, double & out) {
    size_t p = pos;
    while (p < s.size() && s[p] == ' ') ++p;
    const size_t start = p;
    if (p < s.size() && (s[p] == '-' || s[p] == '+')) ++p;
    bool digits = false;
    while (p < s.size() && std::isdigit(static_cast<unsigned char>(s[p]))) ++p, digits = true;
    if (p < s.size() && s[p] == '.') {
        ++p;
        while (p < s.size() && std::isdigit(static_cast<unsigned char>(s[p]))) ++p, digits = true;
    }
    if (!digits) return false;
    out = std::stod(s.substr(start, p - start));
    pos = p;
    return true;
}

bool scan_char(const std::string & s, size_t & pos, char c) {
    size_t p = pos;
    while (p < s.size() && s[p] == ' ') ++p;
    if (p < s.size() && s[p] == c) {
        pos = p + 1;
        return true;
    }
    return false;
}

// tries to read "[a,b,c,d]" starting exactly at the '[' at `open`
bool scan_box_at(const std::string & s, size_t open, Box & box, size_t & end) {
    size_t p = open + 1;
    double v[4];
    for (int i = 0; i < 4; ++i) {
        if (i && !scan_char(s, p, ',')) return false;
        if (!scan_number(s, p, v[i])) return false;
    }
    if (!scan_char(s, p, ']')) return false;
    box = {v[0], v[1], v[2], v[3]};
    end = p;
    return true;
}

} // namespace

ParsedBox parse_box(const std::string & text) {
    for (size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '[') continue;
        Box b;
        size_t end = 0;
        if (!scan_box_at(text, i, b, end)) continue;
        if (!(b.x1 < b.x2) || !(b.y1 < b.y2))
            throw parse_error("box tuple violates x1 < x2, y1 < y2", i);
        return {b, i, end};
    }
    throw parse_error("no bracketed 4-tuple found", text.size());
}

std::vector<ParsedBox> parse_all_boxes(const std::string & text) {
    std::vector<ParsedBox> out;
    size_t i = 0;
    while (i < text.size()) {
        if (text[i] != '[') {
            ++i;
            continue;
        }
        Box b;
        size_t end = 0;
        if (scan_box_at(text, i, b, end) && b.x1 < b.x2 && b.y1 < b.y2) {
            out.push_back({b, i, end});
            i = end;
        } else {
            ++i;
        }
    }
    return out;
}

std::vector<std::pair<double, double>> parse_polygon(const std::string & text) {
    const size_t open = text.find('[');
    const size_t close = text.find(']', open);
    if (open == std::string::npos || close == std::string::npos)
        throw parse_error("no bracketed polygon found", text.size());
    std::vector<std::pair<double, double>> pts;
    size_t p = open + 1;
    while (p < close) {
        double x, y;
        if (!scan_number(text, p, x)) break;
        if (!scan_char(text, p, ',')) throw parse_error("polygon expects x,y pairs", p);
        if (!scan_number(text, p, y)) throw parse_error("polygon expects x,y pairs", p);
        pts.emplace_back(x, y);
        while (p < close && text[p] == ' ') ++p;
    }
    if (pts.size() < 3) throw parse_error("polygon needs at least 3 points", open);
    return pts;
}

std::vector<std::pair<std::string, std::pair<double, double>>> parse_keypoints(
    const std::string & text) {
    std::vector<std::pair<std::string, std::pair<double, double>>> out;
    size_t i = 0;
    while ((i = text.find('(', i)) != std::string::npos) {
        const size_t colon = text.find(':', i);
        const size_t close = text.find(')', i);
        if (colon == std::string::npos || close == std::string::npos || colon > close) {
            ++i;
            continue;
        }
        std::string name = text.substr(i + 1, colon - i - 1);
        size_t p = colon + 1;
        double x, y;
        if (scan_char(text, p, '[') && scan_number(text, p, x) && scan_char(text, p, ',') &&
            scan_number(text, p, y) && scan_char(text, p, ']')) {
            out.emplace_back(name, std::make_pair(x, y));
        }
        i = close + 1;
    }
    if (out.empty()) throw parse_error("no keypoints found", text.size());
    return out;
}

// ---- templates -----------------------------------------------------------------

PromptTemplates PromptTemplates::builtin() {
    PromptTemplates t;
    t.version_ = "v1";
    t.prompts_ = {
        {"detection", "Detect all objects in the image and report each as 'label [x1,y1,x2,y2];' "
                      "with coordinates normalized to [0,1]."},
        {"grounding", "Locate the region described by: {expr}. Answer with a single box "
                      "[x1,y1,x2,y2] in normalized coordinates."},
        {"classification", "What is the category of the main subject in this image? Answer with "
                           "the category name only."},
        {"pose", "Report the visible keypoints of the person as '(name: [x,y])' pairs in "
                 "normalized coordinates."},
        {"vqa", "{question}"},
        {"som_legend", "The image contains marked regions described in text: {legend} Describe "
                       "each marked region."},
        {"som_more", "Give further detail about the relations between the marked regions."},
        {"ocr_full_text", "Read out all text in this document page in reading order."},
        {"ocr_spotting", "Spot every text line in the page and report each as 'text [x1,y1,x2,y2];' "
                         "in normalized coordinates."},
        {"ocr_layout", "List the layout regions of the page as 'class [x1,y1,x2,y2];' entries."},
    };
    return t;
}

PromptTemplates PromptTemplates::load(const std::string & path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot open template file " + path);
    nlohmann::json j;
    f >> j;
    PromptTemplates t;
    t.version_ = j.at("version").get<std::string>();
    for (auto & [k, v] : j.at("prompts").items()) t.prompts_[k] = v.get<std::string>();
    return t;
}

void PromptTemplates::save(const std::string & path) const {
    nlohmann::json j;
    j["version"] = version_;
    j["prompts"] = prompts_;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

std::string PromptTemplates::get(const std::string & family) const {
    auto it = prompts_.find(family);
    if (it == prompts_.end()) throw config_error("no prompt template for task family " + family);
    return it->second;
}

std::string PromptTemplates::fill(const std::string & family,
                                  const std::map<std::string, std::string> & values) const {
    std::string out = get(family);
    for (const auto & [key, val] : values) {
        const std::string ph = "{" + key + "}";
        size_t pos;
        while ((pos = out.find(ph)) != std::string::npos) out.replace(pos, ph.size(), val);
    }
    return out;
}

const PromptTemplates & ConvertContext::tpl() const {
    static const PromptTemplates fallback = PromptTemplates::builtin();
    return templates ? *templates : fallback;
}

// ---- converters -----------------------------------------------------------------

namespace {

Turn user_turn_with_image(std::string text) {
    Turn t;
    t.role = Role::User;
    t.segments.push_back(Segment::make_image(0));
    t.segments.push_back(Segment::make_text(std::move(text)));
    return t;
}

Turn assistant_turn(std::string text) {
    Turn t;
    t.role = Role::Assistant;
    t.segments.push_back(Segment::make_text(std::move(text)));
    return t;
}

ConversationRecord base_record(const ImageRef & image, const std::string & id,
                               const std::string & domain, const ConvertContext & ctx) {
    ConversationRecord rec;
    rec.id = id;
    rec.media.push_back({image.path});
    rec.tags.domain = domain;
    rec.tags.source = ctx.source;
    return rec;
}

} // namespace

std::optional<ConversationRecord> convert_detection(const ImageRef & image,
                                                    const std::vector<BoxAnnotation> & annotations,
                                                    const std::string & id,
                                                    const ConvertContext & ctx) {
    if (annotations.empty()) return std::nullopt;
    std::vector<BoxAnnotation> sorted = annotations;
    std::sort(sorted.begin(), sorted.end(), [](const BoxAnnotation & a, const BoxAnnotation & b) {
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        return a.label < b.label;
    });
    std::string answer;
    for (const auto & ann : sorted) {
        if (!answer.empty()) answer += " ";
        answer += ann.label + " " +
                  textualize_box(ann.box, image.width, image.height, ctx.precision) + ";";
    }
    ConversationRecord rec = base_record(image, id, "detection", ctx);
    rec.turns.push_back(user_turn_with_image(ctx.tpl().get("detection")));
    rec.turns.push_back(assistant_turn(answer));
    return rec;
}

ConversationRecord convert_grounding(const ImageRef & image, const std::string & expression,
                                     const Box & box, const std::string & id,
                                     const ConvertContext & ctx) {
    return convert_grounding_multi(image, {{expression, box}}, id, ctx);
}

ConversationRecord convert_grounding_multi(const ImageRef & image,
                                           const std::vector<std::pair<std::string, Box>> & items,
                                           const std::string & id, const ConvertContext & ctx) {
    if (items.empty()) throw validation_error("grounding record needs at least one expression");
    ConversationRecord rec = base_record(image, id, "grounding", ctx);
    bool first = true;
    for (const auto & [expr, box] : items) {
        if (expr.empty()) throw validation_error("empty referring expression");
        const std::string q = ctx.tpl().fill("grounding", {{"expr", expr}});
        Turn u = first ? user_turn_with_image(q) : [&] {
            Turn t;
            t.role = Role::User;
            t.segments.push_back(Segment::make_text(q));
            return t;
        }();
        rec.turns.push_back(std::move(u));
        rec.turns.push_back(
            assistant_turn(textualize_box(box, image.width, image.height, ctx.precision)));
        first = false;
    }
    return rec;
}

ConversationRecord convert_classification(const ImageRef & image, const std::string & label,
                                          const std::string & id, const ConvertContext & ctx) {
    if (label.empty()) throw validation_error("empty classification label");
    ConversationRecord rec = base_record(image, id, "classification", ctx);
    rec.turns.push_back(user_turn_with_image(ctx.tpl().get("classification")));
    rec.turns.push_back(assistant_turn(label));
    return rec;
}

ConversationRecord convert_pose(const ImageRef & image, const std::vector<Keypoint> & keypoints,
                                const std::string & id, const ConvertContext & ctx) {
    if (keypoints.empty()) throw validation_error("pose record needs at least one keypoint");
    std::string answer;
    for (const auto & kp : keypoints) {
        if (!answer.empty()) answer += " ";
        answer += textualize_keypoint(kp, image.width, image.height, ctx.precision);
    }
    ConversationRecord rec = base_record(image, id, "pose", ctx);
    rec.turns.push_back(user_turn_with_image(ctx.tpl().get("pose")));
    rec.turns.push_back(assistant_turn(answer));
    return rec;
}

ConversationRecord convert_vqa(const ImageRef & image, const std::string & question,
                               const std::string & answer, const std::string & id,
                               const ConvertContext & ctx) {
    if (question.empty() || answer.empty()) throw validation_error("empty VQA question or answer");
    ConversationRecord rec = base_record(image, id, "vqa", ctx);
    rec.turns.push_back(user_turn_with_image(ctx.tpl().fill("vqa", {{"question", question}})));
    rec.turns.push_back(assistant_turn(answer));
    return rec;
}

ConversationRecord convert_som(const ImageRef & image, const std::vector<SoMark> & marks,
                               const std::string & id, const ConvertContext & ctx) {
    if (marks.empty()) throw validation_error("SoM record needs at least one mark");
    std::vector<int> seen;
    for (const auto & m : marks) {
        if (std::find(seen.begin(), seen.end(), m.mark_id) != seen.end())
            throw validation_error("duplicate mark id " + std::to_string(m.mark_id));
        seen.push_back(m.mark_id);
    }

    std::string legend;
    for (const auto & m : marks) {
        if (!legend.empty()) legend += " ";
        legend += "Mark " + std::to_string(m.mark_id) + ": ";
        switch (m.shape) {
            case SoMark::Shape::Point:
                legend += "point [" + fmt_coord(m.coords[0] / image.width, ctx.precision) + "," +
                          fmt_coord(m.coords[1] / image.height, ctx.precision) + "]";
                break;
            case SoMark::Shape::Box:
                legend += "box " + textualize_box({m.coords[0], m.coords[1], m.coords[2], m.coords[3]},
                                                  image.width, image.height, ctx.precision);
                break;
            case SoMark::Shape::Polygon:
                legend += "polygon " +
                          textualize_polygon(m.coords, image.width, image.height, ctx.precision);
                break;
        }
        legend += ";";
    }

    ConversationRecord rec = base_record(image, id, "som", ctx);
    size_t depth = 0;
    for (const auto & m : marks) depth = std::max(depth, m.caption_fragments.size());
    if (depth == 0) throw validation_error("SoM marks carry no captions");

    for (size_t level = 0; level < depth; ++level) {
        std::string answer;
        for (const auto & m : marks) {
            if (level >= m.caption_fragments.size()) continue;
            if (!answer.empty()) answer += " ";
            answer += "Mark " + std::to_string(m.mark_id) + ": " + m.caption_fragments[level];
        }
        if (level == 0) {
            rec.turns.push_back(
                user_turn_with_image(ctx.tpl().fill("som_legend", {{"legend", legend}})));
        } else {
            Turn t;
            t.role = Role::User;
            t.segments.push_back(Segment::make_text(ctx.tpl().get("som_more")));
            rec.turns.push_back(std::move(t));
        }
        rec.turns.push_back(assistant_turn(answer));
    }
    return rec;
}

} // namespace moekit
