#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moekit/errors.hpp"

namespace moekit {

enum class Role { System, User, Assistant };

std::string role_name(Role r);
Role role_from_name(const std::string & name);

/// Either a text span or a reference into the record's media list.
struct Segment {
    bool is_image = false;
    int image = -1;
    std::string text;

    static Segment make_text(std::string t) {
        Segment s;
        s.text = std::move(t);
        return s;
    }
    static Segment make_image(int idx) {
        Segment s;
        s.is_image = true;
        s.image = idx;
        return s;
    }
};

struct Turn {
    Role role = Role::User;
    std::vector<Segment> segments;
};

struct MediaRef {
    std::string path;
};

struct RecordTags {
    std::string domain;
    std::string source;
};

/// The single on-disk training sample: a multi-turn, multi-modal dialog.
struct ConversationRecord {
    std::string id;
    std::vector<MediaRef> media;
    std::vector<Turn> turns;
    RecordTags tags;

    std::string to_json() const;
    static ConversationRecord from_json(const std::string & line);
};

/// Throws validation_error on: bad turn alternation, image refs that do not
/// resolve, image segments inside assistant turns, or no assistant turn.
void validate_record(const ConversationRecord & rec);

// ---- coordinate textualization ----------------------------------------------

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct BoxAnnotation {
    std::string label;
    Box box; // source pixels
};

struct Keypoint {
    std::string name;
    double x = 0, y = 0; // source pixels
};

// "[x1,y1,x2,y2]", coordinates normalized to [0,1] with `precision` decimals.
std::string textualize_box(const Box & box, int img_w, int img_h, int precision = 3);
// "(name: [x,y])"
std::string textualize_keypoint(const Keypoint & kp, int img_w, int img_h, int precision = 3);
// "[x1,y1 x2,y2 ...]"
std::string textualize_polygon(const std::vector<double> & xy, int img_w, int img_h,
                               int precision = 3);

struct ParsedBox {
    Box box;           // normalized coordinates
    size_t begin, end; // byte range of the match
};

/// First well-formed "[a,b,c,d]" tuple in the text; throws parse_error when
/// absent or when the tuple violates x1 < x2, y1 < y2.
ParsedBox parse_box(const std::string & text);
std::vector<ParsedBox> parse_all_boxes(const std::string & text); // best effort, skips bad tuples
std::vector<std::pair<double, double>> parse_polygon(const std::string & text);
std::vector<std::pair<std::string, std::pair<double, double>>> parse_keypoints(
    const std::string & text);

// ---- prompt templates ----------------------------------------------------------

/// One fixed prompt per task family, kept in a versioned file so training
/// targets stay stable.
class PromptTemplates {
  public:
    static PromptTemplates builtin(); // version v1
    static PromptTemplates load(const std::string & path);
    void save(const std::string & path) const;

    const std::string & version() const { return version_; }
    std::string get(const std::string & family) const;
    // replaces "{expr}" / "{question}" style placeholders
    std::string fill(const std::string & family,
                     const std::map<std::string, std::string> & values) const;

  private:
    std::string version_;
    std::map<std::string, std::string> prompts_;
};

// ---- converters -----------------------------------------------------------------

struct ImageRef {
    std::string path;
    int width = 0;
    int height = 0;
};

struct ConvertContext {
    const PromptTemplates * templates = nullptr;
    std::string source;
    bool pack_pairs = true; // multiple QA pairs per record where the task allows it
    int precision = 3;

    const PromptTemplates & tpl() const;
};

/// Detection: fixed prompt, answer lists "label [box];" entries ordered by
/// (y1, x1, label). Empty annotation lists are skipped (nullopt) with a
/// warning left to the caller.
std::optional<ConversationRecord> convert_detection(const ImageRef & image,
                                                    const std::vector<BoxAnnotation> & annotations,
                                                    const std::string & id,
                                                    const ConvertContext & ctx);

ConversationRecord convert_grounding(const ImageRef & image, const std::string & expression,
                                     const Box & box, const std::string & id,
                                     const ConvertContext & ctx);

// n expressions -> n QA pairs in one record (or n single-pair records when
// ctx.pack_pairs is false; the caller splits).
ConversationRecord convert_grounding_multi(const ImageRef & image,
                                           const std::vector<std::pair<std::string, Box>> & items,
                                           const std::string & id, const ConvertContext & ctx);

ConversationRecord convert_classification(const ImageRef & image, const std::string & label,
                                          const std::string & id, const ConvertContext & ctx);

ConversationRecord convert_pose(const ImageRef & image, const std::vector<Keypoint> & keypoints,
                                const std::string & id, const ConvertContext & ctx);

ConversationRecord convert_vqa(const ImageRef & image, const std::string & question,
                               const std::string & answer, const std::string & id,
                               const ConvertContext & ctx);

struct SoMark {
    enum class Shape { Point, Box, Polygon };
    int mark_id = 0;
    Shape shape = Shape::Box;
    std::vector<double> coords; // pixels: point x,y | box x1,y1,x2,y2 | polygon x1,y1,...
    std::vector<std::string> caption_fragments;
};

/// Marks are described in language only; the record's media entry is the raw
/// (unmarked) image. Fragment depth f becomes QA pair f.
ConversationRecord convert_som(const ImageRef & image, const std::vector<SoMark> & marks,
                               const std::string & id, const ConvertContext & ctx);

} // namespace moekit
