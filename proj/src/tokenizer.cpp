#include "moekit/tokenizer.hpp"

namespace moekit {

TokenizedSample tokenize_with_loss_mask(const ConversationRecord & rec, const ByteTokenizer & tok) {
    TokenizedSample out;
    out.ids.push_back(ByteTokenizer::Bos);
    out.loss_mask.push_back(0);

    bool any_assistant = false;
    for (const auto & turn : rec.turns) {
        const bool is_assistant = turn.role == Role::Assistant;
        any_assistant |= is_assistant;
        out.ids.push_back(tok.role_id(turn.role));
        out.loss_mask.push_back(0);
        for (const auto & seg : turn.segments) {
            if (seg.is_image) {
                if (seg.image < 0 || seg.image >= static_cast<int>(rec.media.size()))
                    throw validation_error("record " + rec.id + ": unresolved media index");
                if (is_assistant)
                    throw validation_error("record " + rec.id + ": assistant turn carries an image");
                out.media_slots.push_back({static_cast<int>(out.ids.size()), seg.image});
                out.ids.push_back(ByteTokenizer::Media);
                out.loss_mask.push_back(0);
            } else {
                for (int id : tok.encode_text(seg.text)) {
                    out.ids.push_back(id);
                    out.loss_mask.push_back(is_assistant ? 1 : 0);
                }
            }
        }
        out.ids.push_back(ByteTokenizer::Eot);
        out.loss_mask.push_back(is_assistant ? 1 : 0);
    }
    if (!any_assistant)
        out.warnings.push_back("record " + rec.id + ": no assistant turn, mask is all zero");
    return out;
}

} // namespace moekit
