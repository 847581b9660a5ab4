#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moekit/dialog.hpp"

namespace moekit {

/// Byte-level tokenizer: ids 0..255 are raw bytes, specials sit above.
/// Deterministic and exactly invertible, which keeps overfit checks honest.
class ByteTokenizer {
  public:
    enum Special : int {
        Bos = 256,
        Pad = 257,
        RoleSystem = 258,
        RoleUser = 259,
        RoleAssistant = 260,
        Eot = 261,   // end of turn
        Media = 262, // placeholder later replaced by a visual block
    };
    static constexpr int first_free_id = 263;

    explicit ByteTokenizer(int vocab_size = 1024) : vocab_(vocab_size) {
        if (vocab_ < first_free_id) throw config_error("vocab too small for byte tokenizer");
    }

    int vocab_size() const { return vocab_; }

    std::vector<int> encode_text(const std::string & text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    int role_id(Role r) const {
        switch (r) {
            case Role::System: return RoleSystem;
            case Role::User: return RoleUser;
            case Role::Assistant: return RoleAssistant;
        }
        return RoleUser;
    }

    std::string decode(const std::vector<int> & ids, bool keep_special = false) const {
        std::string out;
        for (int id : ids) {
            if (id >= 0 && id < 256) {
                out.push_back(static_cast<char>(id));
            } else if (keep_special) {
                switch (id) {
                    case Bos: out += "<bos>"; break;
                    case Pad: out += "<pad>"; break;
                    case RoleSystem: out += "<|system|>"; break;
                    case RoleUser: out += "<|user|>"; break;
                    case RoleAssistant: out += "<|assistant|>"; break;
                    case Eot: out += "<|eot|>"; break;
                    case Media: out += "<|image|>"; break;
                    default: out += "<unk:" + std::to_string(id) + ">"; break;
                }
            }
        }
        return out;
    }

  private:
    int vocab_;
};

struct MediaSlot {
    int position = 0;    // index into ids
    int media_index = 0; // index into record.media
};

struct TokenizedSample {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask; // 1 on assistant content and assistant <|eot|>
    std::vector<MediaSlot> media_slots;
    std::vector<std::string> warnings;
};

/// Layout: <bos> then per turn: <|role|> segments... <|eot|>. Image segments
/// become single Media placeholders recorded in media_slots. The mask is 1
/// exactly on assistant text bytes and each assistant turn's <|eot|>.
TokenizedSample tokenize_with_loss_mask(const ConversationRecord & rec, const ByteTokenizer & tok);

} // namespace moekit
