#include "moekit/toydata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "moekit/rng.hpp"

namespace fs = std::filesystem;

namespace moekit {

namespace {

struct Palette {
    const char * name;
    float r, g, b;
};

constexpr Palette kPalette[] = {
    {"red", 0.85f, 0.15f, 0.15f},    {"green", 0.15f, 0.7f, 0.2f},
    {"blue", 0.15f, 0.3f, 0.85f},    {"yellow", 0.9f, 0.85f, 0.15f},
    {"purple", 0.55f, 0.2f, 0.7f},   {"cyan", 0.1f, 0.75f, 0.75f},
};

struct Block {
    int color;
    Box box;
};

void draw_block(Image & img, const Block & blk) {
    const Palette & p = kPalette[blk.color];
    for (int y = static_cast<int>(blk.box.y1); y < static_cast<int>(blk.box.y2); ++y)
        for (int x = static_cast<int>(blk.box.x1); x < static_cast<int>(blk.box.x2); ++x) {
            img.at(y, x, 0) = p.r;
            img.at(y, x, 1) = p.g;
            img.at(y, x, 2) = p.b;
        }
}

std::vector<Block> random_blocks(Rng & rng, int w, int h, int count) {
    std::vector<int> colors(std::size(kPalette));
    for (size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
    rng.shuffle(colors.begin(), colors.end());
    std::vector<Block> blocks;
    for (int i = 0; i < count; ++i) {
        const int bw = rng.next_int(40, std::max(41, w / 3));
        const int bh = rng.next_int(40, std::max(41, h / 2));
        const int x = rng.next_int(0, std::max(1, w - bw - 1));
        const int y = rng.next_int(0, std::max(1, h - bh - 1));
        blocks.push_back({colors[static_cast<size_t>(i)],
                          {static_cast<double>(x), static_cast<double>(y),
                           static_cast<double>(x + bw), static_cast<double>(y + bh)}});
    }
    return blocks;
}

} // namespace

ToyDataset make_toy_dataset(const std::string & dir, uint64_t seed, int n_samples) {
    fs::create_directories(fs::path(dir) / "img");
    Rng rng(seed);
    ConvertContext ctx;
    ctx.source = "toy";

    ToyDataset out;
    out.dir = dir;
    for (int i = 0; i < n_samples; ++i) {
        // mostly 2:1 images so skip tokens stay exercised
        int w = 448, h = 224;
        const double shape_draw = rng.next_real();
        if (shape_draw > 0.85) {
            w = h = 224;
        } else if (shape_draw > 0.7) {
            w = h = 448;
        }
        Image img(w, h, 3, 0.92f);
        const int n_blocks = rng.next_int(1, 3);
        auto blocks = random_blocks(rng, w, h, n_blocks);
        for (const auto & b : blocks) draw_block(img, b);

        const std::string img_rel = "img/toy-" + std::to_string(i) + ".ppm";
        write_ppm(dir + "/" + img_rel, img);
        ImageRef ref{img_rel, w, h};
        const std::string id = "toy-" + std::to_string(i);

        ConversationRecord rec;
        switch (i % 3) {
            case 0: {
                std::vector<BoxAnnotation> anns;
                for (const auto & b : blocks) anns.push_back({kPalette[b.color].name, b.box});
                rec = *convert_detection(ref, anns, id, ctx);
                break;
            }
            case 1: {
                const Block & target = blocks[rng.next_below(blocks.size())];
                rec = convert_grounding(ref, std::string("the ") + kPalette[target.color].name +
                                                 " block",
                                        target.box, id, ctx);
                break;
            }
            default: {
                if (rng.next_bool(0.5)) {
                    rec = convert_vqa(ref, "How many blocks are in the image?",
                                      std::to_string(blocks.size()), id, ctx);
                } else {
                    const Block * largest = &blocks[0];
                    for (const auto & b : blocks) {
                        const double area = (b.box.x2 - b.box.x1) * (b.box.y2 - b.box.y1);
                        const double cur = (largest->box.x2 - largest->box.x1) *
                                           (largest->box.y2 - largest->box.y1);
                        if (area > cur) largest = &b;
                    }
                    rec = convert_vqa(ref, "What color is the largest block?",
                                      kPalette[largest->color].name, id, ctx);
                }
                break;
            }
        }
        out.records.push_back(std::move(rec));
    }
    write_records_jsonl(dir + "/records.jsonl", out.records);
    return out;
}

void write_records_jsonl(const std::string & path, const std::vector<ConversationRecord> & records) {
    std::ofstream f(path);
    if (!f) throw input_error("cannot write " + path);
    for (const auto & r : records) f << r.to_json() << "\n";
}

std::vector<ConversationRecord> read_records_jsonl(const std::string & path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot read " + path);
    std::vector<ConversationRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(ConversationRecord::from_json(line));
    }
    return out;
}

} // namespace moekit
