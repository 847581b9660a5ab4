#include "moekit/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "moekit/errors.hpp"

namespace moekit {

Image resize_bilinear(const Image & src, int out_w, int out_h) {
    if (src.w < 1 || src.h < 1) throw input_error("resize of empty image");
    Image out(out_w, out_h, src.c);
    const double sx = static_cast<double>(src.w) / out_w;
    const double sy = static_cast<double>(src.h) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
        const int y0 = std::min(static_cast<int>(fy), src.h - 1);
        const int y1 = std::min(y0 + 1, src.h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
            const int x0 = std::min(static_cast<int>(fx), src.w - 1);
            const int x1 = std::min(x0 + 1, src.w - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int ch = 0; ch < src.c; ++ch) {
                const float top = src.at(y0, x0, ch) * (1 - wx) + src.at(y0, x1, ch) * wx;
                const float bot = src.at(y1, x0, ch) * (1 - wx) + src.at(y1, x1, ch) * wx;
                out.at(y, x, ch) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image downsample_mean(const Image & src, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1 || src.w % out_w != 0 || src.h % out_h != 0)
        throw input_error("downsample_mean requires integer block sizes");
    const int bx = src.w / out_w;
    const int by = src.h / out_h;
    Image out(out_w, out_h, src.c);
    const float inv = 1.f / static_cast<float>(bx * by);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int ch = 0; ch < src.c; ++ch) {
                float acc = 0.f;
                for (int dy = 0; dy < by; ++dy)
                    for (int dx = 0; dx < bx; ++dx) acc += src.at(y * by + dy, x * bx + dx, ch);
                out.at(y, x, ch) = acc * inv;
            }
    return out;
}

SplitResult pad_and_split(const Image & image, const PartitionPlan & plan) {
    if (image.w != plan.source_w || image.h != plan.source_h)
        throw input_error("image dims " + std::to_string(image.w) + "x" + std::to_string(image.h) +
                          " do not match plan source " + std::to_string(plan.source_w) + "x" +
                          std::to_string(plan.source_h));

    const Image resized = resize_bilinear(image, plan.resized_w, plan.resized_h);
    Image canvas(plan.target_res, plan.target_res, image.c, 0.f); // pad value 0
    for (int y = 0; y < resized.h; ++y)
        for (int x = 0; x < resized.w; ++x)
            for (int ch = 0; ch < image.c; ++ch) canvas.at(y, x, ch) = resized.at(y, x, ch);

    SplitResult res;
    res.global_image = downsample_mean(canvas, plan.sub_res, plan.sub_res);
    for (const auto & s : plan.slots) {
        if (s.kind != SlotKind::Real) continue;
        Image sub(plan.sub_res, plan.sub_res, image.c);
        const int oy = s.row * plan.sub_res;
        const int ox = s.col * plan.sub_res;
        for (int y = 0; y < plan.sub_res; ++y)
            for (int x = 0; x < plan.sub_res; ++x)
                for (int ch = 0; ch < image.c; ++ch) sub.at(y, x, ch) = canvas.at(oy + y, ox + x, ch);
        res.coords.emplace_back(s.row, s.col);
        res.real_subimages.push_back(std::move(sub));
    }
    return res;
}

void write_ppm(const std::string & path, const Image & img) {
    if (img.c != 3) throw input_error("PPM writer expects 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot open " + path + " for writing");
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::clamp(img.at(y, x, ch), 0.f, 1.f);
                row[static_cast<size_t>(x) * 3 + ch] = static_cast<unsigned char>(std::lround(v * 255.f));
            }
        f.write(reinterpret_cast<const char *>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw input_error("short write on " + path);
}

Image read_ppm(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || w < 1 || h < 1 || maxval != 255)
        throw input_error("unsupported PPM header in " + path);
    f.get(); // single whitespace after header
    Image img(w, h, 3);
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw input_error("truncated PPM payload in " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<float>(buf[i]) / 255.f;
    return img;
}

} // namespace moekit
