#pragma once

#include <string>
#include <vector>

#include "moekit/image.hpp"
#include "moekit/nn.hpp"

namespace moekit {

/// Square spatial grid of feature vectors.
template <typename T> struct EncoderOutput {
    int grid = 0;
    int channels = 0;
    MatX<T> feat; // (grid*grid) x channels, row-major over (row, col)
};

struct MoVConfig {
    int d_attn = 64;    // channels of the attention-style encoder
    int d_conv = 64;    // channels of the conv-style encoder
    int patch = 32;     // px; attention grid side = sub_res / patch
    int d_llm = 128;    // language model embedding width
    int sub_res = 224;  // px
    int n_attn_blocks = 2;
    int conv_stages = 0; // 0 = auto (deepest stride-2 stack compatible with the attention grid)
    int channels = 3;

    int attn_grid() const { return sub_res / patch; }

    int resolved_conv_stages() const {
        if (conv_stages > 0) return conv_stages;
        const int g = attn_grid();
        for (int n = 5; n >= 1; --n) {
            const int stride = 1 << n;
            if (sub_res % stride == 0 && (sub_res / stride) % g == 0) return n;
        }
        throw config_error("no stride-2 conv stack matches the attention grid");
    }
    int conv_grid() const { return sub_res / (1 << resolved_conv_stages()); }

    void validate() const {
        if (patch < 1 || sub_res % patch != 0)
            throw config_error("sub_res must be divisible by patch");
        if (d_attn < 1 || d_conv < 1 || d_llm < 1) throw config_error("invalid MoV widths");
        if (conv_grid() % attn_grid() != 0)
            throw config_error("conv grid must pool evenly onto the attention grid");
        if (d_attn % 4 != 0) throw config_error("d_attn must be divisible by the head count (4)");
    }
};

/// Two frozen structurally-distinct encoders (patch/attention vs strided
/// conv) fused by channel concatenation, plus the single trainable linear
/// projection into the LLM embedding space.
template <typename T> class Mov {
  public:
    static constexpr int attn_heads = 4;

    Mov(const MoVConfig & cfg, ParamStore<T> & store) : cfg_(cfg), store_(&store) {
        cfg_.validate();
        const int pdim = cfg.patch * cfg.patch * cfg.channels;
        auto addf = [&](const std::string & name, int r, int c, T std) {
            return store.add("mov." + name, r, c, /*frozen=*/true, 0, std);
        };
        // attention expert: activations stay O(1) under 1/sqrt(fan_in) init
        patch_w_ = addf("attn.patch.w", cfg.d_attn, pdim, T(1) / std::sqrt(static_cast<T>(pdim)));
        pos_ = addf("attn.pos", cfg.attn_grid() * cfg.attn_grid(), cfg.d_attn, T(0.02));
        const T astd = T(1) / std::sqrt(static_cast<T>(cfg.d_attn));
        for (int b = 0; b < cfg.n_attn_blocks; ++b) {
            const std::string bp = "attn.blk" + std::to_string(b) + ".";
            AttnBlock blk;
            blk.norm1 = store.add("mov." + bp + "norm1.g", 1, cfg.d_attn, true, 1, 0);
            blk.wq = addf(bp + "wq", cfg.d_attn, cfg.d_attn, astd);
            blk.wk = addf(bp + "wk", cfg.d_attn, cfg.d_attn, astd);
            blk.wv = addf(bp + "wv", cfg.d_attn, cfg.d_attn, astd);
            blk.wo = addf(bp + "wo", cfg.d_attn, cfg.d_attn, astd);
            blk.norm2 = store.add("mov." + bp + "norm2.g", 1, cfg.d_attn, true, 1, 0);
            blk.mlp1 = addf(bp + "mlp.w1", 2 * cfg.d_attn, cfg.d_attn, astd);
            blk.mlp2 = addf(bp + "mlp.w2", cfg.d_attn, 2 * cfg.d_attn, T(1) / std::sqrt(T(2) * cfg.d_attn));
            blocks_.push_back(blk);
        }
        // conv expert: 3x3 stride-2 stages with clamped borders
        int cin = cfg.channels;
        for (int s = 0; s < cfg.resolved_conv_stages(); ++s) {
            const int cout = s + 1 == cfg.resolved_conv_stages() ? cfg.d_conv
                                                                 : std::min(cfg.d_conv, 8 << s);
            conv_w_.push_back(addf("conv.stage" + std::to_string(s) + ".w", cout, cin * 9,
                                   T(1) / std::sqrt(static_cast<T>(cin * 9))));
            conv_dims_.push_back({cin, cout});
            cin = cout;
        }
        proj_ = store.add("mov.proj.w", cfg.d_llm, cfg.d_attn + cfg.d_conv, /*frozen=*/false, 0,
                          T(0.02));
    }

    const MoVConfig & config() const { return cfg_; }
    int token_count() const { return cfg_.attn_grid() * cfg_.attn_grid(); }
    int proj_index() const { return proj_; }

    EncoderOutput<T> encode_attn(const Image & img) const {
        check_input(img);
        const int g = cfg_.attn_grid();
        const int p = cfg_.patch;
        const int pdim = p * p * cfg_.channels;
        MatX<T> tokens(g * g, pdim);
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx) {
                Eigen::Index col = 0;
                for (int y = 0; y < p; ++y)
                    for (int x = 0; x < p; ++x)
                        for (int ch = 0; ch < cfg_.channels; ++ch)
                            tokens(gy * g + gx, col++) =
                                static_cast<T>(img.at(gy * p + y, gx * p + x, ch));
            }
        MatX<T> h = tokens * store_->mat(patch_w_).transpose();
        h += store_->mat(pos_);
        for (const auto & blk : blocks_) h = attn_block(h, blk);
        return {g, cfg_.d_attn, std::move(h)};
    }

    EncoderOutput<T> encode_conv(const Image & img) const {
        check_input(img);
        int side = cfg_.sub_res;
        std::vector<T> cur(img.data.begin(), img.data.end()); // HWC
        int cin = cfg_.channels;
        for (size_t s = 0; s < conv_w_.size(); ++s) {
            const int cout = conv_dims_[s].second;
            const int oside = side / 2;
            std::vector<T> next(static_cast<size_t>(oside) * oside * cout);
            auto w = store_->mat(conv_w_[static_cast<int>(s)]);
            for (int oy = 0; oy < oside; ++oy)
                for (int ox = 0; ox < oside; ++ox) {
                    // gather the 3x3 window (clamped) once per output pixel
                    VecX<T> window(cin * 9);
                    Eigen::Index wi = 0;
                    for (int ky = -1; ky <= 1; ++ky)
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int iy = std::clamp(oy * 2 + ky, 0, side - 1);
                            const int ix = std::clamp(ox * 2 + kx, 0, side - 1);
                            for (int ch = 0; ch < cin; ++ch)
                                window(wi++) = cur[(static_cast<size_t>(iy) * side + ix) * cin + ch];
                        }
                    VecX<T> o = w * window;
                    for (int ch = 0; ch < cout; ++ch)
                        next[(static_cast<size_t>(oy) * oside + ox) * cout + ch] =
                            std::max(T(0), o(ch)); // relu
                }
            cur = std::move(next);
            side = oside;
            cin = cout;
        }
        // average-pool down to the attention grid (integer ratio)
        const int g = cfg_.attn_grid();
        const int ratio = side / g;
        MatX<T> feat = MatX<T>::Zero(g * g, cfg_.d_conv);
        const T inv = T(1) / static_cast<T>(ratio * ratio);
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int dy = 0; dy < ratio; ++dy)
                    for (int dx = 0; dx < ratio; ++dx) {
                        const size_t base =
                            (static_cast<size_t>(gy * ratio + dy) * side + (gx * ratio + dx)) *
                            cfg_.d_conv;
                        for (int ch = 0; ch < cfg_.d_conv; ++ch)
                            feat(gy * g + gx, ch) += cur[base + ch] * inv;
                    }
        return {g, cfg_.d_conv, std::move(feat)};
    }

    static EncoderOutput<T> fuse(const EncoderOutput<T> & a, const EncoderOutput<T> & b) {
        if (a.grid != b.grid)
            throw std::logic_error("fuse: encoder grids disagree after resampling");
        EncoderOutput<T> out;
        out.grid = a.grid;
        out.channels = a.channels + b.channels;
        out.feat.resize(a.feat.rows(), out.channels);
        out.feat.leftCols(a.channels) = a.feat;
        out.feat.rightCols(b.channels) = b.feat;
        return out;
    }

    EncoderOutput<T> encode_fused(const Image & img) const {
        return fuse(encode_attn(img), encode_conv(img));
    }

    /// Row-major flatten + single linear map; S = grid^2 tokens of width d_llm.
    MatX<T> project(const EncoderOutput<T> & fused) const {
        if (fused.channels != cfg_.d_attn + cfg_.d_conv)
            throw config_error("project: fused channel width mismatch");
        return fused.feat * store_->mat(proj_).transpose();
    }

    void project_backward(const EncoderOutput<T> & fused, const MatX<T> & dout,
                          std::vector<T> & grad) const {
        store_->view(grad, proj_).noalias() += dout.transpose() * fused.feat;
    }

  private:
    struct AttnBlock {
        int norm1, wq, wk, wv, wo, norm2, mlp1, mlp2;
    };

    void check_input(const Image & img) const {
        if (img.w != cfg_.sub_res || img.h != cfg_.sub_res || img.c != cfg_.channels)
            throw input_error("encoder expects " + std::to_string(cfg_.sub_res) + "x" +
                              std::to_string(cfg_.sub_res) + "x" + std::to_string(cfg_.channels));
    }

    MatX<T> attn_block(const MatX<T> & x, const AttnBlock & blk) const {
        const auto n = x.rows();
        const int dh = cfg_.d_attn / attn_heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        MatX<T> normed = rmsnorm_forward<T>(x, store_->mat(blk.norm1));
        MatX<T> q = normed * store_->mat(blk.wq).transpose();
        MatX<T> k = normed * store_->mat(blk.wk).transpose();
        MatX<T> v = normed * store_->mat(blk.wv).transpose();
        MatX<T> ctx(n, cfg_.d_attn);
        for (int h = 0; h < attn_heads; ++h) {
            MatX<T> s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
            softmax_rows<T>(s); // bidirectional
            ctx.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
        }
        MatX<T> out = x + ctx * store_->mat(blk.wo).transpose();
        MatX<T> normed2 = rmsnorm_forward<T>(out, store_->mat(blk.norm2));
        MatX<T> hidden = normed2 * store_->mat(blk.mlp1).transpose();
        for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden(i) = gelu(hidden(i));
        out.noalias() += hidden * store_->mat(blk.mlp2).transpose();
        return out;
    }

    MoVConfig cfg_;
    ParamStore<T> * store_;
    int patch_w_ = -1, pos_ = -1, proj_ = -1;
    std::vector<AttnBlock> blocks_;
    std::vector<int> conv_w_;
    std::vector<std::pair<int, int>> conv_dims_;
};

// ---- visual sequence assembly -------------------------------------------------

/// Where each row of an assembled visual sequence came from.
/// block: 0 = global image, 1..n = real sub-image blocks, -1 = skip token.
struct VisualTokenSource {
    int block = -1;
    int row = 0;
};

template <typename T> struct AssembledVisual {
    MatX<T> tokens;
    std::vector<VisualTokenSource> sources;
};

/// Global block first, then slots in row-major order: Real slots contribute
/// their full block, FullyPadded slots exactly one shared skip token.
template <typename T>
AssembledVisual<T> assemble_visual_sequence(const MatX<T> & global_tokens,
                                            const std::vector<MatX<T>> & sub_blocks,
                                            const PartitionPlan & plan,
                                            const Eigen::Ref<const MatX<T>> & skip_embedding) {
    const auto S = global_tokens.rows();
    const auto d = global_tokens.cols();
    if (skip_embedding.rows() != 1 || skip_embedding.cols() != d)
        throw input_error("skip embedding width mismatch");
    if (static_cast<int>(sub_blocks.size()) != plan.real_count())
        throw input_error("sub block count does not match plan");
    for (const auto & b : sub_blocks)
        if (b.rows() != S || b.cols() != d) throw input_error("sub block shape mismatch");

    AssembledVisual<T> out;
    out.tokens.resize(assembled_length(plan, S), d);
    out.sources.reserve(static_cast<size_t>(out.tokens.rows()));
    Eigen::Index at = 0;
    out.tokens.middleRows(0, S) = global_tokens;
    for (Eigen::Index r = 0; r < S; ++r) out.sources.push_back({0, static_cast<int>(r)});
    at += S;
    int next_block = 0;
    for (const auto & slot : plan.slots) {
        if (slot.kind == SlotKind::Real) {
            out.tokens.middleRows(at, S) = sub_blocks[static_cast<size_t>(next_block)];
            for (Eigen::Index r = 0; r < S; ++r)
                out.sources.push_back({next_block + 1, static_cast<int>(r)});
            at += S;
            ++next_block;
        } else {
            out.tokens.row(at) = skip_embedding.row(0);
            out.sources.push_back({-1, 0});
            ++at;
        }
    }
    return out;
}

} // namespace moekit
