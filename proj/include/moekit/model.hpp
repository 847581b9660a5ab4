#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "moekit/nn.hpp"
#include "moekit/rng.hpp"

namespace moekit {

struct MoEConfig {
    int n_experts = 8;
    int k_active = 2;
    int d_model = 128;
    int d_ff = 256;
    int n_layers = 4;
    int n_heads = 4;
    int vocab_size = 1024;
    float aux_loss_weight = 0.f;
    int max_seq = 2048;

    void validate() const {
        if (n_experts < 1 || k_active < 1 || k_active > n_experts)
            throw config_error("need 1 <= k_active <= n_experts");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw config_error("d_model must be divisible by n_heads");
        if (vocab_size < 1 || d_ff < 1 || n_layers < 0 || max_seq < 1)
            throw config_error("invalid MoE dimensions");
    }
};

inline MoEConfig moe_nano() {
    MoEConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 128;
    cfg.n_heads = 4;
    cfg.d_ff = 256;
    cfg.n_experts = 8;
    cfg.k_active = 2;
    cfg.vocab_size = 1024;
    return cfg;
}

/// One routed token: which experts fire and with what mixing weights.
struct RoutingDecision {
    int token_index = 0;
    int layer = 0;
    std::vector<int> expert_indices;
    std::vector<float> gate_weights;
};

/// Per-layer retained expert sets. An empty inner vector means "keep all".
struct PruneSpec {
    std::vector<std::vector<int>> keep_per_layer;

    static PruneSpec keep_all(int n_layers) {
        PruneSpec s;
        s.keep_per_layer.assign(static_cast<size_t>(n_layers), {});
        return s;
    }
    // Independent uniform draw of n_keep experts per layer.
    static PruneSpec random_keep(int n_layers, int n_experts, int n_keep, uint64_t seed) {
        if (n_keep < 1 || n_keep > n_experts) throw config_error("n_keep out of range");
        PruneSpec s;
        Rng rng(seed);
        for (int l = 0; l < n_layers; ++l) {
            std::vector<int> all(static_cast<size_t>(n_experts));
            std::iota(all.begin(), all.end(), 0);
            rng.shuffle(all.begin(), all.end());
            std::vector<int> keep(all.begin(), all.begin() + n_keep);
            std::sort(keep.begin(), keep.end());
            s.keep_per_layer.push_back(std::move(keep));
        }
        return s;
    }
    const std::vector<int> & kept(int layer) const { return keep_per_layer[static_cast<size_t>(layer)]; }
    void validate(int n_layers, int n_experts) const {
        if (static_cast<int>(keep_per_layer.size()) != n_layers)
            throw config_error("PruneSpec layer count mismatch");
        for (const auto & keep : keep_per_layer) {
            for (int e : keep)
                if (e < 0 || e >= n_experts) throw config_error("kept expert index out of range");
        }
    }
};

template <typename T> struct Routing {
    std::vector<int> experts;   // ascending logit rank
    std::vector<T> gates;       // renormalized softmax over the selected logits
    int top1 = 0;
};

/// Top-k selection over masked router logits. Gates are the softmax of the
/// selected logits only, so k == E reproduces the dense mixture exactly.
/// Ties break toward the lower expert index.
template <typename T>
Routing<T> route_logits(const VecX<T> & logits, int k, const std::vector<int> & active_set) {
    if (active_set.empty()) throw config_error("route: empty active set");
    if (k < 1) throw config_error("route: k must be >= 1");

    std::vector<int> order(active_set.begin(), active_set.end());
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logits(a) != logits(b)) return logits(a) > logits(b);
        return a < b;
    });
    const int k_eff = std::min<int>(k, static_cast<int>(order.size()));

    Routing<T> out;
    out.experts.assign(order.begin(), order.begin() + k_eff);
    VecX<T> sel(k_eff);
    for (int i = 0; i < k_eff; ++i) sel(i) = logits(out.experts[static_cast<size_t>(i)]);
    VecX<T> g = softmax_vec(sel);
    out.gates.assign(g.data(), g.data() + k_eff);
    out.top1 = out.experts[0];
    return out;
}

template <typename T>
Routing<T> route(const VecX<T> & hidden, const Eigen::Ref<const MatX<T>> & router_w, int k,
                 const std::vector<int> & active_set) {
    VecX<T> logits = router_w * hidden;
    return route_logits(logits, k, active_set);
}

struct RunOptions {
    const PruneSpec * prune = nullptr;
    std::vector<RoutingDecision> * route_log = nullptr; // observation only
    int k_override = 0;                                 // 0 = config k_active
};

// ---- caches for backward ----------------------------------------------------

template <typename T> struct LayerCache {
    MatX<T> x_in;                    // residual stream entering the layer
    RmsNormCache<T> attn_norm;
    MatX<T> attn_normed;
    MatX<T> q, k, v;                 // post-rope q, k
    std::vector<MatX<T>> attn_probs; // per head
    MatX<T> attn_ctx;
    MatX<T> x_mid;                   // after attention residual
    RmsNormCache<T> ffn_norm;
    MatX<T> ffn_normed;
    std::vector<std::vector<int>> sel; // per token selected experts
    MatX<T> gates;                     // seq x k_eff
    MatX<T> expert_u, expert_v;        // (seq*k_eff) x d_ff, slot-aligned
    MatX<T> router_probs;              // seq x n_active (only when aux grads wanted)
    std::vector<int> active;           // active expert set used
    int k_eff = 0;
};

template <typename T> struct Workspace {
    std::vector<LayerCache<T>> layers;
    MatX<T> x_final;
    RmsNormCache<T> final_norm;
    MatX<T> final_normed;
    MatX<T> logits;
    std::vector<std::vector<int>> top1;  // [layer][token]
};

/// Decoder-only LM whose FFN sublayers are top-k expert mixtures.
/// Forward is pure w.r.t. parameters; tracing and pruning options never
/// change the computed values for the experts that remain selected.
template <typename T>
class MoeLm {
  public:
    MoeLm(const MoEConfig & cfg, ParamStore<T> & store, const std::string & prefix = "")
        : cfg_(cfg), store_(&store), prefix_(prefix) {
        cfg_.validate();
        const T w_std = T(0.02);
        auto add = [&](const std::string & name, int r, int c, T mean, T std) {
            return store.add(prefix_ + name, r, c, false, mean, std);
        };
        embed_tok_ = add("embed.tok", cfg.vocab_size, cfg.d_model, 0, w_std);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string lp = "layer." + std::to_string(l) + ".";
            LayerIdx li;
            li.attn_norm = add(lp + "attn_norm.g", 1, cfg.d_model, 1, 0);
            li.wq = add(lp + "attn.wq", cfg.d_model, cfg.d_model, 0, w_std);
            li.wk = add(lp + "attn.wk", cfg.d_model, cfg.d_model, 0, w_std);
            li.wv = add(lp + "attn.wv", cfg.d_model, cfg.d_model, 0, w_std);
            li.wo = add(lp + "attn.wo", cfg.d_model, cfg.d_model, 0, w_std);
            li.ffn_norm = add(lp + "ffn_norm.g", 1, cfg.d_model, 1, 0);
            li.router = add(lp + "router.w", cfg.n_experts, cfg.d_model, 0, w_std);
            for (int e = 0; e < cfg.n_experts; ++e) {
                const std::string ep = lp + "expert." + std::to_string(e) + ".";
                li.w1.push_back(add(ep + "w1", cfg.d_ff, cfg.d_model, 0, w_std));
                li.w2.push_back(add(ep + "w2", cfg.d_model, cfg.d_ff, 0, w_std));
                li.w3.push_back(add(ep + "w3", cfg.d_ff, cfg.d_model, 0, w_std));
            }
            layers_.push_back(std::move(li));
        }
        final_norm_ = add("final_norm.g", 1, cfg.d_model, 1, 0);
        head_ = add("head.w", cfg.vocab_size, cfg.d_model, 0, w_std);
    }

    const MoEConfig & config() const { return cfg_; }
    const std::string & prefix() const { return prefix_; }

    Eigen::Map<const MatX<T>> token_embeddings() const {
        return static_cast<const ParamStore<T> &>(*store_).mat(embed_tok_);
    }

    MatX<T> embed_tokens(const std::vector<int> & ids) const {
        auto emb = store_->mat(embed_tok_);
        MatX<T> out(static_cast<Eigen::Index>(ids.size()), cfg_.d_model);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= cfg_.vocab_size) throw input_error("token id out of range");
            out.row(static_cast<Eigen::Index>(i)) = emb.row(ids[i]);
        }
        return out;
    }

    /// embeddings (seq x d_model) -> logits (seq x vocab), causal.
    MatX<T> forward(const MatX<T> & emb, const RunOptions & opts = {}, Workspace<T> * ws = nullptr,
                    bool want_router_probs = false) const {
        if (emb.cols() != cfg_.d_model) throw input_error("embedding width mismatch");
        if (emb.rows() > cfg_.max_seq) throw input_error("sequence longer than max_seq");
        if (opts.prune) opts.prune->validate(cfg_.n_layers, cfg_.n_experts);

        const auto seq = emb.rows();
        if (ws) {
            ws->layers.resize(static_cast<size_t>(cfg_.n_layers));
            ws->top1.assign(static_cast<size_t>(cfg_.n_layers), std::vector<int>(static_cast<size_t>(seq)));
        }
        MatX<T> x = emb;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            LayerCache<T> * lc = ws ? &ws->layers[static_cast<size_t>(l)] : nullptr;
            if (lc) lc->x_in = x;
            MatX<T> a = attention_forward(l, x, lc);
            x += a;
            if (lc) lc->x_mid = x;
            MatX<T> f = moe_forward(l, x, opts, lc, ws, want_router_probs);
            x += f;
        }
        if (ws) ws->x_final = x;
        RmsNormCache<T> fn;
        MatX<T> normed = rmsnorm_forward<T>(x, store_->mat(final_norm_), ws ? &fn : nullptr);
        MatX<T> logits(seq, cfg_.vocab_size);
        logits.noalias() = normed * store_->mat(head_).transpose();
        if (ws) {
            ws->final_norm = std::move(fn);
            ws->final_normed = std::move(normed);
            ws->logits = logits;
        }
        return logits;
    }

    /// Reverse pass. `dlogits` must match the forward recorded in `ws`.
    /// Parameter gradients accumulate into `grad` (store layout). Returns
    /// d(loss)/d(input embeddings). `aux_router_coeff`, when set, holds one
    /// dL/dP vector per layer (length n_experts) applied through the cached
    /// router probabilities.
    MatX<T> backward(const Workspace<T> & ws, const MatX<T> & dlogits, std::vector<T> & grad,
                     const std::vector<VecX<T>> * aux_router_coeff = nullptr) const {
        MatX<T> dx(ws.final_normed.rows(), cfg_.d_model);
        // head
        store_->view(grad, head_).noalias() += dlogits.transpose() * ws.final_normed;
        MatX<T> dnormed = dlogits * store_->mat(head_);
        dx = rmsnorm_backward<T>(dnormed, ws.final_norm, store_->mat(final_norm_),
                                 store_->view(grad, final_norm_));
        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            const LayerCache<T> & lc = ws.layers[static_cast<size_t>(l)];
            // FFN sublayer: x = x_mid + moe(norm(x_mid))
            MatX<T> dmid = moe_backward(l, lc, dx, grad,
                                        aux_router_coeff ? &(*aux_router_coeff)[static_cast<size_t>(l)]
                                                         : nullptr);
            dmid += dx;
            // attention sublayer: x_mid = x_in + attn(norm(x_in))
            MatX<T> din = attention_backward(l, lc, dmid, grad);
            din += dmid;
            dx = std::move(din);
        }
        return dx;
    }

  private:
    struct LayerIdx {
        int attn_norm, wq, wk, wv, wo, ffn_norm, router;
        std::vector<int> w1, w2, w3;
    };

    MatX<T> attention_forward(int l, const MatX<T> & x, LayerCache<T> * lc) const {
        const LayerIdx & li = layers_[static_cast<size_t>(l)];
        const auto seq = x.rows();
        const int dh = cfg_.d_model / cfg_.n_heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));

        RmsNormCache<T> nc;
        MatX<T> normed = rmsnorm_forward<T>(x, store_->mat(li.attn_norm), lc ? &nc : nullptr);
        MatX<T> q = normed * store_->mat(li.wq).transpose();
        MatX<T> k = normed * store_->mat(li.wk).transpose();
        MatX<T> v = normed * store_->mat(li.wv).transpose();
        rope_apply<T>(q, cfg_.n_heads);
        rope_apply<T>(k, cfg_.n_heads);

        MatX<T> ctx(seq, cfg_.d_model);
        std::vector<MatX<T>> probs;
        for (int h = 0; h < cfg_.n_heads; ++h) {
            auto qh = q.middleCols(h * dh, dh);
            auto kh = k.middleCols(h * dh, dh);
            auto vh = v.middleCols(h * dh, dh);
            MatX<T> s(seq, seq);
            s.noalias() = qh * kh.transpose();
            s *= scale;
            for (Eigen::Index r = 0; r < seq; ++r)
                for (Eigen::Index c = r + 1; c < seq; ++c)
                    s(r, c) = -std::numeric_limits<T>::infinity();
            softmax_rows<T>(s);
            ctx.middleCols(h * dh, dh).noalias() = s * vh;
            if (lc) probs.push_back(std::move(s));
        }
        MatX<T> out = ctx * store_->mat(li.wo).transpose();
        if (lc) {
            lc->attn_norm = std::move(nc);
            lc->attn_normed = std::move(normed);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->attn_probs = std::move(probs);
            lc->attn_ctx = std::move(ctx);
        }
        return out;
    }

    MatX<T> attention_backward(int l, const LayerCache<T> & lc, const MatX<T> & dout,
                               std::vector<T> & grad) const {
        const LayerIdx & li = layers_[static_cast<size_t>(l)];
        const auto seq = dout.rows();
        const int dh = cfg_.d_model / cfg_.n_heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));

        store_->view(grad, li.wo).noalias() += dout.transpose() * lc.attn_ctx;
        MatX<T> dctx = dout * store_->mat(li.wo);

        MatX<T> dq(seq, cfg_.d_model), dk(seq, cfg_.d_model), dv(seq, cfg_.d_model);
        for (int h = 0; h < cfg_.n_heads; ++h) {
            const MatX<T> & p = lc.attn_probs[static_cast<size_t>(h)];
            auto vh = lc.v.middleCols(h * dh, dh);
            auto qh = lc.q.middleCols(h * dh, dh);
            auto kh = lc.k.middleCols(h * dh, dh);
            auto dctx_h = dctx.middleCols(h * dh, dh);
            MatX<T> dp(seq, seq);
            dp.noalias() = dctx_h * vh.transpose();
            dv.middleCols(h * dh, dh).noalias() = p.transpose() * dctx_h;
            // softmax rows backward; masked entries have p == 0
            MatX<T> ds(seq, seq);
            for (Eigen::Index r = 0; r < seq; ++r) {
                const T dot = p.row(r).cwiseProduct(dp.row(r)).sum();
                ds.row(r) = p.row(r).cwiseProduct(dp.row(r).array().matrix() -
                                                  Eigen::Matrix<T, 1, Eigen::Dynamic>::Constant(seq, dot));
            }
            ds *= scale;
            dq.middleCols(h * dh, dh).noalias() = ds * kh;
            dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
        }
        rope_apply<T>(dq, cfg_.n_heads, -1);
        rope_apply<T>(dk, cfg_.n_heads, -1);

        store_->view(grad, li.wq).noalias() += dq.transpose() * lc.attn_normed;
        store_->view(grad, li.wk).noalias() += dk.transpose() * lc.attn_normed;
        store_->view(grad, li.wv).noalias() += dv.transpose() * lc.attn_normed;
        MatX<T> dnormed = dq * store_->mat(li.wq);
        dnormed.noalias() += dk * store_->mat(li.wk);
        dnormed.noalias() += dv * store_->mat(li.wv);
        return rmsnorm_backward<T>(dnormed, lc.attn_norm, store_->mat(li.attn_norm),
                                   store_->view(grad, li.attn_norm));
    }

    std::vector<int> active_experts(int l, const RunOptions & opts) const {
        if (opts.prune && !opts.prune->kept(l).empty()) {
            const auto & keep = opts.prune->kept(l);
            return {keep.begin(), keep.end()};
        }
        std::vector<int> all(static_cast<size_t>(cfg_.n_experts));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }

    MatX<T> moe_forward(int l, const MatX<T> & x, const RunOptions & opts, LayerCache<T> * lc,
                        Workspace<T> * ws, bool want_router_probs) const {
        const LayerIdx & li = layers_[static_cast<size_t>(l)];
        const auto seq = x.rows();
        RmsNormCache<T> nc;
        MatX<T> normed = rmsnorm_forward<T>(x, store_->mat(li.ffn_norm), lc ? &nc : nullptr);

        const int k_cfg = opts.k_override > 0 ? opts.k_override : cfg_.k_active;
        if (k_cfg > cfg_.n_experts) throw config_error("k override exceeds expert count");
        const std::vector<int> active = active_experts(l, opts);
        const int k_eff = std::min<int>(k_cfg, static_cast<int>(active.size()));

        MatX<T> router_logits(seq, cfg_.n_experts);
        router_logits.noalias() = normed * store_->mat(li.router).transpose();

        std::vector<std::vector<int>> sel(static_cast<size_t>(seq));
        MatX<T> gates(seq, k_eff);
        MatX<T> probs;
        if (lc && want_router_probs) probs.resize(seq, static_cast<Eigen::Index>(active.size()));
        // Token -> expert assignment, then one grouped pass per expert.
        std::vector<std::vector<std::pair<int, int>>> by_expert(static_cast<size_t>(cfg_.n_experts));
        for (Eigen::Index t = 0; t < seq; ++t) {
            VecX<T> logits = router_logits.row(t).transpose();
            Routing<T> r = route_logits<T>(logits, k_cfg, active);
            for (int i = 0; i < k_eff; ++i) {
                gates(t, i) = r.gates[static_cast<size_t>(i)];
                by_expert[static_cast<size_t>(r.experts[static_cast<size_t>(i)])].emplace_back(
                    static_cast<int>(t), i);
            }
            if (lc && want_router_probs) {
                VecX<T> act(static_cast<Eigen::Index>(active.size()));
                for (size_t a = 0; a < active.size(); ++a) act(static_cast<Eigen::Index>(a)) = logits(active[a]);
                probs.row(t) = softmax_vec(act).transpose();
            }
            if (ws) ws->top1[static_cast<size_t>(l)][static_cast<size_t>(t)] = r.top1;
            if (opts.route_log) {
                RoutingDecision d;
                d.token_index = static_cast<int>(t);
                d.layer = l;
                d.expert_indices = r.experts;
                d.gate_weights.assign(r.gates.begin(), r.gates.end());
                opts.route_log->push_back(std::move(d));
            }
            sel[static_cast<size_t>(t)] = std::move(r.experts);
        }

        MatX<T> out = MatX<T>::Zero(seq, cfg_.d_model);
        MatX<T> cache_u, cache_v;
        if (lc) {
            cache_u.resize(seq * k_eff, cfg_.d_ff);
            cache_v.resize(seq * k_eff, cfg_.d_ff);
        }
        for (int e = 0; e < cfg_.n_experts; ++e) {
            const auto & toks = by_expert[static_cast<size_t>(e)];
            if (toks.empty()) continue;
            MatX<T> xe(static_cast<Eigen::Index>(toks.size()), cfg_.d_model);
            for (size_t i = 0; i < toks.size(); ++i) xe.row(static_cast<Eigen::Index>(i)) = normed.row(toks[i].first);
            MatX<T> u = xe * store_->mat(li.w1[static_cast<size_t>(e)]).transpose();
            MatX<T> v = xe * store_->mat(li.w3[static_cast<size_t>(e)]).transpose();
            MatX<T> h(u.rows(), u.cols());
            for (Eigen::Index i = 0; i < u.size(); ++i) h(i) = silu(u(i)) * v(i);
            MatX<T> y = h * store_->mat(li.w2[static_cast<size_t>(e)]).transpose();
            for (size_t i = 0; i < toks.size(); ++i) {
                const auto [t, slot] = toks[i];
                out.row(t) += gates(t, slot) * y.row(static_cast<Eigen::Index>(i));
                if (lc) {
                    cache_u.row(static_cast<Eigen::Index>(t) * k_eff + slot) = u.row(static_cast<Eigen::Index>(i));
                    cache_v.row(static_cast<Eigen::Index>(t) * k_eff + slot) = v.row(static_cast<Eigen::Index>(i));
                }
            }
        }
        if (lc) {
            lc->ffn_norm = std::move(nc);
            lc->ffn_normed = std::move(normed);
            lc->sel = std::move(sel);
            lc->gates = std::move(gates);
            lc->expert_u = std::move(cache_u);
            lc->expert_v = std::move(cache_v);
            lc->router_probs = std::move(probs);
            lc->active = active;
            lc->k_eff = k_eff;
        }
        return out;
    }

    MatX<T> moe_backward(int l, const LayerCache<T> & lc, const MatX<T> & dout, std::vector<T> & grad,
                         const VecX<T> * aux_coeff) const {
        const LayerIdx & li = layers_[static_cast<size_t>(l)];
        const auto seq = dout.rows();
        const int k_eff = lc.k_eff;

        MatX<T> dnormed = MatX<T>::Zero(seq, cfg_.d_model);
        MatX<T> drouter_logits = MatX<T>::Zero(seq, cfg_.n_experts);

        // dgate_(t,i) = <dout_t, y_(t,i)>; recompute y from cached u, v per expert.
        std::vector<std::vector<std::pair<int, int>>> by_expert(static_cast<size_t>(cfg_.n_experts));
        for (Eigen::Index t = 0; t < seq; ++t)
            for (int i = 0; i < k_eff; ++i)
                by_expert[static_cast<size_t>(lc.sel[static_cast<size_t>(t)][static_cast<size_t>(i)])]
                    .emplace_back(static_cast<int>(t), i);

        MatX<T> dgates(seq, k_eff);
        for (int e = 0; e < cfg_.n_experts; ++e) {
            const auto & toks = by_expert[static_cast<size_t>(e)];
            if (toks.empty()) continue;
            const auto n = static_cast<Eigen::Index>(toks.size());
            MatX<T> u(n, cfg_.d_ff), v(n, cfg_.d_ff), dy(n, cfg_.d_model), xe(n, cfg_.d_model);
            VecX<T> gate(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto [t, slot] = toks[static_cast<size_t>(i)];
                u.row(i) = lc.expert_u.row(static_cast<Eigen::Index>(t) * k_eff + slot);
                v.row(i) = lc.expert_v.row(static_cast<Eigen::Index>(t) * k_eff + slot);
                dy.row(i) = dout.row(t);
                xe.row(i) = lc.ffn_normed.row(t);
                gate(i) = lc.gates(t, slot);
            }
            MatX<T> h(n, cfg_.d_ff);
            for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = silu(u(i)) * v(i);
            // y = h * w2^T ; gate scaling folded into dh
            MatX<T> y(n, cfg_.d_model);
            y.noalias() = h * store_->mat(li.w2[static_cast<size_t>(e)]).transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto [t, slot] = toks[static_cast<size_t>(i)];
                dgates(t, slot) = dy.row(i).dot(y.row(i));
            }
            MatX<T> dy_scaled = dy;
            for (Eigen::Index i = 0; i < n; ++i) dy_scaled.row(i) *= gate(i);
            store_->view(grad, li.w2[static_cast<size_t>(e)]).noalias() += dy_scaled.transpose() * h;
            MatX<T> dhid = dy_scaled * store_->mat(li.w2[static_cast<size_t>(e)]);
            MatX<T> du(n, cfg_.d_ff), dvv(n, cfg_.d_ff);
            for (Eigen::Index i = 0; i < dhid.size(); ++i) {
                du(i) = dhid(i) * v(i) * silu_grad(u(i));
                dvv(i) = dhid(i) * silu(u(i));
            }
            store_->view(grad, li.w1[static_cast<size_t>(e)]).noalias() += du.transpose() * xe;
            store_->view(grad, li.w3[static_cast<size_t>(e)]).noalias() += dvv.transpose() * xe;
            MatX<T> dxe = du * store_->mat(li.w1[static_cast<size_t>(e)]);
            dxe.noalias() += dvv * store_->mat(li.w3[static_cast<size_t>(e)]);
            for (Eigen::Index i = 0; i < n; ++i) dnormed.row(toks[static_cast<size_t>(i)].first) += dxe.row(i);
        }

        // gates -> router logits (softmax over selected logits, selection fixed)
        for (Eigen::Index t = 0; t < seq; ++t) {
            VecX<T> g(k_eff), dg(k_eff);
            for (int i = 0; i < k_eff; ++i) {
                g(i) = lc.gates(t, i);
                dg(i) = dgates(t, i);
            }
            VecX<T> dsel = softmax_backward<T>(g, dg);
            for (int i = 0; i < k_eff; ++i)
                drouter_logits(t, lc.sel[static_cast<size_t>(t)][static_cast<size_t>(i)]) += dsel(i);
        }

        // auxiliary load-balance path through the full (active-set) softmax
        if (aux_coeff && lc.router_probs.size() > 0) {
            for (Eigen::Index t = 0; t < seq; ++t) {
                VecX<T> p = lc.router_probs.row(t).transpose();
                VecX<T> dp(static_cast<Eigen::Index>(lc.active.size()));
                for (size_t a = 0; a < lc.active.size(); ++a)
                    dp(static_cast<Eigen::Index>(a)) = (*aux_coeff)(lc.active[a]);
                VecX<T> dz = softmax_backward<T>(p, dp);
                for (size_t a = 0; a < lc.active.size(); ++a)
                    drouter_logits(t, lc.active[a]) += dz(static_cast<Eigen::Index>(a));
            }
        }

        store_->view(grad, li.router).noalias() += drouter_logits.transpose() * lc.ffn_normed;
        dnormed.noalias() += drouter_logits * store_->mat(li.router);
        return rmsnorm_backward<T>(dnormed, lc.ffn_norm, store_->mat(li.ffn_norm),
                                   store_->view(grad, li.ffn_norm));
    }

    MoEConfig cfg_;
    ParamStore<T> * store_;
    std::string prefix_;
    int embed_tok_ = -1, final_norm_ = -1, head_ = -1;
    std::vector<LayerIdx> layers_;
};

// ---- losses ------------------------------------------------------------------

template <typename T> struct MaskedCE {
    T loss = 0;          // mean over masked targets
    long n_masked = 0;
    MatX<T> dlogits;     // d(loss)/d(logits), zero where unmasked
};

/// Next-token cross entropy: logits at position t score the token at t+1.
/// Only targets with mask 1 contribute; the mean is over contributing targets.
template <typename T>
MaskedCE<T> masked_cross_entropy(const MatX<T> & logits, const std::vector<int> & token_ids,
                                 const std::vector<uint8_t> & loss_mask, bool want_grad) {
    const auto seq = logits.rows();
    if (static_cast<Eigen::Index>(token_ids.size()) != seq ||
        static_cast<Eigen::Index>(loss_mask.size()) != seq)
        throw input_error("masked_cross_entropy: length mismatch");
    MaskedCE<T> out;
    if (want_grad) out.dlogits = MatX<T>::Zero(seq, logits.cols());
    double total = 0;
    for (Eigen::Index t = 1; t < seq; ++t) {
        if (!loss_mask[static_cast<size_t>(t)] || token_ids[static_cast<size_t>(t)] < 0) continue;
        ++out.n_masked;
        const auto row = logits.row(t - 1);
        const T mx = row.maxCoeff();
        T lse = 0;
        for (Eigen::Index c = 0; c < row.size(); ++c) lse += std::exp(row(c) - mx);
        lse = std::log(lse) + mx;
        total += static_cast<double>(lse - row(token_ids[static_cast<size_t>(t)]));
        if (want_grad) {
            for (Eigen::Index c = 0; c < row.size(); ++c)
                out.dlogits(t - 1, c) += std::exp(row(c) - lse);
            out.dlogits(t - 1, token_ids[static_cast<size_t>(t)]) -= T(1);
        }
    }
    if (out.n_masked > 0) {
        out.loss = static_cast<T>(total / static_cast<double>(out.n_masked));
        if (want_grad) out.dlogits /= static_cast<T>(out.n_masked);
    }
    return out;
}

/// Standard top-k load-balance penalty, averaged over layers:
/// E * sum_i f_i * P_i with f_i the top-1 fraction and P_i the mean router
/// probability of expert i.
template <typename T> struct BatchRoutingStats {
    int n_experts = 0;
    std::vector<VecX<T>> prob_sums;   // per layer, length E
    std::vector<std::vector<long>> top1_counts;
    long n_tokens = 0;

    void init(int n_layers, int E) {
        n_experts = E;
        prob_sums.assign(static_cast<size_t>(n_layers), VecX<T>::Zero(E));
        top1_counts.assign(static_cast<size_t>(n_layers), std::vector<long>(static_cast<size_t>(E), 0));
        n_tokens = 0;
    }
    void accumulate(const Workspace<T> & ws) {
        for (size_t l = 0; l < ws.layers.size(); ++l) {
            const auto & lc = ws.layers[l];
            for (Eigen::Index t = 0; t < lc.router_probs.rows(); ++t)
                for (size_t a = 0; a < lc.active.size(); ++a)
                    prob_sums[l](lc.active[a]) += lc.router_probs(t, static_cast<Eigen::Index>(a));
            for (int t1 : ws.top1[l]) ++top1_counts[l][static_cast<size_t>(t1)];
        }
        if (!ws.layers.empty()) n_tokens += ws.layers[0].x_in.rows();
    }
};

template <typename T> T load_balance_loss(const BatchRoutingStats<T> & stats) {
    if (stats.n_tokens == 0) throw input_error("load_balance_loss: empty trace");
    T total = 0;
    const auto n_layers = stats.prob_sums.size();
    for (size_t l = 0; l < n_layers; ++l) {
        T layer_loss = 0;
        for (int e = 0; e < stats.n_experts; ++e) {
            const T f = static_cast<T>(stats.top1_counts[l][static_cast<size_t>(e)]) /
                        static_cast<T>(stats.n_tokens);
            const T p = stats.prob_sums[l](e) / static_cast<T>(stats.n_tokens);
            layer_loss += f * p;
        }
        total += static_cast<T>(stats.n_experts) * layer_loss;
    }
    return total / static_cast<T>(n_layers);
}

/// dL/dP coefficient vectors for load_balance_loss, one per layer.
template <typename T>
std::vector<VecX<T>> load_balance_coeff(const BatchRoutingStats<T> & stats, T weight) {
    std::vector<VecX<T>> out;
    const auto n_layers = stats.prob_sums.size();
    for (size_t l = 0; l < n_layers; ++l) {
        VecX<T> c(stats.n_experts);
        for (int e = 0; e < stats.n_experts; ++e) {
            const T f = static_cast<T>(stats.top1_counts[l][static_cast<size_t>(e)]) /
                        static_cast<T>(stats.n_tokens);
            c(e) = weight * static_cast<T>(stats.n_experts) * f /
                   (static_cast<T>(stats.n_tokens) * static_cast<T>(n_layers));
        }
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace moekit
