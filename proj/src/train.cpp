#include "moekit/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace moekit {

// ---- schedule -----------------------------------------------------------------

double lr_at(long step, long total_steps, long warmup_steps, double lr_peak) {
    if (step < 0 || step > total_steps) throw config_error("lr_at: step outside [0, total_steps]");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
        throw config_error("lr_at: need 0 <= warmup_steps < total_steps");
    if (step < warmup_steps)
        return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return lr_peak * 0.5 * (1.0 + std::cos(M_PI * t));
}

long warmup_steps_for(double warmup_frac, long steps_per_epoch) {
    return std::max<long>(1, std::lround(warmup_frac * static_cast<double>(steps_per_epoch)));
}

// ---- flat configs -----------------------------------------------------------------

std::map<std::string, std::string> parse_flat_kv(const std::string & text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = val;
    }
    return kv;
}

TrainFileConfig parse_train_config(const std::string & path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto kv = parse_flat_kv(text);

    TrainFileConfig out;
    auto take = [&](const char * key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) return "";
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    if (auto v = take("lr_peak"); !v.empty()) out.train.lr_peak = std::stod(v);
    if (auto v = take("warmup_frac"); !v.empty()) out.train.warmup_frac = std::stod(v);
    if (auto v = take("betas"); !v.empty()) {
        const size_t comma = v.find(',');
        if (comma == std::string::npos) throw config_error("betas expects 'b1,b2'");
        out.train.beta1 = std::stod(v.substr(0, comma));
        out.train.beta2 = std::stod(v.substr(comma + 1));
    }
    if (auto v = take("weight_decay"); !v.empty()) out.train.weight_decay = std::stod(v);
    if (auto v = take("batch_size"); !v.empty()) out.train.batch_size = std::stoi(v);
    if (auto v = take("total_steps"); !v.empty()) out.train.total_steps = std::stol(v);
    if (auto v = take("seed"); !v.empty()) out.train.seed = std::stoull(v);
    if (auto v = take("freeze.visual_encoders"); !v.empty())
        out.train.freeze_visual_encoders = v == "true" || v == "1";
    if (auto v = take("grad_clip"); !v.empty()) out.train.grad_clip = std::stod(v);
    if (auto v = take("checkpoint_every"); !v.empty()) out.train.checkpoint_every = std::stol(v);
    if (auto v = take("preset"); !v.empty()) out.preset = v;

    // source.<i>.name / .path / .weight
    std::map<int, MixerSource> sources;
    for (const auto & [key, val] : kv) {
        if (key.rfind("source.", 0) != 0) throw config_error("unknown config key: " + key);
        const size_t dot = key.find('.', 7);
        if (dot == std::string::npos) throw config_error("bad source key: " + key);
        const int idx = std::stoi(key.substr(7, dot - 7));
        const std::string field = key.substr(dot + 1);
        auto & src = sources[idx];
        if (field == "name")
            src.name = val;
        else if (field == "path")
            src.path = val;
        else if (field == "weight")
            src.weight = std::stod(val);
        else
            throw config_error("unknown source field: " + key);
    }
    for (auto & [idx, src] : sources) {
        if (src.name.empty()) src.name = "source" + std::to_string(idx);
        out.mixer.sources.push_back(std::move(src));
    }
    out.train.validate();
    out.mixer.validate();
    return out;
}

// ---- sample stream ------------------------------------------------------------------

SampleStream::SampleStream(std::vector<long> sizes, std::vector<double> weights, uint64_t seed)
    : sizes_(std::move(sizes)), weights_(std::move(weights)), seed_(seed) {
    if (sizes_.empty()) throw config_error("sample stream needs at least one source");
    if (weights_.empty()) weights_.assign(sizes_.size(), 1.0);
    if (weights_.size() != sizes_.size()) throw config_error("weights/sizes mismatch");
    for (size_t i = 0; i < sizes_.size(); ++i) {
        if (sizes_[i] <= 0) throw config_error("empty source in mixture");
        if (!(weights_[i] > 0)) throw config_error("source weight must be > 0");
        epoch_len_ += sizes_[i];
        weighted_ |= weights_[i] != 1.0;
    }
    double acc = 0;
    for (size_t i = 0; i < sizes_.size(); ++i) {
        acc += weights_[i] * static_cast<double>(sizes_[i]);
        cum_.push_back(acc);
    }
}

std::pair<int, long> SampleStream::at(long position) const {
    if (position < 0) throw input_error("negative stream position");
    if (weighted_) {
        Rng rng(seed_ ^ hash_str("pos:" + std::to_string(position)));
        const double u = rng.next_real() * cum_.back();
        size_t s = 0;
        while (s + 1 < cum_.size() && u >= cum_[s]) ++s;
        return {static_cast<int>(s), static_cast<long>(rng.next_below(static_cast<uint64_t>(sizes_[s])))};
    }
    const long epoch = position / epoch_len_;
    const long off = position % epoch_len_;
    if (epoch != cached_epoch_) {
        cached_perm_.clear();
        cached_perm_.reserve(static_cast<size_t>(epoch_len_));
        for (size_t s = 0; s < sizes_.size(); ++s)
            for (long i = 0; i < sizes_[s]; ++i) cached_perm_.emplace_back(static_cast<int>(s), i);
        Rng rng(seed_ ^ hash_str("epoch:" + std::to_string(epoch)));
        rng.shuffle(cached_perm_.begin(), cached_perm_.end());
        cached_epoch_ = epoch;
    }
    return cached_perm_[static_cast<size_t>(off)];
}

// ---- media pool -----------------------------------------------------------------------

int MediaPool::get_or_encode(const std::string & path, const System<float> & sys) {
    auto it = by_path_.find(path);
    if (it != by_path_.end()) return it->second;
    const std::string full = root_.empty() ? path : root_ + "/" + path;
    return add_image(path, read_ppm(full), sys);
}

int MediaPool::add_image(const std::string & key, const Image & img, const System<float> & sys) {
    auto it = by_path_.find(key);
    if (it != by_path_.end()) return it->second;
    PreparedMedia pm;
    pm.plan = plan_partition(img.w, img.h, sys.cfg.vision.target_res, sys.cfg.vision.sub_res);
    SplitResult split = pad_and_split(img, pm.plan);
    pm.fused.push_back(sys.mov->encode_fused(split.global_image));
    for (const auto & sub : split.real_subimages) pm.fused.push_back(sys.mov->encode_fused(sub));
    media_.push_back(std::move(pm));
    const int idx = static_cast<int>(media_.size()) - 1;
    by_path_[key] = idx;
    return idx;
}

PreparedSample prepare_sample(const ConversationRecord & rec, MediaPool & pool,
                              const System<float> & sys) {
    validate_record(rec);
    PreparedSample out;
    out.tok = tokenize_with_loss_mask(rec, sys.tokenizer);
    for (const auto & m : rec.media) out.media.push_back(pool.get_or_encode(m.path, sys));
    out.domain = rec.tags.domain;
    out.id = rec.id;
    return out;
}

// ---- composition ------------------------------------------------------------------------

ComposedSequence compose_sequence(const std::vector<int> & ids, const std::vector<uint8_t> & loss_mask,
                                  const std::vector<MediaSlot> & slots,
                                  const std::vector<int> & media_ids, const MediaPool & pool,
                                  const System<float> & sys) {
    const int d = sys.cfg.model.d_model;
    // assemble each referenced media block first to know the final length
    struct Expanded {
        AssembledVisual<float> vis;
        int media_ref;
    };
    std::map<int, Expanded> by_position;
    long extra = 0;
    for (const auto & slot : slots) {
        if (slot.media_index < 0 || slot.media_index >= static_cast<int>(media_ids.size()))
            throw input_error("media slot index out of range");
        const PreparedMedia & pm = pool.at(media_ids[static_cast<size_t>(slot.media_index)]);
        MatX<float> global = sys.mov->project(pm.fused[0]);
        std::vector<MatX<float>> subs;
        for (size_t b = 1; b < pm.fused.size(); ++b) subs.push_back(sys.mov->project(pm.fused[b]));
        AssembledVisual<float> vis =
            assemble_visual_sequence<float>(global, subs, pm.plan, sys.skip_embedding());
        extra += vis.tokens.rows() - 1; // replaces one placeholder token
        by_position.emplace(slot.position, Expanded{std::move(vis), slot.media_index});
    }

    ComposedSequence out;
    const long seq = static_cast<long>(ids.size()) + extra;
    out.emb.resize(seq, d);
    out.target_ids.reserve(static_cast<size_t>(seq));
    out.loss_mask.reserve(static_cast<size_t>(seq));
    out.is_vision.reserve(static_cast<size_t>(seq));
    out.pos.reserve(static_cast<size_t>(seq));

    auto tok_emb = sys.lm->token_embeddings();
    long at = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        auto exp_it = by_position.find(static_cast<int>(i));
        if (exp_it != by_position.end()) {
            const AssembledVisual<float> & vis = exp_it->second.vis;
            out.emb.middleRows(at, vis.tokens.rows()) = vis.tokens;
            for (size_t r = 0; r < vis.sources.size(); ++r) {
                ComposedPos p;
                if (vis.sources[r].block < 0) {
                    p.kind = ComposedPos::Kind::Skip;
                } else {
                    p.kind = ComposedPos::Kind::Visual;
                    p.media_ref = exp_it->second.media_ref;
                    p.block = vis.sources[r].block;
                    p.row = vis.sources[r].row;
                }
                out.pos.push_back(p);
                out.target_ids.push_back(-1);
                out.loss_mask.push_back(0);
                out.is_vision.push_back(1);
            }
            at += vis.tokens.rows();
        } else {
            const int id = ids[i];
            if (id < 0 || id >= sys.cfg.model.vocab_size) throw input_error("token id out of range");
            out.emb.row(at) = tok_emb.row(id);
            ComposedPos p;
            p.kind = ComposedPos::Kind::Text;
            p.token_id = id;
            out.pos.push_back(p);
            out.target_ids.push_back(id);
            out.loss_mask.push_back(loss_mask[i]);
            out.is_vision.push_back(0);
            ++at;
        }
    }
    return out;
}

std::vector<TraceTag> sequence_tags(const ComposedSequence & seq, const std::string & domain) {
    std::vector<TraceTag> tags;
    tags.reserve(seq.is_vision.size());
    for (uint8_t v : seq.is_vision) tags.push_back({v ? "vision" : "language", domain});
    return tags;
}

// ---- trainer ---------------------------------------------------------------------------

Trainer::Trainer(System<float> & sys, TrainConfig cfg,
                 std::vector<std::vector<PreparedSample>> sources, MediaPool & pool,
                 std::vector<double> source_weights)
    : sys_(sys), cfg_(cfg), sources_(std::move(sources)), pool_(pool),
      stream_([&] {
          std::vector<long> sizes;
          for (const auto & s : sources_) sizes.push_back(static_cast<long>(s.size()));
          return SampleStream(sizes, std::move(source_weights), cfg.seed);
      }()) {
    cfg_.validate();
    grad_ = sys_.store.make_buffer();
    adam_m_ = sys_.store.make_buffer();
    adam_v_ = sys_.store.make_buffer();
    long n_total = 0;
    for (const auto & s : sources_) n_total += static_cast<long>(s.size());
    steps_per_epoch_ = cfg_.steps_per_epoch_override > 0
                           ? cfg_.steps_per_epoch_override
                           : std::max<long>(1, (n_total + cfg_.batch_size - 1) / cfg_.batch_size);
    warmup_ = warmup_steps_for(cfg_.warmup_frac, steps_per_epoch_);
    if (warmup_ >= cfg_.total_steps) warmup_ = std::max<long>(1, cfg_.total_steps - 1);
}

void Trainer::scatter_embedding_grads(const BatchItem & item, const MatX<float> & demb) {
    const int embed_idx = sys_.store.require("embed.tok");
    auto dtok = sys_.store.view(grad_, embed_idx);
    auto dskip = sys_.store.view(grad_, sys_.skip_idx);

    // visual rows grouped per (media, block) so each projection backward is one GEMM
    std::map<std::pair<int, int>, std::vector<std::pair<int, long>>> vis_rows; // -> (block row, seq row)
    for (long t = 0; t < static_cast<long>(item.seq.pos.size()); ++t) {
        const ComposedPos & p = item.seq.pos[static_cast<size_t>(t)];
        switch (p.kind) {
            case ComposedPos::Kind::Text:
                dtok.row(p.token_id) += demb.row(t);
                break;
            case ComposedPos::Kind::Skip:
                dskip.row(0) += demb.row(t);
                break;
            case ComposedPos::Kind::Visual:
                vis_rows[{p.media_ref, p.block}].emplace_back(p.row, t);
                break;
        }
    }
    for (const auto & [key, rows] : vis_rows) {
        const PreparedMedia & pm = pool_.at(item.sample->media[static_cast<size_t>(key.first)]);
        const EncoderOutput<float> & fused = pm.fused[static_cast<size_t>(key.second)];
        MatX<float> dblock = MatX<float>::Zero(fused.feat.rows(), sys_.cfg.model.d_model);
        for (const auto & [block_row, seq_row] : rows) dblock.row(block_row) += demb.row(seq_row);
        sys_.mov->project_backward(fused, dblock, grad_);
    }
}

void Trainer::apply_adamw(double lr, double & grad_norm_out) {
    // global norm over trainable parameters only
    double sq = 0;
    for (const auto & e : sys_.store.entries()) {
        if (e.frozen && cfg_.freeze_visual_encoders) continue;
        const size_t n = static_cast<size_t>(e.rows) * e.cols;
        const float * g = grad_.data() + e.offset;
        for (size_t i = 0; i < n; ++i) sq += static_cast<double>(g[i]) * g[i];
    }
    grad_norm_out = std::sqrt(sq);
    float scale = 1.f;
    if (cfg_.grad_clip > 0 && grad_norm_out > cfg_.grad_clip)
        scale = static_cast<float>(cfg_.grad_clip / grad_norm_out);

    const double t = static_cast<double>(step_) + 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    constexpr float eps = 1e-8f;

    for (const auto & e : sys_.store.entries()) {
        if (e.frozen && cfg_.freeze_visual_encoders) continue;
        const size_t n = static_cast<size_t>(e.rows) * e.cols;
        float * w = sys_.store.raw().data() + e.offset;
        float * g = grad_.data() + e.offset;
        float * m = adam_m_.data() + e.offset;
        float * v = adam_v_.data() + e.offset;
        for (size_t i = 0; i < n; ++i) {
            const float gi = g[i] * scale;
            m[i] = b1 * m[i] + (1.f - b1) * gi;
            v[i] = b2 * v[i] + (1.f - b2) * gi * gi;
            const float mhat = m[i] / static_cast<float>(bc1);
            const float vhat = v[i] / static_cast<float>(bc2);
            w[i] -= static_cast<float>(lr) *
                    (mhat / (std::sqrt(vhat) + eps) + static_cast<float>(cfg_.weight_decay) * w[i]);
        }
    }
}

StepMetrics Trainer::step() {
    StepMetrics metrics;
    metrics.step = step_;
    metrics.lr = lr_at(std::min(step_, cfg_.total_steps), cfg_.total_steps, warmup_, cfg_.lr_peak);

    std::fill(grad_.begin(), grad_.end(), 0.f);
    const bool want_aux = sys_.cfg.model.aux_loss_weight > 0.f;

    std::vector<BatchItem> batch;
    batch.reserve(static_cast<size_t>(cfg_.batch_size));
    for (int b = 0; b < cfg_.batch_size; ++b) {
        const auto [src, idx] = stream_.at(step_ * cfg_.batch_size + b);
        BatchItem item;
        item.sample = &sources_[static_cast<size_t>(src)][static_cast<size_t>(idx)];
        item.seq = compose_sequence(item.sample->tok.ids, item.sample->tok.loss_mask,
                                    item.sample->tok.media_slots, item.sample->media, pool_, sys_);
        sys_.lm->forward(item.seq.emb, {}, &item.ws, want_aux);
        item.ce = masked_cross_entropy<float>(item.ws.logits, item.seq.target_ids,
                                              item.seq.loss_mask, /*want_grad=*/true);
        batch.push_back(std::move(item));
    }

    long total_masked = 0;
    double ce_sum = 0;
    for (const auto & item : batch) {
        total_masked += item.ce.n_masked;
        ce_sum += static_cast<double>(item.ce.loss) * static_cast<double>(item.ce.n_masked);
    }
    metrics.masked_tokens = total_masked;

    BatchRoutingStats<float> stats;
    std::vector<VecX<float>> aux_coeff;
    if (want_aux) {
        stats.init(sys_.cfg.model.n_layers, sys_.cfg.model.n_experts);
        for (const auto & item : batch) stats.accumulate(item.ws);
        metrics.aux = static_cast<double>(load_balance_loss(stats));
        aux_coeff = load_balance_coeff(stats, sys_.cfg.model.aux_loss_weight);
    }

    if (total_masked == 0) {
        std::cerr << "[moekit] warning: batch at step " << step_
                  << " has an all-zero loss mask; skipping update\n";
        metrics.loss = 0;
        ++step_;
        return metrics;
    }

    metrics.ce = ce_sum / static_cast<double>(total_masked);
    metrics.loss = metrics.ce + static_cast<double>(sys_.cfg.model.aux_loss_weight) * metrics.aux;
    if (!std::isfinite(metrics.loss)) {
        nlohmann::json dump;
        dump["step"] = step_;
        dump["ce"] = metrics.ce;
        dump["aux"] = metrics.aux;
        dump["masked_tokens"] = total_masked;
        std::ofstream f("moekit_nan_dump.json");
        f << dump.dump(2) << "\n";
        throw input_error("non-finite loss at step " + std::to_string(step_) +
                          "; diagnostics in moekit_nan_dump.json");
    }

    for (auto & item : batch) {
        // convert per-sample mean grads into batch-mean grads
        MatX<float> dlogits = item.ce.dlogits *
                              (static_cast<float>(item.ce.n_masked) / static_cast<float>(total_masked));
        MatX<float> demb =
            sys_.lm->backward(item.ws, dlogits, grad_, want_aux ? &aux_coeff : nullptr);
        scatter_embedding_grads(item, demb);
    }

    apply_adamw(metrics.lr, metrics.grad_norm);
    ++step_;
    return metrics;
}

TrainState Trainer::snapshot_state() const {
    TrainState st;
    st.step = step_;
    st.adam_m = adam_m_;
    st.adam_v = adam_v_;
    return st;
}

void Trainer::restore_state(const TrainState & st) {
    step_ = st.step;
    if (st.adam_m.size() != adam_m_.size() || st.adam_v.size() != adam_v_.size())
        throw config_error("optimizer state size mismatch");
    adam_m_ = st.adam_m;
    adam_v_ = st.adam_v;
}

StepMetrics run_training(System<float> & sys, TrainConfig cfg,
                         std::vector<std::vector<PreparedSample>> sources, MediaPool & pool,
                         const std::string & out_dir, const std::string & resume_from,
                         std::function<bool(const StepMetrics &)> stop_early) {
    fs::create_directories(out_dir);
    Trainer trainer(sys, cfg, std::move(sources), pool);

    const std::string csv_path = out_dir + "/metrics.csv";
    const bool resuming = !resume_from.empty();
    if (resuming) {
        std::unique_ptr<System<float>> loaded;
        LoadedCheckpoint ck = load_checkpoint_into(resume_from, loaded);
        if (ck.config.to_json() != sys.cfg.to_json())
            throw config_error("resume checkpoint config does not match");
        sys.store.raw() = loaded->store.raw();
        if (!ck.state) throw config_error("checkpoint has no optimizer state to resume from");
        trainer.restore_state(*ck.state);
    }
    std::ofstream csv(csv_path, resuming ? std::ios::app : std::ios::out);
    if (!resuming) csv << "step,loss,lr,grad_norm,aux_loss\n";

    StepMetrics last;
    while (trainer.current_step() < cfg.total_steps) {
        last = trainer.step();
        csv << last.step << "," << last.loss << "," << last.lr << "," << last.grad_norm << ","
            << last.aux << "\n";
        if (cfg.checkpoint_every > 0 && (last.step + 1) % cfg.checkpoint_every == 0) {
            TrainState st = trainer.snapshot_state();
            save_checkpoint(out_dir + "/step-" + std::to_string(st.step), sys, &st);
        }
        if (stop_early && stop_early(last)) break;
    }
    TrainState st = trainer.snapshot_state();
    save_checkpoint(out_dir + "/final", sys, &st);
    return last;
}

// ---- inference -------------------------------------------------------------------------

std::string generate_answer(const System<float> & sys, const MediaPool & pool,
                            const PreparedSample & sample, int assistant_index, int max_new,
                            const RunOptions & opts) {
    // context = everything up to and including the target assistant role marker
    int seen = -1;
    size_t cut = 0;
    for (size_t i = 0; i < sample.tok.ids.size(); ++i) {
        if (sample.tok.ids[i] == ByteTokenizer::RoleAssistant) {
            ++seen;
            if (seen == assistant_index) {
                cut = i + 1;
                break;
            }
        }
    }
    if (seen != assistant_index) throw input_error("assistant turn index out of range");

    std::vector<int> ids(sample.tok.ids.begin(), sample.tok.ids.begin() + static_cast<long>(cut));
    std::vector<uint8_t> mask(ids.size(), 0);
    std::vector<MediaSlot> slots;
    for (const auto & s : sample.tok.media_slots)
        if (s.position < static_cast<int>(cut)) slots.push_back(s);

    std::vector<int> generated;
    for (int i = 0; i < max_new; ++i) {
        ComposedSequence seq = compose_sequence(ids, mask, slots, sample.media, pool, sys);
        MatX<float> logits = sys.lm->forward(seq.emb, opts);
        int best = 0;
        float best_v = logits(logits.rows() - 1, 0);
        for (int v = 1; v < sys.cfg.model.vocab_size; ++v)
            if (logits(logits.rows() - 1, v) > best_v) {
                best_v = logits(logits.rows() - 1, v);
                best = v;
            }
        if (best == ByteTokenizer::Eot) break;
        generated.push_back(best);
        ids.push_back(best);
        mask.push_back(0);
    }
    return sys.tokenizer.decode(generated);
}

double evaluate_loss(const System<float> & sys, const MediaPool & pool,
                     const std::vector<const PreparedSample *> & samples, const RunOptions & opts) {
    double total = 0;
    long n = 0;
    for (const PreparedSample * s : samples) {
        ComposedSequence seq =
            compose_sequence(s->tok.ids, s->tok.loss_mask, s->tok.media_slots, s->media, pool, sys);
        MatX<float> logits = sys.lm->forward(seq.emb, opts);
        MaskedCE<float> ce =
            masked_cross_entropy<float>(logits, seq.target_ids, seq.loss_mask, false);
        total += static_cast<double>(ce.loss) * static_cast<double>(ce.n_masked);
        n += ce.n_masked;
    }
    if (n == 0) throw input_error("evaluate_loss: no masked tokens in the set");
    return total / static_cast<double>(n);
}

} // namespace moekit
