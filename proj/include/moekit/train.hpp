#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "moekit/checkpoint.hpp"
#include "moekit/image.hpp"
#include "moekit/system.hpp"
#include "moekit/tokenizer.hpp"
#include "moekit/trace.hpp"

namespace moekit {

// ---- schedule -----------------------------------------------------------------

/// Linear warmup to lr_peak, then cosine decay to zero at total_steps.
double lr_at(long step, long total_steps, long warmup_steps, double lr_peak);

long warmup_steps_for(double warmup_frac, long steps_per_epoch); // round, min 1

// ---- config -------------------------------------------------------------------

struct TrainConfig {
    double lr_peak = 1e-3; // toy default; published-scale presets below
    double warmup_frac = 0.01;
    double beta1 = 0.9, beta2 = 0.95;
    double weight_decay = 0.0;
    int batch_size = 8;
    long total_steps = 2000;
    uint64_t seed = 0;
    bool freeze_visual_encoders = true;
    double grad_clip = 1.0;
    long checkpoint_every = 0; // 0 = final only
    long steps_per_epoch_override = 0;

    static TrainConfig paper_moe() { // documentation-fidelity values
        TrainConfig c;
        c.lr_peak = 5e-6;
        c.batch_size = 256;
        return c;
    }
    static TrainConfig paper_dense() {
        TrainConfig c;
        c.lr_peak = 2e-5;
        c.batch_size = 256;
        return c;
    }

    void validate() const {
        if (!(warmup_frac > 0) || !(warmup_frac < 1)) throw config_error("need 0 < warmup_frac < 1");
        if (!(lr_peak > 0)) throw config_error("need lr_peak > 0");
        if (batch_size < 1 || total_steps < 1) throw config_error("invalid batch or step count");
    }
};

struct MixerSource {
    std::string name;
    std::string path;
    double weight = 1.0;
};

struct MixerConfig {
    std::vector<MixerSource> sources;
    void validate() const {
        for (const auto & s : sources)
            if (!(s.weight > 0)) throw config_error("source weight must be > 0: " + s.name);
    }
};

/// Flat "key = value" config file covering TrainConfig and mixer sources.
struct TrainFileConfig {
    TrainConfig train;
    MixerConfig mixer;
    std::string preset = "moe-nano";
};
TrainFileConfig parse_train_config(const std::string & path);
std::map<std::string, std::string> parse_flat_kv(const std::string & text);

// ---- dataset mixing --------------------------------------------------------------

/// Deterministic position-addressable sample stream. With unit weights every
/// epoch is a seeded shuffle of the plain concatenation (draws proportional
/// to source size); with custom weights draws are independent categorical
/// samples with p proportional to weight x size.
class SampleStream {
  public:
    SampleStream(std::vector<long> sizes, std::vector<double> weights, uint64_t seed);

    std::pair<int, long> at(long position) const; // (source, index)
    long epoch_length() const { return epoch_len_; }
    bool weighted() const { return weighted_; }

  private:
    std::vector<long> sizes_;
    std::vector<double> weights_;
    std::vector<double> cum_; // cumulative weight*size
    uint64_t seed_;
    long epoch_len_ = 0;
    bool weighted_ = false;
    mutable long cached_epoch_ = -1;
    mutable std::vector<std::pair<int, long>> cached_perm_;
};

// ---- media + sequence composition -------------------------------------------------

struct PreparedMedia {
    PartitionPlan plan;
    // fused encoder grids: [0] global, then one per Real slot in row-major order
    std::vector<EncoderOutput<float>> fused;
};

/// Caches frozen-encoder outputs per media path; safe to reuse across steps
/// because only the projection behind them trains.
class MediaPool {
  public:
    explicit MediaPool(std::string root = "") : root_(std::move(root)) {}
    int get_or_encode(const std::string & path, const System<float> & sys);
    int add_image(const std::string & key, const Image & img, const System<float> & sys);
    const PreparedMedia & at(int idx) const { return media_[static_cast<size_t>(idx)]; }
    size_t size() const { return media_.size(); }

  private:
    std::string root_;
    std::vector<PreparedMedia> media_;
    std::map<std::string, int> by_path_;
};

struct PreparedSample {
    TokenizedSample tok;
    std::vector<int> media; // media pool ids, aligned with record media order
    std::string domain;
    std::string id;
};

PreparedSample prepare_sample(const ConversationRecord & rec, MediaPool & pool,
                              const System<float> & sys);

struct ComposedPos {
    enum class Kind { Text, Skip, Visual };
    Kind kind = Kind::Text;
    int token_id = -1;  // Text
    int media_ref = -1; // Visual: index into sample media list
    int block = -1;     // Visual: 0 global, 1.. sub blocks
    int row = -1;
};

struct ComposedSequence {
    MatX<float> emb;
    std::vector<int> target_ids;    // -1 on non-text positions
    std::vector<uint8_t> loss_mask;
    std::vector<uint8_t> is_vision; // visual block tokens and skip tokens
    std::vector<ComposedPos> pos;
};

/// Expands Media placeholders into projected visual sequences (projection
/// runs here, with live weights) and looks up text embeddings.
ComposedSequence compose_sequence(const std::vector<int> & ids,
                                  const std::vector<uint8_t> & loss_mask,
                                  const std::vector<MediaSlot> & slots,
                                  const std::vector<int> & media_ids, const MediaPool & pool,
                                  const System<float> & sys);

// ---- trainer -----------------------------------------------------------------------

struct StepMetrics {
    long step = 0;
    double loss = 0; // objective: masked CE + aux_loss_weight * aux
    double ce = 0;
    double aux = 0;
    double lr = 0;
    double grad_norm = 0;
    long masked_tokens = 0;
};

class Trainer {
  public:
    Trainer(System<float> & sys, TrainConfig cfg,
            std::vector<std::vector<PreparedSample>> sources, MediaPool & pool,
            std::vector<double> source_weights = {});

    StepMetrics step();
    long current_step() const { return step_; }
    long steps_per_epoch() const { return steps_per_epoch_; }
    long warmup_steps() const { return warmup_; }

    TrainState snapshot_state() const;
    void restore_state(const TrainState & st);

    const TrainConfig & config() const { return cfg_; }

  private:
    struct BatchItem {
        const PreparedSample * sample;
        ComposedSequence seq;
        Workspace<float> ws;
        MaskedCE<float> ce;
    };

    void scatter_embedding_grads(const BatchItem & item, const MatX<float> & demb);
    void apply_adamw(double lr, double & grad_norm_out);

    System<float> & sys_;
    TrainConfig cfg_;
    std::vector<std::vector<PreparedSample>> sources_;
    MediaPool & pool_;
    SampleStream stream_;
    std::vector<float> grad_;
    std::vector<float> adam_m_, adam_v_;
    long step_ = 0;
    long steps_per_epoch_ = 1;
    long warmup_ = 1;
};

/// Full loop: metrics CSV (step,loss,lr,grad_norm,aux_loss), periodic and
/// final checkpoints under out_dir, optional resume. Returns the last metrics.
StepMetrics run_training(System<float> & sys, TrainConfig cfg,
                         std::vector<std::vector<PreparedSample>> sources, MediaPool & pool,
                         const std::string & out_dir, const std::string & resume_from = "",
                         std::function<bool(const StepMetrics &)> stop_early = nullptr);

// ---- inference -----------------------------------------------------------------------

/// Greedy decode of assistant turn `assistant_index` (0-based among assistant
/// turns); the context is everything before it, teacher-forced.
std::string generate_answer(const System<float> & sys, const MediaPool & pool,
                            const PreparedSample & sample, int assistant_index, int max_new = 128,
                            const RunOptions & opts = {});

/// Mean masked CE of a sample set under the current weights.
double evaluate_loss(const System<float> & sys, const MediaPool & pool,
                     const std::vector<const PreparedSample *> & samples,
                     const RunOptions & opts = {});

/// Token trace tags for a composed sequence (vision for visual block + skip
/// positions, language otherwise).
std::vector<TraceTag> sequence_tags(const ComposedSequence & seq, const std::string & domain);

} // namespace moekit
