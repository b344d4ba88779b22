#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "tandem/checkpoint.hpp"
#include "tandem/config.hpp"
#include "tandem/model.hpp"
#include "tandem/sequence.hpp"
#include "tandem/toy.hpp"
#include "tandem/vocab.hpp"

#include "json.hpp"

namespace tandem {

// ---- loss ----------------------------------------------------------------

// Softmax cross entropy for one position.  Returns the loss; writes
// dlogits = softmax - onehot (unscaled).
template <typename T>
double cross_entropy(const T* logits, int n, int target, T* dlogits) {
    check(target >= 0 && target < n, "target out of range");
    T mx = logits[0];
    for (int i = 1; i < n; i++) mx = std::max(mx, logits[i]);
    double z = 0;
    for (int i = 0; i < n; i++) z += std::exp(double(logits[i]) - mx);
    double loss = std::log(z) - (double(logits[size_t(target)]) - mx);
    if (dlogits) {
        for (int i = 0; i < n; i++)
            dlogits[i] = T(std::exp(double(logits[i]) - mx) / z);
        dlogits[size_t(target)] -= T(1);
    }
    return loss;
}

// ---- schedule --------------------------------------------------------------

// Linear warmup to the peak, then cosine to zero.
inline double cosine_warmup_lr(int step, const StageConfig& stage) {
    check(step >= 0 && step <= stage.total_steps, "step ", step, " out of range [0, ",
          stage.total_steps, "]");
    if (step < stage.warmup_steps)
        return stage.peak_lr * double(step) / stage.warmup_steps;
    if (stage.total_steps == stage.warmup_steps) return step == 0 ? stage.peak_lr : 0.0;
    double progress =
        double(step - stage.warmup_steps) / double(stage.total_steps - stage.warmup_steps);
    return stage.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---- gradient clipping -------------------------------------------------------

// Global L2 clip over the given tensors.  Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::vector<TensorRef<T>>& params, double max_norm = 1.0) {
    double sq = 0;
    for (auto& t : params) {
        check(all_finite(t.g, t.count), "non-finite gradient in '", t.name, "'");
        for (size_t i = 0; i < t.count; i++) sq += double(t.g[i]) * t.g[i];
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        T s = T(max_norm / norm);
        for (auto& t : params) scale(t.g, s, int(t.count));
    }
    return norm;
}

// ---- optimizer ----------------------------------------------------------------

// Adam with decoupled weight decay.  Moments exist only for the tensors
// attached (the stage's trainable set); frozen parameters have no slots.
template <typename T>
struct AdamW {
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.0;
    int64_t t = 0;

    struct Slot {
        T* w;
        T* g;
        size_t n;
        std::vector<T> m, v;
    };
    std::vector<Slot> slots;

    void attach(const std::vector<TensorRef<T>>& params) {
        slots.clear();
        t = 0;
        for (const auto& p : params) {
            Slot s;
            s.w = p.w;
            s.g = p.g;
            s.n = p.count;
            s.m.assign(p.count, T(0));
            s.v.assign(p.count, T(0));
            slots.push_back(std::move(s));
        }
    }

    void step(double lr) {
        t++;
        double bc1 = 1.0 - std::pow(beta1, double(t));
        double bc2 = 1.0 - std::pow(beta2, double(t));
        for (auto& s : slots) {
            for (size_t i = 0; i < s.n; i++) {
                double g = s.g[i];
                double m = beta1 * s.m[i] + (1 - beta1) * g;
                double v = beta2 * s.v[i] + (1 - beta2) * g * g;
                s.m[i] = T(m);
                s.v[i] = T(v);
                double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
                s.w[i] = T(double(s.w[i]) - lr * (update + weight_decay * double(s.w[i])));
            }
        }
    }
};

// ---- freeze groups --------------------------------------------------------------

inline std::vector<std::string> trainable_groups(StageId id) {
    switch (id) {
        case StageId::Stage1MMU: return {"visual_projector", "mmu_lora"};
        case StageId::Stage1T2I: return {"t2i_lora", "image_head"};
        case StageId::Stage2:
            return {"core_mamba", "mmu_lora",  "t2i_lora", "visual_projector",
                    "image_head", "text_head", "embeddings"};
    }
    fail("bad stage id");
}

inline std::vector<std::string> all_groups() {
    return {"core_mamba", "mmu_lora",   "t2i_lora",  "visual_projector",
            "image_head", "text_head",  "embeddings", "frozen_vision_encoder"};
}

template <typename T>
std::vector<TensorRef<T>> select_groups(Model<T>& model,
                                        const std::vector<std::string>& groups) {
    std::vector<TensorRef<T>> out;
    for (auto& t : model.tensors())
        for (const auto& g : groups)
            if (t.group == g) {
                out.push_back(t);
                break;
            }
    return out;
}

// ---- data preparation --------------------------------------------------------------

template <typename T>
struct PreparedExample {
    DataRecord rec;
    std::vector<T> feats;  // MMU only: frozen encoder features (constant)
    TrainingExample<T> ex;
};

template <typename T>
PreparedExample<T> prepare_example(const Model<T>& model, const TextTokenizer& tok,
                                   const Codebook& codebook, const DataRecord& rec) {
    PreparedExample<T> pe;
    pe.rec = rec;
    std::vector<int> caption = tok.encode(rec.caption);
    if (rec.task == "mmu") {
        pe.feats = model.vision.encode(rec.grid);
        std::vector<T> prefix(size_t(GRID_CELLS) * model.cfg.d_model);
        model.projector.apply(pe.feats.data(), GRID_CELLS, prefix.data());
        pe.ex = build_mmu_sequence(prefix, model.cfg.d_model, tok.encode(MMU_QUESTION),
                                   caption);
    } else {
        pe.ex = build_t2i_sequence<T>(caption, codebook.tokenize(rec.grid),
                                   model.cfg.max_image_tokens);
    }
    return pe;
}

// ---- the training engine --------------------------------------------------------------

struct StepMetrics {
    int step = 0;
    std::string stage;
    double lr = 0, mmu_loss = 0, t2i_loss = 0, grad_norm = 0, wall_ms = 0;
};

inline std::string metrics_to_json(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["stage"] = m.stage;
    j["lr"] = m.lr;
    j["mmu_loss"] = m.mmu_loss;
    j["t2i_loss"] = m.t2i_loss;
    j["grad_norm"] = m.grad_norm;
    j["wall_ms"] = m.wall_ms;
    return j.dump();
}

template <typename T>
struct Trainer {
    Model<T>& model;
    TextTokenizer tok;
    Codebook codebook;
    std::vector<PreparedExample<T>> mmu_pool, t2i_pool;
    AdamW<T> opt;
    std::vector<TensorRef<T>> trainable;
    uint64_t empty_supervision_warnings = 0;

    typename Model<T>::FwdCache cache;
    std::vector<T> dhidden, dprefix, sup_hidden, sup_logits, sup_dlogits, sup_dhidden;

    Trainer(Model<T>& m, TextTokenizer t) : model(m), tok(std::move(t)),
        codebook(m.cfg.image_vocab_size) {}

    void load_pools(const std::vector<DataRecord>& records) {
        mmu_pool.clear();
        t2i_pool.clear();
        for (const auto& r : records) {
            auto pe = prepare_example(model, tok, codebook, r);
            (r.task == "mmu" ? mmu_pool : t2i_pool).push_back(std::move(pe));
        }
    }

    // Supervised positions in the example's target view.
    static int supervised_count(const TrainingExample<T>& ex) {
        int c = 0;
        for (size_t i = 1; i < ex.stream.loss_mask.size(); i++)
            c += ex.stream.loss_mask[i] ? 1 : 0;
        return c;
    }

    // Forward + backward for one example.  Gradients are scaled by
    // inv_count (the task batch's 1/supervised-position-count) and
    // accumulated into the model.  Returns the summed (unscaled) CE.
    double example_pass(PreparedExample<T>& pe, double inv_count) {
        if (pe.rec.task == "mmu") {
            // refresh the projected features so projector updates flow in
            model.projector.apply(pe.feats.data(), GRID_CELLS,
                                  pe.ex.continuous_prefix.data());
        }
        model.forward_train(pe.ex, cache);
        auto view = next_token_targets(pe.ex.stream);
        int L = cache.L, d = model.cfg.d_model;
        dhidden.assign(size_t(L) * d, T(0));
        // Group supervised positions by the head that scores them, then run
        // each head once over the whole group: one gemm each for logits,
        // weight gradient, and the hidden-state gradient, instead of walking
        // the head matrix per position.
        struct HeadBatch {
            Mat<T>* head;
            std::vector<int> ts, rows;
        };
        std::vector<HeadBatch> by_head;
        for (int t = 0; t < L; t++) {
            if (!view.mask[size_t(t)]) continue;
            auto lh = model.heads.loss_head(view.targets[size_t(t)]);
            HeadBatch* hb = nullptr;
            for (auto& b : by_head)
                if (b.head == lh.head) { hb = &b; break; }
            if (!hb) {
                by_head.push_back({lh.head, {}, {}});
                hb = &by_head.back();
            }
            hb->ts.push_back(t);
            hb->rows.push_back(lh.target_row);
        }
        double sum_ce = 0;
        for (auto& b : by_head) {
            int S = int(b.ts.size()), R = b.head->rows;
            sup_hidden.resize(size_t(S) * d);
            for (int s = 0; s < S; s++)
                std::copy_n(cache.hidden.data() + size_t(b.ts[size_t(s)]) * d, d,
                            sup_hidden.data() + size_t(s) * d);
            sup_logits.resize(size_t(S) * R);
            gemm_nt(sup_logits.data(), sup_hidden.data(), b.head->w.data(), S, d, R);
            sup_dlogits.assign(size_t(S) * R, T(0));
            for (int s = 0; s < S; s++) {
                sum_ce += cross_entropy(sup_logits.data() + size_t(s) * R, R,
                                        b.rows[size_t(s)],
                                        sup_dlogits.data() + size_t(s) * R);
                scale(sup_dlogits.data() + size_t(s) * R, T(inv_count), R);
            }
            gemm_tn(b.head->g.data(), sup_dlogits.data(), sup_hidden.data(), S, R, d);
            sup_dhidden.assign(size_t(S) * d, T(0));
            gemm_nn(sup_dhidden.data(), sup_dlogits.data(), b.head->w.data(), S, R, d);
            for (int s = 0; s < S; s++)
                axpy(dhidden.data() + size_t(b.ts[size_t(s)]) * d, T(1),
                     sup_dhidden.data() + size_t(s) * d, d);
        }
        model.backward_train(pe.ex, cache, dhidden.data(),
                             pe.rec.task == "mmu" ? &dprefix : nullptr);
        if (pe.rec.task == "mmu") {
            // dhidden already carries inv_count, so dprefix is final
            model.projector.backward(pe.feats.data(), GRID_CELLS, dprefix.data(), nullptr);
        }
        return sum_ce;
    }

    struct StepLosses {
        double mmu = 0, t2i = 0;
    };

    // One optimizer-step worth of work: both task sub-batches forward and
    // backward into one summed gradient.  Each task's loss is the mean
    // over its own supervised positions; the two means are then summed.
    StepLosses unified_step(const std::vector<int>& mmu_idx,
                            const std::vector<int>& t2i_idx) {
        model.zero_grads();
        StepLosses out;
        for (int phase = 0; phase < 2; phase++) {
            const auto& idx = phase == 0 ? mmu_idx : t2i_idx;
            auto& pool = phase == 0 ? mmu_pool : t2i_pool;
            if (idx.empty()) continue;
            int count = 0;
            for (int i : idx) count += supervised_count(pool[size_t(i)].ex);
            if (count == 0) {
                empty_supervision_warnings++;
                continue;
            }
            double sum = 0;
            for (int i : idx) sum += example_pass(pool[size_t(i)], 1.0 / count);
            (phase == 0 ? out.mmu : out.t2i) = sum / count;
        }
        return out;
    }

    // Uniform with-replacement batch sampling; order is part of the
    // deterministic contract.
    std::vector<int> sample_batch(Rng& rng, size_t pool_size, int n) {
        std::vector<int> idx;
        if (pool_size == 0 || n == 0) return idx;
        for (int i = 0; i < n; i++)
            idx.push_back(int(rng.uniform_int(0, int(pool_size) - 1)));
        return idx;
    }

    // Full stage: freeze bookkeeping, schedule, metrics, final checkpoint.
    std::vector<StepMetrics> run_stage(const StageConfig& stage, uint64_t seed,
                                       const std::string& ckpt_path,
                                       const std::string& config_text,
                                       int log_every = 50,
                                       std::vector<std::string>* log_lines = nullptr) {
        stage.validate();
        if (stage.batch_mmu > 0)
            check(!mmu_pool.empty(), stage_name(stage.id), " needs mmu examples");
        if (stage.batch_t2i > 0)
            check(!t2i_pool.empty(), stage_name(stage.id), " needs t2i examples");

        trainable = select_groups(model, trainable_groups(stage.id));
        check(!trainable.empty(), stage_name(stage.id), ": nothing to train");
        opt.attach(trainable);

        // record frozen-group hashes so the freeze contract is enforced,
        // not just promised
        std::vector<std::pair<std::string, uint64_t>> frozen_before;
        auto trainable_set = trainable_groups(stage.id);
        for (const auto& g : all_groups()) {
            bool is_trainable = false;
            for (const auto& tg : trainable_set) is_trainable |= (g == tg);
            if (!is_trainable) frozen_before.push_back({g, model.group_hash(g)});
        }

        Rng rng(seed);
        std::vector<StepMetrics> metrics;
        std::string last_ckpt;
        for (int step = 0; step < stage.total_steps; step++) {
            auto t0 = std::chrono::steady_clock::now();
            auto mmu_idx = sample_batch(rng, mmu_pool.size(), stage.batch_mmu);
            auto t2i_idx = sample_batch(rng, t2i_pool.size(), stage.batch_t2i);
            StepLosses losses = unified_step(mmu_idx, t2i_idx);
            double total = losses.mmu + losses.t2i;
            if (!std::isfinite(total))
                fail(stage_name(stage.id), " step ", step, ": non-finite loss; ",
                     "last good checkpoint: ", last_ckpt.empty() ? "none" : last_ckpt);
            double norm = clip_grad_norm(trainable, 1.0);
            double lr = cosine_warmup_lr(step, stage);
            opt.step(lr);

            auto t1 = std::chrono::steady_clock::now();
            StepMetrics m;
            m.step = step;
            m.stage = stage_name(stage.id);
            m.lr = lr;
            m.mmu_loss = losses.mmu;
            m.t2i_loss = losses.t2i;
            m.grad_norm = norm;
            m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            if (step % log_every == 0 || step == stage.total_steps - 1) {
                metrics.push_back(m);
                if (log_lines) log_lines->push_back(metrics_to_json(m));
            }
        }

        for (auto& [g, before] : frozen_before)
            check(model.group_hash(g) == before, stage_name(stage.id),
                  ": frozen group '", g, "' changed during the stage");

        if (!ckpt_path.empty()) {
            if constexpr (std::is_same_v<T, float>) {
                save_checkpoint(store_from_model(model, config_text), ckpt_path);
            } else {
                fail("checkpointing is defined for the f32 model");
            }
        }
        return metrics;
    }
};

}  // namespace tandem
