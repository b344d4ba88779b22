#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tandem/config.hpp"
#include "tandem/lora.hpp"
#include "tandem/sequence.hpp"
#include "tandem/ssm.hpp"
#include "tandem/tensor.hpp"
#include "tandem/toy.hpp"
#include "tandem/vocab.hpp"

namespace tandem {

// Named view over one parameter tensor plus the group it freezes/thaws
// with.  Names are a stable format contract (checkpoints key on them).
template <typename T>
struct TensorRef {
    std::string name;
    std::string group;
    std::vector<int> dims;
    T* w = nullptr;
    T* g = nullptr;
    size_t count = 0;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    bool shared_vocab = false;

    HeadSet<T> heads;
    std::vector<SsmLayer<T>> layers;
    Vec<T> final_norm_w;
    FrozenVisionEncoder<T> vision;
    VisualProjector<T> projector;

    void init(const ModelConfig& c, bool shared, uint64_t seed) {
        cfg = c;
        cfg.validate();
        shared_vocab = shared;
        Rng rng(seed);
        Rng r_heads = rng.fork(1), r_layers = rng.fork(2), r_vis = rng.fork(3);
        heads.init(cfg, shared, r_heads);
        layers.resize(size_t(cfg.n_layers));
        for (int i = 0; i < cfg.n_layers; i++) {
            Rng rl = r_layers.fork(uint64_t(i));
            layers[size_t(i)].init(cfg, i, rl);
        }
        final_norm_w.resize(cfg.d_model);
        for (auto& v : final_norm_w.w) v = T(1);
        Rng r_enc = r_vis.fork(0), r_proj = r_vis.fork(1);
        vision.init(r_enc);
        projector.init(cfg.d_model, r_proj);
    }

    // ---- parameter registry ---------------------------------------------

    std::vector<TensorRef<T>> tensors() {
        std::vector<TensorRef<T>> out;
        auto add_m = [&](std::string name, std::string group, Mat<T>& m) {
            out.push_back({std::move(name), std::move(group), {m.rows, m.cols},
                           m.w.data(), m.g.data(), m.size()});
        };
        auto add_v = [&](std::string name, std::string group, Vec<T>& v) {
            out.push_back({std::move(name), std::move(group), {v.n},
                           v.w.data(), v.g.data(), v.size()});
        };
        for (int i = 0; i < cfg.n_layers; i++) {
            auto& L = layers[size_t(i)];
            std::string p = cat("layers.", i, ".");
            add_m(p + "w_in", "core_mamba", L.w_in);
            add_m(p + "conv_w", "core_mamba", L.conv_w);
            add_v(p + "a_log", "core_mamba", L.a_log);
            add_v(p + "dt_bias", "core_mamba", L.dt_bias);
            add_v(p + "d_skip", "core_mamba", L.d_skip);
            add_v(p + "norm_w", "core_mamba", L.norm_w);
            add_m(p + "w_out", "core_mamba", L.w_out);
            if (cfg.lora_rank > 0) {
                add_m(p + "lora.mmu.down", "mmu_lora", L.lora_mmu.down);
                add_m(p + "lora.mmu.up", "mmu_lora", L.lora_mmu.up);
                add_m(p + "lora.t2i.down", "t2i_lora", L.lora_t2i.down);
                add_m(p + "lora.t2i.up", "t2i_lora", L.lora_t2i.up);
            }
        }
        add_v("final_norm_w", "core_mamba", final_norm_w);
        add_m("embed.text", "embeddings", heads.embed_text);
        add_m("embed.image", "embeddings", heads.embed_image);
        add_m("embed.special", "embeddings", heads.embed_special);
        if (shared_vocab) {
            // the fused head fills the image_head group slot: it is the head
            // trained in stage-1 T2I when vocabularies are not decoupled
            add_m("head.fused", "image_head", heads.fused_head);
        } else {
            add_m("head.text", "text_head", heads.text_head);
            add_m("head.image", "image_head", heads.image_head);
        }
        add_m("vision.proj_w", "visual_projector", projector.w);
        add_v("vision.proj_b", "visual_projector", projector.b);
        add_m("vision.encoder", "frozen_vision_encoder", vision.table);
        return out;
    }

    size_t base_param_count() {
        // embeddings + heads + mixer stack; excludes adapters and the
        // vision stub, so the attention baseline is matched on the part
        // both architectures share in kind
        size_t n = 0;
        for (auto& t : tensors()) {
            if (t.group == "mmu_lora" || t.group == "t2i_lora" ||
                t.group == "visual_projector" || t.group == "frozen_vision_encoder")
                continue;
            n += t.count;
        }
        return n;
    }

    void zero_grads() {
        for (auto& t : tensors()) std::fill(t.g, t.g + t.count, T(0));
    }

    uint64_t group_hash(const std::string& group) {
        uint64_t h = 14695981039346656037ull;
        for (auto& t : tensors()) {
            if (t.group != group) continue;
            h = fnv1a64(t.name.data(), t.name.size(), h);
            h = fnv1a64(t.w, t.count * sizeof(T), h);
        }
        return h;
    }

    // ---- embedding of an example's input row ------------------------------

    // inputs = stream[0 .. L-2]; continuous positions take the example's
    // projected visual features instead of a table lookup.
    void embed_inputs(const TrainingExample<T>& ex, std::vector<T>& u, int& L_in) const {
        const auto& st = ex.stream;
        L_in = st.length() - 1;
        check(L_in >= 1, "stream too short");
        u.resize(size_t(L_in) * cfg.d_model);
        for (int t = 0; t < L_in; t++) {
            T* dst = u.data() + size_t(t) * cfg.d_model;
            if (ex.position_is_continuous(t)) {
                const T* src = ex.continuous_prefix.data() +
                               size_t(t - ex.continuous_start) * cfg.d_model;
                std::copy(src, src + cfg.d_model, dst);
            } else {
                const T* src = heads.embed(st.tokens[size_t(t)]);
                std::copy(src, src + cfg.d_model, dst);
            }
        }
    }

    // ---- stack forward (inference) ----------------------------------------

    // Chunked-parallel pass over embedded inputs; hidden receives the
    // post-final-norm states.  end_states, when given, receives per-layer
    // recurrent states for continuing with step().
    void forward_parallel(const T* u, int L, TaskRoute route, int chunk_len, T* hidden,
                          std::vector<LayerState<T>>* end_states = nullptr) const {
        std::vector<T> h(u, u + size_t(L) * cfg.d_model);
        std::vector<T> blk(size_t(L) * cfg.d_model);
        if (end_states) end_states->resize(layers.size());
        for (size_t i = 0; i < layers.size(); i++) {
            layers[i].forward_parallel(h.data(), L, route, chunk_len, blk.data(),
                                       end_states ? &(*end_states)[i] : nullptr);
            axpy(h.data(), T(1), blk.data(), L * cfg.d_model);
        }
        for (int t = 0; t < L; t++)
            final_norm(h.data() + size_t(t) * cfg.d_model, hidden + size_t(t) * cfg.d_model);
    }

    // One decode step over per-layer states.
    void step(std::vector<LayerState<T>>& states, const T* u, TaskRoute route,
              T* hidden) const {
        check(states.size() == layers.size(), "state count mismatch");
        std::vector<T> h(u, u + cfg.d_model);
        std::vector<T> blk(size_t(cfg.d_model));
        for (size_t i = 0; i < layers.size(); i++) {
            layers[i].step(states[i], h.data(), blk.data(), route);
            axpy(h.data(), T(1), blk.data(), cfg.d_model);
        }
        final_norm(h.data(), hidden);
    }

    std::vector<LayerState<T>> make_states() const {
        std::vector<LayerState<T>> st;
        st.reserve(layers.size());
        for (auto& l : layers) st.push_back(l.make_state());
        return st;
    }

    size_t state_bytes() const {
        size_t n = 0;
        for (auto& l : layers) n += l.make_state().byte_size();
        return n;
    }

    void final_norm(const T* h, T* out) const {
        double ms = 0;
        for (int i = 0; i < cfg.d_model; i++) ms += double(h[i]) * h[i];
        T rinv = T(1.0 / std::sqrt(ms / cfg.d_model + RMS_EPS));
        for (int i = 0; i < cfg.d_model; i++)
            out[i] = h[i] * rinv * final_norm_w.w[size_t(i)];
    }

    // ---- training forward/backward ----------------------------------------

    struct FwdCache {
        int L = 0;
        std::vector<T> u;                                // embedded inputs
        std::vector<std::vector<T>> h;                   // residual stream per layer boundary
        std::vector<typename SsmLayer<T>::Cache> layer;  // per-layer caches
        std::vector<T> rms_inv;                          // final norm
        std::vector<T> hidden;                           // post final norm
    };

    // hidden states for loss: cache.hidden is [L_in x d_model]
    void forward_train(const TrainingExample<T>& ex, FwdCache& cc) {
        embed_inputs(ex, cc.u, cc.L);
        int L = cc.L;
        cc.layer.resize(layers.size());
        cc.h.resize(layers.size() + 1);
        cc.h[0] = cc.u;
        std::vector<T> blk(size_t(L) * cfg.d_model);
        for (size_t i = 0; i < layers.size(); i++) {
            layers[i].forward_train(cc.h[i].data(), L, ex.route, cc.layer[i], blk.data());
            cc.h[i + 1] = cc.h[i];
            axpy(cc.h[i + 1].data(), T(1), blk.data(), L * cfg.d_model);
        }
        cc.rms_inv.resize(size_t(L));
        cc.hidden.resize(size_t(L) * cfg.d_model);
        const auto& hl = cc.h[layers.size()];
        for (int t = 0; t < L; t++) {
            const T* h = hl.data() + size_t(t) * cfg.d_model;
            double ms = 0;
            for (int i = 0; i < cfg.d_model; i++) ms += double(h[i]) * h[i];
            T rinv = T(1.0 / std::sqrt(ms / cfg.d_model + RMS_EPS));
            cc.rms_inv[size_t(t)] = rinv;
            for (int i = 0; i < cfg.d_model; i++)
                cc.hidden[size_t(t) * cfg.d_model + i] =
                    h[i] * rinv * final_norm_w.w[size_t(i)];
        }
    }

    // dhidden: [L x d_model] gradient at the post-final-norm states.
    // Accumulates parameter grads (including embedding rows) and, for MMU
    // examples, d(projected features) into dprefix (same shape as
    // ex.continuous_prefix) for the projector's backward.
    void backward_train(const TrainingExample<T>& ex, FwdCache& cc, const T* dhidden,
                        std::vector<T>* dprefix) {
        int L = cc.L;
        int D = cfg.d_model;
        const auto& hl = cc.h[layers.size()];
        std::vector<T> dh(size_t(L) * D);
        for (int t = 0; t < L; t++) {
            const T* h = hl.data() + size_t(t) * D;
            const T* dyn = dhidden + size_t(t) * D;
            T* dht = dh.data() + size_t(t) * D;
            T rinv = cc.rms_inv[size_t(t)];
            double sdot = 0;
            for (int i = 0; i < D; i++) {
                final_norm_w.g[size_t(i)] += dyn[i] * h[i] * rinv;
                sdot += double(dyn[i]) * final_norm_w.w[size_t(i)] * h[i];
            }
            T corr = T(sdot * rinv * rinv * rinv / D);
            for (int i = 0; i < D; i++)
                dht[i] = dyn[i] * final_norm_w.w[size_t(i)] * rinv - corr * h[i];
        }

        for (int i = int(layers.size()) - 1; i >= 0; i--) {
            // residual: dh flows both straight through and into the block
            layers[size_t(i)].backward_train(cc.h[size_t(i)].data(), cc.layer[size_t(i)],
                                             dh.data(), dh.data());
        }

        // dh is now d(loss)/d(embedded inputs)
        if (dprefix) dprefix->assign(ex.continuous_prefix.size(), T(0));
        for (int t = 0; t < L; t++) {
            const T* dut = dh.data() + size_t(t) * D;
            if (ex.position_is_continuous(t)) {
                if (dprefix)
                    axpy(dprefix->data() + size_t(t - ex.continuous_start) * D, T(1), dut, D);
            } else {
                axpy(heads.embed_grad(ex.stream.tokens[size_t(t)]), T(1), dut, D);
            }
        }
    }
};

}  // namespace tandem
