#pragma once

#include <vector>

#include "tandem/config.hpp"
#include "tandem/model.hpp"
#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"
#include "tandem/vocab.hpp"

namespace tandem {

// Decoder-only causal attention baseline.  It reuses the same embedding /
// head / format stack as the recurrent model so the only architectural
// variable in the efficiency comparison is the sequence mixer; parameter
// counts are matched within tolerance at construction.  Inference-only:
// the baseline exists to measure the linear-vs-quadratic decode trend.

struct AttnConfig {
    int d_model = 256;
    int n_layers = 6;
    int n_heads = 8;
    int ffn_mult = 2;

    int head_dim() const { return d_model / n_heads; }
    size_t mixer_params() const {
        // per layer: QKVO + gated-silu MLP + two norms
        return size_t(n_layers) *
               (4 * size_t(d_model) * d_model +
                2 * size_t(ffn_mult) * d_model * d_model + 2 * size_t(d_model));
    }
};

// Picks the layer count whose total best matches the recurrent model's
// base parameter count (embeddings + heads + mixer + final norm on both
// sides), and enforces the 5% match tolerance.
inline AttnConfig matched_attn_config(const ModelConfig& ssm_cfg, size_t ssm_base_params,
                                      double tolerance = 0.05) {
    AttnConfig ac;
    ac.d_model = ssm_cfg.d_model;
    size_t shared = 0;  // embeddings + heads, identical on both sides
    shared += size_t(ssm_cfg.text_vocab_size + ssm_cfg.image_vocab_size +
                     ssm_cfg.special_token_count) *
              ssm_cfg.d_model;
    shared += size_t(ssm_cfg.text_vocab_size + 1 + ssm_cfg.image_vocab_size + 1) *
              ssm_cfg.d_model;
    size_t per_layer = 4 * size_t(ac.d_model) * ac.d_model +
                       2 * size_t(ac.ffn_mult) * ac.d_model * ac.d_model +
                       2 * size_t(ac.d_model);
    check(ssm_base_params > shared + size_t(ac.d_model), "ssm base count too small");
    size_t budget = ssm_base_params - shared - size_t(ac.d_model);
    ac.n_layers = int((budget + per_layer / 2) / per_layer);
    check(ac.n_layers >= 1, "matched attention would have zero layers");

    size_t attn_total = shared + ac.mixer_params() + size_t(ac.d_model);
    double diff = std::abs(double(attn_total) - double(ssm_base_params)) /
                  double(ssm_base_params);
    check(diff <= tolerance, "attention baseline param mismatch ", diff * 100,
          "% exceeds ", tolerance * 100, "%");
    return ac;
}

template <typename T>
struct KvCache {
    int n_layers = 0, d_model = 0;
    std::vector<std::vector<T>> k, v;  // per layer, [len x d_model]
    int len = 0;

    void init(int layers, int d) {
        n_layers = layers;
        d_model = d;
        k.assign(size_t(layers), {});
        v.assign(size_t(layers), {});
        len = 0;
    }
    // audited size: exactly linear in decoded length
    size_t byte_size() const {
        return size_t(2) * n_layers * len * d_model * sizeof(T);
    }
    static size_t predicted_bytes(int layers, int d, int length) {
        return size_t(2) * layers * length * d * sizeof(T);
    }
};

template <typename T>
struct AttnLayer {
    int d_model = 0, n_heads = 0, head_dim = 0, d_ff = 0;
    Vec<T> norm1_w, norm2_w;
    Mat<T> wq, wk, wv, wo;  // d_model x d_model
    Mat<T> w1;              // d_ff x d_model
    Mat<T> w2;              // d_model x d_ff

    void init(const AttnConfig& cfg, Rng& rng) {
        d_model = cfg.d_model;
        n_heads = cfg.n_heads;
        head_dim = cfg.head_dim();
        d_ff = cfg.ffn_mult * cfg.d_model;
        double s = 1.0 / std::sqrt((double)d_model);
        norm1_w.resize(d_model);
        norm2_w.resize(d_model);
        for (auto& x : norm1_w.w) x = T(1);
        for (auto& x : norm2_w.w) x = T(1);
        for (Mat<T>* m : {&wq, &wk, &wv, &wo}) {
            m->resize(d_model, d_model);
            m->fill_normal(rng, s);
        }
        w1.resize(d_ff, d_model);
        w1.fill_normal(rng, s);
        w2.resize(d_model, d_ff);
        w2.fill_normal(rng, 1.0 / std::sqrt((double)d_ff));
    }

    static void rms(const T* x, const T* w, int n, T* out) {
        double ms = 0;
        for (int i = 0; i < n; i++) ms += double(x[i]) * x[i];
        T rinv = T(1.0 / std::sqrt(ms / n + RMS_EPS));
        for (int i = 0; i < n; i++) out[i] = x[i] * rinv * w[i];
    }

    // One decode step; appends this position's k/v to the cache.
    void step(std::vector<T>& kc, std::vector<T>& vc, int len_before, T* x) const {
        std::vector<T> xn(static_cast<size_t>(d_model)), q(static_cast<size_t>(d_model)), kv(static_cast<size_t>(d_model));
        rms(x, norm1_w.w.data(), d_model, xn.data());
        matvec(q.data(), wq.w.data(), xn.data(), d_model, d_model);
        kc.resize(size_t(len_before + 1) * d_model);
        vc.resize(size_t(len_before + 1) * d_model);
        matvec(kc.data() + size_t(len_before) * d_model, wk.w.data(), xn.data(), d_model,
               d_model);
        matvec(vc.data() + size_t(len_before) * d_model, wv.w.data(), xn.data(), d_model,
               d_model);

        int len = len_before + 1;
        std::vector<T> ctx(size_t(d_model), T(0));
        std::vector<T> att(static_cast<size_t>(len));
        T scale_qk = T(1.0 / std::sqrt((double)head_dim));
        for (int h = 0; h < n_heads; h++) {
            const T* qh = q.data() + size_t(h) * head_dim;
            T mx = -std::numeric_limits<T>::infinity();
            for (int t = 0; t < len; t++) {
                att[size_t(t)] = scale_qk *
                                 dot(qh, kc.data() + size_t(t) * d_model + size_t(h) * head_dim,
                                     head_dim);
                mx = std::max(mx, att[size_t(t)]);
            }
            T z = 0;
            for (int t = 0; t < len; t++) {
                att[size_t(t)] = std::exp(att[size_t(t)] - mx);
                z += att[size_t(t)];
            }
            T* ch = ctx.data() + size_t(h) * head_dim;
            for (int t = 0; t < len; t++)
                axpy(ch, att[size_t(t)] / z,
                     vc.data() + size_t(t) * d_model + size_t(h) * head_dim, head_dim);
        }
        matvec(kv.data(), wo.w.data(), ctx.data(), d_model, d_model);
        axpy(x, T(1), kv.data(), d_model);

        // MLP
        rms(x, norm2_w.w.data(), d_model, xn.data());
        std::vector<T> hid(static_cast<size_t>(d_ff));
        matvec(hid.data(), w1.w.data(), xn.data(), d_ff, d_model);
        for (auto& hv : hid) hv = silu(hv);
        matvec(kv.data(), w2.w.data(), hid.data(), d_model, d_ff);
        axpy(x, T(1), kv.data(), d_model);
    }
};

template <typename T>
struct AttnModel {
    AttnConfig cfg;
    ModelConfig vocab_cfg;
    HeadSet<T> heads;
    std::vector<AttnLayer<T>> layers;
    Vec<T> final_norm_w;

    void init(const AttnConfig& ac, const ModelConfig& mc, uint64_t seed) {
        cfg = ac;
        vocab_cfg = mc;
        Rng rng(seed);
        Rng r_heads = rng.fork(1), r_layers = rng.fork(2);
        heads.init(mc, false, r_heads);
        layers.resize(size_t(ac.n_layers));
        for (auto& l : layers) {
            Rng rl = r_layers.fork(uint64_t(&l - layers.data()));
            l.init(ac, rl);
        }
        final_norm_w.resize(ac.d_model);
        for (auto& v : final_norm_w.w) v = T(1);
    }

    KvCache<T> make_cache() const {
        KvCache<T> c;
        c.init(cfg.n_layers, cfg.d_model);
        return c;
    }

    // sinusoidal position signal added at the input
    void pos_embed(T* x, int pos) const {
        for (int i = 0; i < cfg.d_model / 2; i++) {
            double f = pos * std::exp(-std::log(10000.0) * 2.0 * i / cfg.d_model);
            x[2 * i] += T(std::sin(f));
            x[2 * i + 1] += T(std::cos(f));
        }
    }

    // One token in, one hidden state out; cache grows by one per layer.
    void step(KvCache<T>& cache, const T* emb, T* hidden) const {
        std::vector<T> x(emb, emb + cfg.d_model);
        pos_embed(x.data(), cache.len);
        for (int i = 0; i < cfg.n_layers; i++)
            layers[size_t(i)].step(cache.k[size_t(i)], cache.v[size_t(i)], cache.len,
                                   x.data());
        cache.len++;
        AttnLayer<T>::rms(x.data(), final_norm_w.w.data(), cfg.d_model, hidden);
    }

    // Full causal forward, used to cross-check the stepped path.
    void forward_parallel(const T* u, int L, T* hidden) const {
        KvCache<T> cache = make_cache();
        for (int t = 0; t < L; t++)
            step(cache, u + size_t(t) * cfg.d_model, hidden + size_t(t) * cfg.d_model);
    }

    // Materialized O(L^2) attention, implemented independently of step()
    // for the equivalence test.
    void forward_quadratic(const T* u, int L, T* hidden) const {
        int D = cfg.d_model;
        std::vector<T> x(u, u + size_t(L) * D);
        for (int t = 0; t < L; t++) pos_embed(x.data() + size_t(t) * D, t);
        std::vector<T> xn(size_t(L) * D), q(size_t(L) * D), k(size_t(L) * D),
            v(size_t(L) * D), ctx(size_t(L) * D), tmp(size_t(L) * D);
        for (const auto& layer : layers) {
            for (int t = 0; t < L; t++)
                AttnLayer<T>::rms(x.data() + size_t(t) * D, layer.norm1_w.w.data(), D,
                                  xn.data() + size_t(t) * D);
            gemm_nt(q.data(), xn.data(), layer.wq.w.data(), L, D, D);
            gemm_nt(k.data(), xn.data(), layer.wk.w.data(), L, D, D);
            gemm_nt(v.data(), xn.data(), layer.wv.w.data(), L, D, D);
            std::fill(ctx.begin(), ctx.end(), T(0));
            T scale_qk = T(1.0 / std::sqrt((double)layer.head_dim));
            std::vector<T> att(static_cast<size_t>(L));
            for (int h = 0; h < layer.n_heads; h++) {
                int off = h * layer.head_dim;
                for (int t = 0; t < L; t++) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int s = 0; s <= t; s++) {
                        att[size_t(s)] = scale_qk * dot(q.data() + size_t(t) * D + off,
                                                        k.data() + size_t(s) * D + off,
                                                        layer.head_dim);
                        mx = std::max(mx, att[size_t(s)]);
                    }
                    T z = 0;
                    for (int s = 0; s <= t; s++) {
                        att[size_t(s)] = std::exp(att[size_t(s)] - mx);
                        z += att[size_t(s)];
                    }
                    for (int s = 0; s <= t; s++)
                        axpy(ctx.data() + size_t(t) * D + off, att[size_t(s)] / z,
                             v.data() + size_t(s) * D + off, layer.head_dim);
                }
            }
            gemm_nt(tmp.data(), ctx.data(), layer.wo.w.data(), L, D, D);
            axpy(x.data(), T(1), tmp.data(), L * D);

            for (int t = 0; t < L; t++)
                AttnLayer<T>::rms(x.data() + size_t(t) * D, layer.norm2_w.w.data(), D,
                                  xn.data() + size_t(t) * D);
            std::vector<T> hid(size_t(L) * layer.d_ff);
            gemm_nt(hid.data(), xn.data(), layer.w1.w.data(), L, D, layer.d_ff);
            for (auto& hv : hid) hv = silu(hv);
            gemm_nt(tmp.data(), hid.data(), layer.w2.w.data(), L, layer.d_ff, D);
            axpy(x.data(), T(1), tmp.data(), L * D);
        }
        for (int t = 0; t < L; t++)
            AttnLayer<T>::rms(x.data() + size_t(t) * D, final_norm_w.w.data(), D,
                              hidden + size_t(t) * D);
    }

    size_t base_param_count() {
        size_t n = 0;
        n += heads.embed_text.size() + heads.embed_image.size() +
             heads.embed_special.size();
        n += heads.text_head.size() + heads.image_head.size();
        for (auto& l : layers)
            n += l.norm1_w.size() + l.norm2_w.size() + l.wq.size() + l.wk.size() +
                 l.wv.size() + l.wo.size() + l.w1.size() + l.w2.size();
        n += final_norm_w.size();
        return n;
    }
};

}  // namespace tandem
