#pragma once

#include <vector>

#include "tandem/config.hpp"
#include "tandem/lora.hpp"
#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"
#include "tandem/util.hpp"

namespace tandem {

// Selective state-space block with scalar per-head decay.
//
//   raw  = W_in u (+ routed low-rank delta)        raw = [z | xBC | dt_raw]
//   xBC  = SiLU(causal_conv(xBC))                  x per head, B/C per group
//   dt   = softplus(dt_raw + dt_bias)              per head
//   a    = exp(-dt * exp(A_log))                   per head, 0 < a < 1
//   S_t  = a_t S_{t-1} + dt_t * x_t (outer) B_t    per head, P x N
//   y_t  = S_t C_t + D (.) x_t
//   out  = W_out * ( RMSNorm(y (.) SiLU(z)) (.) norm_w )
//
// Three routes through the same math: token-by-token stepping (decode),
// a chunked parallel pass (prefill), and a caching sequential pass with a
// hand-derived backward (training).  Equivalence of the three is part of
// the test suite's acceptance gate.

constexpr double RMS_EPS = 1e-5;

template <typename T>
struct LayerState {
    int conv_channels = 0, d_conv = 0, n_heads = 0, headdim = 0, d_state = 0;
    std::vector<T> conv_buf;  // (d_conv-1) x conv_channels, oldest row first
    std::vector<T> s;         // n_heads x headdim x d_state

    void reset() {
        std::fill(conv_buf.begin(), conv_buf.end(), T(0));
        std::fill(s.begin(), s.end(), T(0));
    }
    size_t byte_size() const {
        return (conv_buf.size() + s.size()) * sizeof(T);
    }
};

template <typename T>
struct SsmLayer {
    int index = 0;
    int d_model = 0, d_inner = 0, n_heads = 0, headdim = 0, d_state = 0;
    int n_groups = 0, d_conv = 0, conv_ch = 0, proj_out_dim = 0;

    Mat<T> w_in;     // proj_out x d_model
    Mat<T> conv_w;   // conv_channels x d_conv
    Vec<T> a_log;    // per head
    Vec<T> dt_bias;  // per head
    Vec<T> d_skip;   // per head
    Vec<T> norm_w;   // d_inner
    Mat<T> w_out;    // d_model x d_inner
    LoraAdapter<T> lora_mmu, lora_t2i;

    void init(const ModelConfig& cfg, int layer_index, Rng& rng) {
        index = layer_index;
        d_model = cfg.d_model;
        d_inner = cfg.d_inner();
        n_heads = cfg.n_heads;
        headdim = cfg.headdim;
        d_state = cfg.d_state;
        n_groups = cfg.n_groups;
        d_conv = cfg.d_conv;
        conv_ch = cfg.conv_channels();
        proj_out_dim = cfg.proj_out();

        w_in.resize(proj_out_dim, d_model);
        w_in.fill_normal(rng, 1.0 / std::sqrt((double)d_model));
        conv_w.resize(conv_ch, d_conv);
        conv_w.fill_normal(rng, 1.0 / std::sqrt((double)d_conv));
        a_log.resize(n_heads);
        dt_bias.resize(n_heads);
        d_skip.resize(n_heads);
        norm_w.resize(d_inner);
        for (int h = 0; h < n_heads; h++) {
            a_log.w[size_t(h)] = T(std::log(rng.uniform(1.0, 16.0)));
            // softplus(dt_bias) lands log-uniformly in [1e-3, 1e-1]
            double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            dt_bias.w[size_t(h)] = T(std::log(std::expm1(dt0)));
            d_skip.w[size_t(h)] = T(1);
        }
        for (auto& v : norm_w.w) v = T(1);
        w_out.resize(d_model, d_inner);
        w_out.fill_normal(rng, 1.0 / std::sqrt((double)d_inner));

        lora_mmu.init(cfg.lora_rank, d_model, proj_out_dim, rng);
        lora_t2i.init(cfg.lora_rank, d_model, proj_out_dim, rng);
    }

    LayerState<T> make_state() const {
        LayerState<T> st;
        st.conv_channels = conv_ch;
        st.d_conv = d_conv;
        st.n_heads = n_heads;
        st.headdim = headdim;
        st.d_state = d_state;
        st.conv_buf.assign(size_t(d_conv - 1) * conv_ch, T(0));
        st.s.assign(size_t(n_heads) * headdim * d_state, T(0));
        return st;
    }

    const LoraAdapter<T>* adapter(TaskRoute route) const {
        if (route == TaskRoute::MMU && lora_mmu.rank > 0) return &lora_mmu;
        if (route == TaskRoute::T2I && lora_t2i.rank > 0) return &lora_t2i;
        return nullptr;
    }
    LoraAdapter<T>* adapter(TaskRoute route) {
        return const_cast<LoraAdapter<T>*>(
            static_cast<const SsmLayer*>(this)->adapter(route));
    }

    int group_of(int h) const { return h / (n_heads / n_groups); }

    // ---- single-token decode path --------------------------------------

    void step(LayerState<T>& st, const T* u, T* out, TaskRoute route) const {
        check(st.n_heads == n_heads && st.headdim == headdim && st.d_state == d_state &&
                  st.conv_channels == conv_ch && st.d_conv == d_conv,
              "layer ", index, ": state shape mismatch");

        std::vector<T> raw(static_cast<size_t>(proj_out_dim));
        matvec(raw.data(), w_in.w.data(), u, proj_out_dim, d_model);
        if (const auto* ad = adapter(route)) {
            std::vector<T> rk(size_t(ad->rank));
            ad->forward(u, raw.data(), rk.data());
        }

        const T* z = raw.data();
        const T* xbc_pre = raw.data() + d_inner;
        const T* dt_raw = raw.data() + d_inner + conv_ch;

        // causal conv over the buffered window, then shift the buffer
        std::vector<T> xbc(static_cast<size_t>(conv_ch));
        for (int c = 0; c < conv_ch; c++) {
            T acc = conv_w.w[size_t(c) * d_conv + (d_conv - 1)] * xbc_pre[c];
            for (int k = 0; k < d_conv - 1; k++)
                acc += conv_w.w[size_t(c) * d_conv + k] * st.conv_buf[size_t(k) * conv_ch + c];
            xbc[size_t(c)] = silu(acc);
        }
        if (d_conv > 1) {
            std::memmove(st.conv_buf.data(), st.conv_buf.data() + conv_ch,
                         size_t(d_conv - 2) * conv_ch * sizeof(T));
            std::memcpy(st.conv_buf.data() + size_t(d_conv - 2) * conv_ch, xbc_pre,
                        size_t(conv_ch) * sizeof(T));
        }

        const T* x = xbc.data();
        const T* b_in = xbc.data() + d_inner;
        const T* c_in = xbc.data() + d_inner + n_groups * d_state;

        std::vector<T> y(static_cast<size_t>(d_inner));
        for (int h = 0; h < n_heads; h++) {
            T dt = softplus(dt_raw[h] + dt_bias.w[size_t(h)]);
            T a = std::exp(-dt * std::exp(a_log.w[size_t(h)]));
            const T* bg = b_in + size_t(group_of(h)) * d_state;
            const T* cg = c_in + size_t(group_of(h)) * d_state;
            T* sh = st.s.data() + size_t(h) * headdim * d_state;
            const T* xh = x + size_t(h) * headdim;
            T* yh = y.data() + size_t(h) * headdim;
            for (int p = 0; p < headdim; p++) {
                T* sp = sh + size_t(p) * d_state;
                T dx = dt * xh[p];
                T acc = 0;
                for (int n = 0; n < d_state; n++) {
                    sp[n] = a * sp[n] + dx * bg[n];
                    acc += sp[n] * cg[n];
                }
                yh[p] = acc + d_skip.w[size_t(h)] * xh[p];
            }
        }

        finish_one(y.data(), z, out);
    }

    // ---- chunked parallel path (prefill / equivalence) ------------------

    void forward_parallel(const T* u, int L, TaskRoute route, int chunk_len, T* out,
                          LayerState<T>* end_state = nullptr) const {
        check(L >= 1 && chunk_len >= 1, "layer ", index, ": bad lengths");
        check(all_finite(u, size_t(L) * d_model), "layer ", index, ": non-finite input");

        std::vector<T> raw(size_t(L) * proj_out_dim);
        project_in(u, L, route, raw.data(), nullptr);

        std::vector<T> xbc(size_t(L) * conv_ch);
        conv_forward_seq(raw.data(), L, xbc.data());

        std::vector<T> y(size_t(L) * d_inner);
        std::vector<T> s(size_t(n_heads) * headdim * d_state, T(0));

        std::vector<T> dt(static_cast<size_t>(L)), loga(static_cast<size_t>(L)), cum(size_t(chunk_len) + 1);
        std::vector<T> sc(size_t(chunk_len) * headdim);
        for (int h = 0; h < n_heads; h++) {
            T aexp = std::exp(a_log.w[size_t(h)]);
            for (int t = 0; t < L; t++) {
                const T* rawt = raw.data() + size_t(t) * proj_out_dim;
                dt[size_t(t)] = softplus(rawt[d_inner + conv_ch + h] + dt_bias.w[size_t(h)]);
                loga[size_t(t)] = -dt[size_t(t)] * aexp;
            }
            T* sh = s.data() + size_t(h) * headdim * d_state;
            int g = group_of(h);
            for (int t0 = 0; t0 < L; t0 += chunk_len) {
                int c = std::min(chunk_len, L - t0);
                cum[0] = 0;
                for (int i = 0; i < c; i++) cum[size_t(i) + 1] = cum[size_t(i)] + loga[size_t(t0 + i)];

                // contribution of the carried-in state: sc[i][p] = S C_{t0+i}
                for (int i = 0; i < c; i++) {
                    const T* cg = xbc.data() + size_t(t0 + i) * conv_ch + d_inner +
                                  size_t(n_groups) * d_state + size_t(g) * d_state;
                    T* sci = sc.data() + size_t(i) * headdim;
                    for (int p = 0; p < headdim; p++)
                        sci[p] = dot(sh + size_t(p) * d_state, cg, d_state);
                }

                for (int i = 0; i < c; i++) {
                    int t = t0 + i;
                    const T* ct = xbc.data() + size_t(t) * conv_ch + d_inner +
                                  size_t(n_groups) * d_state + size_t(g) * d_state;
                    T* yt = y.data() + size_t(t) * d_inner + size_t(h) * headdim;
                    T carry = std::exp(cum[size_t(i) + 1]);
                    const T* sci = sc.data() + size_t(i) * headdim;
                    for (int p = 0; p < headdim; p++) yt[p] = carry * sci[p];
                    for (int s_i = 0; s_i <= i; s_i++) {
                        int ts = t0 + s_i;
                        const T* bs = xbc.data() + size_t(ts) * conv_ch + d_inner + size_t(g) * d_state;
                        const T* xs = xbc.data() + size_t(ts) * conv_ch + size_t(h) * headdim;
                        T w = std::exp(cum[size_t(i) + 1] - cum[size_t(s_i) + 1]) * dt[size_t(ts)] *
                              dot(ct, bs, d_state);
                        axpy(yt, w, xs, headdim);
                    }
                }

                // fold the chunk into the carried state
                T decay_all = std::exp(cum[size_t(c)]);
                scale(sh, decay_all, headdim * d_state);
                for (int s_i = 0; s_i < c; s_i++) {
                    int ts = t0 + s_i;
                    const T* bs = xbc.data() + size_t(ts) * conv_ch + d_inner + size_t(g) * d_state;
                    const T* xs = xbc.data() + size_t(ts) * conv_ch + size_t(h) * headdim;
                    T w = std::exp(cum[size_t(c)] - cum[size_t(s_i) + 1]) * dt[size_t(ts)];
                    for (int p = 0; p < headdim; p++)
                        axpy(sh + size_t(p) * d_state, w * xs[p], bs, d_state);
                }
            }
            // D skip
            for (int t = 0; t < L; t++) {
                const T* xh = xbc.data() + size_t(t) * conv_ch + size_t(h) * headdim;
                T* yt = y.data() + size_t(t) * d_inner + size_t(h) * headdim;
                axpy(yt, d_skip.w[size_t(h)], xh, headdim);
            }
        }

        for (int t = 0; t < L; t++)
            finish_one(y.data() + size_t(t) * d_inner,
                       raw.data() + size_t(t) * proj_out_dim, out + size_t(t) * d_model);

        if (end_state) {
            *end_state = make_state();
            std::copy(s.begin(), s.end(), end_state->s.begin());
            // conv buffer = last d_conv-1 pre-activation xBC rows
            for (int k = 0; k < d_conv - 1; k++) {
                int t = L - (d_conv - 1) + k;
                T* dst = end_state->conv_buf.data() + size_t(k) * conv_ch;
                if (t < 0) continue;  // zero history stays zero
                std::copy(raw.data() + size_t(t) * proj_out_dim + d_inner,
                          raw.data() + size_t(t) * proj_out_dim + d_inner + conv_ch, dst);
            }
        }
    }

    // ---- training path ---------------------------------------------------

    struct Cache {
        int L = 0;
        TaskRoute route = TaskRoute::NONE;
        std::vector<T> raw;       // L x proj_out (pre-conv, post-lora)
        std::vector<T> rank_act;  // L x r (active adapter)
        std::vector<T> conv_pre;  // L x conv_ch (pre-SiLU conv output)
        std::vector<T> xbc;       // L x conv_ch (post-SiLU)
        std::vector<T> dt;        // L x H
        std::vector<T> a;         // L x H
        std::vector<T> states;    // L x H x P x N (state after step t)
        std::vector<T> y_ssm;     // L x d_inner (pre-gate)
        std::vector<T> rms_inv;   // L
        std::vector<T> y_n;       // L x d_inner (post norm*weight)
    };

    void forward_train(const T* u, int L, TaskRoute route, Cache& cc, T* out) const {
        check(all_finite(u, size_t(L) * d_model), "layer ", index, ": non-finite input");
        cc.L = L;
        cc.route = route;
        const auto* ad = adapter(route);
        cc.raw.resize(size_t(L) * proj_out_dim);
        cc.rank_act.resize(ad ? size_t(L) * ad->rank : 0);
        project_in(u, L, route, cc.raw.data(), ad ? cc.rank_act.data() : nullptr);

        cc.conv_pre.resize(size_t(L) * conv_ch);
        cc.xbc.resize(size_t(L) * conv_ch);
        conv_forward_seq(cc.raw.data(), L, cc.xbc.data(), cc.conv_pre.data());

        cc.dt.resize(size_t(L) * n_heads);
        cc.a.resize(size_t(L) * n_heads);
        cc.states.assign(size_t(L) * n_heads * headdim * d_state, T(0));
        cc.y_ssm.resize(size_t(L) * d_inner);

        size_t hpn = size_t(headdim) * d_state;
        for (int h = 0; h < n_heads; h++) {
            T aexp = std::exp(a_log.w[size_t(h)]);
            int g = group_of(h);
            for (int t = 0; t < L; t++) {
                const T* rawt = cc.raw.data() + size_t(t) * proj_out_dim;
                T dtv = softplus(rawt[d_inner + conv_ch + h] + dt_bias.w[size_t(h)]);
                T av = std::exp(-dtv * aexp);
                cc.dt[size_t(t) * n_heads + h] = dtv;
                cc.a[size_t(t) * n_heads + h] = av;

                const T* xh = cc.xbc.data() + size_t(t) * conv_ch + size_t(h) * headdim;
                const T* bg = cc.xbc.data() + size_t(t) * conv_ch + d_inner + size_t(g) * d_state;
                const T* cg = bg + size_t(n_groups) * d_state;
                const T* sprev =
                    t ? cc.states.data() + (size_t(t) - 1) * n_heads * hpn + size_t(h) * hpn : nullptr;
                T* scur = cc.states.data() + size_t(t) * n_heads * hpn + size_t(h) * hpn;
                T* yt = cc.y_ssm.data() + size_t(t) * d_inner + size_t(h) * headdim;
                for (int p = 0; p < headdim; p++) {
                    T* sp = scur + size_t(p) * d_state;
                    const T* pp = sprev ? sprev + size_t(p) * d_state : nullptr;
                    T dx = dtv * xh[p];
                    T acc = 0;
#pragma omp simd reduction(+ : acc)
                    for (int n = 0; n < d_state; n++) {
                        T sv = (pp ? av * pp[n] : T(0)) + dx * bg[n];
                        sp[n] = sv;
                        acc += sv * cg[n];
                    }
                    yt[p] = acc + d_skip.w[size_t(h)] * xh[p];
                }
            }
        }

        cc.rms_inv.resize(size_t(L));
        cc.y_n.resize(size_t(L) * d_inner);
        for (int t = 0; t < L; t++) {
            const T* z = cc.raw.data() + size_t(t) * proj_out_dim;
            const T* yt = cc.y_ssm.data() + size_t(t) * d_inner;
            T* yn = cc.y_n.data() + size_t(t) * d_inner;
            double ms = 0;
            for (int i = 0; i < d_inner; i++) {
                T v = yt[i] * silu(z[i]);
                yn[i] = v;  // hold v; scaled below
                ms += double(v) * v;
            }
            T rinv = T(1.0 / std::sqrt(ms / d_inner + RMS_EPS));
            cc.rms_inv[size_t(t)] = rinv;
            for (int i = 0; i < d_inner; i++) yn[i] *= rinv * norm_w.w[size_t(i)];
        }
        gemm_nt(out, cc.y_n.data(), w_out.w.data(), L, d_inner, d_model);
    }

    // Accumulates parameter gradients and du += d(loss)/d(input).
    // du may alias dout: dout is fully consumed by the out-projection
    // backward before du is first written, which lets a residual stack
    // accumulate the passthrough gradient in place.
    void backward_train(const T* u, const Cache& cc, const T* dout, T* du) {
        int L = cc.L;
        size_t hpn = size_t(headdim) * d_state;

        // out projection
        std::vector<T> dyn(size_t(L) * d_inner, T(0));
        gemm_nn(dyn.data(), dout, w_out.w.data(), L, d_model, d_inner);
        gemm_tn(w_out.g.data(), dout, cc.y_n.data(), L, d_model, d_inner);

        // gated RMS norm -> dy (ssm output grad) and dz slots of draw
        std::vector<T> draw(size_t(L) * proj_out_dim, T(0));
        std::vector<T> dy(size_t(L) * d_inner);
        for (int t = 0; t < L; t++) {
            const T* z = cc.raw.data() + size_t(t) * proj_out_dim;
            const T* yt = cc.y_ssm.data() + size_t(t) * d_inner;
            const T* dynt = dyn.data() + size_t(t) * d_inner;
            T* dz = draw.data() + size_t(t) * proj_out_dim;
            T* dyt = dy.data() + size_t(t) * d_inner;
            T rinv = cc.rms_inv[size_t(t)];

            double sdot = 0;
            for (int i = 0; i < d_inner; i++) {
                T g = silu(z[i]);
                T v = yt[i] * g;
                norm_w.g[size_t(i)] += dynt[i] * v * rinv;
                sdot += double(dynt[i]) * norm_w.w[size_t(i)] * v;
            }
            T corr = T(sdot * rinv * rinv * rinv / d_inner);
            for (int i = 0; i < d_inner; i++) {
                T g = silu(z[i]);
                T v = yt[i] * g;
                T dv = dynt[i] * norm_w.w[size_t(i)] * rinv - corr * v;
                dyt[i] = dv * g;
                dz[i] = dv * yt[i] * silu_grad(z[i]);
            }
        }

        // scan backward
        std::vector<T> dxbc(size_t(L) * conv_ch, T(0));
        std::vector<T> ds(hpn);
        for (int h = 0; h < n_heads; h++) {
            T aexp = std::exp(a_log.w[size_t(h)]);
            int g = group_of(h);
            std::fill(ds.begin(), ds.end(), T(0));
            T da_log_acc = 0, ddt_bias_acc = 0, dd_skip_acc = 0;
            for (int t = L - 1; t >= 0; t--) {
                const T* xh = cc.xbc.data() + size_t(t) * conv_ch + size_t(h) * headdim;
                const T* bg = cc.xbc.data() + size_t(t) * conv_ch + d_inner + size_t(g) * d_state;
                const T* cg = bg + size_t(n_groups) * d_state;
                const T* scur = cc.states.data() + size_t(t) * n_heads * hpn + size_t(h) * hpn;
                const T* sprev =
                    t ? cc.states.data() + (size_t(t) - 1) * n_heads * hpn + size_t(h) * hpn : nullptr;
                const T* dyt = dy.data() + size_t(t) * d_inner + size_t(h) * headdim;
                T* dxh = dxbc.data() + size_t(t) * conv_ch + size_t(h) * headdim;
                T* dbg = dxbc.data() + size_t(t) * conv_ch + d_inner + size_t(g) * d_state;
                T* dcg = dbg + size_t(n_groups) * d_state;
                T dtv = cc.dt[size_t(t) * n_heads + h];
                T av = cc.a[size_t(t) * n_heads + h];

                // y_t = S_t C_t + D x_t
                for (int p = 0; p < headdim; p++) {
                    const T* sp = scur + size_t(p) * d_state;
                    T dyp = dyt[p];
                    if (dyp != T(0)) axpy(dcg, dyp, sp, d_state);
                    dd_skip_acc += dyp * xh[p];
                    dxh[p] += dyp * d_skip.w[size_t(h)];
                    axpy(ds.data() + size_t(p) * d_state, dyp, cg, d_state);
                }

                // S_t = a S_{t-1} + dt x (outer) B
                T da = 0, ddt = 0;
                for (int p = 0; p < headdim; p++) {
                    T* dsp = ds.data() + size_t(p) * d_state;
                    const T* pp = sprev ? sprev + size_t(p) * d_state : nullptr;
                    T xp = xh[p];
                    T dxp = 0;
                    if (pp) {
#pragma omp simd reduction(+ : da, ddt, dxp)
                        for (int n = 0; n < d_state; n++) {
                            T dsv = dsp[n];
                            da += dsv * pp[n];
                            ddt += dsv * xp * bg[n];
                            dxp += dsv * bg[n];
                            dbg[n] += dsv * dtv * xp;
                            dsp[n] = dsv * av;  // carry to t-1
                        }
                    } else {
#pragma omp simd reduction(+ : ddt, dxp)
                        for (int n = 0; n < d_state; n++) {
                            T dsv = dsp[n];
                            ddt += dsv * xp * bg[n];
                            dxp += dsv * bg[n];
                            dbg[n] += dsv * dtv * xp;
                            dsp[n] = dsv * av;
                        }
                    }
                    dxh[p] += dtv * dxp;
                }

                // a = exp(-dt aexp); dt = softplus(dt_raw + dt_bias)
                ddt += da * (-aexp * av);
                da_log_acc += da * (-dtv * av) * aexp;
                T sig = sigmoid(cc.raw[size_t(t) * proj_out_dim + d_inner + conv_ch + h] +
                                dt_bias.w[size_t(h)]);
                T ddt_raw = ddt * sig;
                draw[size_t(t) * proj_out_dim + d_inner + conv_ch + h] += ddt_raw;
                ddt_bias_acc += ddt_raw;
            }
            a_log.g[size_t(h)] += da_log_acc;
            dt_bias.g[size_t(h)] += ddt_bias_acc;
            d_skip.g[size_t(h)] += dd_skip_acc;
        }

        // SiLU + conv backward into the xBC slots of draw
        for (int t = 0; t < L; t++) {
            const T* pre = cc.conv_pre.data() + size_t(t) * conv_ch;
            T* dpost = dxbc.data() + size_t(t) * conv_ch;
            for (int c = 0; c < conv_ch; c++) dpost[c] *= silu_grad(pre[c]);
        }
        for (int t = 0; t < L; t++) {
            const T* dpre = dxbc.data() + size_t(t) * conv_ch;
            for (int k = 0; k < d_conv; k++) {
                int ts = t - (d_conv - 1) + k;
                if (ts < 0) continue;
                const T* src = cc.raw.data() + size_t(ts) * proj_out_dim + d_inner;
                T* dsrc = draw.data() + size_t(ts) * proj_out_dim + d_inner;
                for (int c = 0; c < conv_ch; c++) {
                    conv_w.g[size_t(c) * d_conv + k] += dpre[c] * src[c];
                    dsrc[c] += dpre[c] * conv_w.w[size_t(c) * d_conv + k];
                }
            }
        }

        // input projection (+ routed adapter)
        gemm_tn(w_in.g.data(), draw.data(), u, L, proj_out_dim, d_model);
        gemm_nn(du, draw.data(), w_in.w.data(), L, proj_out_dim, d_model);
        if (auto* ad = adapter(cc.route)) {
            int r = ad->rank;
            T s = T(ad->scale());
            std::vector<T> drank(size_t(L) * r, T(0));
            gemm_nn(drank.data(), draw.data(), ad->up.w.data(), L, proj_out_dim, r);
            scale(drank.data(), s, L * r);
            // d_up += s * draw^T rank_act
            std::vector<T> sdraw(size_t(L) * proj_out_dim);
            std::copy(draw.begin(), draw.end(), sdraw.begin());
            scale(sdraw.data(), s, L * proj_out_dim);
            gemm_tn(ad->up.g.data(), sdraw.data(), cc.rank_act.data(), L, proj_out_dim, r);
            gemm_tn(ad->down.g.data(), drank.data(), u, L, r, d_model);
            gemm_nn(du, drank.data(), ad->down.w.data(), L, r, d_model);
        }
    }

    // ---- shared pieces ---------------------------------------------------

    void project_in(const T* u, int L, TaskRoute route, T* raw, T* rank_act) const {
        gemm_nt(raw, u, w_in.w.data(), L, d_model, proj_out_dim);
        const auto* ad = adapter(route);
        if (!ad) return;
        int r = ad->rank;
        std::vector<T> local;
        T* rk = rank_act;
        if (!rk) {
            local.resize(size_t(L) * r);
            rk = local.data();
        }
        gemm_nt(rk, u, ad->down.w.data(), L, d_model, r);
        // raw += scale * rank_act up^T; a transposed copy of up turns the
        // delta into r streaming row passes instead of L*proj_out tiny dots.
        std::vector<T> upt(size_t(r) * proj_out_dim);
        for (int i = 0; i < proj_out_dim; i++)
            for (int j = 0; j < r; j++)
                upt[size_t(j) * proj_out_dim + i] = ad->up.w[size_t(i) * r + j];
        T s = T(ad->scale());
        for (int t = 0; t < L; t++) {
            const T* rkt = rk + size_t(t) * r;
            T* rawt = raw + size_t(t) * proj_out_dim;
            for (int j = 0; j < r; j++) axpy(rawt, s * rkt[j], upt.data() + size_t(j) * proj_out_dim, proj_out_dim);
        }
    }

    // Full-sequence causal depthwise conv from zero history + SiLU.
    void conv_forward_seq(const T* raw, int L, T* xbc_post, T* xbc_pre = nullptr) const {
        for (int t = 0; t < L; t++) {
            T* post = xbc_post + size_t(t) * conv_ch;
            T* pre = xbc_pre ? xbc_pre + size_t(t) * conv_ch : nullptr;
            for (int c = 0; c < conv_ch; c++) {
                T acc = 0;
                for (int k = 0; k < d_conv; k++) {
                    int ts = t - (d_conv - 1) + k;
                    if (ts < 0) continue;
                    acc += conv_w.w[size_t(c) * d_conv + k] *
                           raw[size_t(ts) * proj_out_dim + d_inner + c];
                }
                if (pre) pre[c] = acc;
                post[c] = silu(acc);
            }
        }
    }

    // gate with SiLU(z), RMS-normalize, weight, out-project (single position)
    void finish_one(const T* y, const T* z, T* out) const {
        std::vector<T> v(static_cast<size_t>(d_inner));
        double ms = 0;
        for (int i = 0; i < d_inner; i++) {
            v[size_t(i)] = y[i] * silu(z[i]);
            ms += double(v[size_t(i)]) * v[size_t(i)];
        }
        T rinv = T(1.0 / std::sqrt(ms / d_inner + RMS_EPS));
        for (int i = 0; i < d_inner; i++) v[size_t(i)] *= rinv * norm_w.w[size_t(i)];
        matvec(out, w_out.w.data(), v.data(), d_model, d_inner);
    }
};

}  // namespace tandem
