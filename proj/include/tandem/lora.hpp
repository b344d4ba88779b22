#pragma once

#include "tandem/config.hpp"
#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"
#include "tandem/util.hpp"

namespace tandem {

enum class TaskRoute : uint8_t { MMU, T2I, NONE };

inline const char* route_name(TaskRoute r) {
    switch (r) {
        case TaskRoute::MMU: return "mmu";
        case TaskRoute::T2I: return "t2i";
        case TaskRoute::NONE: return "none";
    }
    return "?";
}

// Low-rank delta on a base projection: W x + (alpha/r) * up (down x).
// up starts at zero so a fresh adapter is an exact identity on the base
// output, which keeps stage-1 initialization behaviorally inert.
template <typename T>
struct LoraAdapter {
    int rank = 0;
    double alpha = 0;
    Mat<T> down;  // r x d_in
    Mat<T> up;    // d_out x r

    void init(int r, int d_in, int d_out, Rng& rng) {
        rank = r;
        alpha = 2.0 * r;  // effective scale alpha/r = 2
        if (r == 0) return;
        down.resize(r, d_in);
        up.resize(d_out, r);
        double bound = 1.0 / std::sqrt((double)d_in);
        down.fill_uniform(rng, -bound, bound);
        // up stays zero
    }

    double scale() const { return rank ? alpha / rank : 0.0; }
    size_t param_count() const { return down.size() + up.size(); }

    // out[d_out] += scale * up @ (down @ x); returns the rank-space
    // activation for the backward pass.
    void forward(const T* x, T* out, T* rank_buf) const {
        if (rank == 0) return;
        matvec(rank_buf, down.w.data(), x, rank, down.cols);
        T s = T(scale());
        for (int i = 0; i < up.rows; i++)
            out[i] += s * dot(up.row(i), rank_buf, rank);
    }

    // dX accumulation + parameter grads given the saved rank activation.
    void backward(const T* x, const T* rank_buf, const T* dout, T* dx) {
        if (rank == 0) return;
        T s = T(scale());
        // d_up += s * dout (outer) rank_buf
        for (int i = 0; i < up.rows; i++)
            if (dout[i] != T(0)) axpy(up.grow(i), s * dout[i], rank_buf, rank);
        // d_rank = s * up^T dout
        std::vector<T> drank(size_t(rank), T(0));
        for (int i = 0; i < up.rows; i++)
            if (dout[i] != T(0)) axpy(drank.data(), s * dout[i], up.row(i), rank);
        // d_down += drank (outer) x ; dx += down^T drank
        rank1_update(down.g.data(), drank.data(), x, rank, down.cols);
        if (dx) matvec_t(dx, down.w.data(), drank.data(), rank, down.cols);
    }
};

// Adapter params per layer, summed over both routes, divided by the base
// (core stack) params.  Embeddings and heads are excluded from the base so
// the ratio is a function of the core dims alone.
inline double lora_param_fraction(const ModelConfig& cfg) {
    cfg.validate();
    if (cfg.lora_rank == 0) return 0.0;
    double d_in = cfg.d_model;
    double d_out = cfg.proj_out();
    double per_adapter = double(cfg.lora_rank) * (d_in + d_out);
    double lora_total = 2.0 * per_adapter * cfg.n_layers;

    double per_layer_base = d_in * d_out                                   // W_in
                            + double(cfg.conv_channels()) * cfg.d_conv     // conv kernels
                            + 3.0 * cfg.n_heads                            // A_log, dt_bias, D
                            + cfg.d_inner()                                // gated norm weight
                            + double(cfg.d_inner()) * cfg.d_model;         // W_out
    double base_total = per_layer_base * cfg.n_layers + cfg.d_model;       // + final norm
    return lora_total / base_total;
}

}  // namespace tandem
