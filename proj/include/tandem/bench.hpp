#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "tandem/attention.hpp"
#include "tandem/model.hpp"

namespace tandem {

// Decode-efficiency comparison between the recurrent model and the matched
// attention baseline.  Per-token step cost is content-independent for both
// mixers, so sessions are brought to the target position by filling their
// state structures directly; the measured work is the real step path.
//
// Timing: monotonic nanosecond clock, 2 warmup reps discarded, median of
// the remaining reps, step blocks auto-scaled until one rep is long enough
// for the clock.

struct BenchRow {
    int len = 0;
    double ssm_tok_per_s = 0;
    double attn_tok_per_s = 0;
    size_t ssm_state_bytes = 0;
    size_t attn_cache_bytes = 0;
};

namespace detail {

inline double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// median over reps of (elapsed / steps_per_rep), as seconds per step
template <typename F>
double median_step_seconds(F&& run_block, int reps, double min_rep_s = 0.02) {
    int block = 1;
    // grow the block until a rep is comfortably above timer noise
    for (;;) {
        double t0 = now_s();
        run_block(block);
        double dt = now_s() - t0;
        if (dt >= min_rep_s || block >= (1 << 20)) break;
        block *= 2;
    }
    for (int w = 0; w < 2; w++) run_block(block);  // warmup
    std::vector<double> samples;
    for (int r = 0; r < reps; r++) {
        double t0 = now_s();
        run_block(block);
        samples.push_back((now_s() - t0) / block);
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
}

}  // namespace detail

template <typename T>
BenchRow bench_at_len(const Model<T>& ssm, const AttnModel<T>& attn, int len, int reps) {
    Rng rng(0x6e6c + uint64_t(len));
    std::vector<T> emb(size_t(ssm.cfg.d_model));
    for (auto& v : emb) v = T(rng.normal() * 0.02);

    BenchRow row;
    row.len = len;

    {
        auto states = ssm.make_states();
        // the recurrent state is the same size and shape at any position;
        // populate it as if `len` tokens were consumed
        for (auto& st : states) {
            for (auto& v : st.conv_buf) v = T(rng.normal() * 0.1);
            for (auto& v : st.s) v = T(rng.normal() * 0.1);
        }
        std::vector<T> hidden(size_t(ssm.cfg.d_model));
        double sec = detail::median_step_seconds(
            [&](int block) {
                for (int i = 0; i < block; i++)
                    ssm.step(states, emb.data(), TaskRoute::NONE, hidden.data());
            },
            reps);
        row.ssm_tok_per_s = 1.0 / sec;
        row.ssm_state_bytes = ssm.state_bytes();
    }

    {
        auto cache = attn.make_cache();
        // bring the cache to the target length; step cost depends on the
        // length, not the values
        cache.len = len;
        for (int l = 0; l < attn.cfg.n_layers; l++) {
            cache.k[size_t(l)].resize(size_t(len) * attn.cfg.d_model);
            cache.v[size_t(l)].resize(size_t(len) * attn.cfg.d_model);
            for (auto& v : cache.k[size_t(l)]) v = T(rng.normal() * 0.1);
            for (auto& v : cache.v[size_t(l)]) v = T(rng.normal() * 0.1);
        }
        std::vector<T> hidden(size_t(attn.cfg.d_model));
        int base_len = cache.len;
        double sec = detail::median_step_seconds(
            [&](int block) {
                // measure at a pinned position: rewind the cache length so
                // the per-step cost does not drift across blocks
                cache.len = base_len;
                for (int l = 0; l < attn.cfg.n_layers; l++) {
                    cache.k[size_t(l)].resize(size_t(base_len) * attn.cfg.d_model);
                    cache.v[size_t(l)].resize(size_t(base_len) * attn.cfg.d_model);
                }
                for (int i = 0; i < block; i++)
                    attn.step(cache, emb.data(), hidden.data());
            },
            reps);
        row.attn_tok_per_s = 1.0 / sec;
        row.attn_cache_bytes = KvCache<T>::predicted_bytes(attn.cfg.n_layers,
                                                           attn.cfg.d_model, len);
    }
    return row;
}

template <typename T>
std::vector<BenchRow> bench_pair(const Model<T>& ssm, const AttnModel<T>& attn,
                                 const std::vector<int>& seq_lens, int reps = 5) {
    check(reps >= 5, "need at least 5 reps for a stable median");
    std::vector<BenchRow> rows;
    for (int len : seq_lens) rows.push_back(bench_at_len(ssm, attn, len, reps));
    return rows;
}

inline std::string bench_table_csv(const std::vector<BenchRow>& rows) {
    std::string out = "len,ssm_tok_per_s,attn_tok_per_s,ssm_state_bytes,attn_cache_bytes\n";
    for (const auto& r : rows)
        out += cat(r.len, ",", r.ssm_tok_per_s, ",", r.attn_tok_per_s, ",",
                   r.ssm_state_bytes, ",", r.attn_cache_bytes, "\n");
    return out;
}

}  // namespace tandem
