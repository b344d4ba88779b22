#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "tandem/util.hpp"

namespace tandem {

struct ModelConfig {
    int d_model = 256;
    int n_layers = 8;
    int d_state = 16;       // N: recurrent state width per head
    int headdim = 64;       // P
    int n_heads = 8;        // H
    int expand = 2;         // d_inner = expand * d_model = H * P
    int d_conv = 4;         // causal conv width
    int n_groups = 1;       // B/C sharing groups, divides n_heads
    int lora_rank = 8;      // r; 0 disables all LoRA paths
    int text_vocab_size = 512;
    int image_vocab_size = 64;
    int special_token_count = 6;
    int max_image_tokens = 16;

    int d_inner() const { return expand * d_model; }
    // in-projection emits [z, x, B, C, dt_raw] concatenated
    int proj_out() const { return 2 * d_inner() + 2 * n_groups * d_state + n_heads; }
    // channels that pass through the causal conv: x plus B/C
    int conv_channels() const { return d_inner() + 2 * n_groups * d_state; }
    int group_size() const { return n_heads / n_groups; }

    void validate() const {
        check(d_model > 0 && n_layers > 0 && d_state > 0 && headdim > 0 &&
                  n_heads > 0 && expand > 0 && d_conv > 0 && n_groups > 0,
              "model dims must be positive");
        check(lora_rank >= 0, "lora_rank must be non-negative");
        check(expand * d_model == n_heads * headdim,
              "expand*d_model (", expand * d_model, ") != n_heads*headdim (",
              n_heads * headdim, ")");
        check(n_heads % n_groups == 0, "n_heads (", n_heads,
              ") not divisible by n_groups (", n_groups, ")");
        check(text_vocab_size > 0 && image_vocab_size > 0 &&
                  special_token_count > 0 && max_image_tokens > 0,
              "vocab/config sizes must be positive");
    }
};

enum class StageId { Stage1MMU, Stage1T2I, Stage2 };

inline const char* stage_name(StageId s) {
    switch (s) {
        case StageId::Stage1MMU: return "stage1_mmu";
        case StageId::Stage1T2I: return "stage1_t2i";
        case StageId::Stage2: return "stage2";
    }
    return "?";
}

struct StageConfig {
    StageId id = StageId::Stage1MMU;
    double peak_lr = 1e-3;
    int warmup_steps = 100;
    int total_steps = 2000;
    int batch_mmu = 4;  // examples of each task per optimizer step
    int batch_t2i = 0;

    void validate() const {
        check(peak_lr > 0, "peak_lr must be positive");
        check(warmup_steps >= 0 && total_steps > 0, "bad step counts");
        check(warmup_steps <= total_steps, "warmup_steps > total_steps");
        check(batch_mmu >= 0 && batch_t2i >= 0 && batch_mmu + batch_t2i > 0,
              "stage batch is empty");
    }
};

enum class DecodeMode { Greedy, Sampled };

struct GenerationConfig {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;  // ignored when greedy
    int top_k = 0;             // 0 = no truncation; ignored when greedy
    int max_new_tokens = 64;
    uint64_t seed = 0x5eed;
};

// Flat key=value run description.  Every key has a default; unknown keys are
// rejected so a typo can't silently fall back to a default.
struct RunConfig {
    ModelConfig model;
    StageConfig stage1_mmu{StageId::Stage1MMU, 1e-3, 100, 2000, 4, 0};
    StageConfig stage1_t2i{StageId::Stage1T2I, 8e-4, 200, 5000, 0, 4};
    StageConfig stage2{StageId::Stage2, 1e-4, 0, 5000, 1, 4};
    GenerationConfig gen;
    bool ablation_shared_vocab = false;
    int ablation_lora_rank_override = -1;  // <0 = keep model.lora_rank

    ModelConfig effective_model() const {
        ModelConfig m = model;
        if (ablation_lora_rank_override >= 0) m.lora_rank = ablation_lora_rank_override;
        return m;
    }

    StageConfig& stage(StageId id) {
        switch (id) {
            case StageId::Stage1MMU: return stage1_mmu;
            case StageId::Stage1T2I: return stage1_t2i;
            case StageId::Stage2: return stage2;
        }
        fail("bad stage id");
    }

    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig load_file(const std::string& path);
};

namespace detail {

// Key table shared by parse and serialize so the two can't drift apart.
struct KeyBinding {
    const char* key;
    enum Kind { Int, Real, Bool, U64, Str } kind;
    size_t offset;  // byte offset into RunConfig
};

inline const std::vector<KeyBinding>& run_config_keys() {
#define TANDEM_KEY(name, kind, member) \
    KeyBinding { name, KeyBinding::kind, offsetof(RunConfig, member) }
    static const std::vector<KeyBinding> keys = {
        TANDEM_KEY("model.d_model", Int, model.d_model),
        TANDEM_KEY("model.n_layers", Int, model.n_layers),
        TANDEM_KEY("model.d_state", Int, model.d_state),
        TANDEM_KEY("model.headdim", Int, model.headdim),
        TANDEM_KEY("model.n_heads", Int, model.n_heads),
        TANDEM_KEY("model.expand", Int, model.expand),
        TANDEM_KEY("model.d_conv", Int, model.d_conv),
        TANDEM_KEY("model.n_groups", Int, model.n_groups),
        TANDEM_KEY("model.lora_rank", Int, model.lora_rank),
        TANDEM_KEY("model.text_vocab_size", Int, model.text_vocab_size),
        TANDEM_KEY("model.image_vocab_size", Int, model.image_vocab_size),
        TANDEM_KEY("model.special_token_count", Int, model.special_token_count),
        TANDEM_KEY("model.max_image_tokens", Int, model.max_image_tokens),
        TANDEM_KEY("train.stage1_mmu.peak_lr", Real, stage1_mmu.peak_lr),
        TANDEM_KEY("train.stage1_mmu.warmup_steps", Int, stage1_mmu.warmup_steps),
        TANDEM_KEY("train.stage1_mmu.total_steps", Int, stage1_mmu.total_steps),
        TANDEM_KEY("train.stage1_mmu.batch_mmu", Int, stage1_mmu.batch_mmu),
        TANDEM_KEY("train.stage1_mmu.batch_t2i", Int, stage1_mmu.batch_t2i),
        TANDEM_KEY("train.stage1_t2i.peak_lr", Real, stage1_t2i.peak_lr),
        TANDEM_KEY("train.stage1_t2i.warmup_steps", Int, stage1_t2i.warmup_steps),
        TANDEM_KEY("train.stage1_t2i.total_steps", Int, stage1_t2i.total_steps),
        TANDEM_KEY("train.stage1_t2i.batch_mmu", Int, stage1_t2i.batch_mmu),
        TANDEM_KEY("train.stage1_t2i.batch_t2i", Int, stage1_t2i.batch_t2i),
        TANDEM_KEY("train.stage2.peak_lr", Real, stage2.peak_lr),
        TANDEM_KEY("train.stage2.warmup_steps", Int, stage2.warmup_steps),
        TANDEM_KEY("train.stage2.total_steps", Int, stage2.total_steps),
        TANDEM_KEY("train.stage2.batch_mmu", Int, stage2.batch_mmu),
        TANDEM_KEY("train.stage2.batch_t2i", Int, stage2.batch_t2i),
        TANDEM_KEY("gen.mode", Str, gen.mode),
        TANDEM_KEY("gen.temperature", Real, gen.temperature),
        TANDEM_KEY("gen.top_k", Int, gen.top_k),
        TANDEM_KEY("gen.max_new_tokens", Int, gen.max_new_tokens),
        TANDEM_KEY("gen.seed", U64, gen.seed),
        TANDEM_KEY("ablation.shared_vocab", Bool, ablation_shared_vocab),
        TANDEM_KEY("ablation.lora_rank_override", Int, ablation_lora_rank_override),
    };
#undef TANDEM_KEY
    return keys;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string RunConfig::serialize() const {
    using detail::KeyBinding;
    std::string out;
    const char* base = reinterpret_cast<const char*>(this);
    for (const auto& kb : detail::run_config_keys()) {
        out += kb.key;
        out += " = ";
        const char* p = base + kb.offset;
        switch (kb.kind) {
            case KeyBinding::Int:
                out += std::to_string(*reinterpret_cast<const int*>(p));
                break;
            case KeyBinding::Real: {
                char buf[40];
                std::snprintf(buf, sizeof(buf), "%.17g", *reinterpret_cast<const double*>(p));
                out += buf;
                break;
            }
            case KeyBinding::Bool:
                out += *reinterpret_cast<const bool*>(p) ? "true" : "false";
                break;
            case KeyBinding::U64:
                out += std::to_string(*reinterpret_cast<const uint64_t*>(p));
                break;
            case KeyBinding::Str:
                out += (*reinterpret_cast<const DecodeMode*>(p) == DecodeMode::Greedy)
                           ? "greedy" : "sampled";
                break;
        }
        out += '\n';
    }
    return out;
}

inline RunConfig RunConfig::parse(const std::string& text) {
    using detail::KeyBinding;
    RunConfig rc;
    char* base = reinterpret_cast<char*>(&rc);
    size_t pos = 0;
    int lineno = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = detail::trim(text.substr(pos, eol - pos));
        pos = eol + 1;
        lineno++;
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        check(eq != std::string::npos, "config line ", lineno, ": missing '='");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        const KeyBinding* found = nullptr;
        for (const auto& kb : detail::run_config_keys())
            if (key == kb.key) { found = &kb; break; }
        check(found != nullptr, "config line ", lineno, ": unknown key '", key, "'");
        char* p = base + found->offset;
        try {
            switch (found->kind) {
                case KeyBinding::Int:
                    *reinterpret_cast<int*>(p) = std::stoi(val);
                    break;
                case KeyBinding::Real:
                    *reinterpret_cast<double*>(p) = std::stod(val);
                    break;
                case KeyBinding::Bool:
                    if (val == "true" || val == "1") *reinterpret_cast<bool*>(p) = true;
                    else if (val == "false" || val == "0") *reinterpret_cast<bool*>(p) = false;
                    else fail("expected bool, got '", val, "'");
                    break;
                case KeyBinding::U64:
                    *reinterpret_cast<uint64_t*>(p) = std::stoull(val);
                    break;
                case KeyBinding::Str:
                    if (val == "greedy") *reinterpret_cast<DecodeMode*>(p) = DecodeMode::Greedy;
                    else if (val == "sampled") *reinterpret_cast<DecodeMode*>(p) = DecodeMode::Sampled;
                    else fail("expected greedy|sampled, got '", val, "'");
                    break;
            }
        } catch (const std::exception& e) {
            fail("config line ", lineno, " (", key, "): ", e.what());
        }
    }
    rc.model.validate();
    rc.stage1_mmu.validate();
    rc.stage1_t2i.validate();
    rc.stage2.validate();
    return rc;
}

inline RunConfig RunConfig::load_file(const std::string& path) {
    return RunConfig::parse(read_file(path));
}

}  // namespace tandem
