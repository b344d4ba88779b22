#pragma once

#include <string>
#include <vector>

#include "tandem/lora.hpp"
#include "tandem/toy.hpp"
#include "tandem/util.hpp"
#include "tandem/vocab.hpp"

#include "json.hpp"

namespace tandem {

enum class SegKind : uint8_t { TASK_TAG, IMAGE_SEG, TEXT_SEG };

struct Segment {
    SegKind kind;
    int start, end;  // [start, end)
};

struct TokenStream {
    std::vector<Token> tokens;
    std::vector<Segment> segments;
    std::vector<uint8_t> loss_mask;  // per position

    int length() const { return (int)tokens.size(); }

    void validate() const {
        check(tokens.size() == loss_mask.size(), "mask/token length mismatch");
        int cursor = 0;
        for (const auto& s : segments) {
            check(s.start == cursor && s.end > s.start, "segments must tile the stream");
            cursor = s.end;
        }
        check(cursor == length(), "segments do not cover the stream");
    }
};

// One training row.  MMU rows carry continuous visual features that occupy
// the image segment's interior positions (the stream holds image-token
// placeholders there; the model substitutes the vectors and the mask keeps
// those positions unsupervised).
template <typename T>
struct TrainingExample {
    TaskRoute route = TaskRoute::NONE;
    TokenStream stream;
    std::vector<T> continuous_prefix;  // flattened [continuous_count][d_model]
    int continuous_start = -1;
    int continuous_count = 0;

    bool position_is_continuous(int t) const {
        return t >= continuous_start && t < continuous_start + continuous_count;
    }
};

// [MMU][SOI]{features}[EOI][SOT]{question answer}[EOT]
// Supervision: answer tokens and [EOT] only.
template <typename T>
TrainingExample<T> build_mmu_sequence(const std::vector<T>& visual_features, int d_model,
                                      const std::vector<int>& question_tokens,
                                      const std::vector<int>& answer_tokens) {
    check(!visual_features.empty() && visual_features.size() % size_t(d_model) == 0,
          "visual features must be nonempty [n][d_model]");
    check(!answer_tokens.empty(), "answer required");
    int n_feat = int(visual_features.size() / size_t(d_model));

    TrainingExample<T> ex;
    ex.route = TaskRoute::MMU;
    ex.continuous_prefix = visual_features;
    auto& st = ex.stream;

    auto push = [&](Token t, bool sup) {
        st.tokens.push_back(t);
        st.loss_mask.push_back(sup ? 1 : 0);
    };

    push(Token::special(SP_MMU), false);
    st.segments.push_back({SegKind::TASK_TAG, 0, 1});

    int img_start = st.length();
    push(Token::special(SP_SOI), false);
    ex.continuous_start = st.length();
    ex.continuous_count = n_feat;
    for (int i = 0; i < n_feat; i++) push(Token::image(0), false);  // placeholder rows
    push(Token::special(SP_EOI), false);
    st.segments.push_back({SegKind::IMAGE_SEG, img_start, st.length()});

    int txt_start = st.length();
    push(Token::special(SP_SOT), false);
    for (int q : question_tokens) push(Token::text(q), false);
    for (int a : answer_tokens) push(Token::text(a), true);
    push(Token::special(SP_EOT), true);
    st.segments.push_back({SegKind::TEXT_SEG, txt_start, st.length()});

    st.validate();
    return ex;
}

// [T2I][SOT]{caption}[EOT][SOI]{image tokens}[EOI]
// Supervision: image tokens and [EOI] only.
template <typename T>
TrainingExample<T> build_t2i_sequence(const std::vector<int>& caption_tokens,
                                      const std::vector<Token>& image_tokens,
                                      int max_image_tokens) {
    check(!caption_tokens.empty(), "caption required");
    check((int)image_tokens.size() == max_image_tokens, "expected ", max_image_tokens,
          " image tokens, got ", image_tokens.size());

    TrainingExample<T> ex;
    ex.route = TaskRoute::T2I;
    auto& st = ex.stream;

    auto push = [&](Token t, bool sup) {
        st.tokens.push_back(t);
        st.loss_mask.push_back(sup ? 1 : 0);
    };

    push(Token::special(SP_T2I), false);
    st.segments.push_back({SegKind::TASK_TAG, 0, 1});

    int txt_start = st.length();
    push(Token::special(SP_SOT), false);
    for (int c : caption_tokens) push(Token::text(c), false);
    push(Token::special(SP_EOT), false);
    st.segments.push_back({SegKind::TEXT_SEG, txt_start, st.length()});

    int img_start = st.length();
    push(Token::special(SP_SOI), false);
    for (const Token& t : image_tokens) {
        check(t.modality == Modality::Image, "non-image token in image segment");
        push(t, true);
    }
    push(Token::special(SP_EOI), true);
    st.segments.push_back({SegKind::IMAGE_SEG, img_start, st.length()});

    st.validate();
    return ex;
}

// Next-token view: inputs feed the model, targets are the same stream
// shifted left by one, and the mask is aligned to the targets.
struct NextTokenBatch {
    std::vector<Token> inputs, targets;
    std::vector<uint8_t> mask;
};

inline NextTokenBatch next_token_targets(const TokenStream& st) {
    check(st.length() >= 2, "stream too short for next-token targets");
    NextTokenBatch b;
    int n = st.length() - 1;
    b.inputs.assign(st.tokens.begin(), st.tokens.begin() + n);
    b.targets.assign(st.tokens.begin() + 1, st.tokens.end());
    b.mask.assign(st.loss_mask.begin() + 1, st.loss_mask.end());
    return b;
}

// ---- dataset records ----------------------------------------------------
// One line-delimited record per example: {"task": ..., "grid": [16 ints],
// "caption": ...}.  Both tasks draw from the same (grid, caption) pairs.

struct DataRecord {
    std::string task;  // "mmu" | "t2i"
    ToyImage grid;
    std::string caption;
};

inline std::string record_to_json(const DataRecord& r) {
    nlohmann::json j;
    j["task"] = r.task;
    j["grid"] = r.grid.cells;
    j["caption"] = r.caption;
    return j.dump();
}

inline DataRecord record_from_json(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    DataRecord r;
    r.task = j.at("task").get<std::string>();
    auto grid = j.at("grid").get<std::vector<int>>();
    check(grid.size() == GRID_CELLS, "record grid must have ", GRID_CELLS, " cells");
    for (int i = 0; i < GRID_CELLS; i++) r.grid.cells[size_t(i)] = grid[size_t(i)];
    r.caption = j.at("caption").get<std::string>();
    check(r.task == "mmu" || r.task == "t2i", "unknown task '", r.task, "'");
    return r;
}

inline void save_dataset(const std::string& path, const std::vector<DataRecord>& recs) {
    std::string blob;
    for (const auto& r : recs) { blob += record_to_json(r); blob += '\n'; }
    write_file(path, blob);
}

inline std::vector<DataRecord> load_dataset(const std::string& path) {
    std::string blob = read_file(path);
    std::vector<DataRecord> recs;
    size_t pos = 0;
    while (pos < blob.size()) {
        size_t eol = blob.find('\n', pos);
        if (eol == std::string::npos) eol = blob.size();
        std::string line = blob.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        recs.push_back(record_from_json(line));
    }
    check(!recs.empty(), "empty dataset: ", path);
    return recs;
}

}  // namespace tandem
