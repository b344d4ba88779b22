#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "tandem/config.hpp"
#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"
#include "tandem/util.hpp"

namespace tandem {

enum class Modality : uint8_t { Text, Image, Special };

// Six control tokens living in their own table, disjoint from both
// modality vocabularies.
enum SpecialId : int {
    SP_MMU = 0,
    SP_T2I = 1,
    SP_SOT = 2,
    SP_EOT = 3,
    SP_SOI = 4,
    SP_EOI = 5,
    SPECIAL_COUNT = 6,
};

inline const char* special_name(int id) {
    static const char* names[] = {"[MMU]", "[T2I]", "[SOT]", "[EOT]", "[SOI]", "[EOI]"};
    return (id >= 0 && id < SPECIAL_COUNT) ? names[id] : "[?]";
}

struct Token {
    Modality modality = Modality::Text;
    int id = 0;

    bool operator==(const Token&) const = default;
    static Token text(int id) { return {Modality::Text, id}; }
    static Token image(int id) { return {Modality::Image, id}; }
    static Token special(int id) { return {Modality::Special, id}; }
    bool is_special(int sid) const { return modality == Modality::Special && id == sid; }
};

inline std::string token_repr(const Token& t) {
    switch (t.modality) {
        case Modality::Text: return cat("txt:", t.id);
        case Modality::Image: return cat("img:", t.id);
        case Modality::Special: return special_name(t.id);
    }
    return "?";
}

// Whitespace word tokenizer over a fixed wordlist.  Persisted as a sorted
// plain-text list, one word per line; the line number is the id, so the
// mapping is stable across runs and machines.
struct TextTokenizer {
    std::vector<std::string> words;        // id -> word
    std::map<std::string, int> word_to_id;

    static TextTokenizer from_words(std::vector<std::string> list) {
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
        TextTokenizer tk;
        tk.words = std::move(list);
        for (int i = 0; i < (int)tk.words.size(); i++) tk.word_to_id[tk.words[i]] = i;
        return tk;
    }

    int vocab() const { return (int)words.size(); }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && text[i] == ' ') i++;
            size_t j = i;
            while (j < text.size() && text[j] != ' ') j++;
            if (j > i) {
                auto it = word_to_id.find(text.substr(i, j - i));
                check(it != word_to_id.end(), "word not in vocabulary: '",
                      text.substr(i, j - i), "'");
                out.push_back(it->second);
            }
            i = j;
        }
        return out;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (size_t k = 0; k < ids.size(); k++) {
            check(ids[k] >= 0 && ids[k] < vocab(), "text id out of range: ", ids[k]);
            if (k) out += ' ';
            out += words[ids[k]];
        }
        return out;
    }

    void save(const std::string& path) const {
        std::string blob;
        for (const auto& w : words) { blob += w; blob += '\n'; }
        write_file(path, blob);
    }

    static TextTokenizer load(const std::string& path) {
        std::string blob = read_file(path);
        TextTokenizer tk;
        size_t pos = 0;
        while (pos < blob.size()) {
            size_t eol = blob.find('\n', pos);
            if (eol == std::string::npos) eol = blob.size();
            std::string w = blob.substr(pos, eol - pos);
            if (!w.empty()) {
                tk.word_to_id[w] = (int)tk.words.size();
                tk.words.push_back(w);
            }
            pos = eol + 1;
        }
        check(std::is_sorted(tk.words.begin(), tk.words.end()),
              "tokenizer wordlist not sorted: ", path);
        return tk;
    }
};

// Embedding tables and output heads.  Decoupled mode keeps one head per
// modality; each head carries its own terminator as its final row ([EOT]
// for text, [EOI] for image) so a single argmax can end its own segment.
// Shared-vocabulary mode fuses everything into one head and drops the
// structural constraint (the ablation case).
template <typename T>
struct HeadSet {
    int d_model = 0;
    int text_vocab = 0, image_vocab = 0;
    bool shared = false;

    Mat<T> embed_text;     // text_vocab x d_model
    Mat<T> embed_image;    // image_vocab x d_model
    Mat<T> embed_special;  // SPECIAL_COUNT x d_model
    Mat<T> text_head;      // (text_vocab + 1) x d_model, last row = [EOT]
    Mat<T> image_head;     // (image_vocab + 1) x d_model, last row = [EOI]
    Mat<T> fused_head;     // (text_vocab + image_vocab + 2) x d_model, shared mode only

    void init(const ModelConfig& cfg, bool shared_vocab, Rng& rng) {
        d_model = cfg.d_model;
        text_vocab = cfg.text_vocab_size;
        image_vocab = cfg.image_vocab_size;
        shared = shared_vocab;
        check(cfg.special_token_count == SPECIAL_COUNT,
              "special_token_count must be ", SPECIAL_COUNT);

        embed_text.resize(text_vocab, d_model);
        embed_image.resize(image_vocab, d_model);
        embed_special.resize(SPECIAL_COUNT, d_model);
        embed_text.fill_normal(rng, 0.02);
        embed_image.fill_normal(rng, 0.02);
        embed_special.fill_normal(rng, 0.02);

        double hs = 1.0 / std::sqrt((double)d_model);
        if (shared) {
            fused_head.resize(text_vocab + image_vocab + 2, d_model);
            fused_head.fill_normal(rng, hs);
        } else {
            text_head.resize(text_vocab + 1, d_model);
            image_head.resize(image_vocab + 1, d_model);
            text_head.fill_normal(rng, hs);
            image_head.fill_normal(rng, hs);
        }
    }

    const T* embed(const Token& t) const {
        switch (t.modality) {
            case Modality::Text:
                check(t.id >= 0 && t.id < text_vocab, "text id out of range: ", t.id);
                return embed_text.row(t.id);
            case Modality::Image:
                check(t.id >= 0 && t.id < image_vocab, "image id out of range: ", t.id);
                return embed_image.row(t.id);
            case Modality::Special:
                check(t.id >= 0 && t.id < SPECIAL_COUNT, "special id out of range: ", t.id);
                return embed_special.row(t.id);
        }
        fail("bad modality");
    }

    T* embed_grad(const Token& t) {
        switch (t.modality) {
            case Modality::Text: return embed_text.grow(t.id);
            case Modality::Image: return embed_image.grow(t.id);
            case Modality::Special: return embed_special.grow(t.id);
        }
        fail("bad modality");
    }

    // --- fused-table index mapping (shared-vocabulary ablation) ---------
    // rows: [0, Vt) text | Vt = [EOT] | [Vt+1, Vt+1+Vi) image | last = [EOI]
    int fused_index(const Token& t) const {
        if (t.modality == Modality::Text) return t.id;
        if (t.is_special(SP_EOT)) return text_vocab;
        if (t.modality == Modality::Image) return text_vocab + 1 + t.id;
        if (t.is_special(SP_EOI)) return text_vocab + 1 + image_vocab;
        fail("token has no fused-head row: ", token_repr(t));
    }

    Token fused_token(int row) const {
        if (row < text_vocab) return Token::text(row);
        if (row == text_vocab) return Token::special(SP_EOT);
        if (row < text_vocab + 1 + image_vocab) return Token::image(row - text_vocab - 1);
        if (row == text_vocab + 1 + image_vocab) return Token::special(SP_EOI);
        fail("fused row out of range: ", row);
    }

    // Head used to score a supervised position with the given target.
    // Returns the matrix, and the row index the target occupies in it.
    struct LossHead {
        Mat<T>* head;
        int target_row;
    };
    LossHead loss_head(const Token& target) {
        if (shared) return {&fused_head, fused_index(target)};
        if (target.modality == Modality::Text) return {&text_head, target.id};
        if (target.is_special(SP_EOT)) return {&text_head, text_vocab};
        if (target.modality == Modality::Image) return {&image_head, target.id};
        if (target.is_special(SP_EOI)) return {&image_head, image_vocab};
        fail("unsupervisable target: ", token_repr(target));
    }
};

enum class Expected { TEXT_OR_EOT, IMAGE_OR_EOI };

namespace detail {

template <typename T>
int pick_from_logits(const std::vector<T>& logits, const GenerationConfig& gen, Rng& rng) {
    int n = (int)logits.size();
    check(all_finite(logits.data(), logits.size()), "non-finite logits in decode");
    if (gen.mode == DecodeMode::Greedy) {
        int best = 0;
        for (int i = 1; i < n; i++)
            if (logits[i] > logits[best]) best = i;
        return best;
    }
    check(gen.temperature > 0, "temperature must be positive");
    std::vector<std::pair<T, int>> order(n);
    for (int i = 0; i < n; i++) order[i] = {logits[i], i};
    int keep = (gen.top_k > 0 && gen.top_k < n) ? gen.top_k : n;
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [](auto& a, auto& b) { return a.first > b.first; });
    double mx = order[0].first;
    std::vector<double> p(keep);
    double z = 0;
    for (int i = 0; i < keep; i++) {
        p[i] = std::exp((double(order[i].first) - mx) / gen.temperature);
        z += p[i];
    }
    double u = rng.uniform() * z, acc = 0;
    for (int i = 0; i < keep; i++) {
        acc += p[i];
        if (u < acc) return order[i].second;
    }
    return order[keep - 1].second;
}

}  // namespace detail

// Modality-constrained decoding: logits are only ever formed over the
// permitted table, so an out-of-modality token is structurally impossible.
template <typename T>
Token decode_constrained(const HeadSet<T>& heads, const T* hidden, Expected expected,
                         const GenerationConfig& gen, Rng& rng) {
    check(!heads.shared, "decode_constrained requires decoupled heads");
    const Mat<T>& head = expected == Expected::TEXT_OR_EOT ? heads.text_head
                                                           : heads.image_head;
    std::vector<T> logits(head.rows);
    matvec(logits.data(), head.w.data(), hidden, head.rows, head.cols);
    int idx = detail::pick_from_logits(logits, gen, rng);
    if (expected == Expected::TEXT_OR_EOT)
        return idx < heads.text_vocab ? Token::text(idx) : Token::special(SP_EOT);
    return idx < heads.image_vocab ? Token::image(idx) : Token::special(SP_EOI);
}

// Shared-vocabulary mode: one softmax over the fused table, no constraint.
// Cross-modal emissions are possible by construction; the evaluator counts
// them.
template <typename T>
Token decode_unconstrained(const HeadSet<T>& heads, const T* hidden,
                           const GenerationConfig& gen, Rng& rng) {
    check(heads.shared, "decode_unconstrained requires the fused head");
    const Mat<T>& head = heads.fused_head;
    std::vector<T> logits(head.rows);
    matvec(logits.data(), head.w.data(), hidden, head.rows, head.cols);
    return heads.fused_token(detail::pick_from_logits(logits, gen, rng));
}

}  // namespace tandem
