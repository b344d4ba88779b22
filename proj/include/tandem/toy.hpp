#pragma once

#include <array>
#include <string>
#include <vector>

#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"
#include "tandem/util.hpp"
#include "tandem/vocab.hpp"

namespace tandem {

// 4x4 color grids stand in for images: small enough that a full caption
// fits in a short sequence, rich enough that generation requires binding
// colors to positions.

constexpr int GRID_W = 4;
constexpr int GRID_H = 4;
constexpr int GRID_CELLS = GRID_W * GRID_H;
constexpr int PALETTE_K = 8;
constexpr int MAX_HIGHLIGHTS = 3;
// split between a per-cell half and a per-color half (see FrozenVisionEncoder)
constexpr int D_VIS = 192;

inline const char* color_name(int c) {
    static const char* names[PALETTE_K] = {"red",  "green",   "blue",  "yellow",
                                           "cyan", "magenta", "white", "black"};
    check(c >= 0 && c < PALETTE_K, "color index out of range: ", c);
    return names[c];
}

inline int color_index(const std::string& name) {
    for (int c = 0; c < PALETTE_K; c++)
        if (name == color_name(c)) return c;
    fail("not a palette color: '", name, "'");
}

struct ToyImage {
    std::array<int, GRID_CELLS> cells{};

    bool operator==(const ToyImage&) const = default;
    int at(int r, int c) const { return cells[size_t(r * GRID_W + c)]; }
    void set(int r, int c, int v) { cells[size_t(r * GRID_W + c)] = v; }

    // Background = strict majority color; guaranteed by the sampler,
    // which highlights at most 3 of 16 cells.
    int background() const {
        int count[PALETTE_K] = {0};
        for (int v : cells) {
            check(v >= 0 && v < PALETTE_K, "cell color out of range: ", v);
            count[v]++;
        }
        int best = 0;
        for (int c = 1; c < PALETTE_K; c++)
            if (count[c] > count[best]) best = c;
        check(count[best] > GRID_CELLS / 2, "grid has no majority background");
        return best;
    }

    std::string key() const {
        std::string k;
        for (int v : cells) { k += char('0' + v); }
        return k;
    }
};

// ---- caption grammar ---------------------------------------------------
// "uniform <bg>"                                   when nothing highlighted
// "<bg> background with <color> cell at row <r> column <c> (and ...)*"
// Clauses appear in raster order, rows/columns 1-based, so the caption is
// a bijective function of the grid.

inline std::string caption_for_grid(const ToyImage& img) {
    int bg = img.background();
    std::string cap;
    bool any = false;
    for (int r = 0; r < GRID_H; r++) {
        for (int c = 0; c < GRID_W; c++) {
            int v = img.at(r, c);
            if (v == bg) continue;
            if (!any) {
                cap = cat(color_name(bg), " background with ");
            } else {
                cap += " and ";
            }
            cap += cat(color_name(v), " cell at row ", r + 1, " column ", c + 1);
            any = true;
        }
    }
    if (!any) return cat("uniform ", color_name(bg));
    return cap;
}

// Inverse of the grammar.  Throws on any caption the grammar cannot emit.
inline ToyImage grid_for_caption(const std::string& caption) {
    std::vector<std::string> w;
    size_t i = 0;
    while (i < caption.size()) {
        while (i < caption.size() && caption[i] == ' ') i++;
        size_t j = i;
        while (j < caption.size() && caption[j] != ' ') j++;
        if (j > i) w.push_back(caption.substr(i, j - i));
        i = j;
    }
    check(!w.empty(), "empty caption");
    ToyImage img;
    if (w[0] == "uniform") {
        check(w.size() == 2, "malformed uniform caption");
        img.cells.fill(color_index(w[1]));
        return img;
    }
    int bg = color_index(w[0]);
    img.cells.fill(bg);
    check(w.size() >= 2 && w[1] == "background", "expected 'background'");
    check(w.size() >= 3 && w[2] == "with", "expected 'with'");
    size_t p = 3;
    int clauses = 0;
    int last_cell = -1;
    while (p < w.size()) {
        if (clauses > 0) {
            check(w[p] == "and", "expected 'and', got '", w[p], "'");
            p++;
        }
        check(p + 7 <= w.size(), "truncated clause");
        int col_idx = color_index(w[p]);
        check(w[p + 1] == "cell" && w[p + 2] == "at" && w[p + 3] == "row",
              "malformed clause");
        int r = std::stoi(w[p + 4]);
        check(w[p + 5] == "column", "expected 'column'");
        int c = std::stoi(w[p + 6]);
        check(r >= 1 && r <= GRID_H && c >= 1 && c <= GRID_W, "cell out of range");
        check(col_idx != bg, "highlight equals background");
        int cell = (r - 1) * GRID_W + (c - 1);
        check(cell > last_cell, "clauses out of raster order");
        last_cell = cell;
        img.set(r - 1, c - 1, col_idx);
        p += 7;
        clauses++;
    }
    check(clauses >= 1 && clauses <= MAX_HIGHLIGHTS, "clause count out of range");
    return img;
}

// Every word the grammar (plus the fixed understanding prompt) can emit.
inline std::vector<std::string> toy_wordlist() {
    std::vector<std::string> w = {"uniform", "background", "with", "cell", "at",
                                  "row",     "column",     "and",  "1",    "2",
                                  "3",       "4",          "describe", "the", "grid"};
    for (int c = 0; c < PALETTE_K; c++) w.push_back(color_name(c));
    return w;
}

inline const char* MMU_QUESTION = "describe the grid";

inline ToyImage sample_grid(Rng& rng) {
    ToyImage img;
    int bg = rng.uniform_int(0, PALETTE_K - 1);
    img.cells.fill(bg);
    int k = rng.uniform_int(0, MAX_HIGHLIGHTS);
    for (int h = 0; h < k; h++) {
        int cell;
        do {
            cell = rng.uniform_int(0, GRID_CELLS - 1);
        } while (img.cells[size_t(cell)] != bg);
        int col;
        do {
            col = rng.uniform_int(0, PALETTE_K - 1);
        } while (col == bg);
        img.cells[size_t(cell)] = col;
    }
    return img;
}

inline std::pair<ToyImage, std::string> sample_example(Rng& rng) {
    ToyImage img = sample_grid(rng);
    return {img, caption_for_grid(img)};
}

// ---- discrete path (generation) ----------------------------------------
// Identity codebook: color index == image-token id.  Kept as a type so the
// id space stays distinct from raw colors at call sites.

struct Codebook {
    int vocab = 0;  // image_vocab_size; must cover the palette

    explicit Codebook(int image_vocab_size = PALETTE_K) : vocab(image_vocab_size) {
        check(vocab >= PALETTE_K, "image vocab smaller than palette");
    }

    std::vector<Token> tokenize(const ToyImage& img) const {
        std::vector<Token> out;
        out.reserve(GRID_CELLS);
        for (int v : img.cells) out.push_back(Token::image(v));
        return out;
    }

    ToyImage detokenize(const std::vector<Token>& toks) const {
        check((int)toks.size() == GRID_CELLS, "expected ", GRID_CELLS,
              " image tokens, got ", toks.size());
        ToyImage img;
        for (int i = 0; i < GRID_CELLS; i++) {
            check(toks[size_t(i)].modality == Modality::Image, "non-image token at ", i);
            int id = toks[size_t(i)].id;
            check(id >= 0 && id < PALETTE_K, "token outside codebook: ", id);
            img.cells[size_t(i)] = id;
        }
        return img;
    }
};

// ---- continuous path (understanding) ------------------------------------
// Frozen random lookup keyed by (cell position, color): an informative,
// deterministic feature source the projector learns to map into the model.
// Each table row is the concatenation of a random per-cell code and a random
// per-color code, so color identity occupies the same fixed subspace at every
// cell and a single linear readout generalizes across (cell, color) pairs
// never seen together.

template <typename T>
struct FrozenVisionEncoder {
    Mat<T> table;  // (GRID_CELLS * PALETTE_K) x D_VIS

    void init(Rng& rng) {
        table.resize(GRID_CELLS * PALETTE_K, D_VIS);
        int half = D_VIS / 2;
        Mat<T> cell_codes(GRID_CELLS, half), color_codes(PALETTE_K, D_VIS - half);
        cell_codes.fill_normal(rng, 1.0);
        color_codes.fill_normal(rng, 1.0);
        for (int cell = 0; cell < GRID_CELLS; cell++)
            for (int color = 0; color < PALETTE_K; color++) {
                T* row = table.row(cell * PALETTE_K + color);
                std::copy(cell_codes.row(cell), cell_codes.row(cell) + half, row);
                std::copy(color_codes.row(color), color_codes.row(color) + (D_VIS - half),
                          row + half);
            }
    }

    // 16 feature vectors, row-major [cell][D_VIS]
    std::vector<T> encode(const ToyImage& img) const {
        std::vector<T> feats(size_t(GRID_CELLS) * D_VIS);
        for (int cell = 0; cell < GRID_CELLS; cell++) {
            int v = img.cells[size_t(cell)];
            check(v >= 0 && v < PALETTE_K, "cell color out of range: ", v);
            const T* src = table.row(cell * PALETTE_K + v);
            std::copy(src, src + D_VIS, feats.begin() + size_t(cell) * D_VIS);
        }
        return feats;
    }
};

template <typename T>
struct VisualProjector {
    Mat<T> w;  // d_model x D_VIS
    Vec<T> b;  // d_model

    void init(int d_model, Rng& rng) {
        w.resize(d_model, D_VIS);
        b.resize(d_model);
        w.fill_normal(rng, 1.0 / std::sqrt((double)D_VIS));
    }

    // feats: [n][D_VIS] -> out: [n][d_model]
    void apply(const T* feats, int n, T* out) const {
        for (int i = 0; i < n; i++) {
            T* o = out + size_t(i) * w.rows;
            matvec(o, w.w.data(), feats + size_t(i) * D_VIS, w.rows, D_VIS);
            for (int j = 0; j < w.rows; j++) o[j] += b.w[j];
        }
    }

    // d(loss)/d(feats) optional (frozen encoder never needs it except in
    // gradient-check harnesses).
    void backward(const T* feats, int n, const T* dout, T* dfeats) {
        for (int i = 0; i < n; i++) {
            const T* dy = dout + size_t(i) * w.rows;
            const T* x = feats + size_t(i) * D_VIS;
            rank1_update(w.g.data(), dy, x, w.rows, D_VIS);
            axpy(b.g.data(), T(1), dy, w.rows);
            if (dfeats)
                matvec_t(dfeats + size_t(i) * D_VIS, w.w.data(), dy, w.rows, D_VIS);
        }
    }
};

}  // namespace tandem
