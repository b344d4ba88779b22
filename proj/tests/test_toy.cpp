#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "tandem/toy.hpp"

using namespace tandem;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("captions match hand-written expectations") {
    ToyImage img;
    img.cells.fill(0);  // red
    REQUIRE(caption_for_grid(img) == "uniform red");

    img.cells.fill(1);  // green
    img.set(1, 2, 2);   // blue at row 2, column 3 (1-based)
    REQUIRE(caption_for_grid(img) == "green background with blue cell at row 2 column 3");

    img.cells.fill(7);  // black
    img.set(0, 3, 6);   // white at row 1 column 4
    img.set(2, 0, 4);   // cyan at row 3 column 1
    REQUIRE(caption_for_grid(img) ==
            "black background with white cell at row 1 column 4 "
            "and cyan cell at row 3 column 1");

    img.cells.fill(3);
    img.set(3, 3, 5);
    REQUIRE(caption_for_grid(img) ==
            "yellow background with magenta cell at row 4 column 4");
}

TEST_CASE("grids parse back from hand-written captions") {
    ToyImage want;
    want.cells.fill(2);
    REQUIRE(grid_for_caption("uniform blue") == want);

    want.set(2, 1, 0);
    REQUIRE(grid_for_caption("blue background with red cell at row 3 column 2") == want);

    want.set(3, 0, 6);
    REQUIRE(grid_for_caption("blue background with red cell at row 3 column 2 "
                             "and white cell at row 4 column 1") == want);
}

TEST_CASE("caption and grid are inverse over the sampler's range") {
    Rng rng(2024);
    for (int i = 0; i < 1000; i++) {
        ToyImage img = sample_grid(rng);
        std::string cap = caption_for_grid(img);
        REQUIRE(grid_for_caption(cap) == img);
    }
}

TEST_CASE("sampled grids keep a strict majority background") {
    Rng rng(2025);
    for (int i = 0; i < 1000; i++) {
        ToyImage img = sample_grid(rng);
        int bg = img.background();  // throws if no strict majority
        int off = 0;
        for (int v : img.cells) {
            REQUIRE(v >= 0);
            REQUIRE(v < PALETTE_K);
            if (v != bg) off++;
        }
        REQUIRE(off <= MAX_HIGHLIGHTS);
    }
}

TEST_CASE("a half-and-half grid has no background") {
    ToyImage img;
    for (int i = 0; i < GRID_CELLS; i++) img.cells[size_t(i)] = i < 8 ? 0 : 1;
    REQUIRE_THROWS_WITH(img.background(), ContainsSubstring("no majority background"));
}

TEST_CASE("the caption parser rejects what the grammar cannot emit") {
    REQUIRE_THROWS_WITH(grid_for_caption(""), ContainsSubstring("empty caption"));
    REQUIRE_THROWS_WITH(grid_for_caption("uniform"), ContainsSubstring("malformed uniform"));
    REQUIRE_THROWS_WITH(grid_for_caption("uniform sparkle"),
                        ContainsSubstring("not a palette color"));
    REQUIRE_THROWS_WITH(grid_for_caption("red background with"),
                        ContainsSubstring("clause count out of range"));
    REQUIRE_THROWS_WITH(grid_for_caption("red background with blue"),
                        ContainsSubstring("truncated clause"));
    REQUIRE_THROWS_WITH(
        grid_for_caption("red background with red cell at row 1 column 1"),
        ContainsSubstring("highlight equals background"));
    REQUIRE_THROWS_WITH(
        grid_for_caption("red background with blue cell at row 5 column 1"),
        ContainsSubstring("cell out of range"));
    REQUIRE_THROWS_WITH(
        grid_for_caption("red background with blue cell at row 2 column 2 "
                         "and green cell at row 1 column 1"),
        ContainsSubstring("raster order"));
    REQUIRE_THROWS_WITH(
        grid_for_caption("red background with blue cell at row 1 column 1 "
                         "blue cell at row 1 column 2"),
        ContainsSubstring("expected 'and'"));
    REQUIRE_THROWS_WITH(
        grid_for_caption("red background with blue cell at row 1 column 1 "
                         "and blue cell at row 1 column 2 "
                         "and blue cell at row 1 column 3 "
                         "and blue cell at row 1 column 4"),
        ContainsSubstring("clause count out of range"));
}

TEST_CASE("every caption the sampler can produce tokenizes") {
    auto tk = TextTokenizer::from_words(toy_wordlist());
    Rng rng(2026);
    for (int i = 0; i < 500; i++) {
        auto [img, cap] = sample_example(rng);
        auto ids = tk.encode(cap);  // throws on any out-of-list word
        REQUIRE(tk.decode(ids) == cap);
    }
    REQUIRE(tk.decode(tk.encode(MMU_QUESTION)) == MMU_QUESTION);
}

TEST_CASE("codebook round trips a grid through image tokens") {
    Codebook cb(64);
    Rng rng(2027);
    for (int i = 0; i < 50; i++) {
        ToyImage img = sample_grid(rng);
        auto toks = cb.tokenize(img);
        REQUIRE((int)toks.size() == GRID_CELLS);
        for (auto& t : toks) REQUIRE(t.modality == Modality::Image);
        REQUIRE(cb.detokenize(toks) == img);
    }
}

TEST_CASE("codebook rejects malformed token streams") {
    Codebook cb(8);
    REQUIRE_THROWS_WITH(Codebook(4), ContainsSubstring("smaller than palette"));
    std::vector<Token> toks(GRID_CELLS, Token::image(0));
    toks.pop_back();
    REQUIRE_THROWS_WITH(cb.detokenize(toks), ContainsSubstring("expected 16 image tokens"));
    toks.push_back(Token::text(0));
    REQUIRE_THROWS_WITH(cb.detokenize(toks), ContainsSubstring("non-image token at 15"));
    toks.back() = Token::image(20);
    REQUIRE_THROWS_WITH(cb.detokenize(toks), ContainsSubstring("outside codebook"));
}

TEST_CASE("the frozen encoder is a pure lookup keyed by cell and color") {
    Rng r1(99), r2(99);
    FrozenVisionEncoder<float> e1, e2;
    e1.init(r1);
    e2.init(r2);
    REQUIRE(std::memcmp(e1.table.w.data(), e2.table.w.data(),
                        e1.table.size() * sizeof(float)) == 0);

    ToyImage a;
    a.cells.fill(3);
    auto fa = e1.encode(a);
    REQUIRE(fa.size() == size_t(GRID_CELLS) * D_VIS);
    for (int cell = 0; cell < GRID_CELLS; cell++)
        REQUIRE(std::memcmp(fa.data() + size_t(cell) * D_VIS,
                            e1.table.row(cell * PALETTE_K + 3),
                            D_VIS * sizeof(float)) == 0);

    // changing one cell moves exactly one feature row
    ToyImage b = a;
    b.set(1, 1, 6);
    auto fb = e1.encode(b);
    for (int cell = 0; cell < GRID_CELLS; cell++) {
        bool same = std::memcmp(fa.data() + size_t(cell) * D_VIS,
                                fb.data() + size_t(cell) * D_VIS,
                                D_VIS * sizeof(float)) == 0;
        REQUIRE(same == (cell != 1 * GRID_W + 1));
    }
}

TEST_CASE("the visual projector is an affine map per feature row") {
    Rng rng(100);
    VisualProjector<float> vp;
    int d_model = 24;
    vp.init(d_model, rng);
    std::vector<float> feats(size_t(2) * D_VIS);
    for (auto& v : feats) v = float(rng.normal());
    std::vector<float> out(size_t(2) * d_model);
    vp.apply(feats.data(), 2, out.data());
    for (int i = 0; i < 2; i++) {
        for (int j = 0; j < d_model; j++) {
            double want = vp.b.w[size_t(j)];
            for (int k = 0; k < D_VIS; k++)
                want += double(vp.w.w[size_t(j) * D_VIS + k]) * feats[size_t(i) * D_VIS + k];
            REQUIRE_THAT(double(out[size_t(i) * d_model + j]),
                         Catch::Matchers::WithinRel(want, 1e-5) ||
                             Catch::Matchers::WithinAbs(want, 1e-6));
        }
    }
}

TEST_CASE("color names and indices are inverse") {
    for (int c = 0; c < PALETTE_K; c++) REQUIRE(color_index(color_name(c)) == c);
    REQUIRE_THROWS_WITH(color_index("mauve"), ContainsSubstring("not a palette color"));
    REQUIRE_THROWS_WITH(color_name(8), ContainsSubstring("out of range"));
}
