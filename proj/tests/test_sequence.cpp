#include <catch2/catch_amalgamated.hpp>

#include "tandem/sequence.hpp"

using namespace tandem;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<Token> img16() {
    std::vector<Token> t;
    for (int i = 0; i < 16; i++) t.push_back(Token::image(i % 8));
    return t;
}

}  // namespace

TEST_CASE("understanding row layout, hand counted") {
    // [MMU][SOI] f0..f15 [EOI][SOT] q0 q1 q2 a0 a1 [EOT]  => 26 positions
    int d_model = 8;
    std::vector<float> feats(size_t(16) * d_model, 0.5f);
    auto ex = build_mmu_sequence(feats, d_model, {1, 2, 3}, {4, 5});
    const auto& st = ex.stream;

    REQUIRE(ex.route == TaskRoute::MMU);
    REQUIRE(st.length() == 26);
    REQUIRE(st.tokens[0].is_special(SP_MMU));
    REQUIRE(st.tokens[1].is_special(SP_SOI));
    REQUIRE(st.tokens[18].is_special(SP_EOI));
    REQUIRE(st.tokens[19].is_special(SP_SOT));
    REQUIRE(st.tokens[20] == Token::text(1));
    REQUIRE(st.tokens[23] == Token::text(4));
    REQUIRE(st.tokens[25].is_special(SP_EOT));

    // supervision: the two answer words and [EOT], nothing else
    std::vector<uint8_t> want_mask(26, 0);
    want_mask[23] = want_mask[24] = want_mask[25] = 1;
    REQUIRE(st.loss_mask == want_mask);

    // continuous features occupy the image segment interior
    REQUIRE(ex.continuous_start == 2);
    REQUIRE(ex.continuous_count == 16);
    REQUIRE(!ex.position_is_continuous(1));
    REQUIRE(ex.position_is_continuous(2));
    REQUIRE(ex.position_is_continuous(17));
    REQUIRE(!ex.position_is_continuous(18));

    REQUIRE(st.segments.size() == 3);
    REQUIRE(st.segments[0].kind == SegKind::TASK_TAG);
    REQUIRE((st.segments[0].start == 0 && st.segments[0].end == 1));
    REQUIRE(st.segments[1].kind == SegKind::IMAGE_SEG);
    REQUIRE((st.segments[1].start == 1 && st.segments[1].end == 19));
    REQUIRE(st.segments[2].kind == SegKind::TEXT_SEG);
    REQUIRE((st.segments[2].start == 19 && st.segments[2].end == 26));
}

TEST_CASE("generation row layout, hand counted") {
    // [T2I][SOT] c0..c3 [EOT][SOI] i0..i15 [EOI]  => 25 positions
    auto ex = build_t2i_sequence<float>({7, 8, 9, 10}, img16(), 16);
    const auto& st = ex.stream;

    REQUIRE(ex.route == TaskRoute::T2I);
    REQUIRE(st.length() == 25);
    REQUIRE(st.tokens[0].is_special(SP_T2I));
    REQUIRE(st.tokens[1].is_special(SP_SOT));
    REQUIRE(st.tokens[2] == Token::text(7));
    REQUIRE(st.tokens[6].is_special(SP_EOT));
    REQUIRE(st.tokens[7].is_special(SP_SOI));
    REQUIRE(st.tokens[8] == Token::image(0));
    REQUIRE(st.tokens[24].is_special(SP_EOI));

    // supervision: the sixteen image tokens and [EOI]
    std::vector<uint8_t> want_mask(25, 0);
    for (int t = 8; t <= 24; t++) want_mask[size_t(t)] = 1;
    REQUIRE(st.loss_mask == want_mask);

    REQUIRE(ex.continuous_count == 0);
    REQUIRE(!ex.position_is_continuous(8));

    REQUIRE(st.segments.size() == 3);
    REQUIRE(st.segments[1].kind == SegKind::TEXT_SEG);
    REQUIRE((st.segments[1].start == 1 && st.segments[1].end == 7));
    REQUIRE(st.segments[2].kind == SegKind::IMAGE_SEG);
    REQUIRE((st.segments[2].start == 7 && st.segments[2].end == 25));
}

TEST_CASE("builders validate their inputs") {
    int d_model = 8;
    std::vector<float> feats(size_t(16) * d_model, 0.5f);
    REQUIRE_THROWS_WITH(build_mmu_sequence(feats, d_model, {1}, {}),
                        ContainsSubstring("answer required"));
    std::vector<float> ragged(size_t(16) * d_model + 3, 0.5f);
    REQUIRE_THROWS_WITH(build_mmu_sequence(ragged, d_model, {1}, {2}),
                        ContainsSubstring("visual features"));
    REQUIRE_THROWS_WITH(build_t2i_sequence<float>({}, img16(), 16),
                        ContainsSubstring("caption required"));
    auto toks = img16();
    toks.pop_back();
    REQUIRE_THROWS_WITH(build_t2i_sequence<float>({1}, toks, 16),
                        ContainsSubstring("expected 16 image tokens, got 15"));
    toks = img16();
    toks[4] = Token::special(SP_EOT);
    REQUIRE_THROWS_WITH(build_t2i_sequence<float>({1}, toks, 16),
                        ContainsSubstring("non-image token in image segment"));
}

TEST_CASE("next-token view shifts the stream by one") {
    auto ex = build_t2i_sequence<float>({3, 4}, img16(), 16);
    auto b = next_token_targets(ex.stream);
    int n = ex.stream.length() - 1;
    REQUIRE((int)b.inputs.size() == n);
    REQUIRE((int)b.targets.size() == n);
    REQUIRE((int)b.mask.size() == n);
    for (int t = 0; t < n; t++) {
        REQUIRE(b.inputs[size_t(t)] == ex.stream.tokens[size_t(t)]);
        REQUIRE(b.targets[size_t(t)] == ex.stream.tokens[size_t(t) + 1]);
        REQUIRE(b.mask[size_t(t)] == ex.stream.loss_mask[size_t(t) + 1]);
    }
    // first supervised target is the first image token, predicted from [SOI]
    // stream: [T2I][SOT] c0 c1 [EOT][SOI] i0 ... so [SOI] sits at index 5
    REQUIRE(b.mask[4] == 0);
    REQUIRE(b.mask[5] == 1);
    REQUIRE(b.inputs[5].is_special(SP_SOI));
    REQUIRE(b.targets[5] == Token::image(0));

    TokenStream tiny;
    tiny.tokens = {Token::text(0)};
    tiny.loss_mask = {0};
    REQUIRE_THROWS_WITH(next_token_targets(tiny), ContainsSubstring("too short"));
}

TEST_CASE("stream validation catches broken segment tiling") {
    TokenStream st;
    st.tokens = {Token::text(0), Token::text(1)};
    st.loss_mask = {0, 1};
    st.segments = {{SegKind::TEXT_SEG, 0, 1}};
    REQUIRE_THROWS_WITH(st.validate(), ContainsSubstring("do not cover"));
    st.segments = {{SegKind::TEXT_SEG, 0, 1}, {SegKind::TEXT_SEG, 0, 2}};
    REQUIRE_THROWS_WITH(st.validate(), ContainsSubstring("tile the stream"));
    st.loss_mask = {0};
    REQUIRE_THROWS_WITH(st.validate(), ContainsSubstring("length mismatch"));
}

TEST_CASE("dataset records round trip through json lines") {
    DataRecord r;
    r.task = "t2i";
    for (int i = 0; i < GRID_CELLS; i++) r.grid.cells[size_t(i)] = i % 8;
    r.caption = "red background with blue cell at row 1 column 2";

    DataRecord back = record_from_json(record_to_json(r));
    REQUIRE(back.task == r.task);
    REQUIRE(back.grid == r.grid);
    REQUIRE(back.caption == r.caption);

    REQUIRE_THROWS_WITH(record_from_json(R"({"task":"vqa","grid":[0],"caption":"x"})"),
                        ContainsSubstring("grid must have"));
    std::string bad_task = R"({"task":"vqa","caption":"x","grid":[)";
    for (int i = 0; i < GRID_CELLS; i++) bad_task += i ? ",0" : "0";
    bad_task += "]}";
    REQUIRE_THROWS_WITH(record_from_json(bad_task), ContainsSubstring("unknown task 'vqa'"));
    REQUIRE_THROWS(record_from_json("not json at all"));
}

TEST_CASE("datasets persist as one record per line") {
    std::vector<DataRecord> recs(3);
    Rng rng(55);
    for (size_t i = 0; i < recs.size(); i++) {
        recs[i].task = i % 2 ? "t2i" : "mmu";
        recs[i].grid = sample_grid(rng);
        recs[i].caption = caption_for_grid(recs[i].grid);
    }
    std::string path = "/tmp/tandem_test_dataset.jsonl";
    save_dataset(path, recs);
    auto back = load_dataset(path);
    REQUIRE(back.size() == recs.size());
    for (size_t i = 0; i < recs.size(); i++) {
        REQUIRE(back[i].task == recs[i].task);
        REQUIRE(back[i].grid == recs[i].grid);
        REQUIRE(back[i].caption == recs[i].caption);
    }

    write_file(path, "\n\n");
    REQUIRE_THROWS_WITH(load_dataset(path), ContainsSubstring("empty dataset"));
}
