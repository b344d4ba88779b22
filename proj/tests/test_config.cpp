#include <catch2/catch_amalgamated.hpp>

#include "tandem/config.hpp"

using namespace tandem;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("serialize then parse is the identity") {
    RunConfig rc;
    rc.model.d_model = 96;
    rc.model.n_layers = 3;
    rc.model.n_heads = 4;
    rc.model.headdim = 48;
    rc.model.lora_rank = 6;
    rc.stage1_mmu.peak_lr = 0.00123456789012345;
    rc.stage1_t2i.total_steps = 777;
    rc.stage2.batch_mmu = 2;
    rc.stage2.batch_t2i = 9;
    rc.gen.mode = DecodeMode::Sampled;
    rc.gen.temperature = 0.7;
    rc.gen.top_k = 12;
    rc.gen.seed = 0xdeadbeefcafef00dull;
    rc.ablation_shared_vocab = true;
    rc.ablation_lora_rank_override = 0;

    RunConfig back = RunConfig::parse(rc.serialize());
    // %.17g round-trips doubles exactly, so re-serializing must be bit-equal
    REQUIRE(back.serialize() == rc.serialize());
    REQUIRE(back.model.d_model == 96);
    REQUIRE(back.stage1_mmu.peak_lr == rc.stage1_mmu.peak_lr);
    REQUIRE(back.gen.mode == DecodeMode::Sampled);
    REQUIRE(back.gen.seed == 0xdeadbeefcafef00dull);
    REQUIRE(back.ablation_shared_vocab);
    REQUIRE(back.ablation_lora_rank_override == 0);
}

TEST_CASE("defaults survive an empty config") {
    RunConfig rc = RunConfig::parse("");
    RunConfig fresh;
    REQUIRE(rc.serialize() == fresh.serialize());
    REQUIRE(rc.stage1_mmu.peak_lr == 1e-3);
    REQUIRE(rc.stage1_t2i.peak_lr == 8e-4);
    REQUIRE(rc.stage2.peak_lr == 1e-4);
    REQUIRE(rc.stage1_mmu.warmup_steps == 100);
    REQUIRE(rc.stage2.warmup_steps == 0);
}

TEST_CASE("comments and blank lines are skipped, spacing is free-form") {
    RunConfig rc = RunConfig::parse(
        "# a comment\n"
        "\n"
        "  model.d_model=128  \n"
        "model.headdim =  32\n"
        "\t# indented comment\n"
        "gen.mode = sampled\n");
    REQUIRE(rc.model.d_model == 128);
    REQUIRE(rc.model.headdim == 32);
    REQUIRE(rc.gen.mode == DecodeMode::Sampled);
}

TEST_CASE("unknown keys are rejected with the line number") {
    REQUIRE_THROWS_WITH(RunConfig::parse("model.d_model = 64\nmodel.dmodel = 64\n"),
                        ContainsSubstring("line 2") &&
                            ContainsSubstring("unknown key 'model.dmodel'"));
}

TEST_CASE("malformed lines are rejected with the line number") {
    REQUIRE_THROWS_WITH(RunConfig::parse("model.d_model 64\n"),
                        ContainsSubstring("line 1") && ContainsSubstring("missing '='"));
    REQUIRE_THROWS_WITH(RunConfig::parse("\n\nmodel.d_model = potato\n"),
                        ContainsSubstring("line 3") && ContainsSubstring("model.d_model"));
    REQUIRE_THROWS_WITH(RunConfig::parse("ablation.shared_vocab = maybe\n"),
                        ContainsSubstring("expected bool"));
    REQUIRE_THROWS_WITH(RunConfig::parse("gen.mode = beam\n"),
                        ContainsSubstring("greedy|sampled"));
}

TEST_CASE("parse enforces model invariants") {
    // d_inner = expand*d_model must factor as n_heads*headdim
    REQUIRE_THROWS_WITH(RunConfig::parse("model.d_model = 100\n"),
                        ContainsSubstring("n_heads*headdim"));
    REQUIRE_THROWS_WITH(RunConfig::parse("model.n_groups = 3\n"),
                        ContainsSubstring("not divisible by n_groups"));
    REQUIRE_THROWS_WITH(RunConfig::parse("model.lora_rank = -1\n"),
                        ContainsSubstring("lora_rank"));
    REQUIRE_THROWS_WITH(RunConfig::parse("model.d_conv = 0\n"),
                        ContainsSubstring("positive"));
}

TEST_CASE("parse enforces stage invariants") {
    REQUIRE_THROWS_WITH(RunConfig::parse("train.stage1_mmu.peak_lr = 0\n"),
                        ContainsSubstring("peak_lr"));
    REQUIRE_THROWS_WITH(
        RunConfig::parse("train.stage2.warmup_steps = 10\ntrain.stage2.total_steps = 5\n"),
        ContainsSubstring("warmup_steps > total_steps"));
    REQUIRE_THROWS_WITH(
        RunConfig::parse("train.stage1_mmu.batch_mmu = 0\ntrain.stage1_mmu.batch_t2i = 0\n"),
        ContainsSubstring("batch is empty"));
}

TEST_CASE("derived dimensions") {
    ModelConfig m;
    m.d_model = 64;
    m.expand = 2;
    m.n_heads = 4;
    m.headdim = 32;
    m.n_groups = 2;
    m.d_state = 16;
    REQUIRE(m.d_inner() == 128);
    REQUIRE(m.conv_channels() == 128 + 2 * 2 * 16);
    REQUIRE(m.proj_out() == 2 * 128 + 2 * 2 * 16 + 4);
    REQUIRE(m.group_size() == 2);
}

TEST_CASE("lora override only changes the effective rank") {
    RunConfig rc;
    rc.model.lora_rank = 8;
    SECTION("negative override keeps the configured rank") {
        rc.ablation_lora_rank_override = -1;
        REQUIRE(rc.effective_model().lora_rank == 8);
    }
    SECTION("zero override disables adapters") {
        rc.ablation_lora_rank_override = 0;
        ModelConfig m = rc.effective_model();
        REQUIRE(m.lora_rank == 0);
        m.lora_rank = rc.model.lora_rank;  // everything else untouched
        REQUIRE(std::memcmp(&m, &rc.model, sizeof m) == 0);
    }
}

TEST_CASE("stage lookup returns the matching block") {
    RunConfig rc;
    REQUIRE(&rc.stage(StageId::Stage1MMU) == &rc.stage1_mmu);
    REQUIRE(&rc.stage(StageId::Stage1T2I) == &rc.stage1_t2i);
    REQUIRE(&rc.stage(StageId::Stage2) == &rc.stage2);
    REQUIRE(std::string(stage_name(StageId::Stage2)) == "stage2");
}
