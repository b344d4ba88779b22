#pragma once

#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "tandem/bench.hpp"
#include "tandem/checkpoint.hpp"
#include "tandem/infer.hpp"
#include "tandem/train.hpp"

#include "CLI11.hpp"

namespace tandem {

namespace cli_detail {

inline std::string path_join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

// Interleaved task assignment; validation grids never collide with train.
inline void generate_datasets(const std::string& out_dir, int train_count, int val_count,
                              uint64_t seed) {
    std::filesystem::create_directories(out_dir);
    Rng rng(seed);
    std::vector<DataRecord> train, val;
    std::set<std::string> train_keys;
    for (int i = 0; i < train_count; i++) {
        auto [grid, caption] = sample_example(rng);
        train.push_back({i % 2 == 0 ? "mmu" : "t2i", grid, caption});
        train_keys.insert(grid.key());
    }
    int guard = 0;
    while ((int)val.size() < val_count) {
        auto [grid, caption] = sample_example(rng);
        check(++guard < val_count * 1000, "validation sampling stalled");
        if (train_keys.count(grid.key())) continue;
        val.push_back({val.size() % 2 == 0 ? "mmu" : "t2i", grid, caption});
    }
    save_dataset(path_join(out_dir, "train.jsonl"), train);
    save_dataset(path_join(out_dir, "val.jsonl"), val);
    TextTokenizer::from_words(toy_wordlist()).save(path_join(out_dir, "vocab.txt"));
}

inline RunConfig load_run_config(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    return RunConfig::load_file(config_path);
}

struct TrainSetup {
    RunConfig rc;
    Model<float> model;
    TextTokenizer tok;
};

inline void cmd_train(const std::string& config_path, const std::string& data_dir,
                      const std::string& out_dir, const std::string& stage_flag,
                      uint64_t seed) {
    RunConfig rc = load_run_config(config_path);
    ModelConfig mc = rc.effective_model();
    std::filesystem::create_directories(out_dir);

    StageId id;
    if (stage_flag == "1mmu") id = StageId::Stage1MMU;
    else if (stage_flag == "1t2i") id = StageId::Stage1T2I;
    else if (stage_flag == "2") id = StageId::Stage2;
    else fail("unknown stage '", stage_flag, "' (expected 1mmu, 1t2i, or 2)");

    Model<float> model;
    model.init(mc, rc.ablation_shared_vocab, seed);
    std::string config_text = rc.serialize();

    if (id == StageId::Stage2) {
        std::string mmu_path = path_join(out_dir, "stage1_mmu.ckpt");
        std::string t2i_path = path_join(out_dir, "stage1_t2i.ckpt");
        check(std::filesystem::exists(mmu_path),
              "stage 2 needs the understanding branch checkpoint: ", mmu_path);
        check(std::filesystem::exists(t2i_path),
              "stage 2 needs the generation branch checkpoint: ", t2i_path);
        CheckpointStore merged =
            merge_stage1(load_checkpoint(mmu_path), load_checkpoint(t2i_path), model);
        check(merged.config_text == config_text,
              "stage-1 checkpoints were produced under a different config");
        apply_to_model(merged, model);
    }

    TextTokenizer tok = TextTokenizer::load(path_join(data_dir, "vocab.txt"));
    auto records = load_dataset(path_join(data_dir, "train.jsonl"));

    Trainer<float> trainer(model, tok);
    trainer.load_pools(records);

    const StageConfig& sc = id == StageId::Stage1MMU   ? rc.stage1_mmu
                            : id == StageId::Stage1T2I ? rc.stage1_t2i
                                                       : rc.stage2;
    std::string ckpt = path_join(out_dir, cat(stage_name(id), ".ckpt"));
    std::vector<std::string> log_lines;
    auto metrics =
        trainer.run_stage(sc, seed ^ 0x7261696eull, ckpt, config_text, 50, &log_lines);

    std::string log_blob;
    for (auto& l : log_lines) { log_blob += l; log_blob += '\n'; }
    write_file(path_join(out_dir, cat("metrics_", stage_name(id), ".jsonl")), log_blob);

    const auto& last = metrics.back();
    std::cout << stage_name(id) << " done: steps=" << sc.total_steps
              << " mmu_loss=" << last.mmu_loss << " t2i_loss=" << last.t2i_loss
              << " ckpt=" << ckpt << "\n";
}

inline Model<float> model_from_checkpoint(const std::string& ckpt_path, RunConfig& rc_out) {
    CheckpointStore store = load_checkpoint(ckpt_path);
    rc_out = RunConfig::parse(store.config_text);
    Model<float> model;
    model.init(rc_out.effective_model(), rc_out.ablation_shared_vocab, 0);
    apply_to_model(store, model);
    return model;
}

inline void cmd_eval(const std::string& ckpt_path, const std::string& data_dir) {
    RunConfig rc;
    Model<float> model = model_from_checkpoint(ckpt_path, rc);
    TextTokenizer tok = TextTokenizer::load(path_join(data_dir, "vocab.txt"));
    auto records = load_dataset(path_join(data_dir, "val.jsonl"));
    EvalReport rep = evaluate(model, tok, records, rc.gen);
    std::cout << "mmu_em=" << rep.mmu_em() << " t2i_em=" << rep.t2i_em()
              << " n_mmu=" << rep.n_mmu << " n_t2i=" << rep.n_t2i
              << " cross_modal_tokens=" << rep.cross_modal_tokens << "\n";
}

inline void cmd_generate(const std::string& ckpt_path, const std::string& data_dir,
                         const std::string& caption) {
    RunConfig rc;
    Model<float> model = model_from_checkpoint(ckpt_path, rc);
    TextTokenizer tok = TextTokenizer::load(path_join(data_dir, "vocab.txt"));
    Codebook codebook(model.cfg.image_vocab_size);
    auto res = generate_image(model, tok.encode(caption), rc.gen, codebook);
    for (size_t i = 0; i < res.tokens.size(); i++)
        std::cout << (i ? " " : "") << res.tokens[i].id;
    std::cout << "\n";
    if (res.valid_grid) {
        for (int r = 0; r < GRID_H; r++) {
            for (int c = 0; c < GRID_W; c++)
                std::cout << color_name(res.grid.at(r, c))[0] << ' ';
            std::cout << "\n";
        }
    } else {
        std::cout << "(stream does not form a grid)\n";
    }
}

inline void cmd_bench(const std::string& out_file, const std::string& lens_csv, int reps,
                      uint64_t seed) {
    ModelConfig mc;  // desk defaults
    Model<float> ssm;
    ssm.init(mc, false, seed);
    AttnConfig ac = matched_attn_config(mc, ssm.base_param_count());
    AttnModel<float> attn;
    attn.init(ac, mc, seed ^ 0xa77ull);

    std::vector<int> lens;
    size_t pos = 0;
    while (pos < lens_csv.size()) {
        size_t comma = lens_csv.find(',', pos);
        if (comma == std::string::npos) comma = lens_csv.size();
        lens.push_back(std::stoi(lens_csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    check(!lens.empty(), "no sequence lengths given");

    auto rows = bench_pair(ssm, attn, lens, reps);
    std::string table = bench_table_csv(rows);
    if (!out_file.empty()) write_file(out_file, table);
    std::cout << table;
    std::cout << "params: ssm=" << ssm.base_param_count()
              << " attn=" << attn.base_param_count() << " attn_layers=" << ac.n_layers
              << "\n";
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"unified multimodal recurrent language model, desk scale"};
    app.require_subcommand(1);

    std::string config_path, data_dir = "data", out_dir = "runs", stage = "1mmu";
    std::string ckpt_path, caption, out_file, lens_csv = "256,512,1024,2048,4096";
    uint64_t seed = 0;
    int train_count = 4000, val_count = 500, reps = 5;
    bool strict_determinism = true;

    auto* gen_data = app.add_subcommand("gen-data", "write train/val datasets + vocab");
    gen_data->add_option("--out", out_dir, "output directory");
    gen_data->add_option("--seed", seed, "sampling seed");
    gen_data->add_option("--train-count", train_count, "training records");
    gen_data->add_option("--val-count", val_count, "held-out records");

    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--config", config_path, "run config file (defaults when absent)");
    train->add_option("--data", data_dir, "dataset directory (from gen-data)");
    train->add_option("--out", out_dir, "checkpoint/metrics directory");
    train->add_option("--stage", stage, "1mmu | 1t2i | 2")->required();
    train->add_option("--seed", seed, "init + batch seed");
    train->add_flag("--strict-determinism,!--no-strict-determinism", strict_determinism,
                    "single-threaded bit-reproducible execution (always on)");

    auto* eval_cmd = app.add_subcommand("eval", "exact-match accuracy on a val file");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory");

    auto* generate = app.add_subcommand("generate", "caption -> grid");
    generate->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    generate->add_option("--data", data_dir, "dataset directory (vocab)");
    generate->add_option("--caption", caption, "input caption")->required();

    auto* bench = app.add_subcommand("bench", "decode speed/memory vs attention");
    bench->add_option("--out", out_file, "CSV output path");
    bench->add_option("--lens", lens_csv, "comma-separated decode positions");
    bench->add_option("--reps", reps, "timing repetitions (median)");
    bench->add_option("--seed", seed, "weight seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (gen_data->parsed())
            cli_detail::generate_datasets(out_dir, train_count, val_count, seed);
        else if (train->parsed())
            cli_detail::cmd_train(config_path, data_dir, out_dir, stage, seed);
        else if (eval_cmd->parsed())
            cli_detail::cmd_eval(ckpt_path, data_dir);
        else if (generate->parsed())
            cli_detail::cmd_generate(ckpt_path, data_dir, caption);
        else if (bench->parsed())
            cli_detail::cmd_bench(out_file, lens_csv, reps, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace tandem
