// dvit command line: synthetic data generation, self-supervised
// pretraining, dense-task fine-tuning, evaluation, checkpoint inspection.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "dvit/checkpoint.hpp"
#include "dvit/finetune.hpp"
#include "dvit/pretrain.hpp"
#include "dvit/settings.hpp"

namespace {

using namespace dvit;

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    Config cfg = path.empty() ? Config() : Config::parse_file(path);
    for (const auto& o : overrides) cfg.set_override(o);
    return cfg;
}

int cmd_gen_data(const Config& cfg) {
    const std::string out_dir = cfg.get_str("data.out_dir", "data");
    SyntheticShapesSpec base = shapes_from_config(cfg);

    auto emit = [&](const std::string& split, int count, std::uint64_t seed_salt, bool labels) {
        if (count <= 0) return;
        SyntheticShapesSpec spec = base;
        spec.split = split;
        spec.count = count;
        spec.seed = Rng::mix(base.seed, seed_salt);
        spec.with_masks = labels;
        spec.with_depths = labels;
        const DatasetManifest m = generate_shapes(spec, out_dir);
        std::printf("wrote %zu %s images under %s\n", m.size(), split.c_str(), out_dir.c_str());
    };
    emit("pretrain", static_cast<int>(cfg.get_int("data.pretrain_count", 0)), 0x11, false);
    emit("train", static_cast<int>(cfg.get_int("data.train_count", base.count)), 0x22, true);
    emit("val", static_cast<int>(cfg.get_int("data.val_count", 0)), 0x33, true);
    return 0;
}

int cmd_pretrain(const Config& cfg) {
    const ViTConfig vit = vit_from_config(cfg);
    const ContrastiveConfig loss = contrastive_from_config(cfg);
    const AugPolicy policy = augment_from_config(cfg, vit.image_size);
    const TrainConfig train = train_from_config(cfg);

    const std::string manifest_path = cfg.get_str("data.manifest", "");
    if (manifest_path.empty()) throw ConfigError("pretrain requires data.manifest");
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);

    PretrainOptions options;
    options.out_dir = cfg.get_str("data.out_dir", "runs/pretrain");
    options.resume_from = cfg.get_str("train.resume", "");
    options.on_step = [](const StepLog& s) {
        if (s.step % 10 == 0)
            std::printf("step %lld epoch %lld lr %.3g loss %.4f\n", static_cast<long long>(s.step),
                        static_cast<long long>(s.epoch), s.lr, s.loss);
    };
    const PretrainResult result = pretrain(manifest, vit, loss, policy, train, options);
    std::printf("final checkpoint: %s\n", result.final_checkpoint.string().c_str());
    return 0;
}

int cmd_finetune(const Config& cfg, bool seg) {
    const std::string train_path = cfg.get_str("data.train_manifest", "");
    const std::string val_path = cfg.get_str("data.val_manifest", "");
    if (train_path.empty() || val_path.empty())
        throw ConfigError("finetune requires data.train_manifest and data.val_manifest");
    const DatasetManifest train = DatasetManifest::load(train_path);
    const DatasetManifest val = DatasetManifest::load(val_path);

    // Layer-wise decay defaults on for segmentation, off for depth.
    const FinetuneSchedule schedule = finetune_from_config(cfg, seg);
    const ViTConfig vit = vit_from_config(cfg);

    FinetuneOptions options;
    options.out_dir = cfg.get_str("data.out_dir", seg ? "runs/seg" : "runs/depth");
    options.init_checkpoint = cfg.get_str("init.checkpoint", "");
    options.on_step = [](const StepLog& s) {
        if (s.step % 25 == 0)
            std::printf("step %lld epoch %lld lr %.3g loss %.4f\n", static_cast<long long>(s.step),
                        static_cast<long long>(s.epoch), s.lr, s.loss);
    };

    const FinetuneResult result =
        seg ? finetune_seg(train, val, vit, seg_from_config(cfg), schedule, options)
            : finetune_depth(train, val, vit, depth_from_config(cfg), schedule, options);
    for (const auto& r : result.report)
        std::printf("%s\t%s\t%.6g\n", r.task.c_str(), r.metric.c_str(), r.value);
    std::printf("checkpoint: %s\n", result.checkpoint.string().c_str());
    return 0;
}

int cmd_eval(const Config& cfg) {
    const std::string ckpt = cfg.get_str("eval.checkpoint", "");
    const std::string manifest_path = cfg.get_str("eval.manifest", "");
    if (ckpt.empty() || manifest_path.empty())
        throw ConfigError("eval requires eval.checkpoint and eval.manifest");
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    for (const auto& r : evaluate_checkpoint(ckpt, manifest))
        std::printf("%s\t%s\t%.6g\n", r.task.c_str(), r.metric.c_str(), r.value);
    return 0;
}

int cmd_inspect(const std::string& path) {
    Checkpoint ckpt;
    try {
        ckpt = load_checkpoint(path);
    } catch (const CorruptCheckpoint& e) {
        std::printf("crc\tFAILED\n");
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    std::printf("version\t%u\n", ckpt.version);
    std::printf("crc\tok\n");
    std::printf("config\t%s\n", ckpt.config_json.c_str());
    for (const auto& [name, t] : ckpt.tensors)
        std::printf("tensor\t%s\t%s\n", name.c_str(), shape_str(t.shape()).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dense-prediction ViT pretraining toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string inspect_path;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (INI-style)");
        sub->add_option("--set", overrides, "override a key, e.g. --set train.epochs=1");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
    add_common(gen);
    CLI::App* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
    add_common(pre);
    CLI::App* fts = app.add_subcommand("finetune-seg", "fine-tune for semantic segmentation");
    add_common(fts);
    CLI::App* ftd = app.add_subcommand("finetune-depth", "fine-tune for monocular depth");
    add_common(ftd);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
    add_common(ev);
    CLI::App* ins = app.add_subcommand("inspect-ckpt", "print a checkpoint's tensor table");
    ins->add_option("checkpoint", inspect_path, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n" << app.help() << std::flush;
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(load_config(config_path, overrides));
        if (pre->parsed()) return cmd_pretrain(load_config(config_path, overrides));
        if (fts->parsed()) return cmd_finetune(load_config(config_path, overrides), true);
        if (ftd->parsed()) return cmd_finetune(load_config(config_path, overrides), false);
        if (ev->parsed()) return cmd_eval(load_config(config_path, overrides));
        if (ins->parsed()) return cmd_inspect(inspect_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
