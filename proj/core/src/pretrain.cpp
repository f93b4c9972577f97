#include "dvit/pretrain.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <json.hpp>

namespace dvit {

namespace {

using nlohmann::json;

json vit_to_json(const ViTConfig& c) {
    return {{"image_size", c.image_size},   {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
            {"depth", c.depth},             {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio},
            {"drop_path_rate", c.drop_path_rate}};
}

json contrastive_to_json(const ContrastiveConfig& c) {
    return {{"temperature", c.temperature},
            {"proj_hidden_dim", c.proj_hidden_dim},
            {"proj_out_dim", c.proj_out_dim},
            {"symmetric", c.symmetric},
            {"normalize", c.normalize},
            {"mode", c.mode == ContrastiveConfig::Mode::dense ? "dense" : "vanilla"}};
}

json train_to_json(const TrainConfig& c) {
    return {{"base_lr", c.base_lr},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"warmup_fraction", c.warmup_fraction},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"lr_reference_batch", c.lr_reference_batch}};
}

}  // namespace

std::string make_run_config_json(const ViTConfig& vit, const ContrastiveConfig& loss,
                                 const TrainConfig& train, std::int64_t step, std::int64_t adam_t) {
    json j;
    j["vit"] = vit_to_json(vit);
    j["contrastive"] = contrastive_to_json(loss);
    j["train"] = train_to_json(train);
    j["state"] = {{"step", step}, {"adam_t", adam_t}};
    return j.dump();
}

RunState run_state_from_json(const std::string& text) {
    const json j = json::parse(text);
    RunState s;
    if (j.contains("state")) {
        s.step = j["state"].value("step", 0);
        s.adam_t = j["state"].value("adam_t", 0);
    }
    return s;
}

ViTConfig vit_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    if (!j.contains("vit")) throw IncompatibleCheckpoint("checkpoint config has no 'vit' section");
    const json& v = j["vit"];
    ViTConfig c;
    c.image_size = v.value("image_size", c.image_size);
    c.patch_size = v.value("patch_size", c.patch_size);
    c.embed_dim = v.value("embed_dim", c.embed_dim);
    c.depth = v.value("depth", c.depth);
    c.num_heads = v.value("num_heads", c.num_heads);
    c.mlp_ratio = v.value("mlp_ratio", c.mlp_ratio);
    c.drop_path_rate = v.value("drop_path_rate", c.drop_path_rate);
    return c;
}

ContrastiveConfig contrastive_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    ContrastiveConfig c;
    if (!j.contains("contrastive")) return c;
    const json& v = j["contrastive"];
    c.temperature = v.value("temperature", c.temperature);
    c.proj_hidden_dim = v.value("proj_hidden_dim", c.proj_hidden_dim);
    c.proj_out_dim = v.value("proj_out_dim", c.proj_out_dim);
    c.symmetric = v.value("symmetric", c.symmetric);
    c.normalize = v.value("normalize", c.normalize);
    c.mode = v.value("mode", "dense") == std::string("vanilla") ? ContrastiveConfig::Mode::vanilla
                                                                : ContrastiveConfig::Mode::dense;
    return c;
}

Checkpoint snapshot(ViTParams& encoder, ProjectionHead& head, const AdamW& optimizer,
                    std::string config_json) {
    Checkpoint ckpt;
    ckpt.config_json = std::move(config_json);
    for (auto& [name, t] : encoder.named()) ckpt.add("encoder." + name, t->clone());
    for (auto& [name, t] : head.named()) ckpt.add("head." + name, t->clone());
    for (const auto& slot : optimizer.slots()) {
        ckpt.add("optim.m." + slot.name, slot.m.clone());
        ckpt.add("optim.v." + slot.name, slot.v.clone());
    }
    return ckpt;
}

void restore(const Checkpoint& ckpt, ViTParams& encoder, ProjectionHead* head, AdamW* optimizer) {
    {
        std::vector<std::pair<std::string, Tensor*>> params;
        for (auto& [name, t] : encoder.named()) params.emplace_back(name, t);
        bind_parameters(ckpt, "encoder.", std::move(params));
    }
    if (head) {
        std::vector<std::pair<std::string, Tensor*>> params;
        for (auto& [name, t] : head->named()) params.emplace_back(name, t);
        bind_parameters(ckpt, "head.", std::move(params));
    }
    if (optimizer) {
        for (auto& slot : optimizer->slots()) {
            const Tensor* m = ckpt.find("optim.m." + slot.name);
            const Tensor* v = ckpt.find("optim.v." + slot.name);
            if (!m || !v)
                throw IncompatibleCheckpoint("checkpoint has no optimizer state for '" + slot.name + "'");
            if (m->shape() != slot.m.shape())
                throw ShapeMismatch("optimizer state 'optim.m." + slot.name + "' has shape " +
                                    shape_str(m->shape()) + " but the model expects " +
                                    shape_str(slot.m.shape()));
            slot.m.data() = m->data();
            slot.v.data() = v->data();
        }
        optimizer->set_t(run_state_from_json(ckpt.config_json).adam_t);
    }
}

float train_step(const std::vector<Image>& batch, ViTParams& encoder, ProjectionHead& head,
                 AdamW& optimizer, const ViTConfig& vit_config, const ContrastiveConfig& loss_config,
                 const AugPolicy& policy, double lr, std::uint64_t step_seed) {
    const auto B = batch.size();
    std::vector<Image> views_a(B), views_b(B);
    for (std::size_t i = 0; i < B; ++i) {
        Rng rng(Rng::mix(step_seed, 0xa090000ull + i));
        auto pair = make_view_pair(batch[i], rng, policy);
        views_a[i] = std::move(pair.first);
        views_b[i] = std::move(pair.second);
    }
    Tensor images_a = images_to_tensor(views_a);
    Tensor images_b = images_to_tensor(views_b);

    Rng drop_rng(Rng::mix(step_seed, 0xd2090000ull));

    Tape tape;
    Tape::Scope scope(tape);
    const bool training = vit_config.drop_path_rate > 0.0;
    Tensor tokens_a = vit_forward(images_a, encoder, vit_config, training, &drop_rng);
    Tensor tokens_b = vit_forward(images_b, encoder, vit_config, training, &drop_rng);
    ProjectedFeatures feats_a = project(tokens_a, head, loss_config.normalize);
    ProjectedFeatures feats_b = project(tokens_b, head, loss_config.normalize);
    Tensor loss = contrastive_loss(feats_a, feats_b, loss_config);

    optimizer.zero_grad();
    tape.backward(loss);
    optimizer.step(lr);
    return loss.item();
}

PretrainResult pretrain(const DatasetManifest& manifest, const ViTConfig& vit_config,
                        const ContrastiveConfig& loss_config, const AugPolicy& policy,
                        const TrainConfig& train_config, const PretrainOptions& options) {
    vit_config.validate();
    loss_config.validate();
    train_config.validate();
    policy.validate();
    if (manifest.entries.empty()) throw EmptyDataset("pretrain: empty manifest");

    std::filesystem::create_directories(options.out_dir);

    Rng init_rng(Rng::mix(train_config.seed, 0x14170000ull));
    ViTParams encoder = ViTParams::init(vit_config, init_rng);
    ProjectionHead head = ProjectionHead::init(
        vit_config.embed_dim,
        loss_config.proj_hidden_dim > 0 ? loss_config.proj_hidden_dim : vit_config.embed_dim,
        loss_config.proj_out_dim, init_rng);

    AdamWConfig opt_config;
    opt_config.weight_decay = train_config.weight_decay;
    AdamW optimizer(opt_config);
    for (auto& [name, t] : encoder.named()) optimizer.add_param("encoder." + name, *t);
    for (auto& [name, t] : head.named()) optimizer.add_param("head." + name, *t);

    BatchIterator iterator(manifest, train_config.batch_size, train_config.seed);
    const std::int64_t steps_per_epoch = iterator.batches_per_epoch();
    const std::int64_t total_steps = steps_per_epoch * train_config.epochs;

    std::int64_t global_step = 0;
    if (!options.resume_from.empty()) {
        const Checkpoint ckpt = load_checkpoint(options.resume_from);
        restore(ckpt, encoder, &head, &optimizer);
        global_step = run_state_from_json(ckpt.config_json).step;
        if (global_step % steps_per_epoch != 0)
            throw IncompatibleCheckpoint("resume checkpoint not at an epoch boundary (step " +
                                         std::to_string(global_step) + ")");
    }

    if (train_config.batch_size == 1 && loss_config.mode == ContrastiveConfig::Mode::dense)
        std::cerr << "pretrain: batch_size 1 yields an empty negative set; dense loss is 0\n";

    std::ofstream log_file(options.out_dir / "train_log.tsv",
                           global_step == 0 ? std::ios::trunc : std::ios::app);

    PretrainResult result;
    for (std::int64_t epoch = global_step / steps_per_epoch; epoch < train_config.epochs; ++epoch) {
        iterator.start_epoch(epoch);
        Batch batch;
        while (iterator.next(batch)) {
            const auto t0 = std::chrono::steady_clock::now();
            const double lr = lr_at_step(global_step, total_steps, train_config);
            const std::uint64_t step_seed = Rng::mix(train_config.seed, static_cast<std::uint64_t>(global_step));
            const float loss = train_step(batch.images, encoder, head, optimizer, vit_config,
                                          loss_config, policy, lr, step_seed);
            const auto t1 = std::chrono::steady_clock::now();

            StepLog entry;
            entry.step = global_step;
            entry.epoch = epoch;
            entry.lr = lr;
            entry.loss = loss;
            entry.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            char line[160];
            std::snprintf(line, sizeof(line), "%lld\t%lld\t%.8g\t%.8g\t%.3f",
                          static_cast<long long>(entry.step), static_cast<long long>(entry.epoch),
                          entry.lr, entry.loss, entry.wall_ms);
            log_file << line << "\n";
            if (options.on_step) options.on_step(entry);
            result.log.push_back(entry);
            ++global_step;
        }
        if (options.checkpoint_each_epoch) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_epoch_%04lld.dckp", static_cast<long long>(epoch));
            const std::string config_json = make_run_config_json(vit_config, loss_config, train_config,
                                                                 global_step, optimizer.t());
            save_checkpoint(options.out_dir / name, snapshot(encoder, head, optimizer, config_json));
        }
    }

    const std::string config_json =
        make_run_config_json(vit_config, loss_config, train_config, global_step, optimizer.t());
    result.final_checkpoint = options.out_dir / "ckpt_final.dckp";
    save_checkpoint(result.final_checkpoint, snapshot(encoder, head, optimizer, config_json));
    return result;
}

}  // namespace dvit
