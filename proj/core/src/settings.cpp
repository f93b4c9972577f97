#include "dvit/settings.hpp"

namespace dvit {

ViTConfig vit_from_config(const Config& cfg) {
    ViTConfig c = cfg.has("vit.preset") ? ViTConfig::preset(cfg.get_str("vit.preset", "")) : ViTConfig();
    c.image_size = static_cast<int>(cfg.get_int("vit.image_size", c.image_size));
    c.patch_size = static_cast<int>(cfg.get_int("vit.patch_size", c.patch_size));
    c.embed_dim = static_cast<int>(cfg.get_int("vit.embed_dim", c.embed_dim));
    c.depth = static_cast<int>(cfg.get_int("vit.depth", c.depth));
    c.num_heads = static_cast<int>(cfg.get_int("vit.num_heads", c.num_heads));
    c.mlp_ratio = cfg.get_double("vit.mlp_ratio", c.mlp_ratio);
    c.drop_path_rate = cfg.get_double("vit.drop_path_rate", c.drop_path_rate);
    c.validate();
    return c;
}

ContrastiveConfig contrastive_from_config(const Config& cfg) {
    ContrastiveConfig c;
    c.temperature = cfg.get_double("contrastive.temperature", c.temperature);
    c.proj_hidden_dim = static_cast<int>(cfg.get_int("contrastive.proj_hidden_dim", c.proj_hidden_dim));
    c.proj_out_dim = static_cast<int>(cfg.get_int("contrastive.proj_out_dim", c.proj_out_dim));
    c.symmetric = cfg.get_bool("contrastive.symmetric", c.symmetric);
    c.normalize = cfg.get_bool("contrastive.normalize", c.normalize);
    const std::string mode = cfg.get_str("contrastive.mode", "dense");
    if (mode == "dense")
        c.mode = ContrastiveConfig::Mode::dense;
    else if (mode == "vanilla")
        c.mode = ContrastiveConfig::Mode::vanilla;
    else
        throw ConfigError("contrastive.mode must be dense or vanilla, got '" + mode + "'");
    c.validate();
    return c;
}

AugPolicy augment_from_config(const Config& cfg, int default_output_size) {
    AugPolicy p;
    p.output_size = default_output_size;
    p.crop_scale_lo = cfg.get_double("augment.crop_scale_lo", p.crop_scale_lo);
    p.crop_scale_hi = cfg.get_double("augment.crop_scale_hi", p.crop_scale_hi);
    p.aspect_lo = cfg.get_double("augment.aspect_lo", p.aspect_lo);
    p.aspect_hi = cfg.get_double("augment.aspect_hi", p.aspect_hi);
    p.output_size = static_cast<int>(cfg.get_int("augment.output_size", p.output_size));
    p.flip_prob = cfg.get_double("augment.flip_prob", p.flip_prob);
    p.jitter_prob = cfg.get_double("augment.jitter_prob", p.jitter_prob);
    p.brightness = cfg.get_double("augment.brightness", p.brightness);
    p.contrast = cfg.get_double("augment.contrast", p.contrast);
    p.saturation = cfg.get_double("augment.saturation", p.saturation);
    p.hue = cfg.get_double("augment.hue", p.hue);
    p.grayscale_prob = cfg.get_double("augment.grayscale_prob", p.grayscale_prob);
    p.blur_prob = cfg.get_double("augment.blur_prob", p.blur_prob);
    p.blur_sigma_lo = cfg.get_double("augment.blur_sigma_lo", p.blur_sigma_lo);
    p.blur_sigma_hi = cfg.get_double("augment.blur_sigma_hi", p.blur_sigma_hi);
    p.validate();
    return p;
}

TrainConfig train_from_config(const Config& cfg) {
    TrainConfig c;
    c.base_lr = cfg.get_double("train.base_lr", c.base_lr);
    c.batch_size = static_cast<int>(cfg.get_int("train.batch_size", c.batch_size));
    c.epochs = static_cast<int>(cfg.get_int("train.epochs", c.epochs));
    c.warmup_fraction = cfg.get_double("train.warmup_fraction", c.warmup_fraction);
    c.weight_decay = cfg.get_double("train.weight_decay", c.weight_decay);
    c.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    c.lr_reference_batch = static_cast<int>(cfg.get_int("train.lr_reference_batch", c.lr_reference_batch));
    c.validate();
    return c;
}

FinetuneSchedule finetune_from_config(const Config& cfg, bool layer_decay_default) {
    FinetuneSchedule s;
    s.use_layer_decay = layer_decay_default;
    s.base_lr = cfg.get_double("finetune.base_lr", s.base_lr);
    s.poly_power = cfg.get_double("finetune.poly_power", s.poly_power);
    s.weight_decay = cfg.get_double("finetune.weight_decay", s.weight_decay);
    s.drop_path_rate = cfg.get_double("finetune.drop_path_rate", s.drop_path_rate);
    s.layer_decay = cfg.get_double("finetune.layer_decay", s.layer_decay);
    s.use_layer_decay = cfg.get_bool("finetune.use_layer_decay", s.use_layer_decay);
    s.epochs = static_cast<int>(cfg.get_int("finetune.epochs", s.epochs));
    s.batch_size = static_cast<int>(cfg.get_int("finetune.batch_size", s.batch_size));
    s.seed = static_cast<std::uint64_t>(cfg.get_int("finetune.seed", 0));
    s.validate();
    return s;
}

SegHeadConfig seg_from_config(const Config& cfg) {
    SegHeadConfig c;
    c.num_classes = static_cast<int>(cfg.get_int("seg.num_classes", c.num_classes));
    c.ignore_index = cfg.get_int("seg.ignore_index", c.ignore_index);
    c.validate();
    return c;
}

DepthHeadConfig depth_from_config(const Config& cfg) {
    DepthHeadConfig c;
    c.d_min = cfg.get_double("depth.d_min", c.d_min);
    c.d_max = cfg.get_double("depth.d_max", c.d_max);
    c.smoothness_weight = cfg.get_double("depth.smoothness_weight", c.smoothness_weight);
    // up_stages and stage_channels are derived from the encoder at run time
    return c;
}

SyntheticShapesSpec shapes_from_config(const Config& cfg) {
    SyntheticShapesSpec s;
    s.count = static_cast<int>(cfg.get_int("data.count", s.count));
    s.image_size = static_cast<int>(cfg.get_int("data.image_size", s.image_size));
    s.num_classes = static_cast<int>(cfg.get_int("data.num_classes", s.num_classes));
    s.min_shapes = static_cast<int>(cfg.get_int("data.min_shapes", s.min_shapes));
    s.max_shapes = static_cast<int>(cfg.get_int("data.max_shapes", s.max_shapes));
    s.d_min = cfg.get_double("data.d_min", s.d_min);
    s.d_max = cfg.get_double("data.d_max", s.d_max);
    s.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed", 0));
    s.validate();
    return s;
}

}  // namespace dvit
