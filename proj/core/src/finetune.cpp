#include "dvit/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "op_detail.hpp"

namespace dvit {

using detail::record;
using detail::tracing;

void SegHeadConfig::validate() const {
    if (num_classes < 2) throw ConfigError("seg head: num_classes must be >= 2");
}

template <typename T>
SegHeadT<T> SegHeadT<T>::init(int embed_dim, int num_classes, Rng& rng) {
    SegHeadT<T> h;
    h.w = TensorT<T>::trunc_normal({embed_dim, num_classes}, rng, T(0.02), true);
    h.b = TensorT<T>::zeros({num_classes}, true);
    return h;
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> SegHeadT<T>::named() {
    return {{"weight", &w}, {"bias", &b}};
}

void DepthHeadConfig::validate(int patch_size) const {
    if ((1 << up_stages) != patch_size)
        throw ConfigError("depth head: 2^up_stages (" + std::to_string(1 << up_stages) +
                          ") must equal patch_size (" + std::to_string(patch_size) + ")");
    if (!(d_max > d_min && d_min >= 0.0))
        throw ConfigError("depth head: depth range must satisfy d_max > d_min >= 0");
    if (smoothness_weight < 0.0) throw ConfigError("depth head: smoothness_weight must be >= 0");
}

DepthHeadConfig DepthHeadConfig::for_patch(int patch_size, int embed_dim) {
    DepthHeadConfig c;
    int stages = 0;
    while ((1 << stages) < patch_size) ++stages;
    c.up_stages = stages;
    c.stage_channels.clear();
    int ch = embed_dim;
    for (int i = 0; i < stages; ++i) {
        ch = std::max(ch / 2, 8);
        c.stage_channels.push_back(ch);
    }
    return c;
}

template <typename T>
DepthHeadT<T> DepthHeadT<T>::init(int embed_dim, const DepthHeadConfig& config, Rng& rng) {
    DepthHeadT<T> h;
    int cin = embed_dim;
    for (int i = 0; i < config.up_stages; ++i) {
        const int cout = config.stage_channels.empty()
                             ? std::max(cin / 2, 8)
                             : config.stage_channels[static_cast<std::size_t>(i)];
        typename DepthHeadT<T>::Stage s;
        s.w = TensorT<T>::trunc_normal({cin, cout, 3, 3}, rng, T(0.02), true);
        s.b = TensorT<T>::zeros({cout}, true);
        h.stages.push_back(std::move(s));
        cin = cout;
    }
    h.final_w = TensorT<T>::trunc_normal({cin, 1}, rng, T(0.02), true);
    h.final_b = TensorT<T>::zeros({1}, true);
    return h;
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> DepthHeadT<T>::named() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        out.emplace_back("stage" + std::to_string(i) + ".weight", &stages[i].w);
        out.emplace_back("stage" + std::to_string(i) + ".bias", &stages[i].b);
    }
    out.emplace_back("final.weight", &final_w);
    out.emplace_back("final.bias", &final_b);
    return out;
}

template <typename T>
TensorT<T> seg_forward(const TensorT<T>& images, const ViTParamsT<T>& encoder, const ViTConfig& config,
                       const SegHeadT<T>& head, bool training, Rng* rng) {
    const std::int64_t H = images.dim(2), W = images.dim(3);
    TensorT<T> tokens = vit_forward(images, encoder, config, training, rng);
    const std::int64_t B = tokens.dim(0);
    const std::int64_t N = tokens.dim(1) - 1;
    const auto g = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(N))));
    TensorT<T> patch_tokens = slice(tokens, 1, 1, N);
    TensorT<T> logits = linear(patch_tokens, head.w, &head.b);  // [B,N,C]
    const std::int64_t C = logits.dim(2);
    TensorT<T> grid = reshape(transpose(logits, 1, 2), {B, C, g, g});
    return bilinear_upsample(grid, H, W);
}

template <typename T>
TensorT<T> depth_forward(const TensorT<T>& images, const ViTParamsT<T>& encoder, const ViTConfig& config,
                         const DepthHeadT<T>& head, const DepthHeadConfig& head_config, bool training,
                         Rng* rng) {
    TensorT<T> tokens = vit_forward(images, encoder, config, training, rng);
    const std::int64_t B = tokens.dim(0);
    const std::int64_t N = tokens.dim(1) - 1;
    const std::int64_t d = tokens.dim(2);
    const auto g = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(N))));

    TensorT<T> x = reshape(transpose(slice(tokens, 1, 1, N), 1, 2), {B, d, g, g});
    for (const auto& stage : head.stages) x = gelu(conv_transpose2d_s2(x, stage.w, stage.b));

    // 1x1 conv as a per-pixel linear map.
    const std::int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> flat = transpose(reshape(x, {B, C, H * W}), 1, 2);      // [B,HW,C]
    TensorT<T> raw = reshape(transpose(linear(flat, head.final_w, &head.final_b), 1, 2), {B, 1, H, W});

    const T span = static_cast<T>(head_config.d_max - head_config.d_min);
    return add_scalar(mul_scalar(sigmoid(raw), span), static_cast<T>(head_config.d_min));
}

template <typename T>
TensorT<T> berhu_loss(const TensorT<T>& pred, const TensorT<T>& target,
                      const std::vector<std::uint8_t>& valid_mask) {
    if (pred.shape() != target.shape())
        throw ShapeMismatch("berhu: pred " + shape_str(pred.shape()) + " vs target " +
                            shape_str(target.shape()));
    const std::int64_t n_total = pred.numel();
    if (!valid_mask.empty() && static_cast<std::int64_t>(valid_mask.size()) != n_total)
        throw ShapeMismatch("berhu: mask length mismatch");

    const auto& pd = pred.data();
    const auto& td = target.data();
    auto valid = [&](std::int64_t i) {
        return valid_mask.empty() || valid_mask[static_cast<std::size_t>(i)] != 0;
    };

    std::int64_t n = 0;
    double max_abs = 0.0;
    std::int64_t argmax = -1;
    for (std::int64_t i = 0; i < n_total; ++i) {
        if (!valid(i)) continue;
        ++n;
        const double e = static_cast<double>(pd[static_cast<std::size_t>(i)]) -
                         static_cast<double>(td[static_cast<std::size_t>(i)]);
        if (std::fabs(e) > max_abs) {
            max_abs = std::fabs(e);
            argmax = i;
        }
    }
    if (n == 0) throw NoValidPixels("berhu: no valid pixels");

    const double c = 0.2 * max_abs;
    double loss = 0.0;
    if (c > 0.0) {
        for (std::int64_t i = 0; i < n_total; ++i) {
            if (!valid(i)) continue;
            const double e = static_cast<double>(pd[static_cast<std::size_t>(i)]) -
                             static_cast<double>(td[static_cast<std::size_t>(i)]);
            loss += std::fabs(e) <= c ? std::fabs(e) : (e * e + c * c) / (2.0 * c);
        }
        loss /= static_cast<double>(n);
    }

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    if (tracing<T>({&pred, &target}) && c > 0.0) {
        record(out, [pred = pred, target = target, out, valid_mask, c, argmax, n, n_total]() mutable {
            const double g = static_cast<double>(out.grad()[0]);
            const auto& pd = pred.data();
            const auto& td = target.data();
            auto valid = [&](std::int64_t i) {
                return valid_mask.empty() || valid_mask[static_cast<std::size_t>(i)] != 0;
            };
            // d loss / d c, needed because c follows the largest residual.
            double dloss_dc = 0.0;
            for (std::int64_t i = 0; i < n_total; ++i) {
                if (!valid(i)) continue;
                const double e = static_cast<double>(pd[static_cast<std::size_t>(i)]) -
                                 static_cast<double>(td[static_cast<std::size_t>(i)]);
                if (std::fabs(e) > c) dloss_dc += (c * c - e * e) / (2.0 * c * c);
            }
            dloss_dc /= static_cast<double>(n);

            auto emit = [&](std::int64_t i, double ge) {
                if (pred.requires_grad()) pred.grad()[static_cast<std::size_t>(i)] += static_cast<T>(ge);
                if (target.requires_grad()) target.grad()[static_cast<std::size_t>(i)] -= static_cast<T>(ge);
            };
            for (std::int64_t i = 0; i < n_total; ++i) {
                if (!valid(i)) continue;
                const double e = static_cast<double>(pd[static_cast<std::size_t>(i)]) -
                                 static_cast<double>(td[static_cast<std::size_t>(i)]);
                double ge = (std::fabs(e) <= c ? (e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0)) : e / c) /
                            static_cast<double>(n);
                if (i == argmax) ge += dloss_dc * 0.2 * (e > 0.0 ? 1.0 : -1.0);
                emit(i, g * ge);
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> smoothness_loss(const TensorT<T>& pred) {
    if (pred.rank() < 2) throw ShapeMismatch("smoothness: rank must be >= 2");
    const std::int64_t W = pred.dim(pred.rank() - 1);
    const std::int64_t H = pred.dim(pred.rank() - 2);
    if (H < 2 || W < 2) throw ShapeMismatch("smoothness: spatial extent must be at least 2x2");
    const std::int64_t planes = pred.numel() / (H * W);
    const std::int64_t nx = planes * H * (W - 1);
    const std::int64_t ny = planes * (H - 1) * W;

    const auto& pd = pred.data();
    double sum_x = 0.0, sum_y = 0.0;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* p = pd.data() + pl * H * W;
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x + 1 < W; ++x) {
                const double dd = static_cast<double>(p[y * W + x + 1]) - static_cast<double>(p[y * W + x]);
                sum_x += dd * dd;
            }
        for (std::int64_t y = 0; y + 1 < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const double dd = static_cast<double>(p[(y + 1) * W + x]) - static_cast<double>(p[y * W + x]);
                sum_y += dd * dd;
            }
    }
    const double loss = sum_x / static_cast<double>(nx) + sum_y / static_cast<double>(ny);

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    if (tracing<T>({&pred})) {
        record(out, [pred = pred, out, planes, H, W, nx, ny]() mutable {
            if (!pred.requires_grad()) return;
            const double g = static_cast<double>(out.grad()[0]);
            const auto& pd = pred.data();
            auto& gp = pred.grad();
            for (std::int64_t pl = 0; pl < planes; ++pl) {
                const T* p = pd.data() + pl * H * W;
                T* gpp = gp.data() + pl * H * W;
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x + 1 < W; ++x) {
                        const double dd =
                            static_cast<double>(p[y * W + x + 1]) - static_cast<double>(p[y * W + x]);
                        const double ge = g * 2.0 * dd / static_cast<double>(nx);
                        gpp[y * W + x + 1] += static_cast<T>(ge);
                        gpp[y * W + x] -= static_cast<T>(ge);
                    }
                for (std::int64_t y = 0; y + 1 < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x) {
                        const double dd =
                            static_cast<double>(p[(y + 1) * W + x]) - static_cast<double>(p[y * W + x]);
                        const double ge = g * 2.0 * dd / static_cast<double>(ny);
                        gpp[(y + 1) * W + x] += static_cast<T>(ge);
                        gpp[y * W + x] -= static_cast<T>(ge);
                    }
            }
        });
    }
    return out;
}

LayerLrMultipliers layer_lr_multipliers(int depth, double gamma) {
    if (gamma <= 0.0 || gamma > 1.0) throw ConfigError("layer decay must lie in (0,1]");
    LayerLrMultipliers m;
    m.head = 1.0;
    m.final_norm = 1.0;
    m.blocks.resize(static_cast<std::size_t>(depth));
    for (int k = 0; k < depth; ++k) m.blocks[static_cast<std::size_t>(k)] = std::pow(gamma, depth - k);
    m.embed = std::pow(gamma, depth + 1);
    return m;
}

double multiplier_for(const LayerLrMultipliers& m, const std::string& name) {
    if (name.rfind("head.", 0) == 0) return m.head;
    if (name.rfind("encoder.blocks.", 0) == 0) {
        const auto start = std::string("encoder.blocks.").size();
        const auto end = name.find('.', start);
        const int k = std::stoi(name.substr(start, end - start));
        return m.blocks[static_cast<std::size_t>(k)];
    }
    if (name.rfind("encoder.norm.", 0) == 0) return m.final_norm;
    if (name.rfind("encoder.", 0) == 0) return m.embed;  // patch embed, cls token, pos embed
    return m.head;
}

void FinetuneSchedule::validate() const {
    if (layer_decay <= 0.0 || layer_decay > 1.0) throw ConfigError("finetune: layer_decay must lie in (0,1]");
    if (poly_power <= 0.0) throw ConfigError("finetune: poly_power must be > 0");
    if (epochs < 1 || batch_size < 1) throw ConfigError("finetune: epochs and batch_size must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("finetune: base_lr must be > 0");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
        throw ConfigError("finetune: drop_path_rate must lie in [0,1)");
}

namespace {

using nlohmann::json;

int probe_image_size(const DatasetManifest& manifest) {
    const Image first = read_png_rgb(manifest.image_path(0));
    if (first.width != first.height)
        throw ConfigError("finetune expects square images, got " + std::to_string(first.width) + "x" +
                          std::to_string(first.height));
    return first.width;
}

/// Build the encoder for fine-tuning: restore from a pretraining checkpoint
/// (interpolating the positional embedding when the resolution changed) or
/// initialize randomly.
ViTParams make_finetune_encoder(ViTConfig& config, int image_size,
                                const std::filesystem::path& init_checkpoint, std::uint64_t seed) {
    if (!init_checkpoint.empty()) {
        const Checkpoint ckpt = load_checkpoint(init_checkpoint);
        ViTConfig stored = vit_config_from_json(ckpt.config_json);
        stored.validate();
        Rng rng(Rng::mix(seed, 0xf17e0000ull));
        ViTParams encoder = ViTParams::init(stored, rng);
        restore(ckpt, encoder, nullptr, nullptr);
        if (image_size % stored.patch_size != 0)
            throw IncompatibleCheckpoint("fine-tune resolution " + std::to_string(image_size) +
                                         " not divisible by checkpoint patch size " +
                                         std::to_string(stored.patch_size));
        const int new_grid = image_size / stored.patch_size;
        if (new_grid != stored.grid()) {
            Tensor interp = interpolate_pos_embed(encoder.pos_embed, new_grid);
            encoder.pos_embed = interp.set_requires_grad(true);
        }
        config = stored;
        config.image_size = image_size;
        return encoder;
    }
    config.image_size = image_size;
    config.validate();
    Rng rng(Rng::mix(seed, 0xf17e0000ull));
    return ViTParams::init(config, rng);
}

std::vector<std::int64_t> masks_to_targets(const std::vector<LabelMap>& masks) {
    std::vector<std::int64_t> targets;
    for (const auto& m : masks)
        for (const auto v : m.data) targets.push_back(static_cast<std::int64_t>(v));
    return targets;
}

Tensor depths_to_tensor(const std::vector<DepthMap>& depths) {
    const auto B = static_cast<std::int64_t>(depths.size());
    const std::int64_t H = depths[0].height, W = depths[0].width;
    Tensor t = Tensor::zeros({B, 1, H, W});
    auto& d = t.data();
    std::size_t off = 0;
    for (const auto& dm : depths) {
        std::copy(dm.data.begin(), dm.data.end(), d.begin() + static_cast<std::ptrdiff_t>(off));
        off += dm.data.size();
    }
    return t;
}

struct EngineParts {
    ViTConfig vit;
    ViTParams encoder;
    std::vector<std::pair<std::string, Tensor*>> head_params;  // names without "head." prefix
};

/// Shared fine-tuning loop: the task callback computes the loss of one batch.
FinetuneResult run_finetune(const std::string& task, const DatasetManifest& train,
                            const FinetuneSchedule& schedule, const FinetuneOptions& options,
                            EngineParts& parts,
                            const std::function<Tensor(const Batch&, bool, Rng*)>& batch_loss,
                            const std::function<std::vector<EvalRecord>()>& evaluate,
                            const std::string& head_json) {
    schedule.validate();
    std::filesystem::create_directories(options.out_dir);

    AdamWConfig opt_config;
    opt_config.weight_decay = schedule.weight_decay;
    AdamW optimizer(opt_config);
    const LayerLrMultipliers multipliers =
        layer_lr_multipliers(parts.vit.depth, schedule.use_layer_decay ? schedule.layer_decay : 1.0);
    for (auto& [name, t] : parts.encoder.named()) {
        const std::string full = "encoder." + name;
        optimizer.add_param(full, *t, multiplier_for(multipliers, full));
    }
    for (auto& [name, t] : parts.head_params) {
        t->set_requires_grad(true);
        optimizer.add_param("head." + name, *t, multipliers.head);
    }

    BatchIterator iterator(train, schedule.batch_size, schedule.seed);
    const std::int64_t steps_per_epoch = iterator.batches_per_epoch();
    const std::int64_t total_steps = steps_per_epoch * schedule.epochs;

    std::ofstream log_file(options.out_dir / "train_log.tsv", std::ios::trunc);
    FinetuneResult result;

    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        iterator.start_epoch(epoch);
        Batch batch;
        while (iterator.next(batch)) {
            const auto t0 = std::chrono::steady_clock::now();
            const double lr = poly_lr(step, total_steps, schedule.base_lr, schedule.poly_power);
            Rng drop_rng(Rng::mix(schedule.seed, 0xd70b0000ull + static_cast<std::uint64_t>(step)));

            Tape tape;
            Tape::Scope scope(tape);
            Tensor loss = batch_loss(batch, schedule.drop_path_rate > 0.0, &drop_rng);
            optimizer.zero_grad();
            tape.backward(loss);
            optimizer.step(lr);

            const auto t1 = std::chrono::steady_clock::now();
            StepLog entry;
            entry.step = step;
            entry.epoch = epoch;
            entry.lr = lr;
            entry.loss = static_cast<double>(loss.item());
            entry.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            char line[160];
            std::snprintf(line, sizeof(line), "%lld\t%lld\t%.8g\t%.8g\t%.3f",
                          static_cast<long long>(entry.step), static_cast<long long>(entry.epoch),
                          entry.lr, entry.loss, entry.wall_ms);
            log_file << line << "\n";
            if (options.on_step) options.on_step(entry);
            result.log.push_back(entry);
            ++step;
        }
    }

    result.report = evaluate();

    json config_echo = json::parse(head_json);
    config_echo["vit"] = {{"image_size", parts.vit.image_size}, {"patch_size", parts.vit.patch_size},
                          {"embed_dim", parts.vit.embed_dim},   {"depth", parts.vit.depth},
                          {"num_heads", parts.vit.num_heads},   {"mlp_ratio", parts.vit.mlp_ratio},
                          {"drop_path_rate", parts.vit.drop_path_rate}};
    config_echo["task"] = task;

    Checkpoint ckpt;
    ckpt.config_json = config_echo.dump();
    for (auto& [name, t] : parts.encoder.named()) ckpt.add("encoder." + name, t->clone());
    for (auto& [name, t] : parts.head_params) ckpt.add("head." + name, t->clone());
    result.checkpoint = options.out_dir / ("ckpt_" + task + ".dckp");
    save_checkpoint(result.checkpoint, ckpt);

    write_eval_report(options.out_dir / "eval_report.tsv", result.report);
    return result;
}

std::vector<EvalRecord> evaluate_seg(const DatasetManifest& val, const ViTParams& encoder,
                                     const ViTConfig& vit, const SegHead& head,
                                     const SegHeadConfig& head_config) {
    ConfusionAccumulator acc(head_config.num_classes, head_config.ignore_index);
    for (std::size_t i = 0; i < val.size(); ++i) {
        const Image img = read_png_rgb(val.image_path(i));
        const LabelMap gt = read_png_gray(val.mask_path(i));
        Tensor input = images_to_tensor({img});
        Tensor logits = seg_forward(input, encoder, vit, head);  // eval mode
        const std::int64_t C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
        const auto& ld = logits.data();
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                std::int64_t best = 0;
                float best_v = ld[static_cast<std::size_t>((0 * H + y) * W + x)];
                for (std::int64_t c = 1; c < C; ++c) {
                    const float v = ld[static_cast<std::size_t>((c * H + y) * W + x)];
                    if (v > best_v) {
                        best_v = v;
                        best = c;
                    }
                }
                acc.add_pixel(best, gt.at(static_cast<int>(y), static_cast<int>(x)));
            }
    }
    return {{"seg", "miou", miou(acc)}};
}

std::vector<EvalRecord> evaluate_depth(const DatasetManifest& val, const ViTParams& encoder,
                                       const ViTConfig& vit, const DepthHead& head,
                                       const DepthHeadConfig& head_config) {
    std::vector<float> all_pred, all_gt;
    for (std::size_t i = 0; i < val.size(); ++i) {
        const Image img = read_png_rgb(val.image_path(i));
        const DepthMap gt = read_depth_raster(val.depth_path(i));
        Tensor input = images_to_tensor({img});
        Tensor pred = depth_forward(input, encoder, vit, head, head_config);
        all_pred.insert(all_pred.end(), pred.data().begin(), pred.data().end());
        all_gt.insert(all_gt.end(), gt.data.begin(), gt.data.end());
    }
    std::unique_ptr<bool[]> mask(new bool[all_gt.size()]);
    for (std::size_t i = 0; i < all_gt.size(); ++i) mask[i] = all_gt[i] > 0.0f;
    std::span<const bool> mask_span(mask.get(), all_gt.size());
    return {{"depth", "abs_rel", abs_rel(all_pred, all_gt, mask_span)},
            {"depth", "rmse", rmse(all_pred, all_gt, mask_span)},
            {"depth", "delta1", delta_threshold(all_pred, all_gt, mask_span, 1)}};
}

}  // namespace

FinetuneResult finetune_seg(const DatasetManifest& train, const DatasetManifest& val,
                            ViTConfig vit_config, const SegHeadConfig& head_config,
                            const FinetuneSchedule& schedule, const FinetuneOptions& options) {
    head_config.validate();
    if (!train.has_masks() || !val.has_masks())
        throw IncompatibleCheckpoint("finetune_seg: manifests must provide masks");

    const int image_size = probe_image_size(train);
    EngineParts parts;
    parts.vit = vit_config;
    parts.encoder = make_finetune_encoder(parts.vit, image_size, options.init_checkpoint, schedule.seed);

    Rng head_rng(Rng::mix(schedule.seed, 0x5e9ull));
    SegHead head = SegHead::init(parts.vit.embed_dim, head_config.num_classes, head_rng);
    for (auto& [name, t] : head.named()) parts.head_params.emplace_back(name, t);

    ViTConfig train_vit = parts.vit;
    train_vit.drop_path_rate = schedule.drop_path_rate;

    auto batch_loss = [&](const Batch& batch, bool training, Rng* rng) {
        Tensor images = images_to_tensor(batch.images);
        Tensor logits = seg_forward(images, parts.encoder, train_vit, head, training, rng);
        return cross_entropy(logits, masks_to_targets(batch.masks), head_config.ignore_index);
    };
    auto evaluate = [&]() { return evaluate_seg(val, parts.encoder, parts.vit, head, head_config); };

    const json head_json = {{"seg", {{"num_classes", head_config.num_classes},
                                     {"ignore_index", head_config.ignore_index}}}};
    return run_finetune("seg", train, schedule, options, parts, batch_loss, evaluate, head_json.dump());
}

FinetuneResult finetune_depth(const DatasetManifest& train, const DatasetManifest& val,
                              ViTConfig vit_config, DepthHeadConfig head_config,
                              const FinetuneSchedule& schedule, const FinetuneOptions& options) {
    if (!train.has_depths() || !val.has_depths())
        throw IncompatibleCheckpoint("finetune_depth: manifests must provide depth maps");

    const int image_size = probe_image_size(train);
    EngineParts parts;
    parts.vit = vit_config;
    parts.encoder = make_finetune_encoder(parts.vit, image_size, options.init_checkpoint, schedule.seed);
    if (head_config.stage_channels.empty())
        head_config = DepthHeadConfig::for_patch(parts.vit.patch_size, parts.vit.embed_dim);
    head_config.validate(parts.vit.patch_size);

    Rng head_rng(Rng::mix(schedule.seed, 0xde97ull));
    DepthHead head = DepthHead::init(parts.vit.embed_dim, head_config, head_rng);
    for (auto& [name, t] : head.named()) parts.head_params.emplace_back(name, t);

    ViTConfig train_vit = parts.vit;
    train_vit.drop_path_rate = schedule.drop_path_rate;

    auto batch_loss = [&](const Batch& batch, bool training, Rng* rng) {
        Tensor images = images_to_tensor(batch.images);
        Tensor pred = depth_forward(images, parts.encoder, train_vit, head, head_config, training, rng);
        Tensor target = depths_to_tensor(batch.depths);
        std::vector<std::uint8_t> mask(target.data().size());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = target.data()[i] > 0.0f ? 1 : 0;
        Tensor loss = berhu_loss(pred, target, mask);
        if (head_config.smoothness_weight > 0.0)
            loss = add(loss, mul_scalar(smoothness_loss(pred),
                                        static_cast<float>(head_config.smoothness_weight)));
        return loss;
    };
    auto evaluate = [&]() { return evaluate_depth(val, parts.encoder, parts.vit, head, head_config); };

    const json head_json = {{"depth",
                             {{"up_stages", head_config.up_stages},
                              {"stage_channels", head_config.stage_channels},
                              {"d_min", head_config.d_min},
                              {"d_max", head_config.d_max},
                              {"smoothness_weight", head_config.smoothness_weight}}}};
    return run_finetune("depth", train, schedule, options, parts, batch_loss, evaluate, head_json.dump());
}

std::vector<EvalRecord> evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                            const DatasetManifest& val) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const json j = json::parse(ckpt.config_json);
    const std::string task = j.value("task", "");
    if (task.empty())
        throw IncompatibleCheckpoint("checkpoint has no task tag; was it produced by finetune?");

    ViTConfig vit = vit_config_from_json(ckpt.config_json);
    Rng rng(0);
    ViTParams encoder = ViTParams::init(vit, rng);
    restore(ckpt, encoder, nullptr, nullptr);

    if (task == "seg") {
        SegHeadConfig hc;
        hc.num_classes = j["seg"].value("num_classes", 4);
        hc.ignore_index = j["seg"].value("ignore_index", 255);
        SegHead head = SegHead::init(vit.embed_dim, hc.num_classes, rng);
        std::vector<std::pair<std::string, Tensor*>> params;
        for (auto& [name, t] : head.named()) params.emplace_back(name, t);
        bind_parameters(ckpt, "head.", std::move(params));
        return evaluate_seg(val, encoder, vit, head, hc);
    }
    if (task == "depth") {
        DepthHeadConfig hc;
        hc.up_stages = j["depth"].value("up_stages", 4);
        hc.stage_channels = j["depth"].value("stage_channels", std::vector<int>{});
        hc.d_min = j["depth"].value("d_min", 0.1);
        hc.d_max = j["depth"].value("d_max", 10.0);
        hc.smoothness_weight = j["depth"].value("smoothness_weight", 0.1);
        DepthHead head = DepthHead::init(vit.embed_dim, hc, rng);
        std::vector<std::pair<std::string, Tensor*>> params;
        for (auto& [name, t] : head.named()) params.emplace_back(name, t);
        bind_parameters(ckpt, "head.", std::move(params));
        return evaluate_depth(val, encoder, vit, head, hc);
    }
    throw IncompatibleCheckpoint("unknown task '" + task + "' in checkpoint");
}

void write_eval_report(const std::filesystem::path& path, const std::vector<EvalRecord>& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write eval report: " + path.string());
    for (const auto& r : report) {
        char line[128];
        std::snprintf(line, sizeof(line), "%s\t%s\t%.8g", r.task.c_str(), r.metric.c_str(), r.value);
        out << line << "\n";
    }
}

#define DVIT_INSTANTIATE_FINETUNE(T)                                                                   \
    template struct SegHeadT<T>;                                                                       \
    template struct DepthHeadT<T>;                                                                     \
    template TensorT<T> seg_forward<T>(const TensorT<T>&, const ViTParamsT<T>&, const ViTConfig&,      \
                                       const SegHeadT<T>&, bool, Rng*);                                \
    template TensorT<T> depth_forward<T>(const TensorT<T>&, const ViTParamsT<T>&, const ViTConfig&,    \
                                         const DepthHeadT<T>&, const DepthHeadConfig&, bool, Rng*);    \
    template TensorT<T> berhu_loss<T>(const TensorT<T>&, const TensorT<T>&,                            \
                                      const std::vector<std::uint8_t>&);                               \
    template TensorT<T> smoothness_loss<T>(const TensorT<T>&);

DVIT_INSTANTIATE_FINETUNE(float)
DVIT_INSTANTIATE_FINETUNE(double)

#undef DVIT_INSTANTIATE_FINETUNE

}  // namespace dvit
