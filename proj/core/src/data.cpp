#include "dvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dvit/errors.hpp"

namespace dvit {

DatasetManifest DatasetManifest::load(const std::filesystem::path& path, std::string split) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    DatasetManifest m;
    m.root = path.parent_path();
    m.split = split.empty() ? path.stem().string() : std::move(split);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ManifestEntry e;
        std::istringstream ls(line);
        std::getline(ls, e.image, '\t');
        std::getline(ls, e.mask, '\t');
        std::getline(ls, e.depth, '\t');
        if (e.image.empty()) throw IoError("manifest line without image path: " + path.string());
        m.entries.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto& e = m.entries[i];
        if (!std::filesystem::exists(m.root / e.image))
            throw IoError("manifest references missing image: " + (m.root / e.image).string());
        if (!e.mask.empty() && !std::filesystem::exists(m.root / e.mask))
            throw IoError("manifest references missing mask: " + (m.root / e.mask).string());
        if (!e.depth.empty() && !std::filesystem::exists(m.root / e.depth))
            throw IoError("manifest references missing depth: " + (m.root / e.depth).string());
    }
    return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path.string());
    for (const auto& e : entries) {
        out << e.image;
        if (!e.mask.empty() || !e.depth.empty()) out << "\t" << e.mask;
        if (!e.depth.empty()) out << "\t" << e.depth;
        out << "\n";
    }
}

bool DatasetManifest::has_masks() const {
    return !entries.empty() &&
           std::all_of(entries.begin(), entries.end(), [](const auto& e) { return !e.mask.empty(); });
}

bool DatasetManifest::has_depths() const {
    return !entries.empty() &&
           std::all_of(entries.begin(), entries.end(), [](const auto& e) { return !e.depth.empty(); });
}

void SyntheticShapesSpec::validate() const {
    if (count < 1 || image_size < 8) throw ConfigError("shapes: count and image_size must be sensible");
    if (num_classes < 1 || num_classes > 3)
        throw ConfigError("shapes: num_classes must be 1..3 (circle, square, triangle)");
    if (min_shapes < 1 || max_shapes < min_shapes)
        throw ConfigError("shapes: invalid shapes_per_image range");
    if (!(d_max > d_min && d_min >= 0.0)) throw ConfigError("shapes: depth range must satisfy d_max > d_min >= 0");
}

namespace {

struct ShapeInstance {
    int kind = 0;  // 0 circle, 1 square, 2 triangle
    double cx = 0, cy = 0, r = 0;
    float color[3] = {0, 0, 0};
    float depth = 0;
};

bool inside(const ShapeInstance& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0:
            return dx * dx + dy * dy <= s.r * s.r;
        case 1:
            return std::fabs(dx) <= s.r && std::fabs(dy) <= s.r;
        default: {
            // upward triangle: apex (cx, cy-r), base corners (cx +/- r, cy+r)
            if (dy < -s.r || dy > s.r) return false;
            const double half_width = s.r * (dy + s.r) / (2.0 * s.r);
            return std::fabs(dx) <= half_width;
        }
    }
}

// Class hues: circle red-ish, square green-ish, triangle blue-ish.
const float kClassHue[3][3] = {{0.85f, 0.25f, 0.20f}, {0.20f, 0.75f, 0.30f}, {0.20f, 0.35f, 0.85f}};

}  // namespace

DatasetManifest generate_shapes(const SyntheticShapesSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (spec.with_masks) std::filesystem::create_directories(out_dir / "masks", ec);
    if (spec.with_depths) std::filesystem::create_directories(out_dir / "depths", ec);

    const int S = spec.image_size;
    const double r_min = S / 8.0, r_max = S / 4.0;

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.split = spec.split;

    for (int idx = 0; idx < spec.count; ++idx) {
        Rng rng(Rng::mix(spec.seed, 0x5a5a0000ull + static_cast<std::uint64_t>(idx)));

        // Textured background: two-tone gradient plus per-pixel noise.
        Image img(S, S);
        float base[3], tilt[3];
        for (int c = 0; c < 3; ++c) {
            base[c] = static_cast<float>(rng.uniform(0.25, 0.75));
            tilt[c] = static_cast<float>(rng.uniform(-0.2, 0.2));
        }
        const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double gx = std::cos(angle), gy = std::sin(angle);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double t = (gx * x + gy * y) / S;
                const float noise = static_cast<float>(rng.uniform(-0.05, 0.05));
                for (int c = 0; c < 3; ++c) {
                    float v = base[c] + tilt[c] * static_cast<float>(t) + noise;
                    img.at(c, y, x) = std::min(1.0f, std::max(0.0f, v));
                }
            }

        const int count =
            spec.min_shapes + static_cast<int>(rng.uniform_int(
                                  static_cast<std::uint64_t>(spec.max_shapes - spec.min_shapes + 1)));
        std::vector<ShapeInstance> shapes(static_cast<std::size_t>(count));
        for (auto& s : shapes) {
            s.kind = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.num_classes)));
            s.r = rng.uniform(r_min, r_max);
            s.cx = rng.uniform(s.r, S - s.r);
            s.cy = rng.uniform(s.r, S - s.r);
            for (int c = 0; c < 3; ++c) {
                const float jitter = static_cast<float>(rng.uniform(-0.15, 0.15));
                s.color[c] = std::min(1.0f, std::max(0.0f, kClassHue[s.kind][c] + jitter));
            }
            // Apparent size is the depth cue: bigger means nearer.
            const double t = (s.r - r_min) / (r_max - r_min);
            const double span = spec.d_max - spec.d_min;
            double depth = spec.d_min + span * (0.05 + 0.85 * (1.0 - t)) + rng.uniform(-0.02, 0.02) * span;
            depth = std::min(spec.d_max - 1e-3 * span, std::max(spec.d_min + 1e-3 * span, depth));
            s.depth = static_cast<float>(depth);
        }
        // Painter's order: far to near, so nearer shapes overwrite.
        std::stable_sort(shapes.begin(), shapes.end(),
                         [](const ShapeInstance& a, const ShapeInstance& b) { return a.depth > b.depth; });

        LabelMap mask(S, S);
        DepthMap depth(S, S);
        for (auto& v : depth.data) v = static_cast<float>(spec.d_max);
        for (const auto& s : shapes)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    if (inside(s, x + 0.5, y + 0.5)) {
                        for (int c = 0; c < 3; ++c) img.at(c, y, x) = s.color[c];
                        mask.at(y, x) = static_cast<std::uint8_t>(s.kind + 1);
                        depth.at(y, x) = s.depth;
                    }

        char name[64];
        std::snprintf(name, sizeof(name), "%s_%05d", spec.split.c_str(), idx);
        ManifestEntry entry;
        entry.image = std::string("images/") + name + ".png";
        write_png_rgb(out_dir / entry.image, img);
        if (spec.with_masks) {
            entry.mask = std::string("masks/") + name + ".png";
            write_png_gray(out_dir / entry.mask, mask);
        }
        if (spec.with_depths) {
            entry.depth = std::string("depths/") + name + ".dpth";
            write_depth_raster(out_dir / entry.depth, depth);
        }
        manifest.entries.push_back(std::move(entry));
    }

    manifest.save(out_dir / (spec.split + ".tsv"));
    return manifest;
}

BatchIterator::BatchIterator(const DatasetManifest& manifest, int batch_size, std::uint64_t shuffle_seed)
    : manifest_(manifest), batch_size_(batch_size), shuffle_seed_(shuffle_seed) {
    if (manifest.entries.empty()) throw EmptyDataset("batch iterator over empty manifest");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (static_cast<std::size_t>(batch_size) > manifest.entries.size())
        throw EmptyDataset("manifest smaller than one batch (" + std::to_string(manifest.entries.size()) +
                           " < " + std::to_string(batch_size) + ")");
    start_epoch(0);
}

std::int64_t BatchIterator::batches_per_epoch() const {
    return static_cast<std::int64_t>(manifest_.entries.size()) / batch_size_;  // drop-last
}

void BatchIterator::start_epoch(std::int64_t epoch) {
    order_.resize(manifest_.entries.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(Rng::mix(shuffle_seed_, 0xe90c4000ull + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order_.size() - 1; i > 0; --i)
        std::swap(order_[i], order_[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
    cursor_ = 0;
}

bool BatchIterator::next(Batch& out) {
    if (cursor_ + static_cast<std::size_t>(batch_size_) > order_.size()) return false;
    out.images.clear();
    out.masks.clear();
    out.depths.clear();
    out.indices.clear();
    const bool want_masks = manifest_.has_masks();
    const bool want_depths = manifest_.has_depths();
    for (int i = 0; i < batch_size_; ++i) {
        const std::size_t idx = order_[cursor_ + static_cast<std::size_t>(i)];
        out.images.push_back(read_png_rgb(manifest_.image_path(idx)));
        if (want_masks) out.masks.push_back(read_png_gray(manifest_.mask_path(idx)));
        if (want_depths) out.depths.push_back(read_depth_raster(manifest_.depth_path(idx)));
        out.indices.push_back(static_cast<std::int64_t>(idx));
    }
    cursor_ += static_cast<std::size_t>(batch_size_);
    return true;
}

}  // namespace dvit
