#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dvit/image.hpp"
#include "dvit/rng.hpp"

namespace dvit {

struct ManifestEntry {
    std::string image;  // paths relative to the manifest's directory
    std::string mask;   // empty when absent
    std::string depth;  // empty when absent
};

/// Line-oriented dataset listing: image<TAB>mask?<TAB>depth? per line.
struct DatasetManifest {
    std::filesystem::path root;
    std::string split;
    std::vector<ManifestEntry> entries;

    std::size_t size() const { return entries.size(); }

    /// Loads and verifies that every referenced file exists.
    static DatasetManifest load(const std::filesystem::path& path, std::string split = "");
    void save(const std::filesystem::path& path) const;

    std::filesystem::path image_path(std::size_t i) const { return root / entries[i].image; }
    std::filesystem::path mask_path(std::size_t i) const { return root / entries[i].mask; }
    std::filesystem::path depth_path(std::size_t i) const { return root / entries[i].depth; }
    bool has_masks() const;
    bool has_depths() const;
};

struct SyntheticShapesSpec {
    int count = 512;
    int image_size = 64;
    int num_classes = 3;  // shape types; mask labels run 0 (background) .. num_classes
    int min_shapes = 1;
    int max_shapes = 4;
    double d_min = 0.1;  // meters
    double d_max = 10.0;
    std::uint64_t seed = 0;
    bool with_masks = true;
    bool with_depths = true;
    std::string split = "train";

    void validate() const;
};

/// Renders colored primitives (circle, square, triangle) on textured
/// backgrounds; emits per-pixel class masks (background = 0) and synthetic
/// depth maps (shape depth tied to its apparent size, background at d_max).
/// Deterministic per (spec, seed). Returns the written manifest.
DatasetManifest generate_shapes(const SyntheticShapesSpec& spec, const std::filesystem::path& out_dir);

struct Batch {
    std::vector<Image> images;
    std::vector<LabelMap> masks;    // empty when the manifest has no masks
    std::vector<DepthMap> depths;   // empty when the manifest has no depths
    std::vector<std::int64_t> indices;  // manifest positions, for seeding
};

/// Deterministic epoch iterator: per-epoch shuffle from (shuffle_seed,
/// epoch), f32 RGB decode, final partial batch dropped.
class BatchIterator {
public:
    BatchIterator(const DatasetManifest& manifest, int batch_size, std::uint64_t shuffle_seed);

    std::int64_t batches_per_epoch() const;
    void start_epoch(std::int64_t epoch);
    /// Returns false at end of epoch.
    bool next(Batch& out);

private:
    const DatasetManifest& manifest_;
    int batch_size_;
    std::uint64_t shuffle_seed_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace dvit
