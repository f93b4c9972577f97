#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

/// Named-tensor container. On disk (all integers little-endian):
///   magic "DCKP" | u32 version | u32 json_len + UTF-8 config echo |
///   u32 tensor_count | per tensor: u32 name_len + name, u32 rank,
///   u32 extents[rank], u64 payload_offset | u64 payload_bytes |
///   f32 payload | u32 CRC32 of all preceding bytes.
/// Tensor order is preserved, so save -> load -> save is byte-identical.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::string config_json;  // model config echo plus run state, verbatim
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, Tensor t);
    const Tensor* find(const std::string& name) const;
    bool has(const std::string& name) const { return find(name) != nullptr; }
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Validates magic, version and CRC before accepting; throws
/// CorruptCheckpoint or VersionMismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copy checkpoint tensors into same-named destination tensors; throws
/// ShapeMismatch naming the first offending tensor, or IncompatibleCheckpoint
/// when a requested name is absent.
void bind_parameters(const Checkpoint& ckpt, const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>> params);

}  // namespace dvit
