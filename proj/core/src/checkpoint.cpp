#include "dvit/checkpoint.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace dvit {

void Checkpoint::add(const std::string& name, Tensor t) {
    for (const auto& [existing, unused] : tensors)
        if (existing == name) throw IoError("checkpoint: duplicate tensor name '" + name + "'");
    tensors.emplace_back(name, std::move(t));
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size, std::string path)
        : data_(data), size_(size), path_(std::move(path)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::string str(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
        pos_ += len;
        return s;
    }

    const std::uint8_t* raw(std::size_t len) {
        need(len);
        const std::uint8_t* p = data_ + pos_;
        pos_ += len;
        return p;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw CorruptCheckpoint("truncated checkpoint: " + path_);
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), {'D', 'C', 'K', 'P'});
    put_u32(buf, ckpt.version);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.config_json.size()));
    buf.insert(buf.end(), ckpt.config_json.begin(), ckpt.config_json.end());

    put_u32(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
    std::uint64_t payload_bytes = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        put_u32(buf, static_cast<std::uint32_t>(t.rank()));
        for (const auto e : t.shape()) put_u32(buf, static_cast<std::uint32_t>(e));
        put_u64(buf, payload_bytes);
        payload_bytes += static_cast<std::uint64_t>(t.numel()) * 4;
    }
    put_u64(buf, payload_bytes);
    for (const auto& [name, t] : ckpt.tensors)
        for (const float v : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(buf, bits);
        }

    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    put_u32(buf, crc);

    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    if (std::fwrite(buf.data(), 1, buf.size(), fp.get()) != buf.size())
        throw IoError("short write: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open checkpoint: " + path.string());
    std::fseek(fp.get(), 0, SEEK_END);
    const long fsize = std::ftell(fp.get());
    std::fseek(fp.get(), 0, SEEK_SET);
    if (fsize < 12) throw CorruptCheckpoint("file too small: " + path.string());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(fsize));
    if (std::fread(buf.data(), 1, buf.size(), fp.get()) != buf.size())
        throw CorruptCheckpoint("short read: " + path.string());

    if (std::memcmp(buf.data(), "DCKP", 4) != 0)
        throw CorruptCheckpoint("bad magic: " + path.string());

    // CRC over everything but the trailing 4 bytes.
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= static_cast<std::uint32_t>(buf[buf.size() - 4 + static_cast<std::size_t>(i)]) << (8 * i);
    const auto computed_crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (stored_crc != computed_crc)
        throw CorruptCheckpoint("CRC mismatch (corrupt or truncated): " + path.string());

    Reader r(buf.data(), buf.size() - 4, path.string());
    r.raw(4);  // magic
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != Checkpoint::kVersion)
        throw VersionMismatch("checkpoint version " + std::to_string(ckpt.version) + " != " +
                              std::to_string(Checkpoint::kVersion) + ": " + path.string());
    ckpt.config_json = r.str(r.u32());

    const std::uint32_t count = r.u32();
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        e.name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        e.shape.resize(rank);
        for (auto& d : e.shape) d = static_cast<std::int64_t>(r.u32());
        e.offset = r.u64();
    }
    const std::uint64_t payload_bytes = r.u64();
    const std::uint8_t* payload = r.raw(payload_bytes);

    for (const auto& e : entries) {
        const std::int64_t n = shape_numel(e.shape);
        if (e.offset + static_cast<std::uint64_t>(n) * 4 > payload_bytes)
            throw CorruptCheckpoint("tensor '" + e.name + "' exceeds payload: " + path.string());
        std::vector<float> data(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            const std::uint8_t* p = payload + e.offset + static_cast<std::uint64_t>(i) * 4;
            for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[k]) << (8 * k);
            std::memcpy(&data[static_cast<std::size_t>(i)], &bits, 4);
        }
        ckpt.add(e.name, Tensor::from_data(e.shape, std::move(data)));
    }
    return ckpt;
}

void bind_parameters(const Checkpoint& ckpt, const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>> params) {
    for (auto& [name, dst] : params) {
        const std::string key = prefix + name;
        const Tensor* src = ckpt.find(key);
        if (!src) throw IncompatibleCheckpoint("checkpoint is missing tensor '" + key + "'");
        if (src->shape() != dst->shape())
            throw ShapeMismatch("checkpoint tensor '" + key + "' has shape " + shape_str(src->shape()) +
                                " but the model expects " + shape_str(dst->shape()));
        dst->data() = src->data();
    }
}

}  // namespace dvit
