#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tandem/model.hpp"
#include "tandem/util.hpp"

namespace tandem {

// Checkpoint layout (all integers little-endian):
//   "OMMX" | u32 version | u32 config_len | config bytes
//   u32 tensor_count
//   per tensor: u32 name_len | name | u8 dtype(0=f32) | u32 rank | u32 dims[]
//               | u64 payload byte offset
//   payload: raw f32 data, tensors in directory order
//   u64 FNV-1a checksum of every preceding byte

constexpr uint32_t CKPT_VERSION = 1;

struct CheckpointTruncatedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointChecksumError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TensorBlob {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
};

struct CheckpointStore {
    std::string config_text;
    std::vector<TensorBlob> tensors;
    std::map<std::string, size_t> index;

    const TensorBlob& get(const std::string& name) const {
        auto it = index.find(name);
        check(it != index.end(), "checkpoint missing tensor '", name, "'");
        return tensors[it->second];
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }
    void add(TensorBlob blob) {
        check(index.count(blob.name) == 0, "duplicate tensor '", blob.name, "'");
        index[blob.name] = tensors.size();
        tensors.push_back(std::move(blob));
    }
};

namespace detail {

struct ByteWriter {
    std::string buf;
    void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { raw(&v, 1); }
    void u32(uint32_t v) {
        unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                              (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
        raw(b, 4);
    }
    void u64(uint64_t v) {
        u32(uint32_t(v));
        u32(uint32_t(v >> 32));
    }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const std::string& buf;
    size_t pos = 0, limit = 0;
    ByteReader(const std::string& b, size_t lim) : buf(b), limit(lim) {}
    void need(size_t n) {
        if (pos + n > limit) throw CheckpointTruncatedError("checkpoint truncated");
    }
    void raw(void* p, size_t n) {
        need(n);
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    uint8_t u8() {
        uint8_t v;
        raw(&v, 1);
        return v;
    }
    uint32_t u32() {
        unsigned char b[4];
        raw(b, 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
               uint32_t(b[3]) << 24;
    }
    uint64_t u64() {
        uint64_t lo = u32();
        return lo | uint64_t(u32()) << 32;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline void save_checkpoint(const CheckpointStore& store, const std::string& path) {
    detail::ByteWriter w;
    w.raw("OMMX", 4);
    w.u32(CKPT_VERSION);
    w.str(store.config_text);
    w.u32(uint32_t(store.tensors.size()));
    uint64_t offset = 0;
    for (const auto& t : store.tensors) {
        w.str(t.name);
        w.u8(0);  // f32
        w.u32(uint32_t(t.dims.size()));
        size_t n = 1;
        for (int d : t.dims) {
            w.u32(uint32_t(d));
            n *= size_t(d);
        }
        check(n == t.data.size(), "tensor '", t.name, "' dims/data mismatch");
        w.u64(offset);
        offset += n * sizeof(float);
    }
    for (const auto& t : store.tensors)
        w.raw(t.data.data(), t.data.size() * sizeof(float));
    uint64_t sum = fnv1a64(w.buf.data(), w.buf.size());
    w.u64(sum);
    write_file(path, w.buf);
}

inline CheckpointStore load_checkpoint(const std::string& path) {
    std::string blob = read_file(path);
    if (blob.size() < 8) throw CheckpointTruncatedError("checkpoint truncated");

    detail::ByteReader r(blob, blob.size() - 8);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "OMMX", 4) != 0)
        throw CheckpointFormatError("not a checkpoint file");
    uint32_t version = r.u32();
    if (version != CKPT_VERSION)
        throw CheckpointVersionError(
            cat("checkpoint version ", version, ", expected ", CKPT_VERSION));

    CheckpointStore store;
    store.config_text = r.str();
    uint32_t count = r.u32();
    struct Entry {
        std::string name;
        std::vector<int> dims;
        uint64_t offset;
        size_t n;
    };
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < count; i++) {
        Entry e;
        e.name = r.str();
        uint8_t dtype = r.u8();
        if (dtype != 0) throw CheckpointFormatError(cat("unknown dtype tag ", int(dtype)));
        uint32_t rank = r.u32();
        e.n = 1;
        for (uint32_t d = 0; d < rank; d++) {
            e.dims.push_back(int(r.u32()));
            e.n *= size_t(e.dims.back());
        }
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }
    size_t payload_start = r.pos;
    size_t payload_size = r.limit - payload_start;

    // structure is sound; now verify the checksum before touching payload
    uint64_t stored;
    {
        detail::ByteReader tail(blob, blob.size());
        tail.pos = blob.size() - 8;
        stored = tail.u64();
    }
    uint64_t computed = fnv1a64(blob.data(), blob.size() - 8);
    if (stored != computed) throw CheckpointChecksumError("checkpoint checksum mismatch");

    for (auto& e : entries) {
        if (e.offset + e.n * sizeof(float) > payload_size)
            throw CheckpointTruncatedError(cat("tensor '", e.name, "' exceeds payload"));
        TensorBlob t;
        t.name = e.name;
        t.dims = e.dims;
        t.data.resize(e.n);
        std::memcpy(t.data.data(), blob.data() + payload_start + e.offset,
                    e.n * sizeof(float));
        store.add(std::move(t));
    }
    return store;
}

// ---- model <-> store -----------------------------------------------------

inline CheckpointStore store_from_model(Model<float>& m, const std::string& config_text) {
    CheckpointStore store;
    store.config_text = config_text;
    for (auto& t : m.tensors()) {
        TensorBlob blob;
        blob.name = t.name;
        blob.dims = t.dims;
        blob.data.assign(t.w, t.w + t.count);
        store.add(std::move(blob));
    }
    return store;
}

inline void apply_to_model(const CheckpointStore& store, Model<float>& m) {
    auto refs = m.tensors();
    check(refs.size() == store.tensors.size(), "checkpoint holds ", store.tensors.size(),
          " tensors, model expects ", refs.size());
    for (auto& t : refs) {
        const TensorBlob& blob = store.get(t.name);
        check(blob.dims == t.dims, "tensor '", t.name, "' shape mismatch");
        std::copy(blob.data.begin(), blob.data.end(), t.w);
    }
}

// Conflict-free merge of the two stage-1 branches: the understanding branch
// contributes everything it owns or shares; the generation branch overlays
// the groups only it trained.  Tensors neither branch trained must be
// bit-identical in both files (both runs started from the same init).
inline CheckpointStore merge_stage1(const CheckpointStore& mmu_branch,
                                    const CheckpointStore& t2i_branch,
                                    Model<float>& layout) {
    check(mmu_branch.tensors.size() == t2i_branch.tensors.size(),
          "branch checkpoints disagree on tensor count");
    CheckpointStore merged;
    merged.config_text = mmu_branch.config_text;
    for (auto& t : layout.tensors()) {
        const TensorBlob& a = mmu_branch.get(t.name);
        const TensorBlob& b = t2i_branch.get(t.name);
        check(a.dims == b.dims, "tensor '", t.name, "' shape differs between branches");
        bool from_t2i = (t.group == "t2i_lora" || t.group == "image_head");
        bool mmu_trained = (t.group == "mmu_lora" || t.group == "visual_projector");
        if (!from_t2i && !mmu_trained) {
            check(a.data == b.data,
                  "stage-1 branches disagree on untrained tensor '", t.name,
                  "' — runs did not share an init");
        }
        merged.add(from_t2i ? b : a);
    }
    return merged;
}

}  // namespace tandem
