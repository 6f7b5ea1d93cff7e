#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "dermfuse/common.hpp"
#include "dermfuse/image.hpp"  // read_file_bytes / write_file_bytes
#include "dermfuse/rng.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

// Checkpoint layout (little-endian):
//   magic "DFUSECKP" | version u32 | fingerprint 32 bytes |
//   tensor count u64 | per tensor: name_len u32, name, rank u32,
//   extents u64 each, values f64 | crc32 u32 over everything before it.
// The RNG state travels as a pseudo-tensor named "__rng_state".

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'U', 'S', 'E', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr const char* kRngStateName = "__rng_state";

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> skipped;  // present in the file, not applied
    bool rng_restored = false;
};

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
inline void put_f64(std::vector<uint8_t>& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct ByteReader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > bytes.size()) throw IoError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(bytes[pos + size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(bytes.begin() + long(pos), bytes.begin() + long(pos + n));
        pos += n;
        return s;
    }
};

inline std::vector<double> rng_state_values(const SeededRng::State& st) {
    std::vector<double> v(6, 0.0);
    for (int i = 0; i < 4; ++i) std::memcpy(&v[size_t(i)], &st.words[size_t(i)], 8);
    v[4] = st.cached_normal;
    v[5] = st.has_cached_normal ? 1.0 : 0.0;
    return v;
}

inline SeededRng::State rng_state_from_values(const std::vector<double>& v) {
    if (v.size() != 6) throw IoError("checkpoint: malformed rng state");
    SeededRng::State st;
    for (int i = 0; i < 4; ++i) std::memcpy(&st.words[size_t(i)], &v[size_t(i)], 8);
    st.cached_normal = v[4];
    st.has_cached_normal = v[5] != 0.0;
    return st;
}

}  // namespace detail

inline std::vector<uint8_t> encode_checkpoint(const std::string& signature,
                                              const std::vector<CheckpointEntry>& entries) {
    std::vector<uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_u32(out, kCheckpointVersion);
    const auto fp = fingerprint256(signature);
    out.insert(out.end(), fp.begin(), fp.end());
    detail::put_u64(out, uint64_t(entries.size()));
    for (const CheckpointEntry& e : entries) {
        detail::put_u32(out, uint32_t(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        detail::put_u32(out, uint32_t(e.shape.size()));
        int64_t n = 1;
        for (int64_t d : e.shape) {
            detail::put_u64(out, uint64_t(d));
            n *= d;
        }
        if (n != int64_t(e.values.size()))
            throw ShapeError("checkpoint: entry '" + e.name + "' value count mismatch");
        for (double d : e.values) detail::put_f64(out, d);
    }
    detail::put_u32(out, uint32_t(crc32(0, out.data(), uInt(out.size()))));
    return out;
}

struct ParsedCheckpoint {
    uint32_t version = 0;
    std::array<uint8_t, 32> fingerprint{};
    std::vector<CheckpointEntry> entries;
};

inline ParsedCheckpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 + 4 + 32 + 8 + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IoError("checkpoint: bad magic");
    const uint32_t stored_crc = uint32_t(bytes[bytes.size() - 4]) << 0 |
                                uint32_t(bytes[bytes.size() - 3]) << 8 |
                                uint32_t(bytes[bytes.size() - 2]) << 16 |
                                uint32_t(bytes[bytes.size() - 1]) << 24;
    const uint32_t actual_crc = uint32_t(crc32(0, bytes.data(), uInt(bytes.size() - 4)));
    if (stored_crc != actual_crc) throw IoError("checkpoint: checksum mismatch (corrupted file)");

    detail::ByteReader r{bytes};
    r.pos = 8;
    ParsedCheckpoint pc;
    pc.version = r.u32();
    if (pc.version != kCheckpointVersion)
        throw IoError("checkpoint: format version " + std::to_string(pc.version) +
                      " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
    for (size_t i = 0; i < 32; ++i) pc.fingerprint[i] = bytes[r.pos++];
    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.str(r.u32());
        const uint32_t rank = r.u32();
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            e.shape.push_back(int64_t(r.u64()));
            n *= e.shape.back();
        }
        if (n < 0 || uint64_t(n) > (bytes.size() / 8))
            throw IoError("checkpoint: implausible tensor extent");
        e.values.resize(size_t(n));
        for (int64_t j = 0; j < n; ++j) e.values[size_t(j)] = r.f64();
        pc.entries.push_back(std::move(e));
    }
    return pc;
}

template <class Model>
inline std::vector<CheckpointEntry> collect_entries(Model& model) {
    std::vector<CheckpointEntry> entries;
    model.visit([&entries](const std::string& name, Tensor t, bool) {
        entries.push_back({name, t.shape(), t.data()});
    });
    return entries;
}

template <class Model>
inline void save_checkpoint(const std::string& path, Model& model,
                            const SeededRng* rng = nullptr) {
    std::vector<CheckpointEntry> entries = collect_entries(model);
    if (rng) entries.push_back({kRngStateName, {6}, detail::rng_state_values(rng->state())});
    const std::vector<uint8_t> bytes = encode_checkpoint(model.signature(), entries);
    const std::string tmp = path + ".tmp";
    write_file_bytes(tmp, bytes);
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("checkpoint: cannot move " + tmp + " into place");
    }
}

// Full load requires a fingerprint match and applies every model tensor;
// partial load applies entries matching by name and shape and reports the
// rest. On any error the model is untouched (the file is fully parsed and
// validated first).
template <class Model>
inline LoadReport load_checkpoint(const std::string& path, Model& model, bool partial = false,
                                  SeededRng* rng = nullptr) {
    const ParsedCheckpoint pc = parse_checkpoint(read_file_bytes(path));

    const auto fp = fingerprint256(model.signature());
    const bool fingerprint_ok = std::equal(fp.begin(), fp.end(), pc.fingerprint.begin());
    if (!partial && !fingerprint_ok)
        throw FingerprintError("checkpoint: architecture fingerprint mismatch (use partial load "
                               "for transfer)");

    std::map<std::string, Tensor> targets;
    model.visit([&targets](const std::string& name, Tensor t, bool) { targets.emplace(name, t); });

    // validate before mutating anything
    std::vector<const CheckpointEntry*> to_apply;
    LoadReport report;
    const CheckpointEntry* rng_entry = nullptr;
    for (const CheckpointEntry& e : pc.entries) {
        if (e.name == kRngStateName) {
            rng_entry = &e;
            continue;
        }
        auto it = targets.find(e.name);
        const bool match = it != targets.end() && it->second.shape() == e.shape;
        if (match) {
            to_apply.push_back(&e);
        } else if (partial) {
            report.skipped.push_back(e.name);
        } else {
            throw FingerprintError("checkpoint: tensor '" + e.name + "' does not match the model");
        }
    }
    if (!partial) {
        size_t entry_count = pc.entries.size() - (rng_entry ? 1 : 0);
        if (entry_count != targets.size())
            throw FingerprintError("checkpoint: tensor set does not cover the model");
    }

    for (const CheckpointEntry* e : to_apply) {
        targets.at(e->name).data() = e->values;
        report.loaded.push_back(e->name);
    }
    if (rng && rng_entry) {
        rng->set_state(detail::rng_state_from_values(rng_entry->values));
        report.rng_restored = true;
    }
    return report;
}

}  // namespace dermfuse
