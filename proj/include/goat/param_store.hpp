// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "goat/autodiff.hpp"
#include "goat/errors.hpp"
#include "goat/rng.hpp"
#include "goat/tensor.hpp"

namespace goat {

struct AdamHyper {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Named parameter tensors with a freeze mask and per-parameter Adam state.
// Iteration order is the sorted name order everywhere, which keeps updates,
// checksums and checkpoint bytes deterministic.
class ParamStore {
public:
    struct Entry {
        Tensor value;
        bool frozen = false;
        Tensor m;      // first moment
        Tensor v;      // second moment
        int64_t step = 0;
    };

    void add(const std::string& name, Tensor t, bool frozen = false) {
        if (entries_.count(name)) throw ArgumentError("ParamStore: duplicate name " + name);
        Entry e;
        e.m = Tensor(t.shape);
        e.v = Tensor(t.shape);
        e.value = std::move(t);
        e.frozen = frozen;
        entries_.emplace(name, std::move(e));
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ArgumentError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ArgumentError("ParamStore: unknown parameter " + name);
        return it->second;
    }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }

    bool frozen(const std::string& name) const { return entry(name).frozen; }
    void set_frozen(const std::string& name, bool f) { entry(name).frozen = f; }

    // Applies the predicate to every parameter name.
    template <typename Pred>
    void freeze_where(Pred pred) {
        for (auto& [name, e] : entries_) e.frozen = pred(name);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, _] : entries_) out.push_back(name);
        return out;  // std::map iteration is already sorted
    }

    size_t size() const { return entries_.size(); }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& [_, e] : entries_) n += e.value.numel();
        return n;
    }

    void reset_optimizer() {
        for (auto& [_, e] : entries_) {
            e.m = Tensor(e.value.shape);
            e.v = Tensor(e.value.shape);
            e.step = 0;
        }
    }

    // Graph leaf bound to this store; frozen parameters get requires_grad=false
    // so gradcheck and backward skip them. Works on Graph and Graph64.
    template <typename G>
    Var leaf(G& g, const std::string& name) const {
        const Entry& e = entry(name);
        return g.leaf_view(&e.value, !e.frozen, name);
    }

    uint64_t checksum(const std::string& name) const {
        const Entry& e = entry(name);
        return fnv1a64(e.value.data.data(), e.value.data.size() * sizeof(float));
    }

    std::map<std::string, uint64_t> checksums() const {
        std::map<std::string, uint64_t> out;
        for (const auto& [name, e] : entries_)
            out[name] = fnv1a64(e.value.data.data(), e.value.data.size() * sizeof(float));
        return out;
    }

    uint64_t optimizer_checksum(const std::string& name) const {
        const Entry& e = entry(name);
        uint64_t h = fnv1a64(e.m.data.data(), e.m.data.size() * sizeof(float));
        h = hash_combine(h, fnv1a64(e.v.data.data(), e.v.data.size() * sizeof(float)));
        return hash_combine(h, static_cast<uint64_t>(e.step));
    }

private:
    std::map<std::string, Entry> entries_;
};

// One Adam step with bias correction. Frozen parameters and their optimizer
// state are left bitwise untouched; parameters without a gradient entry are
// skipped (they were not part of the step's graph).
inline void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                      const AdamHyper& hyper = {}) {
    for (const auto& [name, grad] : grads) {
        ParamStore::Entry& e = params.entry(name);
        if (e.frozen) continue;
        if (grad.shape != e.value.shape)
            throw ArgumentError("adam_step: gradient shape mismatch for " + name);
        e.step += 1;
        const float b1 = hyper.beta1, b2 = hyper.beta2;
        const float bc1 = 1.0f - std::pow(b1, static_cast<float>(e.step));
        const float bc2 = 1.0f - std::pow(b2, static_cast<float>(e.step));
        for (int64_t i = 0; i < e.value.numel(); ++i) {
            const float g = grad.data[i];
            e.m.data[i] = b1 * e.m.data[i] + (1.0f - b1) * g;
            e.v.data[i] = b2 * e.v.data[i] + (1.0f - b2) * g * g;
            const float mhat = e.m.data[i] / bc1;
            const float vhat = e.v.data[i] / bc2;
            e.value.data[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

// ---- checkpoint container ----
//
// Layout (little-endian):
//   magic   8 bytes  "GOATCKPT"
//   version 1 byte   0x01
//   count   u32
//   records, sorted by name:
//     name_len u16, name bytes
//     ndim     u8,  dims u32 each
//     frozen   u8
//     data     f32 * prod(dims)

namespace ckpt {

constexpr char kMagic[8] = {'G', 'O', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr uint8_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace ckpt

inline void save_checkpoint(const ParamStore& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_checkpoint: cannot open " + path);
    os.write(ckpt::kMagic, 8);
    ckpt::write_le<uint8_t>(os, ckpt::kVersion);
    ckpt::write_le<uint32_t>(os, static_cast<uint32_t>(params.size()));
    for (const std::string& name : params.names()) {
        const auto& e = params.entry(name);
        ckpt::write_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt::write_le<uint8_t>(os, static_cast<uint8_t>(e.value.ndim()));
        for (int d : e.value.shape) ckpt::write_le<uint32_t>(os, static_cast<uint32_t>(d));
        ckpt::write_le<uint8_t>(os, e.frozen ? 1 : 0);
        os.write(reinterpret_cast<const char*>(e.value.data.data()),
                 static_cast<std::streamsize>(e.value.data.size() * sizeof(float)));
    }
    if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DependencyError("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, ckpt::kMagic, 8) != 0)
        throw DataError("load_checkpoint: bad magic in " + path);
    const auto version = ckpt::read_le<uint8_t>(is);
    if (version != ckpt::kVersion) throw DataError("load_checkpoint: unsupported version");
    const auto count = ckpt::read_le<uint32_t>(is);
    ParamStore out;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = ckpt::read_le<uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto ndim = ckpt::read_le<uint8_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(ckpt::read_le<uint32_t>(is));
        const bool frozen = ckpt::read_le<uint8_t>(is) != 0;
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw DataError("load_checkpoint: truncated file " + path);
        out.add(name, std::move(t), frozen);
    }
    return out;
}

}  // namespace goat
