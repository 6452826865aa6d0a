#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m3net/params.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

// "M3NCKPT1" checkpoint: magic, u32 record count, then per record a
// length-prefixed name, u32 rank + dims, and f32 payload. Little-endian.
struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_checkpoint(const std::string& path);

// Serializes the named subset in store order (insertion order).
template <typename T>
std::vector<CheckpointRecord> records_from_store(const ParamStore<T>& store,
                                                 const std::vector<std::string>& names) {
    std::vector<CheckpointRecord> out;
    out.reserve(names.size());
    for (const auto& n : names) {
        const Param<T>& p = store.at(n);
        CheckpointRecord r;
        r.name = n;
        r.shape = p.value.shape;
        r.data.resize(p.value.numel());
        for (std::size_t i = 0; i < r.data.size(); ++i)
            r.data[i] = static_cast<float>(p.value.data[i]);
        out.push_back(std::move(r));
    }
    return out;
}

template <typename T>
void save_params(const ParamStore<T>& store, const std::vector<std::string>& names,
                 const std::string& path) {
    write_checkpoint(path, records_from_store(store, names));
}

template <typename T>
void load_params(ParamStore<T>& store, const std::string& path, bool must_exist_in_store = true) {
    for (const auto& r : read_checkpoint(path)) {
        if (!store.has(r.name)) {
            if (must_exist_in_store) throw DataError("checkpoint record has no matching param: " + r.name);
            continue;
        }
        Param<T>& p = store.at(r.name);
        if (p.value.shape != r.shape)
            throw DataError("checkpoint shape mismatch for " + r.name + ": file " +
                            shape_str(r.shape) + " vs model " + shape_str(p.value.shape));
        for (std::size_t i = 0; i < r.data.size(); ++i)
            p.value.data[i] = static_cast<T>(r.data[i]);
    }
}

}  // namespace m3net
