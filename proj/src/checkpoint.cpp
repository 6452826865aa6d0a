#include "m3net/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "m3net/errors.hpp"

namespace m3net {

namespace {

constexpr char kMagic[8] = {'M', '3', 'N', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError(std::string("checkpoint truncated reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 8);
    put_u32(os, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        put_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
        std::size_t numel = 1;
        for (std::size_t d : r.shape) {
            put_u32(os, static_cast<std::uint32_t>(d));
            numel *= d;
        }
        if (numel != r.data.size()) throw DataError("checkpoint record size mismatch: " + r.name);
        os.write(reinterpret_cast<const char*>(r.data.data()),
                 static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    }
    if (!os) throw DataError("failed writing checkpoint: " + path);
}

std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("bad checkpoint magic in " + path);
    const std::uint32_t count = get_u32(is, "record count");
    std::vector<CheckpointRecord> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointRecord r;
        const std::uint32_t name_len = get_u32(is, "name length");
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw DataError("checkpoint truncated in name");
        const std::uint32_t rank = get_u32(is, "rank");
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            r.shape.push_back(get_u32(is, "dim"));
            numel *= r.shape.back();
        }
        r.data.resize(numel);
        if (!is.read(reinterpret_cast<char*>(r.data.data()),
                     static_cast<std::streamsize>(numel * sizeof(float))))
            throw DataError("checkpoint truncated in payload of " + r.name);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace m3net
