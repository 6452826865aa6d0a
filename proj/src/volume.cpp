#include "m3net/volume.hpp"

#include <cstring>
#include <fstream>

namespace m3net {

namespace {

constexpr char kVolMagic[8] = {'M', '3', 'N', 'V', 'O', 'L', '1', '\0'};
constexpr char kSalMagic[8] = {'M', '3', 'N', 'S', 'A', 'L', '1', '\0'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated volume file: " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float get_f32(std::istream& is, const std::string& what) {
    const std::uint32_t u = get_u32(is, what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

void Volume::validate() const {
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0)
        throw DataError("volume has zero-sized dimension");
    if (voxels.size() != numel())
        throw DataError("voxel count " + std::to_string(voxels.size()) +
                        " does not match dims product " + std::to_string(numel()));
    for (int a = 0; a < 3; ++a) {
        if (centroid[a] >= dims[a]) throw DataError("centroid outside volume bounds");
        if (!(spacing[a] > 0)) throw DataError("non-positive voxel spacing");
    }
}

void write_volume(const Volume& v, const std::string& path) {
    v.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open volume for writing: " + path);
    os.write(kVolMagic, 8);
    for (int a = 0; a < 3; ++a) put_u32(os, v.dims[a]);
    for (int a = 0; a < 3; ++a) put_f32(os, v.spacing[a]);
    for (int a = 0; a < 3; ++a) put_u32(os, v.centroid[a]);
    os.write(reinterpret_cast<const char*>(v.voxels.data()),
             static_cast<std::streamsize>(v.voxels.size() * sizeof(std::int16_t)));
    if (!os) throw DataError("failed writing volume: " + path);
}

Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open volume: " + path);
    char magic[8];
    if (!is.read(magic, 8)) throw DataError("truncated volume file: magic in " + path);
    if (std::memcmp(magic, kVolMagic, 8) != 0) throw DataError("bad volume magic in " + path);
    Volume v;
    for (int a = 0; a < 3; ++a) v.dims[a] = get_u32(is, "dims");
    for (int a = 0; a < 3; ++a) v.spacing[a] = get_f32(is, "spacing");
    for (int a = 0; a < 3; ++a) v.centroid[a] = get_u32(is, "centroid");
    const std::size_t n = v.numel();
    if (n == 0) throw DataError("volume header declares zero voxels: " + path);
    v.voxels.resize(n);
    is.read(reinterpret_cast<char*>(v.voxels.data()),
            static_cast<std::streamsize>(n * sizeof(std::int16_t)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(std::int16_t))
        throw DataError("volume payload truncated: expected " + std::to_string(n) +
                        " voxels in " + path);
    // trailing bytes mean the header undercounts the payload
    char extra;
    if (is.read(&extra, 1))
        throw DataError("volume payload larger than dims declare: " + path);
    v.validate();
    return v;
}

void write_saliency(const SaliencyGrid& s, const std::string& path) {
    const std::size_t n = static_cast<std::size_t>(s.dims[0]) * s.dims[1] * s.dims[2];
    if (s.values.size() != n) throw DataError("saliency value count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open saliency file for writing: " + path);
    os.write(kSalMagic, 8);
    for (int a = 0; a < 3; ++a) put_u32(os, s.dims[a]);
    for (int a = 0; a < 3; ++a) put_f32(os, s.spacing[a]);
    os.write(reinterpret_cast<const char*>(s.values.data()),
             static_cast<std::streamsize>(s.values.size() * sizeof(float)));
    if (!os) throw DataError("failed writing saliency: " + path);
}

SaliencyGrid read_saliency(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open saliency file: " + path);
    char magic[8];
    if (!is.read(magic, 8)) throw DataError("truncated saliency file: " + path);
    if (std::memcmp(magic, kSalMagic, 8) != 0) throw DataError("bad saliency magic in " + path);
    SaliencyGrid s;
    for (int a = 0; a < 3; ++a) s.dims[a] = get_u32(is, "dims");
    for (int a = 0; a < 3; ++a) s.spacing[a] = get_f32(is, "spacing");
    const std::size_t n = static_cast<std::size_t>(s.dims[0]) * s.dims[1] * s.dims[2];
    s.values.resize(n);
    if (!is.read(reinterpret_cast<char*>(s.values.data()),
                 static_cast<std::streamsize>(n * sizeof(float))))
        throw DataError("saliency payload truncated: " + path);
    return s;
}

}  // namespace m3net
