#include "m3net/patches.hpp"

#include <cmath>

namespace m3net {

TensorData<float> extract_crop(const Volume& v, std::size_t size_xy, std::size_t depth) {
    v.validate();
    const std::int64_t half_xy = static_cast<std::int64_t>(size_xy / 2);
    const std::int64_t half_z = static_cast<std::int64_t>(depth / 2);
    const std::int64_t cx = v.centroid[0], cy = v.centroid[1], cz = v.centroid[2];
    const std::int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];

    TensorData<float> out({size_xy, size_xy, depth});
    std::size_t o = 0;
    for (std::size_t ix = 0; ix < size_xy; ++ix) {
        const std::int64_t sx = cx + static_cast<std::int64_t>(ix) - half_xy;
        for (std::size_t iy = 0; iy < size_xy; ++iy) {
            const std::int64_t sy = cy + static_cast<std::int64_t>(iy) - half_xy;
            if (sx < 0 || sx >= nx || sy < 0 || sy >= ny) {
                for (std::size_t iz = 0; iz < depth; ++iz) out.data[o++] = kAirFillHu;
                continue;
            }
            for (std::size_t iz = 0; iz < depth; ++iz) {
                const std::int64_t sz = cz + static_cast<std::int64_t>(iz) - half_z;
                out.data[o++] = (sz < 0 || sz >= nz)
                                    ? kAirFillHu
                                    : static_cast<float>(v.at(static_cast<std::size_t>(sx),
                                                              static_cast<std::size_t>(sy),
                                                              static_cast<std::size_t>(sz)));
            }
        }
    }
    return out;
}

NestedPatchSet extract_nested(const Volume& v) {
    NestedPatchSet p;
    p.x96 = extract_crop(v, 96);
    p.x64 = extract_crop(v, 64);
    p.x32 = extract_crop(v, 32);
    return p;
}

int binarize_label(const std::vector<int>& scores) {
    if (scores.empty()) throw DataError("binarize_label: empty score list");
    double sum = 0;
    for (int s : scores) {
        if (s < 1 || s > 5) throw DataError("binarize_label: score out of [1,5]");
        sum += s;
    }
    return (sum / static_cast<double>(scores.size())) > 3.0 ? 1 : 0;
}

namespace {

void flip_y(TensorData<float>& t) {
    const std::size_t s = t.shape[0], d = t.shape[2];
    for (std::size_t x = 0; x < s; ++x)
        for (std::size_t y = 0; y < s / 2; ++y) {
            const std::size_t a = (x * s + y) * d;
            const std::size_t b = (x * s + (s - 1 - y)) * d;
            for (std::size_t z = 0; z < d; ++z) std::swap(t.data[a + z], t.data[b + z]);
        }
}

// In-plane rotation about the crop center voxel floor(s/2), matching the
// extraction centering convention; bilinear sample with air fill.
void rotate_inplane(TensorData<float>& t, double angle_rad) {
    const std::size_t s = t.shape[0], d = t.shape[2];
    const double c = static_cast<double>(s / 2);
    const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
    TensorData<float> out(t.shape);
    for (std::size_t ox = 0; ox < s; ++ox) {
        for (std::size_t oy = 0; oy < s; ++oy) {
            const double rx = static_cast<double>(ox) - c;
            const double ry = static_cast<double>(oy) - c;
            const double sx = c + ca * rx + sa * ry;
            const double sy = c - sa * rx + ca * ry;
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
            const double wx = sx - static_cast<double>(x0);
            const double wy = sy - static_cast<double>(y0);
            auto col = [&](std::int64_t x, std::int64_t y) -> const float* {
                if (x < 0 || y < 0 || x >= static_cast<std::int64_t>(s) ||
                    y >= static_cast<std::int64_t>(s))
                    return nullptr;
                return t.data.data() + (static_cast<std::size_t>(x) * s +
                                        static_cast<std::size_t>(y)) * d;
            };
            const float* c00 = col(x0, y0);
            const float* c01 = col(x0, y0 + 1);
            const float* c10 = col(x0 + 1, y0);
            const float* c11 = col(x0 + 1, y0 + 1);
            float* dst = out.data.data() + (ox * s + oy) * d;
            for (std::size_t z = 0; z < d; ++z) {
                const double v00 = c00 ? c00[z] : kAirFillHu;
                const double v01 = c01 ? c01[z] : kAirFillHu;
                const double v10 = c10 ? c10[z] : kAirFillHu;
                const double v11 = c11 ? c11[z] : kAirFillHu;
                dst[z] = static_cast<float>((1 - wx) * ((1 - wy) * v00 + wy * v01) +
                                            wx * ((1 - wy) * v10 + wy * v11));
            }
        }
    }
    t = std::move(out);
}

}  // namespace

NestedPatchSet augment(const NestedPatchSet& p, Rng& rng) {
    NestedPatchSet out = p;
    const bool do_flip = rng.uniform() < 0.5;
    const bool do_rot = rng.uniform() < 0.5;
    if (do_flip) {
        flip_y(out.x96);
        flip_y(out.x64);
        flip_y(out.x32);
    }
    if (do_rot) {
        const double angle = rng.uniform(0.0, 3.14159265358979323846);
        rotate_inplane(out.x96, angle);
        rotate_inplane(out.x64, angle);
        rotate_inplane(out.x32, angle);
    }
    return out;
}

}  // namespace m3net
