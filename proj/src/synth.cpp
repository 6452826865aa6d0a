#include "m3net/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "m3net/rng.hpp"
#include "m3net/volume.hpp"

namespace m3net {

namespace {

struct Vec3 {
    double x, y, z;
};

void stamp_ball(std::vector<double>& f, const std::array<std::uint32_t, 3>& dims, Vec3 c,
                double radius, double amp) {
    const std::int64_t nx = dims[0], ny = dims[1], nz = dims[2];
    const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.x - radius - 1));
    const std::int64_t x1 = std::min<std::int64_t>(nx - 1, static_cast<std::int64_t>(c.x + radius + 1));
    const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.y - radius - 1));
    const std::int64_t y1 = std::min<std::int64_t>(ny - 1, static_cast<std::int64_t>(c.y + radius + 1));
    const std::int64_t z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.z - radius - 1));
    const std::int64_t z1 = std::min<std::int64_t>(nz - 1, static_cast<std::int64_t>(c.z + radius + 1));
    for (std::int64_t x = x0; x <= x1; ++x)
        for (std::int64_t y = y0; y <= y1; ++y)
            for (std::int64_t z = z0; z <= z1; ++z) {
                const double dx = x - c.x, dy = y - c.y, dz = z - c.z;
                const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                if (d > radius) continue;
                f[static_cast<std::size_t>(x + nx * (y + ny * z))] += amp * (1.0 - d / radius);
            }
}

void stamp_gaussian(std::vector<double>& f, const std::array<std::uint32_t, 3>& dims, Vec3 c,
                    double sigma, double amp) {
    const double reach = 2.5 * sigma;
    const std::int64_t nx = dims[0], ny = dims[1], nz = dims[2];
    const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.x - reach));
    const std::int64_t x1 = std::min<std::int64_t>(nx - 1, static_cast<std::int64_t>(c.x + reach));
    const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.y - reach));
    const std::int64_t y1 = std::min<std::int64_t>(ny - 1, static_cast<std::int64_t>(c.y + reach));
    const std::int64_t z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.z - reach));
    const std::int64_t z1 = std::min<std::int64_t>(nz - 1, static_cast<std::int64_t>(c.z + reach));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::int64_t x = x0; x <= x1; ++x)
        for (std::int64_t y = y0; y <= y1; ++y)
            for (std::int64_t z = z0; z <= z1; ++z) {
                const double dx = x - c.x, dy = y - c.y, dz = z - c.z;
                f[static_cast<std::size_t>(x + nx * (y + ny * z))] +=
                    amp * std::exp(-(dx * dx + dy * dy + dz * dz) * inv);
            }
}

}  // namespace

SynthOutput synth_generate(const SynthParams& p, std::uint64_t seed,
                           const std::string& out_dir) {
    if (p.count < 2) throw ConfigError("synth_generate: count must be >= 2");
    if (p.dims[0] < 100 || p.dims[1] < 100 || p.dims[2] < 60)
        throw ConfigError("synth_generate: dims must be at least 100x100x60 to contain the cues");
    std::filesystem::create_directories(out_dir);

    const double difficulty = std::clamp(p.difficulty, 0.0, 1.0);
    const double noise_hu = 8.0 + 72.0 * difficulty;
    const double tex_amp = 30.0 + 90.0 * difficulty;
    const double amp = p.cue_scale * (1.5 - difficulty);

    SynthOutput out;
    for (std::size_t i = 0; i < p.count; ++i) {
        Rng rng = Rng(seed).derive("synth", i);
        const int label = static_cast<int>(i % 2);

        Volume vol;
        vol.dims = p.dims;
        vol.spacing = {0.7f, 0.7f, 1.25f};
        for (int a = 0; a < 3; ++a)
            vol.centroid[a] = p.dims[a] / 2 +
                              static_cast<std::uint32_t>(rng.uniform_int(5)) - 2;
        const Vec3 c{static_cast<double>(vol.centroid[0]), static_cast<double>(vol.centroid[1]),
                     static_cast<double>(vol.centroid[2])};

        std::vector<double> field(vol.numel(), -880.0);

        // background texture, kept clear of the nodule neighbourhood
        const double rx = rng.uniform(5.0, 6.6);
        const double ry = rng.uniform(5.0, 6.6);
        const double rz = rng.uniform(4.0, 5.2);
        const double keepout = 2.0 * std::max({rx, ry, rz}) + 4.0;
        for (int b = 0; b < 40; ++b) {
            Vec3 bc{rng.uniform(0, p.dims[0]), rng.uniform(0, p.dims[1]),
                    rng.uniform(0, p.dims[2])};
            const double sigma = rng.uniform(2.5, 7.0);
            const double a_ = tex_amp * rng.uniform(0.5, 1.0) * (rng.uniform() < 0.5 ? -1 : 1);
            const double dd = std::sqrt((bc.x - c.x) * (bc.x - c.x) +
                                        (bc.y - c.y) * (bc.y - c.y) +
                                        (bc.z - c.z) * (bc.z - c.z));
            if (dd < keepout) continue;
            stamp_gaussian(field, p.dims, bc, sigma, a_);
        }

        // nodule body, identical statistics for both classes
        {
            const double pad = 2.0;
            const std::int64_t nx = p.dims[0], ny = p.dims[1], nz = p.dims[2];
            const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.x - rx - pad));
            const std::int64_t x1 = std::min<std::int64_t>(nx - 1, static_cast<std::int64_t>(c.x + rx + pad));
            const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.y - ry - pad));
            const std::int64_t y1 = std::min<std::int64_t>(ny - 1, static_cast<std::int64_t>(c.y + ry + pad));
            const std::int64_t z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.z - rz - pad));
            const std::int64_t z1 = std::min<std::int64_t>(nz - 1, static_cast<std::int64_t>(c.z + rz + pad));
            for (std::int64_t x = x0; x <= x1; ++x)
                for (std::int64_t y = y0; y <= y1; ++y)
                    for (std::int64_t z = z0; z <= z1; ++z) {
                        const double dx = (x - c.x) / rx, dy = (y - c.y) / ry, dz = (z - c.z) / rz;
                        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                        const double w = std::clamp((1.2 - d) / 0.4, 0.0, 1.0);
                        if (w > 0)
                            field[static_cast<std::size_t>(x + nx * (y + ny * z))] += 750.0 * w;
                    }
        }

        SynthSampleMeta meta;
        char stem[32];
        std::snprintf(stem, sizeof stem, "%s_%04zu", p.prefix.c_str(), i);
        meta.id = stem;
        meta.label = label;
        meta.radii = {rx, ry, rz};

        if (label == 1) {
            if (difficulty <= 0.0) {
                meta.cue_spic = meta.cue_tube = meta.cue_shell = true;
            } else {
                std::uint64_t subset = 1 + rng.uniform_int(7);  // non-empty subset of 3 cues
                meta.cue_spic = subset & 1;
                meta.cue_tube = subset & 2;
                meta.cue_shell = subset & 4;
            }

            if (meta.cue_spic) {
                for (int s = 0; s < 12; ++s) {
                    Vec3 dir{rng.normal(), rng.normal(), 0.35 * rng.normal()};
                    const double n = std::sqrt(dir.x * dir.x + dir.y * dir.y + dir.z * dir.z);
                    dir = {dir.x / n, dir.y / n, dir.z / n};
                    const double r_surf =
                        1.0 / std::sqrt((dir.x / rx) * (dir.x / rx) + (dir.y / ry) * (dir.y / ry) +
                                        (dir.z / rz) * (dir.z / rz));
                    const double len = rng.uniform(2.5, 4.5);
                    for (double t = 0.0; t <= len; t += 0.5) {
                        const Vec3 pos{c.x + dir.x * (r_surf + t), c.y + dir.y * (r_surf + t),
                                       c.z + dir.z * (r_surf + t)};
                        stamp_ball(field, p.dims, pos, 1.2, 380.0 * amp * (1.0 - t / (len + 1.0)));
                    }
                }
            }

            if (meta.cue_tube) {
                const double theta = rng.uniform(0.0, 6.283185307179586);
                const double zslope = rng.uniform(-0.15, 0.15);
                for (double rho = 23.0; rho <= 33.0; rho += 0.5) {
                    const double ramp = std::clamp((rho - 23.0) / 3.0, 0.2, 1.0);
                    const Vec3 pos{c.x + std::cos(theta) * rho, c.y + std::sin(theta) * rho,
                                   c.z + zslope * (rho - 23.0)};
                    stamp_ball(field, p.dims, pos, 1.9, 420.0 * amp * ramp);
                }
            }

            if (meta.cue_shell) {
                const double phi = rng.uniform(0.0, 6.283185307179586);
                const double cos_halfwidth = std::cos(1.05);
                const std::int64_t nx = p.dims[0], ny = p.dims[1], nz = p.dims[2];
                const std::int64_t zlo = std::max<std::int64_t>(0, static_cast<std::int64_t>(c.z) - 12);
                const std::int64_t zhi = std::min<std::int64_t>(nz - 1, static_cast<std::int64_t>(c.z) + 12);
                for (std::int64_t x = 0; x < nx; ++x)
                    for (std::int64_t y = 0; y < ny; ++y) {
                        const double dx = x - c.x, dy = y - c.y;
                        const double rho = std::sqrt(dx * dx + dy * dy);
                        if (rho < 46.0 || rho > 47.5) continue;
                        const double ca = (dx * std::cos(phi) + dy * std::sin(phi)) / rho;
                        if (ca < cos_halfwidth) continue;
                        const double band = 1.0 - std::abs(rho - 46.75) / 0.75;
                        for (std::int64_t z = zlo; z <= zhi; ++z)
                            field[static_cast<std::size_t>(x + nx * (y + ny * z))] +=
                                300.0 * amp * band;
                    }
            }
        }

        vol.voxels.resize(vol.numel());
        for (std::size_t v = 0; v < field.size(); ++v) {
            const double hu = field[v] + noise_hu * rng.normal() + p.hu_offset;
            vol.voxels[v] = static_cast<std::int16_t>(
                std::clamp(std::nearbyint(hu), -32768.0, 32767.0));
        }

        const std::string fname = std::string(stem) + ".m3nvol";
        write_volume(vol, (std::filesystem::path(out_dir) / fname).string());

        ManifestEntry e;
        e.path = fname;
        e.centroid = vol.centroid;
        if (label == 1) {
            for (int r = 0; r < 4; ++r) e.scores.push_back(4 + static_cast<int>(rng.uniform_int(2)));
        } else {
            for (int r = 0; r < 4; ++r) e.scores.push_back(1 + static_cast<int>(rng.uniform_int(3)));
        }
        out.manifest.entries.push_back(std::move(e));
        out.meta.push_back(std::move(meta));
    }

    write_manifest(out.manifest, (std::filesystem::path(out_dir) / "manifest.csv").string());
    write_synth_meta(out.meta, (std::filesystem::path(out_dir) / "synth_meta.json").string());
    return out;
}

void write_synth_meta(const std::vector<SynthSampleMeta>& meta, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : meta) {
        arr.push_back({{"id", m.id},
                       {"label", m.label},
                       {"radii", m.radii},
                       {"cue_spic", m.cue_spic},
                       {"cue_tube", m.cue_tube},
                       {"cue_shell", m.cue_shell}});
    }
    std::ofstream os(path);
    if (!os) throw DataError("cannot write synth meta: " + path);
    os << arr.dump(1) << '\n';
}

std::vector<SynthSampleMeta> read_synth_meta(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open synth meta: " + path);
    nlohmann::json arr;
    try {
        is >> arr;
    } catch (const std::exception& e) {
        throw DataError("bad synth meta json: " + std::string(e.what()));
    }
    std::vector<SynthSampleMeta> out;
    for (const auto& j : arr) {
        SynthSampleMeta m;
        m.id = j.at("id").get<std::string>();
        m.label = j.at("label").get<int>();
        const auto r = j.at("radii");
        m.radii = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
        m.cue_spic = j.at("cue_spic").get<bool>();
        m.cue_tube = j.at("cue_tube").get<bool>();
        m.cue_shell = j.at("cue_shell").get<bool>();
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace m3net
