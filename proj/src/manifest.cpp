#include "m3net/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "m3net/patches.hpp"
#include "m3net/rng.hpp"

namespace m3net {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty manifest: " + path);
    if (split_csv_line(line) != std::vector<std::string>{"path", "cx", "cy", "cz", "scores", "split"})
        throw DataError("manifest header mismatch in " + path);
    Manifest m;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 6)
            throw DataError("manifest line " + std::to_string(lineno) + ": expected 6 fields");
        ManifestEntry e;
        e.path = f[0];
        try {
            e.centroid = {static_cast<std::uint32_t>(std::stoul(f[1])),
                          static_cast<std::uint32_t>(std::stoul(f[2])),
                          static_cast<std::uint32_t>(std::stoul(f[3]))};
        } catch (const std::exception&) {
            throw DataError("manifest line " + std::to_string(lineno) + ": bad centroid");
        }
        std::stringstream ss(f[4]);
        std::string tok;
        while (std::getline(ss, tok, '|')) {
            try {
                e.scores.push_back(std::stoi(tok));
            } catch (const std::exception&) {
                throw DataError("manifest line " + std::to_string(lineno) + ": bad score");
            }
        }
        if (e.scores.empty())
            throw DataError("manifest line " + std::to_string(lineno) + ": empty scores");
        for (int s : e.scores)
            if (s < 1 || s > 5)
                throw DataError("manifest line " + std::to_string(lineno) + ": score out of [1,5]");
        e.split = f[5];
        if (!e.split.empty() && e.split != "train" && e.split != "val" && e.split != "test")
            throw DataError("manifest line " + std::to_string(lineno) + ": bad split tag");
        m.entries.push_back(std::move(e));
    }
    return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open manifest for writing: " + path);
    os << "path,cx,cy,cz,scores,split\n";
    for (const auto& e : m.entries) {
        os << e.path << ',' << e.centroid[0] << ',' << e.centroid[1] << ',' << e.centroid[2]
           << ',';
        for (std::size_t i = 0; i < e.scores.size(); ++i) os << (i ? "|" : "") << e.scores[i];
        os << ',' << e.split << '\n';
    }
    if (!os) throw DataError("failed writing manifest: " + path);
}

Manifest split_dataset(const Manifest& m, std::uint64_t seed) {
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        by_class[binarize_label(m.entries[i].scores)].push_back(i);
    for (int c = 0; c < 2; ++c)
        if (!by_class[c].empty() && by_class[c].size() < 3)
            throw DataError("split_dataset: class " + std::to_string(c) + " has only " +
                            std::to_string(by_class[c].size()) + " entries, cannot stratify");
    if (m.entries.empty()) throw DataError("split_dataset: empty manifest");

    Manifest out = m;
    for (int c = 0; c < 2; ++c) {
        auto& idx = by_class[c];
        Rng rng = Rng(seed).derive("split", static_cast<std::uint64_t>(c));
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
        const std::size_t n = idx.size();
        const std::size_t n_val = n / 10;
        const std::size_t n_test = n / 5;
        for (std::size_t i = 0; i < n; ++i) {
            auto& e = out.entries[idx[i]];
            if (i < n_val) e.split = "val";
            else if (i < n_val + n_test) e.split = "test";
            else e.split = "train";
        }
    }
    return out;
}

}  // namespace m3net
