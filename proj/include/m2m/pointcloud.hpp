#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/common.hpp"

namespace m2m {

// An empirical measure (1/N) sum_j delta_{x_j}: N particles in R^d, one per
// row. Row order carries no meaning.
struct PointCloud {
    Mat points;  // N x d

    Eigen::Index n() const { return points.rows(); }
    Eigen::Index dim() const { return points.cols(); }
};

inline PointCloud make_cloud(Mat points) {
    if (points.rows() < 1 || points.cols() < 1)
        throw ShapeError("point cloud needs N >= 1 and d >= 1");
    if (!all_finite(points)) throw ValueError("point cloud has non-finite entries");
    return PointCloud{std::move(points)};
}

struct MeasurePair {
    PointCloud source;
    PointCloud target;
    std::string tag;  // optional label, e.g. "kuramoto-3:t17"
};

struct Dataset {
    std::vector<MeasurePair> pairs;
    Eigen::Index ambient_dim = 0;
};

// Ordered marginals of one simulated system; all marginals share N and d.
struct Trajectory {
    std::vector<PointCloud> marginals;
    std::vector<double> times;  // strictly increasing, same length as marginals
};

namespace detail {

constexpr char kCloudMagic[4] = {'M', '2', 'M', '\0'};
constexpr uint32_t kCloudVersion = 1;

inline void put_u32(std::string& buf, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    buf.append(b, 4);
}

inline uint32_t get_u32(const char* p) {
    uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}

}  // namespace detail

// Serializes a cloud to the `.m2m` binary layout:
//   magic "M2M\0" | u32 version=1 | u32 N | u32 d | N*d f64 (little-endian,
//   row-major)
inline std::string encode_pointcloud(const PointCloud& pc) {
    std::string buf;
    buf.reserve(16 + static_cast<size_t>(pc.n()) * pc.dim() * 8);
    buf.append(detail::kCloudMagic, 4);
    detail::put_u32(buf, detail::kCloudVersion);
    detail::put_u32(buf, static_cast<uint32_t>(pc.n()));
    detail::put_u32(buf, static_cast<uint32_t>(pc.dim()));
    for (Eigen::Index i = 0; i < pc.n(); ++i)
        for (Eigen::Index j = 0; j < pc.dim(); ++j) {
            double v = pc.points(i, j);
            char b[8];
            std::memcpy(b, &v, 8);
            buf.append(b, 8);
        }
    return buf;
}

inline PointCloud decode_pointcloud(const std::string& buf, const std::string& origin) {
    if (buf.size() < 16 || std::memcmp(buf.data(), detail::kCloudMagic, 4) != 0)
        throw FormatError(origin + ": not an .m2m point-cloud file (bad magic)");
    uint32_t version = detail::get_u32(buf.data() + 4);
    if (version != detail::kCloudVersion)
        throw FormatError(origin + ": unsupported .m2m version " + std::to_string(version));
    uint64_t n = detail::get_u32(buf.data() + 8);
    uint64_t d = detail::get_u32(buf.data() + 12);
    if (n < 1 || d < 1) throw FormatError(origin + ": declares empty cloud");
    if (buf.size() < 16 + n * d * 8)
        throw TruncatedError(origin + ": payload truncated (" + std::to_string(buf.size()) +
                             " bytes, expected " + std::to_string(16 + n * d * 8) + ")");
    Mat points(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    const char* p = buf.data() + 16;
    for (uint64_t i = 0; i < n; ++i)
        for (uint64_t j = 0; j < d; ++j) {
            double v;
            std::memcpy(&v, p, 8);
            p += 8;
            points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        }
    if (!all_finite(points)) throw ValueError(origin + ": non-finite coordinate in payload");
    return PointCloud{std::move(points)};
}

inline void save_pointcloud(const PointCloud& pc, const std::filesystem::path& path) {
    std::string buf = encode_pointcloud(pc);
    // Write to a sibling temp file and rename, so a failed write never leaves
    // a syntactically valid but short file behind.
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline PointCloud load_pointcloud(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pointcloud(buf, path.string());
}

// Draws m rows uniformly: without replacement when m <= N (mini-batching
// semantics), with replacement otherwise so tiny clouds still batch.
inline PointCloud subsample(const PointCloud& pc, Eigen::Index m, Rng& rng) {
    if (m < 1) throw ValueError("subsample: m must be >= 1");
    const Eigen::Index n = pc.n();
    Mat out(m, pc.dim());
    if (m <= n) {
        // Partial Fisher-Yates over an index array.
        std::vector<Eigen::Index> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        for (Eigen::Index k = 0; k < m; ++k) {
            Eigen::Index j = k + static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n - k)));
            std::swap(idx[static_cast<size_t>(k)], idx[static_cast<size_t>(j)]);
            out.row(k) = pc.points.row(idx[static_cast<size_t>(k)]);
        }
    } else {
        for (Eigen::Index k = 0; k < m; ++k)
            out.row(k) = pc.points.row(static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n))));
    }
    return PointCloud{std::move(out)};
}

// Manifest schema:
//   {"ambient_dim": d, "pairs": [{"source": path, "target": path, "tag": str?}, ...]}
// Cloud paths are resolved relative to the manifest's directory.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("ambient_dim") || !doc.contains("pairs"))
        throw FormatError("manifest " + manifest_path.string() +
                          ": expected object with \"ambient_dim\" and \"pairs\"");
    Dataset ds;
    ds.ambient_dim = doc["ambient_dim"].get<Eigen::Index>();
    if (ds.ambient_dim < 1) throw FormatError("manifest: ambient_dim must be >= 1");
    const auto& pairs = doc["pairs"];
    if (!pairs.is_array() || pairs.empty())
        throw FormatError("manifest " + manifest_path.string() + ": \"pairs\" must be non-empty");
    const auto base = manifest_path.parent_path();
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (!p.contains("source") || !p.contains("target"))
            throw FormatError("manifest pair " + std::to_string(i) + ": needs source and target");
        MeasurePair mp;
        mp.source = load_pointcloud(base / p["source"].get<std::string>());
        mp.target = load_pointcloud(base / p["target"].get<std::string>());
        if (p.contains("tag")) mp.tag = p["tag"].get<std::string>();
        if (mp.source.dim() != ds.ambient_dim || mp.target.dim() != ds.ambient_dim)
            throw ShapeError("manifest pair " + std::to_string(i) + ": dimension " +
                             std::to_string(mp.source.dim() != ds.ambient_dim ? mp.source.dim()
                                                                              : mp.target.dim()) +
                             " does not match ambient_dim " + std::to_string(ds.ambient_dim));
        ds.pairs.push_back(std::move(mp));
    }
    return ds;
}

}  // namespace m2m
