#pragma once
#include <optional>
#include <string>
#include <vector>

#include "mspnet/shapedata.hpp"

namespace mspnet {

// All floating-point text output uses 9 significant digits.
std::string format_g9(double v);

// Label volume pair: <name>.json header {dims, spacing, origin, dtype:"u16"}
// and <name>.raw with little-endian u16 labels, x-fastest.
void write_label_volume(const LabelVolume& vol, const std::string& json_path);
LabelVolume read_label_volume(const std::string& json_path);

// ASCII cloud: one "x y z" triple per line, 9 significant digits.
void write_cloud_ascii(const PointCloud& cloud, const std::string& path);
PointCloud read_cloud_ascii(const std::string& path);

// Binary cloud: 8-byte magic "MSPCLD1\0", u64 little-endian count, then
// count * 3 little-endian doubles.
void write_cloud_binary(const PointCloud& cloud, const std::string& path);
PointCloud read_cloud_binary(const std::string& path);

struct ManifestEntry {
    std::string subject_id;
    std::optional<double> target;
    std::vector<std::string> cloud_paths; // fixed structure order
};

struct Manifest {
    std::vector<ManifestEntry> entries;
};

void write_manifest(const Manifest& manifest, const std::string& path);
Manifest read_manifest(const std::string& path);

// Loads every cloud referenced by a manifest; relative paths resolve against
// the manifest's directory. Entries without targets are rejected when
// require_targets is set.
Dataset load_dataset(const std::string& manifest_path, bool require_targets = true);

} // namespace mspnet
