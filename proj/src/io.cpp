#include "mspnet/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace mspnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

std::string raw_path_for(const std::string& json_path) {
    fs::path p(json_path);
    p.replace_extension(".raw");
    return p.string();
}

} // namespace

void write_label_volume(const LabelVolume& vol, const std::string& json_path) {
    vol.validate();
    json j;
    j["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
    j["spacing"] = {vol.spacing[0], vol.spacing[1], vol.spacing[2]};
    j["origin"] = {vol.origin[0], vol.origin[1], vol.origin[2]};
    j["dtype"] = "u16";
    std::ofstream out(json_path);
    if (!out) throw DataError("cannot write " + json_path);
    out << j.dump(2) << "\n";

    std::ofstream raw(raw_path_for(json_path), std::ios::binary);
    if (!raw) throw DataError("cannot write " + raw_path_for(json_path));
    raw.write(reinterpret_cast<const char*>(vol.labels.data()),
              (std::streamsize)(vol.labels.size() * sizeof(std::uint16_t)));
}

LabelVolume read_label_volume(const std::string& json_path) {
    const json j = load_json(json_path);
    LabelVolume vol;
    try {
        for (int i = 0; i < 3; ++i) {
            vol.dims[(std::size_t)i] = j.at("dims").at((std::size_t)i).get<int>();
            vol.spacing[(std::size_t)i] = j.at("spacing").at((std::size_t)i).get<double>();
            vol.origin[(std::size_t)i] = j.at("origin").at((std::size_t)i).get<double>();
        }
        if (j.at("dtype").get<std::string>() != "u16")
            throw DataError("label volume " + json_path + ": unsupported dtype");
    } catch (const json::exception& e) {
        throw DataError("label volume header " + json_path + ": " + e.what());
    }
    const std::size_t count = (std::size_t)vol.dims[0] * vol.dims[1] * vol.dims[2];
    vol.labels.resize(count);
    std::ifstream raw(raw_path_for(json_path), std::ios::binary);
    if (!raw) throw DataError("cannot open " + raw_path_for(json_path));
    raw.read(reinterpret_cast<char*>(vol.labels.data()), (std::streamsize)(count * sizeof(std::uint16_t)));
    if ((std::size_t)raw.gcount() != count * sizeof(std::uint16_t))
        throw DataError("label volume " + json_path + ": raw file shorter than dims imply");
    vol.validate();
    return vol;
}

void write_cloud_ascii(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& p : cloud.points)
        out << format_g9(p[0]) << ' ' << format_g9(p[1]) << ' ' << format_g9(p[2]) << '\n';
}

PointCloud read_cloud_ascii(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    PointCloud cloud;
    double x, y, z;
    while (in >> x >> y >> z) cloud.points.push_back({x, y, z});
    if (!in.eof() && in.fail()) throw DataError("malformed cloud file " + path);
    if (cloud.points.empty()) throw DataError("empty cloud file " + path);
    return cloud;
}

namespace {
constexpr char kCloudMagic[8] = {'M', 'S', 'P', 'C', 'L', 'D', '1', '\0'};
}

void write_cloud_binary(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(kCloudMagic, 8);
    const std::uint64_t count = cloud.points.size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    out.write(reinterpret_cast<const char*>(cloud.points.data()),
              (std::streamsize)(count * 3 * sizeof(double)));
}

PointCloud read_cloud_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kCloudMagic, 8) != 0)
        throw DataError("bad magic in binary cloud " + path);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    PointCloud cloud;
    cloud.points.resize(count);
    in.read(reinterpret_cast<char*>(cloud.points.data()), (std::streamsize)(count * 3 * sizeof(double)));
    if ((std::uint64_t)in.gcount() != count * 3 * sizeof(double))
        throw DataError("binary cloud " + path + " truncated");
    return cloud;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
    json list = json::array();
    for (const auto& e : manifest.entries) {
        json entry;
        entry["subject_id"] = e.subject_id;
        if (e.target)
            entry["target"] = *e.target;
        else
            entry["target"] = nullptr;
        entry["clouds"] = e.cloud_paths;
        list.push_back(std::move(entry));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << list.dump(2) << "\n";
}

Manifest read_manifest(const std::string& path) {
    const json j = load_json(path);
    if (!j.is_array()) throw DataError("manifest " + path + ": expected a JSON list");
    Manifest m;
    for (const auto& entry : j) {
        ManifestEntry e;
        try {
            e.subject_id = entry.at("subject_id").get<std::string>();
            if (!entry.at("target").is_null()) e.target = entry.at("target").get<double>();
            for (const auto& c : entry.at("clouds")) e.cloud_paths.push_back(c.get<std::string>());
        } catch (const json::exception& ex) {
            throw DataError("manifest " + path + ": " + ex.what());
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

Dataset load_dataset(const std::string& manifest_path, bool require_targets) {
    const Manifest manifest = read_manifest(manifest_path);
    if (manifest.entries.empty()) throw DataError("manifest " + manifest_path + ": no entries");
    const fs::path base = fs::path(manifest_path).parent_path();
    Dataset ds;
    for (const auto& e : manifest.entries) {
        MultiStructureSample s;
        s.subject_id = e.subject_id;
        if (e.target) {
            s.target = *e.target;
        } else if (require_targets) {
            throw DataError("manifest entry '" + e.subject_id + "' has no target");
        }
        int structure = 0;
        for (const auto& rel : e.cloud_paths) {
            fs::path p(rel);
            if (p.is_relative()) p = base / p;
            PointCloud c = read_cloud_ascii(p.string());
            c.structure_id = structure++;
            s.clouds.push_back(std::move(c));
        }
        ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
}

} // namespace mspnet
