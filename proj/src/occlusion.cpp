#include "mspnet/occlusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mspnet/io.hpp"
#include "mspnet/kernels.hpp"

namespace mspnet {

std::vector<int> knn(const PointCloud& cloud, int i, int k) {
    const int n = cloud.size();
    if (i < 0 || i >= n) throw ValueError("knn: point index out of range");
    if (k < 0 || k >= n)
        throw ValueError("knn: K = " + std::to_string(k) + " with a cloud of " + std::to_string(n) +
                         " points");
    if (k == 0) return {};
    std::vector<std::pair<double, int>> dist;
    dist.reserve((std::size_t)n - 1);
    const Vec3& p = cloud.points[(std::size_t)i];
    for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const Vec3& q = cloud.points[(std::size_t)j];
        const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        dist.emplace_back(dx * dx + dy * dy + dz * dz, j);
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<int> out((std::size_t)k);
    for (int j = 0; j < k; ++j) out[(std::size_t)j] = dist[(std::size_t)j].second;
    return out;
}

PointCloud occlude(const PointCloud& cloud, std::span<const int> indices) {
    PointCloud out = cloud;
    for (int idx : indices) {
        if (idx < 0 || idx >= cloud.size())
            throw ValueError("occlude: index " + std::to_string(idx) + " outside cloud of " +
                             std::to_string(cloud.size()) + " points");
        out.points[(std::size_t)idx] = {0.0, 0.0, 0.0};
    }
    return out;
}

namespace {

double class_logit(Model& model, const std::vector<Tensor>& clouds, int cls) {
    NoGradGuard guard;
    SampleOutput out = model.forward(clouds, Mode::infer, nullptr);
    return out.prediction.values()[(std::size_t)cls];
}

std::vector<Tensor> sample_tensors(const MultiStructureSample& sample) {
    std::vector<Tensor> clouds;
    clouds.reserve(sample.clouds.size());
    for (const auto& c : sample.clouds) clouds.push_back(cloud_to_tensor(c));
    return clouds;
}

} // namespace

double occlusion_response(Model& model, const MultiStructureSample& sample, int structure,
                          std::span<const int> occluded, int reference_class) {
    if (structure < 0 || structure >= (int)sample.clouds.size())
        throw ValueError("occlusion: structure index out of range");
    std::vector<Tensor> full = sample_tensors(sample);
    const double base = class_logit(model, full, reference_class);
    std::vector<Tensor> masked = full;
    masked[(std::size_t)structure] =
        cloud_to_tensor(occlude(sample.clouds[(std::size_t)structure], occluded));
    return class_logit(model, masked, reference_class) - base;
}

ImportanceMap importance_map(Model& model, const MultiStructureSample& sample, int structure, int k,
                             int force_class) {
    if (model.config().task != Task::classification)
        throw ValueError("importance_map: only classification models are supported");
    if (structure < 0 || structure >= (int)sample.clouds.size())
        throw ValueError("importance_map: structure index out of range");
    const PointCloud& cloud = sample.clouds[(std::size_t)structure];
    const int n = cloud.size();
    if (k < 0 || k >= n) throw ValueError("importance_map: K must satisfy 0 <= K < n");

    std::vector<Tensor> full = sample_tensors(sample);
    int reference = force_class;
    double base = 0.0;
    {
        NoGradGuard guard;
        SampleOutput out = model.forward(full, Mode::infer, nullptr);
        if (reference < 0) {
            reference = 0;
            for (int c = 1; c < model.config().classes; ++c)
                if (out.prediction.values()[(std::size_t)c] > out.prediction.values()[(std::size_t)reference])
                    reference = c;
        } else if (reference >= model.config().classes) {
            throw ValueError("importance_map: forced class out of range");
        }
        base = out.prediction.values()[(std::size_t)reference];
    }

    ImportanceMap map;
    map.structure = structure;
    map.reference_class = reference;
    map.k_neighbors = k;
    map.values.assign((std::size_t)n, 0.0);

    // Each point's occluded evaluation is independent; model parameters are
    // read-only in infer mode.
#pragma omp parallel for schedule(static) if (mspnet::max_threads() > 1)
    for (int i = 0; i < n; ++i) {
        NoGradGuard guard;
        std::vector<int> region = knn(cloud, i, k);
        region.push_back(i);
        std::vector<Tensor> masked = full;
        masked[(std::size_t)structure] = cloud_to_tensor(occlude(cloud, region));
        SampleOutput out = model.forward(masked, Mode::infer, nullptr);
        map.values[(std::size_t)i] = out.prediction.values()[(std::size_t)reference] - base;
    }
    return map;
}

void export_importance_csv(const ImportanceMap& map, const PointCloud& cloud, const std::string& path) {
    if ((int)map.values.size() != cloud.size())
        throw ShapeError("export: importance length does not match the cloud");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "x,y,z,importance\n";
    for (int i = 0; i < cloud.size(); ++i) {
        const Vec3& p = cloud.points[(std::size_t)i];
        out << format_g9(p[0]) << ',' << format_g9(p[1]) << ',' << format_g9(p[2]) << ','
            << format_g9(map.values[(std::size_t)i]) << '\n';
    }
}

void export_importance_ply(const ImportanceMap& map, const PointCloud& cloud, const std::string& path) {
    if ((int)map.values.size() != cloud.size())
        throw ShapeError("export: importance length does not match the cloud");
    double max_abs = 0.0;
    for (double v : map.values) max_abs = std::max(max_abs, std::abs(v));

    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "ply\n"
        << "format ascii 1.0\n"
        << "element vertex " << cloud.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        << "end_header\n";
    for (int i = 0; i < cloud.size(); ++i) {
        const Vec3& p = cloud.points[(std::size_t)i];
        const double v = max_abs > 0.0 ? map.values[(std::size_t)i] / max_abs : 0.0;
        int r = 255, g = 255, b = 255;
        if (v >= 0.0) { // white -> red
            g = b = (int)std::lround(255.0 * (1.0 - v));
        } else { // white -> blue
            r = g = (int)std::lround(255.0 * (1.0 + v));
        }
        out << format_g9((double)(float)p[0]) << ' ' << format_g9((double)(float)p[1]) << ' '
            << format_g9((double)(float)p[2]) << ' ' << r << ' ' << g << ' ' << b << '\n';
    }
}

} // namespace mspnet
