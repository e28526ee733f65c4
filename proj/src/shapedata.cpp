#include "mspnet/shapedata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mspnet/kernels.hpp"

namespace mspnet {

void LabelVolume::validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw DataError("label volume: non-positive dims");
    for (double s : spacing)
        if (!(s > 0.0)) throw DataError("label volume: spacing must be strictly positive");
    const std::size_t expect = (std::size_t)dims[0] * dims[1] * dims[2];
    if (labels.size() != expect)
        throw DataError("label volume: " + std::to_string(labels.size()) + " labels for dims product " +
                        std::to_string(expect));
}

void Dataset::validate() const {
    if (samples.empty()) throw DataError("dataset: empty");
    const int m = (int)samples[0].clouds.size();
    if (m < 1) throw DataError("dataset: sample '" + samples[0].subject_id + "' has no clouds");
    const int n = samples[0].clouds[0].size();
    for (const auto& s : samples) {
        if ((int)s.clouds.size() != m)
            throw DataError("dataset: sample '" + s.subject_id + "' has " +
                            std::to_string(s.clouds.size()) + " structures, expected " + std::to_string(m));
        for (const auto& c : s.clouds) {
            if (c.size() != n)
                throw DataError("dataset: sample '" + s.subject_id + "' structure " +
                                std::to_string(c.structure_id) + " has " + std::to_string(c.size()) +
                                " points, expected " + std::to_string(n));
            for (const auto& p : c.points)
                for (double v : p)
                    if (!std::isfinite(v))
                        throw DataError("dataset: non-finite coordinate in sample '" + s.subject_id + "'");
        }
    }
}

// --- rigid transforms --------------------------------------------------------

Vec3 apply(const RigidTransform& t, const Vec3& p) {
    Vec3 q;
    for (int i = 0; i < 3; ++i)
        q[(std::size_t)i] = t.rotation[(std::size_t)i][0] * p[0] + t.rotation[(std::size_t)i][1] * p[1] +
                            t.rotation[(std::size_t)i][2] * p[2] + t.translation[(std::size_t)i];
    return q;
}

RigidTransform inverse(const RigidTransform& t) {
    RigidTransform inv;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) inv.rotation[(std::size_t)i][(std::size_t)j] = t.rotation[(std::size_t)j][(std::size_t)i];
    for (int i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 3; ++j) acc += inv.rotation[(std::size_t)i][(std::size_t)j] * t.translation[(std::size_t)j];
        inv.translation[(std::size_t)i] = -acc;
    }
    return inv;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k)
                acc += a.rotation[(std::size_t)i][(std::size_t)k] * b.rotation[(std::size_t)k][(std::size_t)j];
            c.rotation[(std::size_t)i][(std::size_t)j] = acc;
        }
    c.translation = apply(a, b.translation);
    return c;
}

// --- boundary extraction -------------------------------------------------------

PointCloud extract_boundary(const LabelVolume& vol, int label) {
    vol.validate();
    const int dx = vol.dims[0], dy = vol.dims[1], dz = vol.dims[2];
    PointCloud cloud;
    cloud.structure_id = label;
    bool seen = false;

    // Per-slab scan; output assembled in ascending z keeps linear order.
    std::vector<std::vector<Vec3>> slabs((std::size_t)dz);
    std::vector<char> slab_seen((std::size_t)dz, 0);
#pragma omp parallel for schedule(static) if ((long long)dx * dy * dz > (1 << 15) && mspnet::max_threads() > 1)
    for (int z = 0; z < dz; ++z) {
        auto& out = slabs[(std::size_t)z];
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                if (vol.at(x, y, z) != label) continue;
                slab_seen[(std::size_t)z] = 1;
                const bool border = x == 0 || x == dx - 1 || y == 0 || y == dy - 1 || z == 0 || z == dz - 1;
                bool boundary = border;
                if (!boundary)
                    boundary = vol.at(x - 1, y, z) != label || vol.at(x + 1, y, z) != label ||
                               vol.at(x, y - 1, z) != label || vol.at(x, y + 1, z) != label ||
                               vol.at(x, y, z - 1) != label || vol.at(x, y, z + 1) != label;
                if (boundary)
                    out.push_back({vol.origin[0] + x * vol.spacing[0], vol.origin[1] + y * vol.spacing[1],
                                   vol.origin[2] + z * vol.spacing[2]});
            }
    }
    for (int z = 0; z < dz; ++z) {
        seen = seen || slab_seen[(std::size_t)z];
        cloud.points.insert(cloud.points.end(), slabs[(std::size_t)z].begin(), slabs[(std::size_t)z].end());
    }
    if (!seen)
        throw DataError("extract_boundary: label " + std::to_string(label) + " does not occur in the volume");
    return cloud;
}

PointCloud sample_uniform(const PointCloud& cloud, int n, RngState& rng) {
    if (cloud.points.empty()) throw DataError("sample_uniform: empty input cloud");
    if (n < 1) throw ValueError("sample_uniform: n must be >= 1");
    PointCloud out;
    out.structure_id = cloud.structure_id;
    out.points.reserve((std::size_t)n);
    const int total = cloud.size();
    if (total >= n) {
        // Partial Fisher-Yates over an index table.
        std::vector<int> idx((std::size_t)total);
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < n; ++i) {
            const int j = i + (int)rng.below((std::uint64_t)(total - i));
            std::swap(idx[(std::size_t)i], idx[(std::size_t)j]);
            out.points.push_back(cloud.points[(std::size_t)idx[(std::size_t)i]]);
        }
    } else {
        for (int i = 0; i < n; ++i)
            out.points.push_back(cloud.points[(std::size_t)rng.below((std::uint64_t)total)]);
    }
    return out;
}

MultiStructureSample normalize_subject(const MultiStructureSample& sample, Normalization* out) {
    long long total = 0;
    Vec3 centroid{0, 0, 0};
    for (const auto& c : sample.clouds)
        for (const auto& p : c.points) {
            for (int i = 0; i < 3; ++i) centroid[(std::size_t)i] += p[(std::size_t)i];
            ++total;
        }
    if (total == 0) throw DataError("normalize_subject: sample '" + sample.subject_id + "' has no points");
    for (int i = 0; i < 3; ++i) centroid[(std::size_t)i] /= (double)total;

    double radius = 0.0;
    for (const auto& c : sample.clouds)
        for (const auto& p : c.points) {
            const double dx = p[0] - centroid[0], dy = p[1] - centroid[1], dz = p[2] - centroid[2];
            radius = std::max(radius, std::sqrt(dx * dx + dy * dy + dz * dz));
        }
    if (radius <= 0.0)
        throw DataError("normalize_subject: degenerate sample '" + sample.subject_id +
                        "' (all points identical)");

    MultiStructureSample norm = sample;
    for (auto& c : norm.clouds)
        for (auto& p : c.points)
            for (int i = 0; i < 3; ++i) p[(std::size_t)i] = (p[(std::size_t)i] - centroid[(std::size_t)i]) / radius;
    if (out) {
        out->centroid = centroid;
        out->scale = radius;
    }
    return norm;
}

RigidTransform random_rigid(RngState& rng, double max_translation) {
    if (max_translation < 0.0) throw ValueError("random_rigid: max_translation must be >= 0");
    // Shoemake's uniform unit quaternion from three uniforms.
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double two_pi = 6.283185307179586476925286766559;
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    const double qx = a * std::sin(two_pi * u2);
    const double qy = a * std::cos(two_pi * u2);
    const double qz = b * std::sin(two_pi * u3);
    const double qw = b * std::cos(two_pi * u3);

    RigidTransform t;
    t.rotation = {{{1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)},
                   {2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)},
                   {2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)}}};
    for (int i = 0; i < 3; ++i)
        t.translation[(std::size_t)i] = max_translation == 0.0 ? 0.0 : rng.uniform(-max_translation, max_translation);
    return t;
}

PointCloud apply_rigid(const PointCloud& cloud, const RigidTransform& t) {
    PointCloud out;
    out.structure_id = cloud.structure_id;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back(apply(t, p));
    return out;
}

// --- synthetic corpus ------------------------------------------------------------

void SynthSpec::validate() const {
    if (subjects < 1) throw ValueError("synth: subjects must be >= 1");
    if (structures < 1) throw ValueError("synth: structures must be >= 1");
    if (points < 1) throw ValueError("synth: points must be >= 1");
    if (!(axis_min > 0.0 && axis_max >= axis_min)) throw ValueError("synth: bad axis range");
    if (!(regression_axis_min > 0.0 && regression_axis_max >= regression_axis_min))
        throw ValueError("synth: bad regression axis range");
    if (!(dent_depth >= 0.0 && dent_depth < 1.0)) throw ValueError("synth: dent_depth must be in [0, 1)");
    if (jitter < 0.0) throw ValueError("synth: jitter must be >= 0");
    if (!(scale_max >= scale_min && scale_min > 0.0)) throw ValueError("synth: bad scale range");
}

namespace {

// Unit direction by rejection from the cube; uses only sqrt.
Vec3 random_direction(RngState& rng) {
    for (;;) {
        const double x = rng.uniform(-1.0, 1.0);
        const double y = rng.uniform(-1.0, 1.0);
        const double z = rng.uniform(-1.0, 1.0);
        const double s = x * x + y * y + z * z;
        if (s > 1e-8 && s <= 1.0) {
            const double inv = 1.0 / std::sqrt(s);
            return {x * inv, y * inv, z * inv};
        }
    }
}

} // namespace

SynthResult synth_dataset(const SynthSpec& spec, RngState& rng) {
    spec.validate();
    SynthResult result;
    result.dataset.samples.reserve((std::size_t)spec.subjects);
    result.dent_mask.resize((std::size_t)spec.subjects);
    result.raw_scale.assign((std::size_t)spec.subjects, 1.0);

    Vec3 u = spec.dent_direction;
    {
        const double nu = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        if (!(nu > 0.0)) throw ValueError("synth: dent_direction must be non-zero");
        for (int i = 0; i < 3; ++i) u[(std::size_t)i] /= nu;
    }

    for (int s = 0; s < spec.subjects; ++s) {
        MultiStructureSample sample;
        sample.subject_id = "synth-" + std::to_string(s);
        const bool dented = spec.task == SynthTask::classification && (s % 2 == 1);
        double scale0 = 1.0;
        if (spec.task == SynthTask::classification) {
            sample.target = dented ? 1.0 : 0.0;
        } else {
            scale0 = rng.uniform(spec.scale_min, spec.scale_max);
            result.raw_scale[(std::size_t)s] = scale0;
            sample.target = spec.age_min + (scale0 - spec.scale_min) / (spec.scale_max - spec.scale_min) *
                                               (spec.age_max - spec.age_min);
        }
        result.dent_mask[(std::size_t)s].assign((std::size_t)spec.points, 0);

        for (int m = 0; m < spec.structures; ++m) {
            PointCloud cloud;
            cloud.structure_id = m;
            cloud.points.reserve((std::size_t)spec.points);
            Vec3 center{spec.structure_spacing * m, 0.0, 0.0};
            for (int i = 0; i < 3; ++i)
                center[(std::size_t)i] += rng.uniform(-spec.placement_jitter, spec.placement_jitter);
            const double amin = spec.task == SynthTask::regression ? spec.regression_axis_min : spec.axis_min;
            const double amax = spec.task == SynthTask::regression ? spec.regression_axis_max : spec.axis_max;
            Vec3 axes;
            for (int i = 0; i < 3; ++i) axes[(std::size_t)i] = rng.uniform(amin, amax);
            if (m == 0 && spec.task == SynthTask::regression)
                for (int i = 0; i < 3; ++i) axes[(std::size_t)i] *= scale0;

            for (int p = 0; p < spec.points; ++p) {
                const Vec3 dir = random_direction(rng);
                const double q = (dir[0] / axes[0]) * (dir[0] / axes[0]) +
                                 (dir[1] / axes[1]) * (dir[1] / axes[1]) +
                                 (dir[2] / axes[2]) * (dir[2] / axes[2]);
                double radius = 1.0 / std::sqrt(q);
                if (dented && m == 0) {
                    const double cosang = dir[0] * u[0] + dir[1] * u[1] + dir[2] * u[2];
                    if (cosang > spec.dent_cos_threshold) {
                        const double f = (cosang - spec.dent_cos_threshold) / (1.0 - spec.dent_cos_threshold);
                        radius *= 1.0 - spec.dent_depth * f * f;
                        result.dent_mask[(std::size_t)s][(std::size_t)p] = 1;
                    }
                }
                Vec3 pt;
                for (int i = 0; i < 3; ++i)
                    pt[(std::size_t)i] = center[(std::size_t)i] + radius * dir[(std::size_t)i] +
                                         (spec.jitter > 0.0 ? spec.jitter * rng.normal() : 0.0);
                cloud.points.push_back(pt);
            }
            sample.clouds.push_back(std::move(cloud));
        }
        result.dataset.samples.push_back(std::move(sample));
    }
    return result;
}

} // namespace mspnet
