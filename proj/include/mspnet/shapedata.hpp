#pragma once
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mspnet/errors.hpp"
#include "mspnet/rng.hpp"

namespace mspnet {

using Vec3 = std::array<double, 3>;

// 3-D integer label grid, x-fastest row-major, world = origin + index * spacing.
struct LabelVolume {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    std::vector<std::uint16_t> labels;

    std::size_t linear(int x, int y, int z) const {
        return (std::size_t)x + (std::size_t)dims[0] * ((std::size_t)y + (std::size_t)dims[1] * (std::size_t)z);
    }
    std::uint16_t at(int x, int y, int z) const { return labels[linear(x, y, z)]; }
    void validate() const;
};

struct PointCloud {
    std::vector<Vec3> points;
    int structure_id = 0;

    int size() const { return (int)points.size(); }
};

// One subject: m clouds in a fixed structure order plus a target (class index
// for classification, age in years for regression).
struct MultiStructureSample {
    std::string subject_id;
    std::vector<PointCloud> clouds;
    double target = 0.0;

    int label() const { return (int)(target + (target >= 0 ? 0.5 : -0.5)); }
};

struct Dataset {
    std::vector<MultiStructureSample> samples;

    int structures() const { return samples.empty() ? 0 : (int)samples[0].clouds.size(); }
    int points() const {
        return samples.empty() || samples[0].clouds.empty() ? 0 : samples[0].clouds[0].size();
    }
    // Enforces uniform m and per-structure n across samples, finite coords.
    void validate() const;
};

struct RigidTransform {
    std::array<std::array<double, 3>, 3> rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    Vec3 translation{0.0, 0.0, 0.0};
};

RigidTransform inverse(const RigidTransform& t);
RigidTransform compose(const RigidTransform& a, const RigidTransform& b); // a after b
Vec3 apply(const RigidTransform& t, const Vec3& p);

// Centers of every voxel carrying `label` that touch a differently-labeled
// 6-neighbor or the volume border, in ascending linear (x-fastest) order.
PointCloud extract_boundary(const LabelVolume& vol, int label);

// Uniform subset without replacement when the cloud is large enough,
// otherwise n independent draws with replacement.
PointCloud sample_uniform(const PointCloud& cloud, int n, RngState& rng);

struct Normalization {
    Vec3 centroid{0.0, 0.0, 0.0};
    double scale = 1.0;
};

// Subtracts the joint centroid of all clouds and divides by the joint maximum
// radius; inter-structure geometry is preserved.
MultiStructureSample normalize_subject(const MultiStructureSample& sample, Normalization* out = nullptr);

// Rotation uniform over SO(3) (Shoemake quaternion method), translation
// componentwise uniform in [-max_translation, max_translation].
RigidTransform random_rigid(RngState& rng, double max_translation);

PointCloud apply_rigid(const PointCloud& cloud, const RigidTransform& t);

enum class SynthTask { classification, regression };

// Synthetic multi-structure corpus: per-subject ellipsoids with random axes
// and placement. Classification carves a radial dent of relative depth
// dent_depth into structure 0 of class-1 subjects at a fixed direction;
// regression rescales structure 0 by a factor in [scale_min, scale_max]
// mapped linearly onto [age_min, age_max].
struct SynthSpec {
    int subjects = 100;
    int structures = 2;
    int points = 256;
    SynthTask task = SynthTask::classification;
    double dent_depth = 0.3;
    double jitter = 0.01;
    double axis_min = 0.7;
    double axis_max = 1.3;
    // Regression subjects draw axes from this narrower band: per-axis noise
    // multiplies the scale target, and at the classification band the target
    // would be unrecoverable from shape.
    double regression_axis_min = 0.95;
    double regression_axis_max = 1.05;
    double placement_jitter = 0.1;
    double structure_spacing = 3.0;
    Vec3 dent_direction{0.70710678118654752, 0.70710678118654752, 0.0};
    double dent_cos_threshold = 0.76484218728448843; // cos(0.7 rad)
    double scale_min = 0.6;
    double scale_max = 1.4;
    double age_min = 60.0;
    double age_max = 90.0;

    void validate() const;
};

struct SynthResult {
    Dataset dataset;
    // Per subject: which points of structure 0 were generated inside the dent
    // cone (all false for class-0 and regression subjects).
    std::vector<std::vector<char>> dent_mask;
    // Regression only: the raw scale factor per subject.
    std::vector<double> raw_scale;
};

SynthResult synth_dataset(const SynthSpec& spec, RngState& rng);

} // namespace mspnet
