#pragma once
#include <span>
#include <string>
#include <vector>

#include "mspnet/model.hpp"
#include "mspnet/shapedata.hpp"

namespace mspnet {

// Per-point importance for one structure. Positive means occluding the point
// (and its neighborhood) increases the reference-class logit.
struct ImportanceMap {
    int structure = 0;
    std::vector<double> values;
    int reference_class = 0;
    int k_neighbors = 0;
};

// Indices of the K nearest points to point i (Euclidean), excluding i itself;
// ties break toward the lower index. Result ordered by (distance, index).
std::vector<int> knn(const PointCloud& cloud, int i, int k);

// Copy with the listed points moved to the origin.
PointCloud occlude(const PointCloud& cloud, std::span<const int> indices);

// Reference-class logit of the sample with `occluded` rows of `structure`
// zeroed, minus the full-sample logit. Exposed for probing; importance_map
// is the per-point sweep of this difference.
double occlusion_response(Model& model, const MultiStructureSample& sample, int structure,
                          std::span<const int> occluded, int reference_class);

// Importance of every point of the chosen structure: occlude {i} + knn(i, K)
// and compare the reference-class logit against the full evaluation. The
// reference class is the model's own prediction unless force_class >= 0.
// The sample is expected in the coordinates the model was trained on
// (i.e. already normalized).
ImportanceMap importance_map(Model& model, const MultiStructureSample& sample, int structure, int k,
                             int force_class = -1);

// CSV: header "x,y,z,importance", one row per point, 9 significant digits.
void export_importance_csv(const ImportanceMap& map, const PointCloud& cloud, const std::string& path);

// ASCII PLY with a red-white-blue diverging vertex color, symmetric around
// zero and scaled by max |importance| (red = positive).
void export_importance_ply(const ImportanceMap& map, const PointCloud& cloud, const std::string& path);

} // namespace mspnet
