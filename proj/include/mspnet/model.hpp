#pragma once
#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mspnet/shapedata.hpp"
#include "mspnet/tensor.hpp"

namespace mspnet {

enum class Task { classification, regression };
enum class ModelType { mspnet, pointnet };

struct TNetConfig {
    std::vector<int> mlp{64, 128, 256};
    std::vector<int> fc{128, 64};
};

struct ModelConfig {
    ModelType type = ModelType::mspnet;
    Task task = Task::classification;
    int branches = 1; // m structures
    int points = 512; // n per structure
    int classes = 2;
    bool use_tnets = true;
    TNetConfig point_tnet;
    TNetConfig feature_tnet;
    std::vector<int> feature_mlp{64, 64};
    std::vector<int> post_mlp{64, 128};
    std::vector<int> head{512, 256};
    double point_dropout_keep = 0.3;
    double head_dropout_keep = 0.7;

    int k() const { return feature_mlp.back(); }
    int k2() const { return post_mlp.back(); }
    int out_width() const { return task == Task::classification ? classes : 1; }
    void validate() const;
};

// Visits trainable tensors and persistent buffers (running stats) in the
// fixed serialization order: branch index, then stage, then layer, weights
// before bias, then gamma, beta, running mean, running variance.
struct ParamVisitor {
    virtual ~ParamVisitor() = default;
    virtual void tensor(const std::string& name, Tensor& t) = 0;
    virtual void buffer(const std::string& name, std::vector<double>& v) = 0;
};

// Dense layer followed by batch norm and ReLU; weights shared across rows,
// which makes it a shared MLP stage when rows are points.
struct DenseBnLayer {
    Tensor w, b;
    BatchNorm bn;

    DenseBnLayer() = default;
    DenseBnLayer(int in, int out, RngState& rng);
    Tensor forward(const Tensor& x, Mode mode);
    void visit(const std::string& prefix, ParamVisitor& v);
};

// Alignment network: shared MLP over rows, per-sample max pool, FC stack,
// then an affine layer initialized to emit the identity matrix exactly.
struct TNet {
    int d = 0;
    std::vector<DenseBnLayer> mlp;
    std::vector<DenseBnLayer> fc;
    Tensor final_w, final_b;

    TNet() = default;
    TNet(int d, const TNetConfig& cfg, RngState& rng);
    // rows: [num_samples * rows_per_sample x d]; returns one d x d matrix per sample.
    std::vector<Tensor> forward(const Tensor& rows, int rows_per_sample, int num_samples, Mode mode);
    void visit(const std::string& prefix, ParamVisitor& v);
};

struct BranchOut {
    Tensor features;             // [rows x k2]
    std::vector<Tensor> t_feat;  // per sample [k x k]
};

struct Branch {
    bool use_tnets = true;
    TNet point_tnet;
    std::vector<DenseBnLayer> feature_mlp;
    TNet feature_tnet;
    std::vector<DenseBnLayer> post_mlp;
    int k = 0;

    Branch() = default;
    Branch(const ModelConfig& cfg, RngState& rng);
    BranchOut forward(const Tensor& stacked, int rows_per_sample, int num_samples, Mode mode,
                      RngState* dropout_rng, double dropout_keep);
    void visit(const std::string& prefix, ParamVisitor& v);
};

struct BatchOutput {
    Tensor prediction;                                   // [batch x out]
    std::vector<std::vector<Tensor>> feature_transforms; // [batch][branches]
    std::vector<std::vector<Tensor>> point_features;     // [batch][branches]
};

struct SampleOutput {
    Tensor prediction; // [out]
    std::vector<Tensor> feature_transforms;
    std::vector<Tensor> point_features;
};

class Model {
public:
    Model(ModelConfig cfg, RngState& rng);

    // clouds[sample][structure], each a [n x 3] tensor. Train mode draws
    // dropout masks from *dropout_rng and needs a batch of at least 2.
    BatchOutput forward_batch(const std::vector<std::vector<Tensor>>& clouds, Mode mode,
                              RngState* dropout_rng = nullptr);
    SampleOutput forward(const std::vector<Tensor>& sample_clouds, Mode mode,
                         RngState* dropout_rng = nullptr);
    // Single-cloud run of one branch: (per-point features [n x k2], feature transform).
    std::pair<Tensor, Tensor> branch_forward(int branch, const Tensor& cloud, Mode mode,
                                             RngState* dropout_rng = nullptr);

    void visit(ParamVisitor& v);
    std::vector<Tensor> parameters(); // trainable, in visit order

    const ModelConfig& config() const { return cfg_; }
    std::vector<Branch>& branches() { return branches_; }
    std::vector<DenseBnLayer>& head_hidden() { return head_hidden_; }
    Tensor& head_out_w() { return head_out_w_; }
    Tensor& head_out_b() { return head_out_b_; }

    // Regression target standardization (identity for classification).
    double target_mean = 0.0;
    double target_std = 1.0;

private:
    Tensor head_forward(const Tensor& h, Mode mode, RngState* dropout_rng);

    ModelConfig cfg_;
    std::vector<Branch> branches_;
    std::vector<DenseBnLayer> head_hidden_;
    Tensor head_out_w_, head_out_b_;
};

struct CheckpointInfo {
    std::uint64_t seed = 0;
    std::array<double, 3> split_ratios{0.70, 0.15, 0.15};
};

// JSON manifest + little-endian float64 blob next to it.
void save_checkpoint(Model& model, const std::string& json_path, const CheckpointInfo& info);
Model load_checkpoint(const std::string& json_path, CheckpointInfo* info = nullptr);

Tensor cloud_to_tensor(const PointCloud& cloud);

} // namespace mspnet
