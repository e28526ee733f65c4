#pragma once
#include <array>
#include <cstdint>
#include <vector>

#include "mspnet/model.hpp"
#include "mspnet/shapedata.hpp"

namespace mspnet {

struct TrainConfig {
    Task task = Task::classification;
    int epochs = 50;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double reg_weight = 1e-3; // lambda on the feature-transform penalty
    std::array<double, 3> split_ratios{0.70, 0.15, 0.15};
    std::uint64_t seed = 1;
    bool augment = false;
    double max_translation = 0.1;

    void validate() const;
};

struct SplitIndices {
    std::vector<int> train, val, test;
};

// Shuffles subjects (not samples) and partitions them by the ratios; every
// sample of one subject lands in exactly one split.
SplitIndices split_by_subject(const Dataset& dataset, const std::array<double, 3>& ratios,
                              std::uint64_t seed);

struct ClassSummary {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    long long support = 0;
};

struct Metrics {
    Task task = Task::classification;
    long long samples = 0;
    // classification
    std::vector<std::vector<long long>> confusion; // [true][predicted]
    std::vector<ClassSummary> per_class;
    double accuracy = 0.0;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
    // regression
    double mae = 0.0;
};

Metrics metrics_from_confusion(const std::vector<std::vector<long long>>& confusion);

// Task loss plus reg_weight times the mean-over-samples sum-over-branches
// orthogonality penalty of the exposed feature transforms.
Tensor batch_total_loss(const BatchOutput& out, const std::vector<double>& targets, Task task,
                        double reg_weight);
// Single-sample form (targets: class index or standardized scalar).
Tensor total_loss(const SampleOutput& out, double target, Task task, double reg_weight);

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<std::vector<double>> m, v;

    void step(std::vector<Tensor>& params);
    void zero_grads(std::vector<Tensor>& params);
};

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_metric = 0.0;
};

struct TrainResult {
    std::vector<EpochRow> log;
    int best_epoch = 0;
};

// Adam over shuffled minibatches of the train split; fresh per-structure
// rigid augmentation each epoch when enabled; keeps the parameters of the
// best-validation epoch (best train loss when the val split is empty).
// Throws NumericError if the loss goes non-finite.
TrainResult train(Model& model, const Dataset& dataset, const SplitIndices& split,
                  const TrainConfig& config);

Metrics evaluate(Model& model, const Dataset& dataset, const std::vector<int>& indices,
                 int batch_size = 32);
double evaluate_loss(Model& model, const Dataset& dataset, const std::vector<int>& indices,
                     double reg_weight, int batch_size = 32);

void write_epoch_csv(const std::vector<EpochRow>& log, const std::string& path);
void write_metrics_json(const Metrics& metrics, const std::string& path);

} // namespace mspnet
