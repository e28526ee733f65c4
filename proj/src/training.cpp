#include "mspnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include <json.hpp>

#include "mspnet/io.hpp"
#include "mspnet/kernels.hpp"

namespace mspnet {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 0) throw ValueError("train config: epochs must be >= 0");
    if (batch_size < 2) throw ValueError("train config: batch_size must be >= 2 (batch norm)");
    if (!(learning_rate >= 0.0)) throw ValueError("train config: learning_rate must be >= 0");
    if (reg_weight < 0.0) throw ValueError("train config: reg_weight must be >= 0");
    const double s = split_ratios[0] + split_ratios[1] + split_ratios[2];
    if (std::abs(s - 1.0) > 1e-9)
        throw ValueError("train config: split ratios sum to " + format_g9(s) + ", expected 1");
    for (double r : split_ratios)
        if (r < 0.0) throw ValueError("train config: split ratios must be >= 0");
    if (max_translation < 0.0) throw ValueError("train config: max_translation must be >= 0");
}

SplitIndices split_by_subject(const Dataset& dataset, const std::array<double, 3>& ratios,
                              std::uint64_t seed) {
    if (dataset.samples.empty()) throw DataError("split_by_subject: empty dataset");
    const double s = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(s - 1.0) > 1e-9) throw ValueError("split_by_subject: ratios must sum to 1");

    // Unique subjects in first-appearance order, then a seeded shuffle.
    std::vector<std::string> subjects;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& sample : dataset.samples)
        if (index.emplace(sample.subject_id, subjects.size()).second)
            subjects.push_back(sample.subject_id);

    std::vector<int> order((int)subjects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
    RngState rng = RngState(seed).derive(rng_stream::kSplit);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[(std::size_t)rng.below(i)]);

    const long long total = (long long)subjects.size();
    const long long n_train = std::llround(total * ratios[0]);
    const long long n_val = std::llround(total * (ratios[0] + ratios[1])) - n_train;

    std::vector<int> bucket(subjects.size()); // 0 train, 1 val, 2 test
    for (long long i = 0; i < total; ++i)
        bucket[(std::size_t)order[(std::size_t)i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

    SplitIndices out;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        switch (bucket[index.at(dataset.samples[i].subject_id)]) {
        case 0: out.train.push_back((int)i); break;
        case 1: out.val.push_back((int)i); break;
        default: out.test.push_back((int)i); break;
        }
    }
    return out;
}

Metrics metrics_from_confusion(const std::vector<std::vector<long long>>& confusion) {
    Metrics m;
    m.task = Task::classification;
    m.confusion = confusion;
    const int c = (int)confusion.size();
    m.per_class.resize((std::size_t)c);
    long long total = 0, correct = 0;
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) {
            total += confusion[(std::size_t)i][(std::size_t)j];
            if (i == j) correct += confusion[(std::size_t)i][(std::size_t)j];
        }
    m.samples = total;
    m.accuracy = total > 0 ? (double)correct / total : 0.0;
    for (int i = 0; i < c; ++i) {
        long long tp = confusion[(std::size_t)i][(std::size_t)i];
        long long row = 0, col = 0;
        for (int j = 0; j < c; ++j) {
            row += confusion[(std::size_t)i][(std::size_t)j];
            col += confusion[(std::size_t)j][(std::size_t)i];
        }
        ClassSummary& cs = m.per_class[(std::size_t)i];
        cs.support = row;
        cs.precision = col > 0 ? (double)tp / col : 0.0;
        cs.recall = row > 0 ? (double)tp / row : 0.0;
        cs.f1 = cs.precision + cs.recall > 0.0
                    ? 2.0 * cs.precision * cs.recall / (cs.precision + cs.recall)
                    : 0.0;
        m.macro_precision += cs.precision / c;
        m.macro_recall += cs.recall / c;
        m.macro_f1 += cs.f1 / c;
        if (total > 0) {
            m.weighted_precision += cs.precision * row / total;
            m.weighted_recall += cs.recall * row / total;
            m.weighted_f1 += cs.f1 * row / total;
        }
    }
    return m;
}

namespace {

Tensor reg_term(const std::vector<std::vector<Tensor>>& transforms) {
    std::vector<Tensor> penalties;
    for (const auto& per_sample : transforms)
        for (const Tensor& t : per_sample) penalties.push_back(ortho_regularizer(t));
    if (penalties.empty()) return Tensor::scalar(0.0);
    Tensor acc = penalties[0];
    for (std::size_t i = 1; i < penalties.size(); ++i) acc = add(acc, penalties[(std::size_t)i]);
    return scale(acc, 1.0 / (double)transforms.size());
}

} // namespace

Tensor batch_total_loss(const BatchOutput& out, const std::vector<double>& targets, Task task,
                        double reg_weight) {
    const int batch = out.prediction.dim(0);
    if ((int)targets.size() != batch)
        throw ShapeError("total_loss: " + std::to_string(targets.size()) + " targets for batch " +
                         std::to_string(batch));
    Tensor task_loss;
    if (task == Task::classification) {
        std::vector<int> labels((std::size_t)batch);
        for (int i = 0; i < batch; ++i) labels[(std::size_t)i] = (int)std::llround(targets[(std::size_t)i]);
        task_loss = softmax_cross_entropy(out.prediction, labels);
    } else {
        task_loss = mse(out.prediction, targets);
    }
    if (reg_weight == 0.0) return task_loss;
    return add(task_loss, scale(reg_term(out.feature_transforms), reg_weight));
}

Tensor total_loss(const SampleOutput& out, double target, Task task, double reg_weight) {
    BatchOutput b;
    b.prediction = reshape(out.prediction, {1, (int)out.prediction.numel()});
    b.feature_transforms = {out.feature_transforms};
    b.point_features = {out.point_features};
    return batch_total_loss(b, {target}, task, reg_weight);
}

void Adam::zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

void Adam::step(std::vector<Tensor>& params) {
    if (m.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].values().size(), 0.0);
            v[i].assign(params[i].values().size(), 0.0);
        }
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, (double)t);
    const double c2 = 1.0 - std::pow(beta2, (double)t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].values();
        const auto& g = params[i].grad();
        auto& mi = m[i];
        auto& vi = v[i];
        const long long n = (long long)w.size();
        mspnet::par_for(n, n, [&](long long j) {
            mi[(std::size_t)j] = beta1 * mi[(std::size_t)j] + (1.0 - beta1) * g[(std::size_t)j];
            vi[(std::size_t)j] = beta2 * vi[(std::size_t)j] + (1.0 - beta2) * g[(std::size_t)j] * g[(std::size_t)j];
            const double mhat = mi[(std::size_t)j] / c1;
            const double vhat = vi[(std::size_t)j] / c2;
            w[(std::size_t)j] -= lr * mhat / (std::sqrt(vhat) + eps);
        });
    }
}

namespace {

std::vector<std::vector<Tensor>> make_batch_tensors(const std::vector<MultiStructureSample>& samples,
                                                    const std::vector<int>& order, std::size_t begin,
                                                    std::size_t end, bool augment, double max_translation,
                                                    RngState* aug_rng) {
    std::vector<std::vector<Tensor>> clouds;
    clouds.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        const auto& sample = samples[(std::size_t)order[i]];
        std::vector<Tensor> per_structure;
        per_structure.reserve(sample.clouds.size());
        for (const auto& cloud : sample.clouds) {
            if (augment) {
                const RigidTransform t = random_rigid(*aug_rng, max_translation);
                per_structure.push_back(cloud_to_tensor(apply_rigid(cloud, t)));
            } else {
                per_structure.push_back(cloud_to_tensor(cloud));
            }
        }
        clouds.push_back(std::move(per_structure));
    }
    return clouds;
}

double standardized_target(const Model& model, double raw) {
    return (raw - model.target_mean) / model.target_std;
}

struct ParamSnapshot {
    std::vector<std::vector<double>> values;
    void capture(std::vector<Tensor>& params) {
        values.clear();
        values.reserve(params.size());
        for (Tensor& p : params) values.push_back(p.values());
    }
    void restore(std::vector<Tensor>& params, Model& model) const {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = values[i];
        // Running stats travel with the snapshot via the caller.
        (void)model;
    }
};

// Batch-norm running stats are state, not parameters; snapshot them too.
struct BufferSnapshot : ParamVisitor {
    std::vector<std::vector<double>> buffers;
    bool restoring = false;
    std::size_t pos = 0;
    void tensor(const std::string&, Tensor&) override {}
    void buffer(const std::string&, std::vector<double>& v) override {
        if (restoring)
            v = buffers[pos++];
        else
            buffers.push_back(v);
    }
};

} // namespace

TrainResult train(Model& model, const Dataset& dataset, const SplitIndices& split,
                  const TrainConfig& config) {
    config.validate();
    dataset.validate();
    if (split.train.empty()) throw DataError("train: empty train split");
    const bool classification = config.task == Task::classification;

    if (!classification) {
        // Standardize regression targets over the train split.
        double mean = 0.0;
        for (int idx : split.train) mean += dataset.samples[(std::size_t)idx].target;
        mean /= (double)split.train.size();
        double var = 0.0;
        for (int idx : split.train) {
            const double d = dataset.samples[(std::size_t)idx].target - mean;
            var += d * d;
        }
        var /= (double)split.train.size();
        model.target_mean = mean;
        model.target_std = var > 0.0 ? std::sqrt(var) : 1.0;
    }

    // Augmented copies only; the caller's dataset is never touched.
    std::vector<MultiStructureSample> normalized;
    normalized.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples) normalized.push_back(normalize_subject(s));

    std::vector<Tensor> params = model.parameters();
    Adam opt;
    opt.lr = config.learning_rate;

    RngState shuffle_rng = RngState(config.seed).derive(rng_stream::kShuffle);
    RngState aug_rng = RngState(config.seed).derive(rng_stream::kAugment);
    RngState dropout_rng = RngState(config.seed).derive(rng_stream::kDropout);

    TrainResult result;
    const bool has_val = !split.val.empty();
    double best_score = classification ? -1.0 : std::numeric_limits<double>::infinity();
    double best_train_loss = std::numeric_limits<double>::infinity();
    ParamSnapshot best_params;
    BufferSnapshot best_buffers;
    auto snapshot_best = [&]() {
        best_params.capture(params);
        best_buffers.buffers.clear();
        best_buffers.restoring = false;
        model.visit(best_buffers);
    };
    snapshot_best();
    result.best_epoch = 0;

    std::vector<int> order = split.train;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[(std::size_t)shuffle_rng.below(i)]);

        double loss_sum = 0.0;
        long long seen = 0;
        long long train_correct = 0;
        double train_abs_err = 0.0;

        std::size_t begin = 0;
        while (begin < order.size()) {
            std::size_t end = std::min(begin + (std::size_t)config.batch_size, order.size());
            // Fold a trailing single sample into the previous batch (batch
            // norm needs at least two rows).
            if (order.size() - end == 1) end = order.size();
            const std::size_t batch = end - begin;

            auto clouds = make_batch_tensors(normalized, order, begin, end, config.augment,
                                             config.max_translation, &aug_rng);
            std::vector<double> targets(batch);
            for (std::size_t i = 0; i < batch; ++i) {
                const double raw = normalized[(std::size_t)order[begin + i]].target;
                targets[i] = classification ? raw : standardized_target(model, raw);
            }

            BatchOutput out = model.forward_batch(clouds, Mode::train, &dropout_rng);
            Tensor loss = batch_total_loss(out, targets, config.task, config.reg_weight);
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch starting at sample " + std::to_string(begin));
            loss_sum += loss_value * (double)batch;
            seen += (long long)batch;

            // Train-time proxy metric, used for the log when no val split exists.
            for (std::size_t i = 0; i < batch; ++i) {
                if (classification) {
                    const double* row = out.prediction.values().data() + i * (std::size_t)model.config().classes;
                    int arg = 0;
                    for (int c = 1; c < model.config().classes; ++c)
                        if (row[(std::size_t)c] > row[(std::size_t)arg]) arg = c;
                    if (arg == (int)std::llround(targets[i])) ++train_correct;
                } else {
                    train_abs_err += std::abs(out.prediction.values()[i] - targets[i]) * model.target_std;
                }
            }

            opt.zero_grads(params);
            backward(loss);
            opt.step(params);
            begin = end;
        }

        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / (double)seen;
        if (has_val) {
            row.val_loss = evaluate_loss(model, dataset, split.val, config.reg_weight, config.batch_size);
            const Metrics vm = evaluate(model, dataset, split.val, config.batch_size);
            row.val_metric = classification ? vm.macro_f1 : vm.mae;
            const bool better = classification ? row.val_metric > best_score : row.val_metric < best_score;
            if (better) {
                best_score = row.val_metric;
                result.best_epoch = epoch;
                snapshot_best();
            }
        } else {
            row.val_loss = row.train_loss;
            row.val_metric = classification ? (double)train_correct / (double)seen
                                            : train_abs_err / (double)seen;
            if (row.train_loss < best_train_loss) {
                best_train_loss = row.train_loss;
                result.best_epoch = epoch;
                snapshot_best();
            }
        }
        result.log.push_back(row);
    }

    if (config.epochs > 0) {
        best_params.restore(params, model);
        best_buffers.restoring = true;
        best_buffers.pos = 0;
        model.visit(best_buffers);
    }
    return result;
}

Metrics evaluate(Model& model, const Dataset& dataset, const std::vector<int>& indices, int batch_size) {
    if (indices.empty()) throw DataError("evaluate: empty split");
    const bool classification = model.config().task == Task::classification;
    Metrics m;
    if (classification) {
        const int c = model.config().classes;
        std::vector<std::vector<long long>> confusion((std::size_t)c,
                                                      std::vector<long long>((std::size_t)c, 0));
        std::size_t begin = 0;
        while (begin < indices.size()) {
            const std::size_t end = std::min(begin + (std::size_t)batch_size, indices.size());
            auto clouds_batch = [&]() {
                std::vector<std::vector<Tensor>> clouds;
                for (std::size_t i = begin; i < end; ++i) {
                    const auto norm = normalize_subject(dataset.samples[(std::size_t)indices[i]]);
                    std::vector<Tensor> per_structure;
                    for (const auto& cloud : norm.clouds) per_structure.push_back(cloud_to_tensor(cloud));
                    clouds.push_back(std::move(per_structure));
                }
                return clouds;
            }();
            NoGradGuard guard;
            BatchOutput out = model.forward_batch(clouds_batch, Mode::infer, nullptr);
            for (std::size_t i = begin; i < end; ++i) {
                const double* row = out.prediction.values().data() + (i - begin) * (std::size_t)c;
                int arg = 0;
                for (int j = 1; j < c; ++j)
                    if (row[(std::size_t)j] > row[(std::size_t)arg]) arg = j;
                const int truth = dataset.samples[(std::size_t)indices[i]].label();
                if (truth < 0 || truth >= c)
                    throw DataError("evaluate: target " + std::to_string(truth) + " outside [0, " +
                                    std::to_string(c) + ")");
                ++confusion[(std::size_t)truth][(std::size_t)arg];
            }
            begin = end;
        }
        m = metrics_from_confusion(confusion);
    } else {
        m.task = Task::regression;
        m.samples = (long long)indices.size();
        double abs_sum = 0.0;
        std::size_t begin = 0;
        while (begin < indices.size()) {
            const std::size_t end = std::min(begin + (std::size_t)batch_size, indices.size());
            std::vector<std::vector<Tensor>> clouds;
            for (std::size_t i = begin; i < end; ++i) {
                const auto norm = normalize_subject(dataset.samples[(std::size_t)indices[i]]);
                std::vector<Tensor> per_structure;
                for (const auto& cloud : norm.clouds) per_structure.push_back(cloud_to_tensor(cloud));
                clouds.push_back(std::move(per_structure));
            }
            NoGradGuard guard;
            BatchOutput out = model.forward_batch(clouds, Mode::infer, nullptr);
            for (std::size_t i = begin; i < end; ++i) {
                const double pred =
                    out.prediction.values()[i - begin] * model.target_std + model.target_mean;
                abs_sum += std::abs(pred - dataset.samples[(std::size_t)indices[i]].target);
            }
            begin = end;
        }
        m.mae = abs_sum / (double)indices.size();
    }
    return m;
}

double evaluate_loss(Model& model, const Dataset& dataset, const std::vector<int>& indices,
                     double reg_weight, int batch_size) {
    if (indices.empty()) throw DataError("evaluate_loss: empty split");
    const bool classification = model.config().task == Task::classification;
    double loss_sum = 0.0;
    std::size_t begin = 0;
    while (begin < indices.size()) {
        const std::size_t end = std::min(begin + (std::size_t)batch_size, indices.size());
        std::vector<std::vector<Tensor>> clouds;
        std::vector<double> targets;
        for (std::size_t i = begin; i < end; ++i) {
            const auto norm = normalize_subject(dataset.samples[(std::size_t)indices[i]]);
            std::vector<Tensor> per_structure;
            for (const auto& cloud : norm.clouds) per_structure.push_back(cloud_to_tensor(cloud));
            clouds.push_back(std::move(per_structure));
            targets.push_back(classification ? norm.target
                                             : (norm.target - model.target_mean) / model.target_std);
        }
        NoGradGuard guard;
        BatchOutput out = model.forward_batch(clouds, Mode::infer, nullptr);
        loss_sum += batch_total_loss(out, targets, model.config().task, reg_weight).item() *
                    (double)(end - begin);
        begin = end;
    }
    return loss_sum / (double)indices.size();
}

void write_epoch_csv(const std::vector<EpochRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "epoch,train_loss,val_loss,val_metric\n";
    for (const auto& row : log)
        out << row.epoch << ',' << format_g9(row.train_loss) << ',' << format_g9(row.val_loss) << ','
            << format_g9(row.val_metric) << '\n';
}

void write_metrics_json(const Metrics& metrics, const std::string& path) {
    json j;
    j["samples"] = metrics.samples;
    if (metrics.task == Task::classification) {
        j["task"] = "classification";
        j["accuracy"] = json::parse(format_g9(metrics.accuracy));
        j["confusion"] = metrics.confusion;
        json per = json::array();
        for (const auto& c : metrics.per_class)
            per.push_back({{"precision", json::parse(format_g9(c.precision))},
                           {"recall", json::parse(format_g9(c.recall))},
                           {"f1", json::parse(format_g9(c.f1))},
                           {"support", c.support}});
        j["per_class"] = per;
        j["macro"] = {{"precision", json::parse(format_g9(metrics.macro_precision))},
                      {"recall", json::parse(format_g9(metrics.macro_recall))},
                      {"f1", json::parse(format_g9(metrics.macro_f1))}};
        j["weighted"] = {{"precision", json::parse(format_g9(metrics.weighted_precision))},
                         {"recall", json::parse(format_g9(metrics.weighted_recall))},
                         {"f1", json::parse(format_g9(metrics.weighted_f1))}};
    } else {
        j["task"] = "regression";
        j["mae"] = json::parse(format_g9(metrics.mae));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << "\n";
}

} // namespace mspnet
