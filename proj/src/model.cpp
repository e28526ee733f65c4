#include "mspnet/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mspnet {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
    auto check_widths = [](const std::vector<int>& w, const char* what, bool allow_empty) {
        if (!allow_empty && w.empty()) throw ValueError(std::string(what) + ": width list must not be empty");
        for (int v : w)
            if (v < 1) throw ValueError(std::string(what) + ": widths must be positive");
    };
    if (branches < 1) throw ValueError("model config: branches must be >= 1");
    if (points < 1) throw ValueError("model config: points must be >= 1");
    if (task == Task::classification && classes < 2)
        throw ValueError("model config: classification needs >= 2 classes");
    check_widths(feature_mlp, "feature_mlp", false);
    check_widths(post_mlp, "post_mlp", false);
    check_widths(head, "head", true);
    check_widths(point_tnet.mlp, "point_tnet.mlp", false);
    check_widths(point_tnet.fc, "point_tnet.fc", false);
    check_widths(feature_tnet.mlp, "feature_tnet.mlp", false);
    check_widths(feature_tnet.fc, "feature_tnet.fc", false);
    if (!(point_dropout_keep > 0.0 && point_dropout_keep <= 1.0))
        throw ValueError("model config: point_dropout_keep outside (0, 1]");
    if (!(head_dropout_keep > 0.0 && head_dropout_keep <= 1.0))
        throw ValueError("model config: head_dropout_keep outside (0, 1]");
}

namespace {

Tensor glorot(int in, int out, RngState& rng) {
    const double limit = std::sqrt(6.0 / (in + out));
    std::vector<double> v((std::size_t)in * out);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::leaf({in, out}, std::move(v), true);
}

} // namespace

// --- layers -----------------------------------------------------------------

DenseBnLayer::DenseBnLayer(int in, int out, RngState& rng)
    : w(glorot(in, out, rng)), b(Tensor::zeros({out}, true)), bn(out) {}

Tensor DenseBnLayer::forward(const Tensor& x, Mode mode) {
    return relu(bn.forward(add(matmul(x, w), b), mode));
}

void DenseBnLayer::visit(const std::string& prefix, ParamVisitor& v) {
    v.tensor(prefix + ".w", w);
    v.tensor(prefix + ".b", b);
    v.tensor(prefix + ".bn.gamma", bn.gamma);
    v.tensor(prefix + ".bn.beta", bn.beta);
    v.buffer(prefix + ".bn.running_mean", bn.running_mean);
    v.buffer(prefix + ".bn.running_var", bn.running_var);
}

TNet::TNet(int d_, const TNetConfig& cfg, RngState& rng) : d(d_) {
    int in = d;
    for (int wdt : cfg.mlp) {
        mlp.emplace_back(in, wdt, rng);
        in = wdt;
    }
    for (int wdt : cfg.fc) {
        fc.emplace_back(in, wdt, rng);
        in = wdt;
    }
    // Zero weights + identity bias: a freshly built net emits the exact
    // identity for any input.
    final_w = Tensor::zeros({in, d * d}, true);
    std::vector<double> ident((std::size_t)d * d, 0.0);
    for (int i = 0; i < d; ++i) ident[(std::size_t)i * d + i] = 1.0;
    final_b = Tensor::leaf({d * d}, std::move(ident), true);
}

std::vector<Tensor> TNet::forward(const Tensor& rows, int rows_per_sample, int num_samples, Mode mode) {
    if (rows.rank() != 2 || rows.dim(1) != d)
        throw ShapeError("tnet: input has " + std::to_string(rows.rank() == 2 ? rows.dim(1) : -1) +
                         " columns, net expects " + std::to_string(d));
    Tensor h = rows;
    for (auto& l : mlp) h = l.forward(h, mode);
    const int width = h.dim(1);
    std::vector<Tensor> pooled;
    pooled.reserve((std::size_t)num_samples);
    for (int s = 0; s < num_samples; ++s)
        pooled.push_back(
            reshape(max_over_points(slice_rows(h, s * rows_per_sample, rows_per_sample)), {1, width}));
    Tensor g = num_samples == 1 ? pooled[0] : concat(pooled, 0);
    for (auto& l : fc) g = l.forward(g, mode);
    Tensor flat = add(matmul(g, final_w), final_b); // [num_samples x d*d]
    std::vector<Tensor> out;
    out.reserve((std::size_t)num_samples);
    for (int s = 0; s < num_samples; ++s) out.push_back(reshape(slice_rows(flat, s, 1), {d, d}));
    return out;
}

void TNet::visit(const std::string& prefix, ParamVisitor& v) {
    for (std::size_t i = 0; i < mlp.size(); ++i) mlp[i].visit(prefix + ".mlp" + std::to_string(i), v);
    for (std::size_t i = 0; i < fc.size(); ++i) fc[i].visit(prefix + ".fc" + std::to_string(i), v);
    v.tensor(prefix + ".final.w", final_w);
    v.tensor(prefix + ".final.b", final_b);
}

Branch::Branch(const ModelConfig& cfg, RngState& rng) : use_tnets(cfg.use_tnets), k(cfg.k()) {
    if (use_tnets) point_tnet = TNet(3, cfg.point_tnet, rng);
    int in = 3;
    for (int wdt : cfg.feature_mlp) {
        feature_mlp.emplace_back(in, wdt, rng);
        in = wdt;
    }
    if (use_tnets) feature_tnet = TNet(k, cfg.feature_tnet, rng);
    for (int wdt : cfg.post_mlp) {
        post_mlp.emplace_back(in, wdt, rng);
        in = wdt;
    }
}

BranchOut Branch::forward(const Tensor& stacked, int rows_per_sample, int num_samples, Mode mode,
                          RngState* dropout_rng, double dropout_keep) {
    if (stacked.rank() != 2 || stacked.dim(1) != 3)
        throw ShapeError("branch: expected [rows x 3] input");
    Tensor x = stacked;
    if (use_tnets) {
        auto t_in = point_tnet.forward(x, rows_per_sample, num_samples, mode);
        std::vector<Tensor> parts;
        parts.reserve((std::size_t)num_samples);
        for (int s = 0; s < num_samples; ++s)
            parts.push_back(matmul(slice_rows(x, s * rows_per_sample, rows_per_sample), t_in[(std::size_t)s]));
        x = num_samples == 1 ? parts[0] : concat(parts, 0);
    }
    for (auto& l : feature_mlp) x = l.forward(x, mode);

    BranchOut out;
    if (use_tnets) {
        out.t_feat = feature_tnet.forward(x, rows_per_sample, num_samples, mode);
        std::vector<Tensor> parts;
        parts.reserve((std::size_t)num_samples);
        for (int s = 0; s < num_samples; ++s)
            parts.push_back(
                matmul(slice_rows(x, s * rows_per_sample, rows_per_sample), out.t_feat[(std::size_t)s]));
        x = num_samples == 1 ? parts[0] : concat(parts, 0);
    } else {
        out.t_feat.assign((std::size_t)num_samples, Tensor::identity(k));
    }
    for (auto& l : post_mlp) x = l.forward(x, mode);
    if (dropout_keep < 1.0 && mode == Mode::train) {
        if (!dropout_rng) throw ValueError("branch: train-mode dropout needs an rng");
        x = dropout(x, dropout_keep, mode, *dropout_rng);
    }
    out.features = x;
    return out;
}

void Branch::visit(const std::string& prefix, ParamVisitor& v) {
    if (use_tnets) point_tnet.visit(prefix + ".point_tnet", v);
    for (std::size_t i = 0; i < feature_mlp.size(); ++i)
        feature_mlp[i].visit(prefix + ".feature_mlp" + std::to_string(i), v);
    if (use_tnets) feature_tnet.visit(prefix + ".feature_tnet", v);
    for (std::size_t i = 0; i < post_mlp.size(); ++i)
        post_mlp[i].visit(prefix + ".post_mlp" + std::to_string(i), v);
}

// --- model --------------------------------------------------------------------

Model::Model(ModelConfig cfg, RngState& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int nb = cfg_.type == ModelType::mspnet ? cfg_.branches : 1;
    branches_.reserve((std::size_t)nb);
    for (int i = 0; i < nb; ++i) branches_.emplace_back(cfg_, rng);
    int in = cfg_.type == ModelType::mspnet ? cfg_.branches * cfg_.points * cfg_.k2() : cfg_.k2();
    for (int wdt : cfg_.head) {
        head_hidden_.emplace_back(in, wdt, rng);
        in = wdt;
    }
    head_out_w_ = glorot(in, cfg_.out_width(), rng);
    head_out_b_ = Tensor::zeros({cfg_.out_width()}, true);
}

Tensor Model::head_forward(const Tensor& h, Mode mode, RngState* dropout_rng) {
    Tensor x = h;
    for (auto& l : head_hidden_) {
        x = l.forward(x, mode);
        if (cfg_.head_dropout_keep < 1.0 && mode == Mode::train) {
            if (!dropout_rng) throw ValueError("head: train-mode dropout needs an rng");
            x = dropout(x, cfg_.head_dropout_keep, mode, *dropout_rng);
        }
    }
    return add(matmul(x, head_out_w_), head_out_b_);
}

BatchOutput Model::forward_batch(const std::vector<std::vector<Tensor>>& clouds, Mode mode,
                                 RngState* dropout_rng) {
    const int batch = (int)clouds.size();
    if (batch < 1) throw ShapeError("forward: empty batch");
    const int m = cfg_.branches;
    for (const auto& sample : clouds) {
        if ((int)sample.size() != m)
            throw ShapeError("forward: sample has " + std::to_string(sample.size()) +
                             " structures, model expects " + std::to_string(m));
        for (const Tensor& c : sample) {
            if (c.rank() != 2 || c.dim(1) != 3) throw ShapeError("forward: clouds must be [n x 3]");
            if (c.dim(0) != cfg_.points)
                throw ShapeError("forward: cloud has " + std::to_string(c.dim(0)) +
                                 " points, model expects " + std::to_string(cfg_.points));
        }
    }
    const int n = cfg_.points;
    const int k2 = cfg_.k2();

    BatchOutput out;
    out.feature_transforms.assign((std::size_t)batch, {});
    out.point_features.assign((std::size_t)batch, {});

    if (cfg_.type == ModelType::mspnet) {
        std::vector<std::vector<Tensor>> flat((std::size_t)batch);
        for (int j = 0; j < m; ++j) {
            std::vector<Tensor> stack;
            stack.reserve((std::size_t)batch);
            for (int s = 0; s < batch; ++s) stack.push_back(clouds[(std::size_t)s][(std::size_t)j]);
            Tensor x = batch == 1 ? stack[0] : concat(stack, 0);
            BranchOut bo =
                branches_[(std::size_t)j].forward(x, n, batch, mode, dropout_rng, cfg_.point_dropout_keep);
            for (int s = 0; s < batch; ++s) {
                out.feature_transforms[(std::size_t)s].push_back(bo.t_feat[(std::size_t)s]);
                Tensor pf = slice_rows(bo.features, s * n, n);
                out.point_features[(std::size_t)s].push_back(pf);
                flat[(std::size_t)s].push_back(reshape(pf, {1, n * k2}));
            }
        }
        std::vector<Tensor> rows;
        rows.reserve((std::size_t)batch);
        for (int s = 0; s < batch; ++s)
            rows.push_back(m == 1 ? flat[(std::size_t)s][0] : concat(flat[(std::size_t)s], 1));
        Tensor h = batch == 1 ? rows[0] : concat(rows, 0);
        out.prediction = head_forward(h, mode, dropout_rng);
    } else {
        std::vector<Tensor> per_sample;
        per_sample.reserve((std::size_t)batch);
        for (int s = 0; s < batch; ++s)
            per_sample.push_back(m == 1 ? clouds[(std::size_t)s][0] : concat(clouds[(std::size_t)s], 0));
        Tensor x = batch == 1 ? per_sample[0] : concat(per_sample, 0);
        const int rows_per_sample = m * n;
        BranchOut bo = branches_[0].forward(x, rows_per_sample, batch, mode, dropout_rng,
                                            /*per-point dropout off*/ 1.0);
        std::vector<Tensor> pooled;
        pooled.reserve((std::size_t)batch);
        for (int s = 0; s < batch; ++s) {
            Tensor pf = slice_rows(bo.features, s * rows_per_sample, rows_per_sample);
            out.point_features[(std::size_t)s] = {pf};
            out.feature_transforms[(std::size_t)s] = {bo.t_feat[(std::size_t)s]};
            pooled.push_back(reshape(max_over_points(pf), {1, k2}));
        }
        Tensor g = batch == 1 ? pooled[0] : concat(pooled, 0);
        out.prediction = head_forward(g, mode, dropout_rng);
    }
    return out;
}

SampleOutput Model::forward(const std::vector<Tensor>& sample_clouds, Mode mode, RngState* dropout_rng) {
    BatchOutput b = forward_batch({sample_clouds}, mode, dropout_rng);
    SampleOutput s;
    s.prediction = reshape(b.prediction, {cfg_.out_width()});
    s.feature_transforms = std::move(b.feature_transforms[0]);
    s.point_features = std::move(b.point_features[0]);
    return s;
}

std::pair<Tensor, Tensor> Model::branch_forward(int branch, const Tensor& cloud, Mode mode,
                                                RngState* dropout_rng) {
    if (branch < 0 || branch >= (int)branches_.size())
        throw ShapeError("branch_forward: branch index out of range");
    if (cloud.rank() != 2 || cloud.dim(1) != 3) throw ShapeError("branch_forward: cloud must be [n x 3]");
    const double keep = cfg_.type == ModelType::mspnet ? cfg_.point_dropout_keep : 1.0;
    BranchOut bo =
        branches_[(std::size_t)branch].forward(cloud, cloud.dim(0), 1, mode, dropout_rng, keep);
    return {bo.features, bo.t_feat[0]};
}

void Model::visit(ParamVisitor& v) {
    for (std::size_t i = 0; i < branches_.size(); ++i)
        branches_[i].visit("branch" + std::to_string(i), v);
    for (std::size_t i = 0; i < head_hidden_.size(); ++i)
        head_hidden_[i].visit("head" + std::to_string(i), v);
    v.tensor("head.out.w", head_out_w_);
    v.tensor("head.out.b", head_out_b_);
}

std::vector<Tensor> Model::parameters() {
    struct Collector : ParamVisitor {
        std::vector<Tensor> out;
        void tensor(const std::string&, Tensor& t) override { out.push_back(t); }
        void buffer(const std::string&, std::vector<double>&) override {}
    } c;
    visit(c);
    return c.out;
}

// --- checkpoints ------------------------------------------------------------------

namespace {

json widths_json(const std::vector<int>& w) { return json(w); }

std::vector<int> widths_from(const json& j) {
    std::vector<int> out;
    for (const auto& v : j) out.push_back(v.get<int>());
    return out;
}

json config_json(const ModelConfig& c) {
    json j;
    j["type"] = c.type == ModelType::mspnet ? "mspnet" : "pointnet";
    j["task"] = c.task == Task::classification ? "classification" : "regression";
    j["branches"] = c.branches;
    j["points"] = c.points;
    j["classes"] = c.classes;
    j["use_tnets"] = c.use_tnets;
    j["point_tnet"] = {{"mlp", widths_json(c.point_tnet.mlp)}, {"fc", widths_json(c.point_tnet.fc)}};
    j["feature_tnet"] = {{"mlp", widths_json(c.feature_tnet.mlp)}, {"fc", widths_json(c.feature_tnet.fc)}};
    j["feature_mlp"] = widths_json(c.feature_mlp);
    j["post_mlp"] = widths_json(c.post_mlp);
    j["head"] = widths_json(c.head);
    j["point_dropout_keep"] = c.point_dropout_keep;
    j["head_dropout_keep"] = c.head_dropout_keep;
    return j;
}

ModelConfig config_from(const json& j) {
    ModelConfig c;
    const std::string type = j.at("type").get<std::string>();
    if (type == "mspnet")
        c.type = ModelType::mspnet;
    else if (type == "pointnet")
        c.type = ModelType::pointnet;
    else
        throw DataError("checkpoint: unknown model type '" + type + "'");
    const std::string task = j.at("task").get<std::string>();
    if (task == "classification")
        c.task = Task::classification;
    else if (task == "regression")
        c.task = Task::regression;
    else
        throw DataError("checkpoint: unknown task '" + task + "'");
    c.branches = j.at("branches").get<int>();
    c.points = j.at("points").get<int>();
    c.classes = j.at("classes").get<int>();
    c.use_tnets = j.at("use_tnets").get<bool>();
    c.point_tnet.mlp = widths_from(j.at("point_tnet").at("mlp"));
    c.point_tnet.fc = widths_from(j.at("point_tnet").at("fc"));
    c.feature_tnet.mlp = widths_from(j.at("feature_tnet").at("mlp"));
    c.feature_tnet.fc = widths_from(j.at("feature_tnet").at("fc"));
    c.feature_mlp = widths_from(j.at("feature_mlp"));
    c.post_mlp = widths_from(j.at("post_mlp"));
    c.head = widths_from(j.at("head"));
    c.point_dropout_keep = j.at("point_dropout_keep").get<double>();
    c.head_dropout_keep = j.at("head_dropout_keep").get<double>();
    return c;
}

} // namespace

void save_checkpoint(Model& model, const std::string& json_path, const CheckpointInfo& info) {
    struct Writer : ParamVisitor {
        std::vector<double> blob;
        json order = json::array();
        void tensor(const std::string& name, Tensor& t) override {
            order.push_back({{"name", name}, {"count", t.values().size()}});
            blob.insert(blob.end(), t.values().begin(), t.values().end());
        }
        void buffer(const std::string& name, std::vector<double>& v) override {
            order.push_back({{"name", name}, {"count", v.size()}});
            blob.insert(blob.end(), v.begin(), v.end());
        }
    } w;
    model.visit(w);

    fs::path blob_path(json_path);
    blob_path.replace_extension(".bin");

    json j;
    j["format"] = "mspnet-checkpoint";
    j["version"] = 1;
    j["model"] = config_json(model.config());
    j["target_mean"] = model.target_mean;
    j["target_std"] = model.target_std;
    j["seed"] = info.seed;
    j["split_ratios"] = {info.split_ratios[0], info.split_ratios[1], info.split_ratios[2]};
    j["params"] = {{"file", blob_path.filename().string()}, {"count", w.blob.size()}};
    j["param_order"] = std::move(w.order);

    std::ofstream out(json_path);
    if (!out) throw DataError("cannot write " + json_path);
    out << j.dump(2) << "\n";

    std::ofstream blob(blob_path, std::ios::binary);
    if (!blob) throw DataError("cannot write " + blob_path.string());
    blob.write(reinterpret_cast<const char*>(w.blob.data()),
               (std::streamsize)(w.blob.size() * sizeof(double)));
}

Model load_checkpoint(const std::string& json_path, CheckpointInfo* info) {
    std::ifstream in(json_path);
    if (!in) throw DataError("cannot open " + json_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint " + json_path + ": " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "mspnet-checkpoint")
            throw DataError("not a checkpoint: " + json_path);
        RngState dummy(0);
        Model model(config_from(j.at("model")), dummy);
        model.target_mean = j.at("target_mean").get<double>();
        model.target_std = j.at("target_std").get<double>();
        if (info) {
            info->seed = j.at("seed").get<std::uint64_t>();
            for (int i = 0; i < 3; ++i)
                info->split_ratios[(std::size_t)i] = j.at("split_ratios").at((std::size_t)i).get<double>();
        }

        const fs::path blob_path = fs::path(json_path).parent_path() / j.at("params").at("file").get<std::string>();
        const std::size_t count = j.at("params").at("count").get<std::size_t>();
        std::vector<double> blob(count);
        std::ifstream bin(blob_path, std::ios::binary);
        if (!bin) throw DataError("cannot open parameter blob " + blob_path.string());
        bin.read(reinterpret_cast<char*>(blob.data()), (std::streamsize)(count * sizeof(double)));
        if ((std::size_t)bin.gcount() != count * sizeof(double))
            throw DataError("parameter blob " + blob_path.string() + " truncated");

        struct Reader : ParamVisitor {
            const std::vector<double>* blob = nullptr;
            std::size_t pos = 0;
            void take(const std::string& name, double* dst, std::size_t n) {
                if (pos + n > blob->size())
                    throw DataError("checkpoint blob too short at '" + name + "'");
                std::copy(blob->begin() + (std::ptrdiff_t)pos, blob->begin() + (std::ptrdiff_t)(pos + n), dst);
                pos += n;
            }
            void tensor(const std::string& name, Tensor& t) override {
                take(name, t.values().data(), t.values().size());
            }
            void buffer(const std::string& name, std::vector<double>& v) override {
                take(name, v.data(), v.size());
            }
        } r;
        r.blob = &blob;
        model.visit(r);
        if (r.pos != blob.size())
            throw DataError("checkpoint blob size mismatch: consumed " + std::to_string(r.pos) +
                            " of " + std::to_string(blob.size()));
        return model;
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + json_path + ": " + e.what());
    }
}

Tensor cloud_to_tensor(const PointCloud& cloud) {
    std::vector<double> v;
    v.reserve(cloud.points.size() * 3);
    for (const auto& p : cloud.points) {
        v.push_back(p[0]);
        v.push_back(p[1]);
        v.push_back(p[2]);
    }
    return Tensor::leaf({cloud.size(), 3}, std::move(v), false);
}

} // namespace mspnet
