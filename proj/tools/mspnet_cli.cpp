// mspnet: point-cloud extraction, synthetic corpora, training, evaluation and
// per-point occlusion importance for multi-structure shape analysis.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mspnet/io.hpp"
#include "mspnet/kernels.hpp"
#include "mspnet/model.hpp"
#include "mspnet/occlusion.hpp"
#include "mspnet/shapedata.hpp"
#include "mspnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mspnet;

namespace {

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed config " + path + ": " + e.what());
    }
    return j;
}

// Flags win over config values, config values over defaults.
template <typename T>
void overlay(const json& cfg, const char* key, const CLI::Option* opt, T& value) {
    if (opt != nullptr && opt->count() > 0) return;
    if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

std::string cloud_filename(const std::string& subject, int structure) {
    return subject + "_s" + std::to_string(structure) + ".xyz";
}

void write_dataset_files(const Dataset& ds, const std::string& out_dir, Manifest& manifest) {
    for (const auto& sample : ds.samples) {
        ManifestEntry entry;
        entry.subject_id = sample.subject_id;
        entry.target = sample.target;
        for (std::size_t j = 0; j < sample.clouds.size(); ++j) {
            const std::string name = cloud_filename(sample.subject_id, (int)j);
            write_cloud_ascii(sample.clouds[j], (fs::path(out_dir) / name).string());
            entry.cloud_paths.push_back(name);
        }
        manifest.entries.push_back(std::move(entry));
    }
}

// --- extract -----------------------------------------------------------------

int cmd_extract(const std::vector<std::string>& volumes, const std::vector<int>& labels, int points,
                std::uint64_t seed, const std::string& out_dir) {
    if (volumes.empty()) throw ValueError("extract: at least one --volume is required");
    if (labels.empty()) throw ValueError("extract: at least one --label is required");
    fs::create_directories(out_dir);
    RngState rng = RngState(seed).derive(rng_stream::kSample);
    Manifest manifest;
    for (const auto& vol_path : volumes) {
        const LabelVolume vol = read_label_volume(vol_path);
        ManifestEntry entry;
        entry.subject_id = fs::path(vol_path).stem().string();
        for (std::size_t j = 0; j < labels.size(); ++j) {
            PointCloud boundary;
            try {
                boundary = extract_boundary(vol, labels[j]);
            } catch (const DataError&) {
                throw DataError("extract: label " + std::to_string(labels[j]) +
                                " does not occur in volume " + vol_path);
            }
            const PointCloud cloud = sample_uniform(boundary, points, rng);
            const std::string name = cloud_filename(entry.subject_id, (int)j);
            write_cloud_ascii(cloud, (fs::path(out_dir) / name).string());
            entry.cloud_paths.push_back(name);
        }
        manifest.entries.push_back(std::move(entry));
    }
    write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "extract: wrote " << manifest.entries.size() << " subjects x " << labels.size()
              << " structures to " << out_dir << "\n";
    return 0;
}

// --- synth -------------------------------------------------------------------

int cmd_synth(const SynthSpec& spec, std::uint64_t seed, const std::string& out_dir) {
    fs::create_directories(out_dir);
    RngState rng = RngState(seed).derive(rng_stream::kSynth);
    const SynthResult result = synth_dataset(spec, rng);

    Manifest manifest;
    write_dataset_files(result.dataset, out_dir, manifest);
    write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());

    json truth;
    truth["task"] = spec.task == SynthTask::classification ? "classification" : "regression";
    truth["dent_depth"] = spec.dent_depth;
    truth["dent_direction"] = {spec.dent_direction[0], spec.dent_direction[1], spec.dent_direction[2]};
    truth["dent_cos_threshold"] = spec.dent_cos_threshold;
    json subjects = json::array();
    for (std::size_t i = 0; i < result.dataset.samples.size(); ++i) {
        json s;
        s["subject_id"] = result.dataset.samples[i].subject_id;
        s["target"] = result.dataset.samples[i].target;
        if (spec.task == SynthTask::regression) s["scale"] = result.raw_scale[i];
        json mask = json::array();
        for (char b : result.dent_mask[i]) mask.push_back((int)b);
        s["dent_mask"] = std::move(mask);
        subjects.push_back(std::move(s));
    }
    truth["subjects"] = std::move(subjects);
    std::ofstream tf((fs::path(out_dir) / "truth.json").string());
    tf << truth.dump(2) << "\n";

    std::cout << "synth: wrote " << result.dataset.samples.size() << " subjects ("
              << result.dataset.samples.size() * (std::size_t)spec.structures << " clouds) to " << out_dir
              << "\n";
    return 0;
}

// --- train -------------------------------------------------------------------

struct TrainCli {
    TrainConfig train;
    ModelConfig model;
    std::string manifest;
    std::string out_dir = ".";
};

int cmd_train(TrainCli& cli) {
    Dataset ds = load_dataset(cli.manifest);
    ds.validate();
    cli.model.branches = ds.structures();
    cli.model.points = ds.points();
    cli.model.task = cli.train.task;
    if (cli.train.task == Task::classification) {
        for (const auto& s : ds.samples)
            if (s.label() < 0 || s.label() >= cli.model.classes)
                throw DataError("train: subject '" + s.subject_id + "' target " +
                                std::to_string(s.target) + " outside [0, " +
                                std::to_string(cli.model.classes) + ")");
    }

    const SplitIndices split = split_by_subject(ds, cli.train.split_ratios, cli.train.seed);
    std::cout << "train: " << split.train.size() << " train / " << split.val.size() << " val / "
              << split.test.size() << " test samples, model "
              << (cli.model.type == ModelType::mspnet ? "mspnet" : "pointnet") << "\n";

    RngState init_rng = RngState(cli.train.seed).derive(rng_stream::kInit);
    Model model(cli.model, init_rng);
    const TrainResult result = train(model, ds, split, cli.train);
    for (const auto& row : result.log)
        std::cout << "epoch " << row.epoch << " train_loss " << format_g9(row.train_loss) << " val_loss "
                  << format_g9(row.val_loss) << " val_metric " << format_g9(row.val_metric) << "\n";

    fs::create_directories(cli.out_dir);
    write_epoch_csv(result.log, (fs::path(cli.out_dir) / "epochs.csv").string());
    CheckpointInfo info;
    info.seed = cli.train.seed;
    info.split_ratios = cli.train.split_ratios;
    save_checkpoint(model, (fs::path(cli.out_dir) / "checkpoint.json").string(), info);
    std::cout << "train: best epoch " << result.best_epoch << ", checkpoint in " << cli.out_dir << "\n";
    return 0;
}

// --- eval ---------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& split_name,
             const std::string& out_path, int batch_size) {
    CheckpointInfo info;
    Model model = load_checkpoint(checkpoint, &info);
    Dataset ds = load_dataset(manifest);

    std::vector<int> indices;
    if (split_name == "all") {
        indices.resize(ds.samples.size());
        for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = (int)i;
    } else {
        const SplitIndices split = split_by_subject(ds, info.split_ratios, info.seed);
        if (split_name == "train")
            indices = split.train;
        else if (split_name == "val")
            indices = split.val;
        else if (split_name == "test")
            indices = split.test;
        else
            throw ValueError("eval: unknown split '" + split_name + "'");
    }
    if (indices.empty()) throw DataError("eval: split '" + split_name + "' is empty");

    const Metrics metrics = evaluate(model, ds, indices, batch_size);
    write_metrics_json(metrics, out_path);
    if (metrics.task == Task::classification)
        std::cout << "eval: " << metrics.samples << " samples, accuracy " << format_g9(metrics.accuracy)
                  << ", macro F1 " << format_g9(metrics.macro_f1) << "\n";
    else
        std::cout << "eval: " << metrics.samples << " samples, MAE " << format_g9(metrics.mae) << "\n";
    std::cout << "eval: metrics written to " << out_path << "\n";
    return 0;
}

// --- explain ------------------------------------------------------------------

int cmd_explain(const std::string& checkpoint, const std::string& manifest, const std::string& subject,
                int structure, int k, int force_class, const std::string& out_prefix) {
    Model model = load_checkpoint(checkpoint);
    Dataset ds = load_dataset(manifest, /*require_targets=*/false);
    const MultiStructureSample* found = nullptr;
    for (const auto& s : ds.samples)
        if (s.subject_id == subject) {
            found = &s;
            break;
        }
    if (!found) throw DataError("explain: subject '" + subject + "' not in manifest");
    if (structure < 0 || structure >= (int)found->clouds.size())
        throw DataError("explain: structure " + std::to_string(structure) + " out of range");

    const MultiStructureSample normalized = normalize_subject(*found);
    const ImportanceMap map = importance_map(model, normalized, structure, k, force_class);

    // Export against the on-disk (unnormalized) coordinates.
    export_importance_csv(map, found->clouds[(std::size_t)structure], out_prefix + ".csv");
    export_importance_ply(map, found->clouds[(std::size_t)structure], out_prefix + ".ply");
    std::cout << "explain: reference class " << map.reference_class << ", wrote " << out_prefix
              << ".csv and " << out_prefix << ".ply\n";
    return 0;
}

std::array<double, 3> ratios_from(const std::vector<double>& v) {
    if (v.size() != 3) throw ValueError("split ratios need exactly three values");
    return {v[0], v[1], v[2]};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-structure point-cloud shape analysis"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker thread cap (default 1)");

    // extract
    auto* extract = app.add_subcommand("extract", "boundary point clouds from label volumes");
    std::string ex_config;
    std::vector<std::string> volumes;
    std::vector<int> labels;
    int ex_points = 512;
    std::uint64_t ex_seed = 1;
    std::string ex_out = ".";
    extract->add_option("--config", ex_config, "JSON config file");
    extract->add_option("--volume", volumes, "label volume header (.json)")->required();
    auto* x_labels = extract->add_option("--label", labels, "structure label to extract");
    auto* x_points = extract->add_option("--points,-n", ex_points, "points per structure");
    auto* x_seed = extract->add_option("--seed", ex_seed, "sampling seed");
    extract->add_option("--out", ex_out, "output directory");

    // synth
    auto* synth = app.add_subcommand("synth", "synthetic multi-structure corpus");
    std::string sy_config;
    SynthSpec spec;
    std::string sy_task = "classification";
    std::uint64_t sy_seed = 1;
    std::string sy_out = ".";
    synth->add_option("--config", sy_config, "JSON spec file");
    auto* o_subj = synth->add_option("--subjects", spec.subjects, "number of subjects");
    auto* o_m = synth->add_option("--structures,-m", spec.structures, "structures per subject");
    auto* o_n = synth->add_option("--points,-n", spec.points, "points per structure");
    auto* o_task = synth->add_option("--task", sy_task, "classification|regression");
    auto* o_dent = synth->add_option("--dent-depth", spec.dent_depth, "relative dent depth");
    auto* o_jit = synth->add_option("--jitter", spec.jitter, "per-point jitter sigma");
    synth->add_option("--seed", sy_seed, "generation seed");
    synth->add_option("--out", sy_out, "output directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset manifest");
    TrainCli tc;
    std::string tr_config;
    std::string tr_task = "classification";
    std::string tr_model = "mspnet";
    std::vector<double> tr_ratios;
    bool tr_augment = false;
    bool tr_no_tnets = false;
    train_cmd->add_option("--manifest", tc.manifest, "dataset manifest")->required();
    train_cmd->add_option("--out", tc.out_dir, "output directory")->required();
    train_cmd->add_option("--config", tr_config, "JSON config file");
    auto* t_task = train_cmd->add_option("--task", tr_task, "classification|regression");
    auto* t_model = train_cmd->add_option("--model", tr_model, "mspnet|pointnet");
    auto* t_epochs = train_cmd->add_option("--epochs", tc.train.epochs, "training epochs");
    auto* t_batch = train_cmd->add_option("--batch-size", tc.train.batch_size, "minibatch size");
    auto* t_lr = train_cmd->add_option("--lr", tc.train.learning_rate, "learning rate");
    auto* t_reg = train_cmd->add_option("--reg-weight", tc.train.reg_weight, "transform penalty weight");
    auto* t_ratios = train_cmd->add_option("--ratios", tr_ratios, "train,val,test ratios")->delimiter(',');
    auto* t_seed = train_cmd->add_option("--seed", tc.train.seed, "base seed");
    auto* t_aug = train_cmd->add_flag("--augment", tr_augment, "rigid augmentation per epoch");
    auto* t_maxt = train_cmd->add_option("--max-translation", tc.train.max_translation,
                                         "augmentation translation bound");
    auto* t_classes = train_cmd->add_option("--classes", tc.model.classes, "number of classes");
    auto* t_fmlp = train_cmd->add_option("--feature-mlp", tc.model.feature_mlp, "feature MLP widths")
                       ->delimiter(',');
    auto* t_pmlp = train_cmd->add_option("--post-mlp", tc.model.post_mlp, "post-transform MLP widths")
                       ->delimiter(',');
    auto* t_head = train_cmd->add_option("--head", tc.model.head, "head hidden widths")->delimiter(',');
    auto* t_ptm = train_cmd->add_option("--point-tnet-mlp", tc.model.point_tnet.mlp, "point T-Net MLP")
                      ->delimiter(',');
    auto* t_ptf = train_cmd->add_option("--point-tnet-fc", tc.model.point_tnet.fc, "point T-Net FC")
                      ->delimiter(',');
    auto* t_ftm =
        train_cmd->add_option("--feature-tnet-mlp", tc.model.feature_tnet.mlp, "feature T-Net MLP")
            ->delimiter(',');
    auto* t_ftf = train_cmd->add_option("--feature-tnet-fc", tc.model.feature_tnet.fc, "feature T-Net FC")
                      ->delimiter(',');
    auto* t_notnet = train_cmd->add_flag("--no-tnets", tr_no_tnets, "disable both T-Nets");
    auto* t_pdk = train_cmd->add_option("--point-dropout-keep", tc.model.point_dropout_keep,
                                        "per-point dropout keep probability");
    auto* t_hdk = train_cmd->add_option("--head-dropout-keep", tc.model.head_dropout_keep,
                                        "head dropout keep probability");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "metrics of a checkpoint on a manifest");
    std::string ev_config;
    std::string ev_checkpoint, ev_manifest, ev_split = "all", ev_out = "metrics.json";
    int ev_batch = 32;
    eval_cmd->add_option("--config", ev_config, "JSON config file");
    eval_cmd->add_option("--checkpoint", ev_checkpoint, "checkpoint JSON")->required();
    eval_cmd->add_option("--manifest", ev_manifest, "dataset manifest")->required();
    auto* e_split =
        eval_cmd->add_option("--split", ev_split, "all|train|val|test (splits use the checkpoint's seed)");
    eval_cmd->add_option("--out", ev_out, "metrics JSON path");
    auto* e_batch = eval_cmd->add_option("--batch-size", ev_batch, "evaluation batch size");

    // explain
    auto* explain_cmd = app.add_subcommand("explain", "per-point occlusion importance");
    std::string xp_config;
    std::string xp_checkpoint, xp_manifest, xp_subject, xp_out = "importance";
    int xp_structure = 0, xp_k = 32, xp_force = -1;
    explain_cmd->add_option("--config", xp_config, "JSON config file");
    explain_cmd->add_option("--checkpoint", xp_checkpoint, "checkpoint JSON")->required();
    explain_cmd->add_option("--manifest", xp_manifest, "dataset manifest")->required();
    explain_cmd->add_option("--subject", xp_subject, "subject id")->required();
    auto* p_structure = explain_cmd->add_option("--structure", xp_structure, "structure index");
    auto* p_k = explain_cmd->add_option("--k", xp_k, "occluded neighbors per point");
    auto* p_force = explain_cmd->add_option("--force-class", xp_force, "reference class (default: predicted)");
    explain_cmd->add_option("--out", xp_out, "output prefix for .csv/.ply");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        set_threads(threads);
        if (extract->parsed()) {
            const json cfg = load_config_file(ex_config);
            overlay(cfg, "labels", x_labels, labels);
            overlay(cfg, "points", x_points, ex_points);
            if (cfg.contains("seed") && x_seed->count() == 0) ex_seed = cfg.at("seed").get<std::uint64_t>();
            if (labels.empty()) throw ValueError("extract: at least one --label is required");
            return cmd_extract(volumes, labels, ex_points, ex_seed, ex_out);
        }

        if (synth->parsed()) {
            const json cfg = load_config_file(sy_config);
            overlay(cfg, "subjects", o_subj, spec.subjects);
            overlay(cfg, "structures", o_m, spec.structures);
            overlay(cfg, "points", o_n, spec.points);
            overlay(cfg, "task", o_task, sy_task);
            overlay(cfg, "dent_depth", o_dent, spec.dent_depth);
            overlay(cfg, "jitter", o_jit, spec.jitter);
            if (cfg.contains("seed") && synth->get_option("--seed")->count() == 0)
                sy_seed = cfg.at("seed").get<std::uint64_t>();
            if (sy_task == "classification")
                spec.task = SynthTask::classification;
            else if (sy_task == "regression")
                spec.task = SynthTask::regression;
            else
                throw ValueError("synth: unknown task '" + sy_task + "'");
            return cmd_synth(spec, sy_seed, sy_out);
        }

        if (train_cmd->parsed()) {
            const json cfg = load_config_file(tr_config);
            overlay(cfg, "task", t_task, tr_task);
            overlay(cfg, "model", t_model, tr_model);
            overlay(cfg, "epochs", t_epochs, tc.train.epochs);
            overlay(cfg, "batch_size", t_batch, tc.train.batch_size);
            overlay(cfg, "learning_rate", t_lr, tc.train.learning_rate);
            overlay(cfg, "reg_weight", t_reg, tc.train.reg_weight);
            overlay(cfg, "seed", t_seed, tc.train.seed);
            overlay(cfg, "max_translation", t_maxt, tc.train.max_translation);
            overlay(cfg, "classes", t_classes, tc.model.classes);
            overlay(cfg, "feature_mlp", t_fmlp, tc.model.feature_mlp);
            overlay(cfg, "post_mlp", t_pmlp, tc.model.post_mlp);
            overlay(cfg, "head", t_head, tc.model.head);
            overlay(cfg, "point_tnet_mlp", t_ptm, tc.model.point_tnet.mlp);
            overlay(cfg, "point_tnet_fc", t_ptf, tc.model.point_tnet.fc);
            overlay(cfg, "feature_tnet_mlp", t_ftm, tc.model.feature_tnet.mlp);
            overlay(cfg, "feature_tnet_fc", t_ftf, tc.model.feature_tnet.fc);
            overlay(cfg, "point_dropout_keep", t_pdk, tc.model.point_dropout_keep);
            overlay(cfg, "head_dropout_keep", t_hdk, tc.model.head_dropout_keep);
            if (t_aug->count() == 0 && cfg.contains("augment")) tr_augment = cfg.at("augment").get<bool>();
            if (t_notnet->count() == 0 && cfg.contains("use_tnets"))
                tr_no_tnets = !cfg.at("use_tnets").get<bool>();
            if (t_ratios->count() > 0)
                tc.train.split_ratios = ratios_from(tr_ratios);
            else if (cfg.contains("split_ratios"))
                tc.train.split_ratios = ratios_from(cfg.at("split_ratios").get<std::vector<double>>());

            if (tr_task == "classification")
                tc.train.task = Task::classification;
            else if (tr_task == "regression")
                tc.train.task = Task::regression;
            else
                throw ValueError("train: unknown task '" + tr_task + "'");
            if (tr_model == "mspnet")
                tc.model.type = ModelType::mspnet;
            else if (tr_model == "pointnet")
                tc.model.type = ModelType::pointnet;
            else
                throw ValueError("train: unknown model '" + tr_model + "'");
            tc.train.augment = tr_augment;
            tc.model.use_tnets = !tr_no_tnets;
            return cmd_train(tc);
        }

        if (eval_cmd->parsed()) {
            const json cfg = load_config_file(ev_config);
            overlay(cfg, "split", e_split, ev_split);
            overlay(cfg, "batch_size", e_batch, ev_batch);
            return cmd_eval(ev_checkpoint, ev_manifest, ev_split, ev_out, ev_batch);
        }
        if (explain_cmd->parsed()) {
            const json cfg = load_config_file(xp_config);
            overlay(cfg, "structure", p_structure, xp_structure);
            overlay(cfg, "k", p_k, xp_k);
            overlay(cfg, "force_class", p_force, xp_force);
            return cmd_explain(xp_checkpoint, xp_manifest, xp_subject, xp_structure, xp_k, xp_force,
                               xp_out);
        }
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
