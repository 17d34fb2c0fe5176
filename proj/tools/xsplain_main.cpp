#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xsplain/config.hpp"
#include "xsplain/evalsuite.hpp"
#include "xsplain/explainer.hpp"
#include "xsplain/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xsplain;

namespace {

[[noreturn]] void fail(const std::string& message, const std::string& hint = "") {
    json j;
    j["error"] = message;
    if (!hint.empty()) j["hint"] = hint;
    std::cerr << j.dump() << "\n";
    std::exit(1);
}

void require_artifact(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path))
        fail("missing artifact '" + path.string() + "'", "run " + producer + " first");
}

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

template <class T>
std::vector<T> split_csv_numbers(const std::string& csv) {
    std::vector<T> out;
    for (const auto& item : split_csv(csv)) out.push_back(static_cast<T>(std::stod(item)));
    return out;
}

std::string sample_file_name(const std::string& cls, int index) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s_%04d", cls.c_str(), index);
    return buf;
}

int cmd_generate(const RunConfig& cfg, const fs::path& out_dir, bool force) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        fail("output directory '" + out_dir.string() + "' is not empty", "pass --force to overwrite");
    fs::create_directories(out_dir);

    const FeatureMode mode = feature_mode_from_string(cfg.feature_mode);
    DatasetManifest manifest;
    manifest.feature_mode = mode;
    manifest.class_names = cfg.classes;
    std::vector<std::pair<std::string, int>> id_labels;

    for (size_t cls = 0; cls < cfg.classes.size(); ++cls) {
        for (int i = 0; i < cfg.per_class; ++i) {
            const uint64_t sample_seed =
                cfg.seed * 1000003ULL + static_cast<uint64_t>(cls) * 7919ULL + static_cast<uint64_t>(i);
            LabeledSample sample = generate_synthetic(cfg.classes[cls], cfg.primitives, sample_seed,
                                                      cfg.grid_size, static_cast<int>(cls));
            const std::string id = sample_file_name(cfg.classes[cls], i);
            const std::string file = id + ".ply";
            write_ply(sample.primitives, out_dir / file, mode);
            manifest.samples.push_back({id, file, static_cast<int>(cls)});
            id_labels.emplace_back(id, static_cast<int>(cls));
        }
    }
    manifest.split = split_dataset(id_labels, {cfg.split_ratios[0], cfg.split_ratios[1], cfg.split_ratios[2]},
                                   cfg.seed, cfg.classes, mode);
    save_manifest(manifest, out_dir / "manifest.json");
    cfg.echo(out_dir);
    std::printf("generated %zu samples (%zu classes) into %s\n", manifest.samples.size(),
                cfg.classes.size(), out_dir.string().c_str());
    std::printf("split: %zu train / %zu val / %zu test\n", manifest.split.train.size(),
                manifest.split.val.size(), manifest.split.test.size());
    return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& out_dir) {
    require_artifact(data, "generate");
    fs::create_directories(out_dir);
    const Dataset dataset = load_dataset(data, cfg.grid_size);
    auto [params, report] = train_stage1(dataset, cfg.stage1(dataset.num_classes()));

    BackboneCheckpoint ckpt;
    ckpt.params = std::move(params);
    ckpt.class_names = dataset.manifest.class_names;
    ckpt.feature_mode = dataset.manifest.feature_mode;
    ckpt.seed = cfg.seed;
    save_backbone_checkpoint(ckpt, out_dir / "checkpoint.bin");
    save_train_report(report, out_dir / "train_report.json");
    cfg.echo(out_dir);
    std::printf("trained %zu epochs (best epoch %d, val acc %.4f)\n", report.epochs.size(),
                report.best_epoch, report.best_val_accuracy);
    std::printf("test accuracy: %.4f\n", report.test_accuracy);
    std::printf("checkpoint: %s\n", (out_dir / "checkpoint.bin").string().c_str());
    return 0;
}

int cmd_disentangle(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data,
                    const fs::path& out_dir) {
    require_artifact(checkpoint, "train");
    require_artifact(data, "generate");
    fs::create_directories(out_dir);
    BackboneCheckpoint ckpt = load_backbone_checkpoint(checkpoint);
    const Dataset dataset = load_dataset(data, ckpt.params.hyper.grid_size);
    const FrozenBackbone frozen = freeze(std::move(ckpt.params));
    const DisentangleState state = train_stage2(frozen, dataset, cfg.stage2());

    save_disentangle_state(state, out_dir / "dstate.bin");
    export_registry_json(state, out_dir / "registry.json");
    cfg.echo(out_dir);
    const double defect = kernels::orthogonality_defect(state.U.cast<double>());
    std::printf("stage 2 done: %d epochs, |U^T U - I| = %.2e\n", state.curriculum.epochs, defect);
    if (state.purity_history.size() >= 2)
        std::printf("mean registry purity: %.4f -> %.4f (%+.1f%%)\n", state.purity_history.front(),
                    state.purity_history.back(), purity_gain_from_history(state));
    std::printf("state: %s\n", (out_dir / "dstate.bin").string().c_str());
    return 0;
}

int cmd_explain(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& state_path,
                const fs::path& data, const std::string& sample_id, const fs::path& out_dir) {
    require_artifact(checkpoint, "train");
    require_artifact(state_path, "disentangle");
    require_artifact(data, "generate");
    const BackboneCheckpoint ckpt = load_backbone_checkpoint(checkpoint);
    const DisentangleState state = load_disentangle_state(state_path);
    const Dataset dataset = load_dataset(data, ckpt.params.hyper.grid_size);

    const LabeledSample& sample = dataset.by_id(sample_id);
    const Explanation expl = explain(sample, ckpt.params, state, dataset, cfg.top_m);
    const fs::path sample_dir = out_dir / sample_id;
    const auto files = export_explanation(expl, sample, dataset, sample_dir);
    cfg.echo(sample_dir);
    std::printf("sample %s predicted as '%s' (class %d)\n", sample_id.c_str(),
                dataset.manifest.class_names.at(static_cast<size_t>(expl.predicted_class)).c_str(),
                expl.predicted_class);
    for (const auto& ch : expl.channels)
        std::printf("  channel %3d  importance %.4f  voxel %4d  |E| = %zu  prototypes %zu\n", ch.channel,
                    ch.importance, ch.voxel, ch.primitive_ids.size(), ch.prototypes.size());
    std::printf("wrote %zu files to %s\n", files.size(), sample_dir.string().c_str());
    return 0;
}

int cmd_evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& state_path,
                 const fs::path& data, const fs::path& out_dir) {
    require_artifact(checkpoint, "train");
    require_artifact(data, "generate");
    const BackboneCheckpoint ckpt = load_backbone_checkpoint(checkpoint);
    const Dataset dataset = load_dataset(data, ckpt.params.hyper.grid_size);
    const auto& test_ids = dataset.manifest.split.test;

    json report;
    const float acc = evaluate(ckpt.params, dataset, test_ids, cfg.threads);
    std::printf("test accuracy: %.4f over %zu samples\n", acc, test_ids.size());
    report["test_accuracy"] = acc;

    if (!state_path.empty()) {
        require_artifact(state_path, "disentangle");
        const DisentangleState state = load_disentangle_state(state_path);
        const PreservationReport pres =
            check_decision_preservation(ckpt.params, state, dataset, test_ids, cfg.threads);
        std::printf("decision preservation: argmax equality %.1f%%, max |logit dev| = %.2e\n",
                    100.0 * pres.agree_fraction, pres.max_abs_logit_dev);
        report["decision_preservation"] = {{"agree_fraction", pres.agree_fraction},
                                           {"max_abs_logit_dev", pres.max_abs_logit_dev}};

        std::vector<DeletionReport> rows;
        for (int k = 1; k <= cfg.top_k_delete; ++k)
            rows.push_back(deletion_test(ckpt.params, state, dataset, test_ids, k, cfg.threads));
        std::printf("top-k deletion:\n%s", format_deletion_table(rows).c_str());
        double random_mean = 0.0;
        for (int s = 0; s < cfg.deletion_seeds; ++s)
            random_mean += random_deletion_control(ckpt.params, state, dataset, test_ids, 1,
                                                   cfg.seed + static_cast<uint64_t>(s), cfg.threads)
                               .degradation_percent;
        random_mean /= cfg.deletion_seeds;
        std::printf("random single-voxel control (mean of %d seeds): %.2f%%\n", cfg.deletion_seeds,
                    random_mean);
        json deletions = json::array();
        for (const auto& r : rows)
            deletions.push_back({{"k", r.k},
                                 {"baseline_accuracy", r.baseline_accuracy},
                                 {"perturbed_accuracy", r.perturbed_accuracy},
                                 {"degradation_percent", r.degradation_percent},
                                 {"emptied_samples", r.emptied_samples}});
        report["deletion"] = deletions;
        report["random_deletion_mean_percent"] = random_mean;
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(out_dir / "evaluation.json");
        out << report.dump(2) << "\n";
        cfg.echo(out_dir);
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& data, const fs::path& out_dir) {
    require_artifact(data, "generate");
    fs::create_directories(out_dir);
    AblationGrids grids;
    grids.lambda = cfg.ablate_lambda;
    grids.grid_size = cfg.ablate_grid_size;
    grids.channels = cfg.ablate_channels;
    if (grids.lambda.empty() && grids.grid_size.empty() && grids.channels.empty())
        fail("no ablation grid given", "set --ablate-lambda / --ablate-grid-size / --ablate-channels");

    DatasetManifest manifest = load_manifest(data); // validates before the long runs
    (void)manifest;
    const auto dataset_for_grid = [&](int grid) { return load_dataset(data, grid); };
    const Dataset probe = dataset_for_grid(cfg.grid_size);
    const auto rows =
        ablation_run(grids, dataset_for_grid, cfg.stage1(probe.num_classes()), cfg.stage2());

    const std::string table = format_ablation_table(rows);
    std::printf("%s", table.c_str());
    std::ofstream txt(out_dir / "ablation.txt");
    txt << table;
    json j = json::array();
    for (const auto& r : rows)
        j.push_back({{"parameter", r.parameter},
                     {"value", r.value},
                     {"accuracy", r.accuracy},
                     {"purity_gain_percent", r.purity_gain_pct},
                     {"mean_density", r.mean_density},
                     {"ok", r.ok},
                     {"error", r.error}});
    std::ofstream out(out_dir / "ablation.json");
    out << j.dump(2) << "\n";
    cfg.echo(out_dir);
    return 0;
}

int cmd_gradcheck(const fs::path& out_dir) {
    const auto cases = run_gradcheck_suite();
    bool all_pass = true;
    for (const auto& c : cases) {
        std::printf("%-24s max rel err %.3e (threshold %.0e, %lld coords) %s\n", c.name.c_str(),
                    c.max_rel_error, c.threshold, static_cast<long long>(c.coords_checked),
                    c.pass ? "ok" : "FAIL");
        all_pass = all_pass && c.pass;
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        json j = json::array();
        for (const auto& c : cases)
            j.push_back({{"name", c.name},
                         {"max_rel_error", c.max_rel_error},
                         {"threshold", c.threshold},
                         {"pass", c.pass}});
        std::ofstream out(out_dir / "gradcheck.json");
        out << j.dump(2) << "\n";
    }
    if (!all_pass) fail("gradient check failed");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    // --config is read before flag parsing so that flags override the file.
    RunConfig cfg;
    try {
        for (int i = 1; i + 1 < argc; ++i)
            if (std::string(argv[i]) == "--config") cfg = RunConfig::from_file(argv[i + 1]);
    } catch (const std::exception& e) {
        fail(e.what());
    }

    CLI::App app{"Voxel-aggregated splat classification with prototype explanations"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");
    app.add_option("--seed", cfg.seed, "Random seed");
    app.add_option("--threads", cfg.threads, "Worker threads")->envname("XSPLAIN_THREADS");

    std::string out_dir, data_path, checkpoint_path, state_path, sample_id;
    std::string classes_csv, ablate_lambda_csv, ablate_grid_csv, ablate_channels_csv;
    bool force = false;

    auto add_hyper_flags = [&](CLI::App* sub) {
        sub->add_option("--grid-size", cfg.grid_size, "Voxel grid size G");
        sub->add_option("--channels", cfg.channels, "Latent feature dimension C");
        sub->add_option("--lambda-density", cfg.lambda_density, "Density regularization weight");
        sub->add_option("--tau", cfg.tau, "Activation softmax temperature");
        sub->add_option("--beta", cfg.beta, "Density exponent");
    };

    CLI::App* generate = app.add_subcommand("generate", "Write a synthetic splat dataset");
    generate->add_option("--out", out_dir, "Output directory")->required();
    generate->add_flag("--force", force, "Overwrite a non-empty output directory");
    generate->add_option("--classes", classes_csv, "Comma-separated class list");
    generate->add_option("--per-class", cfg.per_class, "Samples per class");
    generate->add_option("--primitives", cfg.primitives, "Primitives per sample");
    generate->add_option("--feature-mode", cfg.feature_mode, "gaussian-11d or pointcloud-6d");
    generate->add_option("--grid-size", cfg.grid_size, "Voxel grid size G");

    CLI::App* train = app.add_subcommand("train", "Stage 1: train the classifier");
    train->add_option("--data", data_path, "Dataset manifest")->required();
    train->add_option("--out", out_dir, "Output directory")->required();
    train->add_option("--epochs", cfg.epochs, "Max epochs");
    train->add_option("--batch-size", cfg.batch_size, "Batch size");
    train->add_option("--lr", cfg.lr, "Learning rate");
    train->add_option("--patience", cfg.patience, "Early-stop patience (0 disables)");
    add_hyper_flags(train);

    CLI::App* disentangle = app.add_subcommand("disentangle", "Stage 2: learn the orthogonal map");
    disentangle->add_option("--checkpoint", checkpoint_path, "Backbone checkpoint")->required();
    disentangle->add_option("--data", data_path, "Dataset manifest")->required();
    disentangle->add_option("--out", out_dir, "Output directory")->required();
    disentangle->add_option("--stage2-epochs", cfg.stage2_epochs, "Stage-2 epochs");
    disentangle->add_option("--stage2-lr", cfg.stage2_lr, "Stage-2 learning rate");
    disentangle->add_option("--k-init", cfg.k_init, "Initial prototypes per channel");
    disentangle->add_option("--k-final", cfg.k_final, "Final prototypes per channel");

    CLI::App* explain_cmd = app.add_subcommand("explain", "Explain one sample");
    explain_cmd->add_option("--checkpoint", checkpoint_path, "Backbone checkpoint")->required();
    explain_cmd->add_option("--state", state_path, "Disentangle state")->required();
    explain_cmd->add_option("--data", data_path, "Dataset manifest")->required();
    explain_cmd->add_option("--sample", sample_id, "Sample id")->required();
    explain_cmd->add_option("--out", out_dir, "Output directory")->required();
    explain_cmd->add_option("--top-m", cfg.top_m, "Channels per explanation");

    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Accuracy, preservation and deletion tests");
    evaluate_cmd->add_option("--checkpoint", checkpoint_path, "Backbone checkpoint")->required();
    evaluate_cmd->add_option("--data", data_path, "Dataset manifest")->required();
    evaluate_cmd->add_option("--state", state_path, "Disentangle state (enables preservation/deletion)");
    evaluate_cmd->add_option("--out", out_dir, "Optional report directory");
    evaluate_cmd->add_option("--top-k-delete", cfg.top_k_delete, "Max k for deletion tests");
    evaluate_cmd->add_option("--deletion-seeds", cfg.deletion_seeds, "Seeds for the random control");

    CLI::App* ablate = app.add_subcommand("ablate", "Hyperparameter ablation grid");
    ablate->add_option("--data", data_path, "Dataset manifest")->required();
    ablate->add_option("--out", out_dir, "Output directory")->required();
    ablate->add_option("--ablate-lambda", ablate_lambda_csv, "Comma-separated lambda values");
    ablate->add_option("--ablate-grid-size", ablate_grid_csv, "Comma-separated grid sizes");
    ablate->add_option("--ablate-channels", ablate_channels_csv, "Comma-separated channel counts");
    ablate->add_option("--epochs", cfg.epochs, "Max epochs per row");
    ablate->add_option("--stage2-epochs", cfg.stage2_epochs, "Stage-2 epochs per row");
    add_hyper_flags(ablate);

    CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient oracle suite");
    gradcheck_cmd->add_option("--out", out_dir, "Optional report directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!classes_csv.empty()) cfg.classes = split_csv(classes_csv);
        if (!ablate_lambda_csv.empty()) cfg.ablate_lambda = split_csv_numbers<double>(ablate_lambda_csv);
        if (!ablate_grid_csv.empty()) cfg.ablate_grid_size = split_csv_numbers<int>(ablate_grid_csv);
        if (!ablate_channels_csv.empty()) cfg.ablate_channels = split_csv_numbers<int>(ablate_channels_csv);
        cfg.validate();

        if (generate->parsed()) return cmd_generate(cfg, out_dir, force);
        if (train->parsed()) return cmd_train(cfg, data_path, out_dir);
        if (disentangle->parsed()) return cmd_disentangle(cfg, checkpoint_path, data_path, out_dir);
        if (explain_cmd->parsed())
            return cmd_explain(cfg, checkpoint_path, state_path, data_path, sample_id, out_dir);
        if (evaluate_cmd->parsed())
            return cmd_evaluate(cfg, checkpoint_path, state_path, data_path, out_dir);
        if (ablate->parsed()) return cmd_ablate(cfg, data_path, out_dir);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(out_dir);
    } catch (const std::exception& e) {
        fail(e.what());
    }
    return 0;
}
