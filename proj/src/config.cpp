#include "xsplain/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace xsplain {

using json = nlohmann::json;

void RunConfig::validate() const {
    hyper(2).validate();
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (top_m < 1) throw ConfigError("top_m must be >= 1");
    if (k_init < k_final || k_final < 1) throw ConfigError("need k_init >= k_final >= 1");
    if (classes.empty()) throw ConfigError("class list is empty");
    for (const auto& c : classes)
        if (std::find(synthetic::kClasses.begin(), synthetic::kClasses.end(), c) == synthetic::kClasses.end())
            throw ConfigError("unknown synthetic class '" + c + "'");
    if (per_class < 3) throw ConfigError("per_class must be >= 3");
    if (primitives < 32) throw ConfigError("primitives must be >= 32");
    if (split_ratios.size() != 3) throw ConfigError("split_ratios needs 3 entries");
    feature_mode_from_string(feature_mode);
    if (!(lr > 0.0) || !(stage2_lr > 0.0)) throw ConfigError("learning rates must be > 0");
    if (epochs < 0 || stage2_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    if (batch_size < 1 || batch_pairs < 1) throw ConfigError("batch sizes must be >= 1");
    if (update_period < 1) throw ConfigError("update_period must be >= 1");
    if (top_k_delete < 1) throw ConfigError("top_k_delete must be >= 1");
    if (deletion_seeds < 1) throw ConfigError("deletion_seeds must be >= 1");
}

Hyper RunConfig::hyper(int num_classes) const {
    Hyper h;
    h.grid_size = grid_size;
    h.channels = channels;
    h.num_classes = num_classes;
    h.tau = static_cast<float>(tau);
    h.beta = static_cast<float>(beta);
    h.eps = static_cast<float>(eps);
    h.lambda_density = static_cast<float>(lambda_density);
    return h;
}

StageOneConfig RunConfig::stage1(int num_classes) const {
    StageOneConfig c;
    c.hyper = hyper(num_classes);
    c.lr = static_cast<float>(lr);
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.patience = patience;
    c.seed = seed;
    c.threads = threads;
    return c;
}

StageTwoConfig RunConfig::stage2() const {
    StageTwoConfig c;
    c.curriculum.k_init = k_init;
    c.curriculum.k_final = k_final;
    c.curriculum.epochs = stage2_epochs;
    c.curriculum.update_period = update_period;
    c.lr = static_cast<float>(stage2_lr);
    c.batch_pairs = batch_pairs;
    c.seed = seed;
    c.threads = threads;
    c.eps = static_cast<float>(eps);
    return c;
}

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed",          "threads",       "grid_size",     "channels",     "lambda_density",
        "tau",           "beta",          "eps",           "top_m",        "k_init",
        "k_final",       "classes",       "per_class",     "primitives",   "split_ratios",
        "feature_mode",  "lr",            "epochs",        "batch_size",   "patience",
        "stage2_lr",     "stage2_epochs", "update_period", "batch_pairs",  "top_k_delete",
        "deletion_seeds", "ablate_lambda", "ablate_grid_size", "ablate_channels"};
    return keys;
}

} // namespace

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(path.string() + ": config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known_keys().count(key))
            throw ConfigError(path.string() + ": unknown config key '" + key + "'");

    RunConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("seed", c.seed);
        get("threads", c.threads);
        get("grid_size", c.grid_size);
        get("channels", c.channels);
        get("lambda_density", c.lambda_density);
        get("tau", c.tau);
        get("beta", c.beta);
        get("eps", c.eps);
        get("top_m", c.top_m);
        get("k_init", c.k_init);
        get("k_final", c.k_final);
        get("classes", c.classes);
        get("per_class", c.per_class);
        get("primitives", c.primitives);
        get("split_ratios", c.split_ratios);
        get("feature_mode", c.feature_mode);
        get("lr", c.lr);
        get("epochs", c.epochs);
        get("batch_size", c.batch_size);
        get("patience", c.patience);
        get("stage2_lr", c.stage2_lr);
        get("stage2_epochs", c.stage2_epochs);
        get("update_period", c.update_period);
        get("batch_pairs", c.batch_pairs);
        get("top_k_delete", c.top_k_delete);
        get("deletion_seeds", c.deletion_seeds);
        get("ablate_lambda", c.ablate_lambda);
        get("ablate_grid_size", c.ablate_grid_size);
        get("ablate_channels", c.ablate_channels);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return c;
}

std::string RunConfig::to_json_string() const {
    json j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["grid_size"] = grid_size;
    j["channels"] = channels;
    j["lambda_density"] = lambda_density;
    j["tau"] = tau;
    j["beta"] = beta;
    j["eps"] = eps;
    j["top_m"] = top_m;
    j["k_init"] = k_init;
    j["k_final"] = k_final;
    j["classes"] = classes;
    j["per_class"] = per_class;
    j["primitives"] = primitives;
    j["split_ratios"] = split_ratios;
    j["feature_mode"] = feature_mode;
    j["lr"] = lr;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["patience"] = patience;
    j["stage2_lr"] = stage2_lr;
    j["stage2_epochs"] = stage2_epochs;
    j["update_period"] = update_period;
    j["batch_pairs"] = batch_pairs;
    j["top_k_delete"] = top_k_delete;
    j["deletion_seeds"] = deletion_seeds;
    j["ablate_lambda"] = ablate_lambda;
    j["ablate_grid_size"] = ablate_grid_size;
    j["ablate_channels"] = ablate_channels;
    return j.dump(2);
}

void RunConfig::echo(const std::filesystem::path& out_dir) const {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    std::ofstream out(out_dir / "resolved_config.json");
    if (!out) throw IoError("cannot write '" + (out_dir / "resolved_config.json").string() + "'");
    out << to_json_string() << "\n";
}

} // namespace xsplain
