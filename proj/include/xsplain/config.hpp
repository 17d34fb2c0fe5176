#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xsplain/disentangler.hpp"
#include "xsplain/trainer.hpp"

namespace xsplain {

// Resolved run settings: one structured config file plus flag overrides
// (flags win). Unknown keys in the file are rejected.
struct RunConfig {
    uint64_t seed = 1;
    int threads = 1;

    // hyper block
    int grid_size = 7;
    int channels = 256;
    double lambda_density = 3.5;
    double tau = 1.0;
    double beta = 1.0;
    double eps = 1e-6;
    int top_m = 4;
    int k_init = 10;
    int k_final = 3;

    // synthetic data generation
    std::vector<std::string> classes = {"sphere", "box", "torus", "cylinder"};
    int per_class = 200;
    int primitives = 512;
    std::vector<double> split_ratios = {0.8, 0.1, 0.1};
    std::string feature_mode = "gaussian-11d";

    // stage 1
    double lr = 1e-3;
    int epochs = 60;
    int batch_size = 16;
    int patience = 15;

    // stage 2
    double stage2_lr = 1e-4;
    int stage2_epochs = 50;
    int update_period = 5;
    int batch_pairs = 64;

    // evaluation
    int top_k_delete = 5;
    int deletion_seeds = 20;

    // ablation grids
    std::vector<double> ablate_lambda;
    std::vector<int> ablate_grid_size;
    std::vector<int> ablate_channels;

    void validate() const;

    Hyper hyper(int num_classes) const;
    StageOneConfig stage1(int num_classes) const;
    StageTwoConfig stage2() const;

    static RunConfig from_file(const std::filesystem::path& path);
    std::string to_json_string() const;
    void echo(const std::filesystem::path& out_dir) const; // resolved_config.json
};

} // namespace xsplain
