#pragma once

// Command-line front end: subcommands synth, train, cv, ablate, correlate,
// irr and gradcheck.

#include "dfm/data.hpp"
#include "dfm/harness.hpp"
#include "dfm/model.hpp"
#include "dfm/train.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace dfm {

struct GridSpec {
    std::vector<double> lr = {1e-4, 1e-5};
    std::vector<std::size_t> batch_size = {8, 16, 32};
    std::vector<int> num_fusion_modules = {1, 2, 3, 4, 5};

    std::vector<GridPoint> points() const;
};

// Everything a run depends on.  Written to <out>/run_config.json; passing it
// back through --config reproduces the run.
struct RunConfig {
    std::string command;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    bool verbose = false;
    std::string manifest;
    std::string out;
    std::string predictions;

    ModelConfig model;
    TrainConfig train;
    GridSpec grid;
    std::size_t n_outer = 5;
    std::size_t n_inner = 3;
    std::vector<std::string> ablation_axes = {"modalities", "encoder", "task", "loss"};
    AblationAxes ablation = default_axes();
    SynthConfig synth;
    double gradcheck_tol = 1e-5;
    bool inject_fault = false;

    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
};

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

// argv-style entry point (args[0] is the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dfm
