// Command-line driver: gen-data, train, eval, ablate.
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <functional>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "vfda/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON experiment configuration (defaults apply if omitted)");
    cmd->add_option("--seed", args.seed, "override the configuration seed");
    cmd->add_option("--out", args.out_dir, "override the configuration output directory");
}

vfda::ExperimentConfig load_config(const CommonArgs& args) {
    vfda::ExperimentConfig cfg =
        args.config_path.empty() ? vfda::parse_config_text("") : vfda::parse_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out_dir) cfg.out_dir = *args.out_dir;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated simulator for 3D segmentation with feature-statistics augmentation"};
    app.require_subcommand(1);

    std::function<void()> task;

    CommonArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen-data", "write client shards and the eval set as .fvx volumes");
    add_common(gen, gen_args);
    gen->callback([&] {
        task = [&] { vfda::cmd_gen_data(load_config(gen_args), std::cout); };
    });

    CommonArgs train_args;
    bool no_emd = false, no_global_var = false, no_vfda = false, mixup = false;
    CLI::App* train = app.add_subcommand("train", "run the federation and write metrics.csv + model.fvp");
    add_common(train, train_args);
    train->add_flag("--no-emd", no_emd, "upload last-batch statistics instead of momentum-accumulated ones");
    train->add_flag("--no-global-var", no_global_var, "combine with local statistic variances only");
    train->add_flag("--no-vfda", no_vfda, "disable the augmentation entirely");
    train->add_flag("--mixup", mixup, "replace the augmentation with input-space mixup");
    train->callback([&] {
        task = [&] {
            vfda::ExperimentConfig cfg = load_config(train_args);
            if (no_emd) cfg.federation.no_emd = true;
            if (no_global_var) cfg.federation.no_global_variance = true;
            if (no_vfda) cfg.federation.no_vfda = true;
            if (mixup) cfg.federation.mixup_baseline = true;
            cfg.validate();
            vfda::cmd_train(cfg, std::cout);
        };
    });

    CommonArgs ablate_args;
    CLI::App* ablate = app.add_subcommand("ablate", "run all five training variants and write ablation_table.csv");
    add_common(ablate, ablate_args);
    ablate->callback([&] {
        task = [&] { vfda::cmd_ablate(load_config(ablate_args), std::cout); };
    });

    std::string model_path, data_dir, eval_out = ".";
    CLI::App* eval = app.add_subcommand("eval", "evaluate a saved model on a directory of .fvx volumes");
    eval->add_option("--model", model_path, "model file (.fvp)")->required();
    eval->add_option("--data", data_dir, "directory containing sample_<k>.fvx volumes")->required();
    eval->add_option("--out", eval_out, "directory for eval_report.json");
    eval->callback([&] {
        task = [&] { vfda::cmd_eval(model_path, data_dir, eval_out, std::cout); };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        task();
    } catch (const vfda::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
