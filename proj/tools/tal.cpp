// Command-line front end: tal <command> [--config f] [--seed n] [--workdir d] [--set k=v]...

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tal/error.hpp"
#include "tal/pipeline.hpp"

int main(int argc, char** argv)
{
    CLI::App app{"Temporal action localization pipeline on synthetic clip features"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_file;
    std::string workdir;
    std::vector<std::string> overrides;
    long long seed = -1;
    app.add_option("--config", config_file, "JSON config document")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "seed for every stage");
    app.add_option("--workdir", workdir, "work directory");
    app.add_option("--set", overrides, "override, e.g. --set bmn.epochs=5")
        ->allow_extra_args(false)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

    auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    auto* train = app.add_subcommand("train", "train one model");
    std::string target;
    train->add_option("target", target, "bmn | tcanet | classifier")
        ->required()
        ->check(CLI::IsMember({"bmn", "tcanet", "classifier"}));
    auto* infer = app.add_subcommand("infer", "write proposal, score and detection dumps");
    auto* eval = app.add_subcommand("eval", "score detections");
    std::string split = "val";
    for (auto* sub : {infer, eval})
        sub->add_option("--split", split, "train | val")->check(CLI::IsMember({"train", "val"}));
    auto* repro = app.add_subcommand("repro", "synth, train all, infer and eval in one go");
    auto* show = app.add_subcommand("config", "print the effective config");

    CLI11_PARSE(app, argc, argv);

    try {
        if (seed >= 0)
            overrides.push_back("seed=" + std::to_string(seed));
        if (!workdir.empty())
            overrides.push_back("paths.workdir=\"" + workdir + "\"");
        const tal::PipelineConfig cfg = tal::load_config(config_file, overrides);

        if (synth->parsed())
            tal::cmd_synth(cfg, std::cout);
        else if (train->parsed())
            tal::cmd_train(cfg, target, std::cout);
        else if (infer->parsed())
            tal::cmd_infer(cfg, split, std::cout);
        else if (eval->parsed())
            std::cout << tal::cmd_eval(cfg, split, std::cout).dump(2) << '\n';
        else if (repro->parsed())
            tal::cmd_repro(cfg, std::cout);
        else if (show->parsed())
            std::cout << tal::to_json(cfg).dump(2) << '\n';
    } catch (const tal::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const tal::MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
