#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mteeg/experiment.hpp"

namespace {

int dispatch(const std::string& command, const mteeg::ExperimentConfig& config) {
    if (command == "gen-data") {
        mteeg::run_gen_data(config);
    } else if (command == "train") {
        mteeg::run_train(config);
    } else if (command == "eval") {
        mteeg::run_eval(config);
    } else if (command == "analyze") {
        mteeg::run_analyze(config);
    } else if (command == "param-count") {
        mteeg::run_param_count(config, std::cout);
    } else {
        std::cerr << "unknown command '" << command
                  << "' (expected gen-data|train|eval|analyze|param-count)\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task EEG adapter experiments"};

    std::string command;
    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("command", command, "gen-data|train|eval|analyze|param-count")->required();
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    CLI11_PARSE(app, argc, argv);

    try {
        const auto config = config_path.empty()
                                ? mteeg::ExperimentConfig::from_overrides(overrides)
                                : mteeg::ExperimentConfig::from_file(config_path, overrides);
        return dispatch(command, config);
    } catch (const mteeg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mteeg::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const mteeg::FileError& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
