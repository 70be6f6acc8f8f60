#include <CLI11.hpp>
#include <string>
#include <vector>

#include "evoloss/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"loss-function learning experiment runner"};
    app.require_subcommand(1);

    std::string train_config;
    CLI::App* train = app.add_subcommand("meta-train", "search for / fit a loss and evaluate it");
    train->add_option("--config", train_config, "run config (json)")->required();

    std::string test_config;
    std::string loss_path;
    CLI::App* test = app.add_subcommand("meta-test", "train fresh learners under a saved loss");
    test->add_option("--loss", loss_path, "exported loss file, or 'baseline'")->required();
    test->add_option("--config", test_config, "run config (json)")->required();

    std::vector<std::string> run_dirs;
    CLI::App* report = app.add_subcommand("report", "summarize finished runs");
    report->add_option("dirs", run_dirs, "run directories");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    if (train->parsed()) return evoloss::cmd_meta_train(train_config);
    if (test->parsed()) return evoloss::cmd_meta_test(loss_path, test_config);
    return evoloss::cmd_report(run_dirs);
}
