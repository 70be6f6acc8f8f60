#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "evoloss/meta.hpp"
#include "evoloss/tasks.hpp"

namespace evoloss {

// Configuration problem; what() carries the dotted field path.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TaskFamily { Sine, Blobs, Csv };

struct TaskFamilyConfig {
    TaskFamily family = TaskFamily::Sine;
    int n_train = 5;
    int n_test = 5;
    // sine
    std::pair<double, double> train_x_range{-2.0, 2.0};
    std::pair<double, double> test_x_range{-5.0, 5.0};
    // blobs
    BlobSpec blobs;
    // csv
    std::vector<std::string> train_paths;
    std::vector<std::string> test_paths;
    CsvSchema csv;
};

struct RunConfig {
    Method method = Method::Baseline;
    std::uint64_t seed = 0;
    bool wrapper = true;
    int workers = 1;
    int curve_interval = 50;
    std::string output_dir;  // resolved against the default output root when relative/empty
    TaskFamilyConfig tasks;
    GpConfig gp;
    MetaConfig meta;
    LearnerSpec learner;

    // Strict parse: unknown keys and type mismatches throw ConfigError naming
    // the field path. Values absent from the file keep the defaults above.
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);

    std::string to_json() const;  // resolved snapshot, reproduces the run
    void validate() const;
    MetaDataset build_tasks() const;
    MethodRunParams run_params() const;
};

// $EVOLOSS_OUT when set, "runs" otherwise.
std::string default_output_root();

// Directory the run writes into: output_dir when set in the config, else
// <root>/<method>_seed<seed>.
std::string resolve_output_dir(const RunConfig& cfg);

void write_run_record(const std::string& dir, const RunConfig& cfg, const MethodResult& result);
void append_curves_csv(const std::string& path, std::uint64_t seed, const std::string& method,
                       const MetaDataset& data, const std::vector<TaskCurve>& curves);

struct ReportRow {
    std::string method;
    std::string split;
    int n_runs = 0;
    double mean = 0.0;
    double sd = 0.0;
};

struct Report {
    std::vector<ReportRow> rows;
    std::vector<std::string> warnings;  // skipped directories, with reasons
};

Report collect_report(const std::vector<std::string>& run_dirs);
std::string format_report_text(const Report& report);
std::string format_report_csv(const Report& report);

// Command entry points; return process exit codes (0 ok, 1 usage/config,
// 2 runtime failure).
int cmd_meta_train(const std::string& config_path);
int cmd_meta_test(const std::string& loss_path, const std::string& config_path);
int cmd_report(const std::vector<std::string>& run_dirs);

}  // namespace evoloss
