#include "evoloss/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace evoloss {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& why) {
    throw ConfigError(path + ": " + why);
}

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) bad(path, "expected an object");
    for (const auto& item : obj.items()) {
        if (!allowed.contains(item.key())) bad(path + "." + item.key(), "unknown key");
    }
}

template <typename T>
void read_field(const json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        bad(path + "." + key, "wrong type");
    }
}

void read_range(const json& obj, const std::string& path, const char* key,
                std::pair<double, double>& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        bad(path + "." + key, "expected [lo, hi]");
    }
    out = {v[0].get<double>(), v[1].get<double>()};
}

std::string fmt17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

json json_number(double x) {
    // nlohmann turns non-finite numbers into null; keep them readable instead.
    if (std::isfinite(x)) return x;
    return x > 0 ? "inf" : "-inf";
}

double number_or_inf(const json& v, const std::string& path) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw ConfigError(path + ": expected a number");
}

const char* family_name(TaskFamily f) {
    switch (f) {
        case TaskFamily::Sine: return "sine";
        case TaskFamily::Blobs: return "blobs";
        case TaskFamily::Csv: return "csv";
    }
    return "?";
}

const char* kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Regression: return "regression";
        case TaskKind::Binary: return "binary";
        case TaskKind::Multiclass: return "multiclass";
    }
    return "?";
}

const char* metric_name(PerfMetricKind k) {
    return k == PerfMetricKind::Mse ? "mse" : "error_rate";
}

TaskFamilyConfig parse_tasks(const json& obj) {
    TaskFamilyConfig t;
    std::string family = "sine";
    read_field(obj, "tasks", "family", family);
    if (family == "sine") {
        t.family = TaskFamily::Sine;
        check_keys(obj, "tasks", {"family", "n_train", "n_test", "train_x_range", "test_x_range"});
        read_field(obj, "tasks", "n_train", t.n_train);
        read_field(obj, "tasks", "n_test", t.n_test);
        read_range(obj, "tasks", "train_x_range", t.train_x_range);
        read_range(obj, "tasks", "test_x_range", t.test_x_range);
    } else if (family == "blobs") {
        t.family = TaskFamily::Blobs;
        check_keys(obj, "tasks",
                   {"family", "n_train", "n_test", "n_classes", "d_in", "separation",
                    "noise_sigma", "binary_labels"});
        read_field(obj, "tasks", "n_train", t.n_train);
        read_field(obj, "tasks", "n_test", t.n_test);
        read_field(obj, "tasks", "n_classes", t.blobs.n_classes);
        read_field(obj, "tasks", "d_in", t.blobs.d_in);
        read_field(obj, "tasks", "separation", t.blobs.separation);
        read_field(obj, "tasks", "noise_sigma", t.blobs.noise_sigma);
        read_field(obj, "tasks", "binary_labels", t.blobs.binary_labels);
    } else if (family == "csv") {
        t.family = TaskFamily::Csv;
        check_keys(obj, "tasks",
                   {"family", "train_paths", "test_paths", "feature_columns", "label_column",
                    "kind", "n_classes", "standardize"});
        read_field(obj, "tasks", "train_paths", t.train_paths);
        read_field(obj, "tasks", "test_paths", t.test_paths);
        read_field(obj, "tasks", "feature_columns", t.csv.feature_columns);
        read_field(obj, "tasks", "label_column", t.csv.label_column);
        std::string kind = "regression";
        read_field(obj, "tasks", "kind", kind);
        if (kind == "regression") {
            t.csv.kind = TaskKind::Regression;
        } else if (kind == "binary") {
            t.csv.kind = TaskKind::Binary;
        } else if (kind == "multiclass") {
            t.csv.kind = TaskKind::Multiclass;
        } else {
            bad("tasks.kind", "expected regression, binary, or multiclass");
        }
        read_field(obj, "tasks", "n_classes", t.csv.n_classes);
        read_field(obj, "tasks", "standardize", t.csv.standardize);
    } else {
        bad("tasks.family", "expected sine, blobs, or csv");
    }
    return t;
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    check_keys(j, "config",
               {"method", "seed", "wrapper", "workers", "curve_interval", "output_dir", "tasks",
                "gp", "meta", "learner"});

    RunConfig cfg;
    std::string method = "baseline";
    read_field(j, "config", "method", method);
    const auto m = method_from_name(method);
    if (!m) bad("config.method", "expected baseline, random, gp-lfl, ml3, or evomal");
    cfg.method = *m;
    read_field(j, "config", "seed", cfg.seed);
    read_field(j, "config", "wrapper", cfg.wrapper);
    read_field(j, "config", "workers", cfg.workers);
    read_field(j, "config", "curve_interval", cfg.curve_interval);
    read_field(j, "config", "output_dir", cfg.output_dir);

    if (j.contains("tasks")) cfg.tasks = parse_tasks(j.at("tasks"));

    if (j.contains("gp")) {
        const json& g = j.at("gp");
        check_keys(g, "gp",
                   {"population_size", "generations", "crossover_rate", "mutation_rate",
                    "tournament_size", "elitism_rate", "min_init_depth", "max_init_depth",
                    "max_depth"});
        read_field(g, "gp", "population_size", cfg.gp.population_size);
        read_field(g, "gp", "generations", cfg.gp.generations);
        read_field(g, "gp", "crossover_rate", cfg.gp.crossover_rate);
        read_field(g, "gp", "mutation_rate", cfg.gp.mutation_rate);
        read_field(g, "gp", "tournament_size", cfg.gp.tournament_size);
        read_field(g, "gp", "elitism_rate", cfg.gp.elitism_rate);
        read_field(g, "gp", "min_init_depth", cfg.gp.min_init_depth);
        read_field(g, "gp", "max_init_depth", cfg.gp.max_init_depth);
        read_field(g, "gp", "max_depth", cfg.gp.max_depth);
    }
    if (j.contains("meta")) {
        const json& g = j.at("meta");
        check_keys(g, "meta",
                   {"s_meta", "s_base", "s_base_eval", "alpha", "eta", "batch_size",
                    "unroll_window"});
        read_field(g, "meta", "s_meta", cfg.meta.s_meta);
        read_field(g, "meta", "s_base", cfg.meta.s_base);
        read_field(g, "meta", "s_base_eval", cfg.meta.s_base_eval);
        read_field(g, "meta", "alpha", cfg.meta.alpha);
        read_field(g, "meta", "eta", cfg.meta.eta);
        read_field(g, "meta", "batch_size", cfg.meta.batch_size);
        read_field(g, "meta", "unroll_window", cfg.meta.unroll_window);
    }
    if (j.contains("learner")) {
        const json& g = j.at("learner");
        check_keys(g, "learner", {"hidden", "with_bias"});
        read_field(g, "learner", "hidden", cfg.learner.hidden);
        read_field(g, "learner", "with_bias", cfg.learner.with_bias);
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

void RunConfig::validate() const {
    gp.validate();
    meta.validate();
    if (workers < 1) bad("config.workers", "must be >= 1");
    if (curve_interval < 1) bad("config.curve_interval", "must be >= 1");
    if (tasks.family == TaskFamily::Csv) {
        if (tasks.train_paths.empty()) bad("tasks.train_paths", "must name at least one file");
    } else {
        if (tasks.n_train < 1) bad("tasks.n_train", "must be >= 1");
        if (tasks.n_test < 0) bad("tasks.n_test", "must be >= 0");
    }
    if (learner.hidden.empty()) bad("learner.hidden", "must name at least one layer width");
    for (int h : learner.hidden) {
        if (h < 1) bad("learner.hidden", "layer widths must be >= 1");
    }
}

std::string RunConfig::to_json() const {
    json j;
    j["method"] = method_name(method);
    j["seed"] = seed;
    j["wrapper"] = wrapper;
    j["workers"] = workers;
    j["curve_interval"] = curve_interval;
    j["output_dir"] = output_dir;
    json t;
    t["family"] = family_name(tasks.family);
    switch (tasks.family) {
        case TaskFamily::Sine:
            t["n_train"] = tasks.n_train;
            t["n_test"] = tasks.n_test;
            t["train_x_range"] = {tasks.train_x_range.first, tasks.train_x_range.second};
            t["test_x_range"] = {tasks.test_x_range.first, tasks.test_x_range.second};
            break;
        case TaskFamily::Blobs:
            t["n_train"] = tasks.n_train;
            t["n_test"] = tasks.n_test;
            t["n_classes"] = tasks.blobs.n_classes;
            t["d_in"] = tasks.blobs.d_in;
            t["separation"] = tasks.blobs.separation;
            t["noise_sigma"] = tasks.blobs.noise_sigma;
            t["binary_labels"] = tasks.blobs.binary_labels;
            break;
        case TaskFamily::Csv:
            t["train_paths"] = tasks.train_paths;
            t["test_paths"] = tasks.test_paths;
            t["feature_columns"] = tasks.csv.feature_columns;
            t["label_column"] = tasks.csv.label_column;
            t["kind"] = kind_name(tasks.csv.kind);
            t["n_classes"] = tasks.csv.n_classes;
            t["standardize"] = tasks.csv.standardize;
            break;
    }
    j["tasks"] = std::move(t);
    j["gp"] = {{"population_size", gp.population_size},
               {"generations", gp.generations},
               {"crossover_rate", gp.crossover_rate},
               {"mutation_rate", gp.mutation_rate},
               {"tournament_size", gp.tournament_size},
               {"elitism_rate", gp.elitism_rate},
               {"min_init_depth", gp.min_init_depth},
               {"max_init_depth", gp.max_init_depth},
               {"max_depth", gp.max_depth}};
    j["meta"] = {{"s_meta", meta.s_meta},
                 {"s_base", meta.s_base},
                 {"s_base_eval", meta.s_base_eval},
                 {"alpha", meta.alpha},
                 {"eta", meta.eta},
                 {"batch_size", meta.batch_size},
                 {"unroll_window", meta.unroll_window}};
    j["learner"] = {{"hidden", learner.hidden}, {"with_bias", learner.with_bias}};
    return j.dump(2);
}

MetaDataset RunConfig::build_tasks() const {
    MetaDataset data;
    Rng train_rng = make_rng(seed, 0x51u);
    Rng test_rng = make_rng(seed, 0x52u);
    switch (tasks.family) {
        case TaskFamily::Sine:
            data.train_tasks = sample_sine_tasks(train_rng, tasks.n_train, tasks.train_x_range);
            if (tasks.n_test > 0) {
                data.test_tasks = sample_sine_tasks(test_rng, tasks.n_test, tasks.test_x_range);
            }
            break;
        case TaskFamily::Blobs:
            for (int i = 0; i < tasks.n_train; ++i) {
                Task t = make_synthetic_classification(train_rng, tasks.blobs);
                t.name += "_" + std::to_string(i);
                data.train_tasks.push_back(std::move(t));
            }
            for (int i = 0; i < tasks.n_test; ++i) {
                Task t = make_synthetic_classification(test_rng, tasks.blobs);
                t.name += "_" + std::to_string(i);
                data.test_tasks.push_back(std::move(t));
            }
            break;
        case TaskFamily::Csv:
            for (const auto& p : tasks.train_paths) data.train_tasks.push_back(load_csv_task(p, tasks.csv));
            for (const auto& p : tasks.test_paths) data.test_tasks.push_back(load_csv_task(p, tasks.csv));
            break;
    }
    return data;
}

MethodRunParams RunConfig::run_params() const {
    MethodRunParams p;
    p.method = method;
    p.gp = gp;
    p.meta = meta;
    p.learner = learner;
    p.wrapper = wrapper;
    p.seed = seed;
    p.workers = workers;
    p.curve_interval = curve_interval;
    return p;
}

std::string default_output_root() {
    if (const char* env = std::getenv("EVOLOSS_OUT"); env != nullptr && *env != '\0') return env;
    return "runs";
}

std::string resolve_output_dir(const RunConfig& cfg) {
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return default_output_root() + "/" + method_name(cfg.method) + "_seed" +
           std::to_string(cfg.seed);
}

void append_curves_csv(const std::string& path, std::uint64_t seed, const std::string& method,
                       const MetaDataset& data, const std::vector<TaskCurve>& curves) {
    const bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    if (fresh) out << "seed,method,task_id,split,step,metric,value\n";
    std::size_t train_i = 0;
    std::size_t test_i = 0;
    for (const TaskCurve& c : curves) {
        const std::vector<Task>& list =
            c.split == "train" ? data.train_tasks : data.test_tasks;
        const std::size_t i = c.split == "train" ? train_i++ : test_i++;
        const char* metric = metric_name(list.at(i).perf_metric_kind());
        for (const CurvePoint& p : c.points) {
            out << seed << ',' << method << ',' << c.task_name << ',' << c.split << ',' << p.step
                << ',' << metric << ',' << fmt17(p.metric) << '\n';
        }
    }
}

void write_run_record(const std::string& dir, const RunConfig& cfg, const MethodResult& result) {
    fs::create_directories(dir);

    json record;
    record["config"] = json::parse(cfg.to_json());
    record["method"] = method_name(cfg.method);
    record["seed"] = cfg.seed;
    record["fitness"] = {{"value", json_number(result.fitness.fitness)},
                         {"diverged", result.fitness.diverged},
                         {"wall_seconds", result.fitness.wall_seconds}};
    json per_task = json::array();
    for (double v : result.fitness.per_task) per_task.push_back(json_number(v));
    record["fitness"]["per_task"] = std::move(per_task);
    record["evaluations"] = result.evaluations;
    record["train_final_metric"] = json_number(result.train_final_metric);
    record["test_final_metric"] = json_number(result.test_final_metric);
    record["wall_seconds"] = result.wall_seconds;
    if (result.search) {
        record["search"] = {{"best_fitness", json_number(result.search->best_fitness)},
                            {"best_expression", serialize(result.search->best)},
                            {"total_evaluations", result.search->total_evaluations},
                            {"total_archive_hits", result.search->total_archive_hits}};
    }
    std::ofstream(dir + "/record.json") << record.dump(2) << '\n';

    if (result.search) {
        std::ofstream hist(dir + "/fitness_history.csv");
        hist << "generation,best_fitness,mean_fitness,evaluations,archive_hits\n";
        for (const GenerationStats& s : result.search->history) {
            hist << s.generation << ',' << fmt17(s.best_fitness) << ',' << fmt17(s.mean_fitness)
                 << ',' << s.evaluations << ',' << s.archive_hits << '\n';
        }
        std::ofstream(dir + "/loss.sexp") << serialize(result.search->best) << '\n';
    }
    if (!result.loss_export.empty()) {
        std::ofstream(dir + "/loss_weights.json") << result.loss_export << '\n';
    }
}

Report collect_report(const std::vector<std::string>& run_dirs) {
    Report report;
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const std::string& dir : run_dirs) {
        const std::string path = dir + "/record.json";
        try {
            std::ifstream in(path);
            if (!in) throw std::runtime_error("missing record.json");
            json record = json::parse(in);
            const std::string method = record.at("method").get<std::string>();
            groups[{method, "train"}].push_back(
                number_or_inf(record.at("train_final_metric"), path + ": train_final_metric"));
            const json& t = record.at("config").at("tasks");
            const bool has_test = t.contains("n_test")
                                      ? t.at("n_test").get<int>() > 0
                                      : t.contains("test_paths") && !t.at("test_paths").empty();
            if (has_test) {
                groups[{method, "test"}].push_back(
                    number_or_inf(record.at("test_final_metric"), path + ": test_final_metric"));
            }
        } catch (const std::exception& e) {
            report.warnings.push_back(dir + ": " + e.what());
        }
    }
    for (const auto& [key, values] : groups) {
        ReportRow row;
        row.method = key.first;
        row.split = key.second;
        row.n_runs = static_cast<int>(values.size());
        double sum = 0.0;
        for (double v : values) sum += v;
        row.mean = sum / static_cast<double>(values.size());
        double sq = 0.0;
        for (double v : values) sq += (v - row.mean) * (v - row.mean);
        row.sd = values.size() > 1 ? std::sqrt(sq / static_cast<double>(values.size() - 1)) : 0.0;
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string format_report_text(const Report& report) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %-6s %5s %14s %14s\n", "method", "split", "runs",
                  "mean", "sd");
    out << line;
    for (const ReportRow& r : report.rows) {
        std::snprintf(line, sizeof(line), "%-10s %-6s %5d %14.6g %14.6g\n", r.method.c_str(),
                      r.split.c_str(), r.n_runs, r.mean, r.sd);
        out << line;
    }
    return out.str();
}

std::string format_report_csv(const Report& report) {
    std::ostringstream out;
    out << "method,split,runs,mean,sd\n";
    for (const ReportRow& r : report.rows) {
        out << r.method << ',' << r.split << ',' << r.n_runs << ',' << fmt17(r.mean) << ','
            << fmt17(r.sd) << '\n';
    }
    return out.str();
}

int cmd_meta_train(const std::string& config_path) {
    RunConfig cfg;
    try {
        cfg = RunConfig::from_file(config_path);
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }
    try {
        const MetaDataset data = cfg.build_tasks();
        const MethodResult result = run_method(cfg.run_params(), data);
        const std::string dir = resolve_output_dir(cfg);
        write_run_record(dir, cfg, result);
        append_curves_csv(dir + "/curves.csv", cfg.seed, method_name(cfg.method), data,
                          result.curves);
        std::cout << method_name(cfg.method) << " seed " << cfg.seed << ": fitness "
                  << result.fitness.fitness << ", test metric " << result.test_final_metric
                  << ", " << result.wall_seconds << "s -> " << dir << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        return 2;
    }
}

int cmd_meta_test(const std::string& loss_path, const std::string& config_path) {
    RunConfig cfg;
    std::unique_ptr<MetaLoss> loss;
    std::string method_label;
    try {
        cfg = RunConfig::from_file(config_path);
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }
    try {
        if (loss_path == "baseline") {
            method_label = "baseline";
        } else {
            std::ifstream in(loss_path);
            if (!in) throw std::runtime_error("cannot open loss file " + loss_path);
            std::stringstream ss;
            ss << in.rdbuf();
            loss = import_loss(ss.str());
            method_label = dynamic_cast<Ml3Network*>(loss.get()) != nullptr ? "ml3" : "learned";
        }
    } catch (const std::exception& e) {
        std::cerr << "loss error: " << e.what() << '\n';
        return 1;
    }
    try {
        const MetaDataset data = cfg.build_tasks();
        if (data.test_tasks.empty()) throw std::runtime_error("config defines no meta-test tasks");
        if (loss == nullptr) {
            loss = std::make_unique<TaskLossWrapper>(data.test_tasks[0].task_loss_kind());
        }
        std::vector<TaskCurve> curves;
        for (std::size_t i = 0; i < data.test_tasks.size(); ++i) {
            TaskCurve c;
            c.task_name = data.test_tasks[i].name;
            c.split = "test";
            c.points = meta_test(*loss, data.test_tasks[i], cfg.learner, cfg.meta,
                                 cfg.curve_interval,
                                 mix_seed(cfg.seed, 0x200u, static_cast<std::uint64_t>(i)));
            curves.push_back(std::move(c));
        }
        const std::string dir = resolve_output_dir(cfg);
        fs::create_directories(dir);
        append_curves_csv(dir + "/curves.csv", cfg.seed, method_label, data, curves);
        std::cout << "wrote " << curves.size() << " task curves -> " << dir << "/curves.csv\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        return 2;
    }
}

int cmd_report(const std::vector<std::string>& run_dirs) {
    if (run_dirs.empty()) {
        std::cerr << "usage error: report needs at least one run directory\n";
        return 1;
    }
    const Report report = collect_report(run_dirs);
    for (const std::string& w : report.warnings) std::cerr << "warning: skipped " << w << '\n';
    if (report.rows.empty()) {
        std::cerr << "no usable run records\n";
        return 1;
    }
    std::cout << format_report_text(report) << '\n' << format_report_csv(report);
    return report.warnings.empty() ? 0 : 2;
}

}  // namespace evoloss
