#include "evoloss/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace evoloss {

Head head_for_kind(TaskKind kind) {
    switch (kind) {
        case TaskKind::Regression: return Head::Identity;
        case TaskKind::Binary: return Head::Sigmoid;
        case TaskKind::Multiclass: return Head::Softmax;
    }
    throw std::logic_error("unknown task kind");
}

TaskLossKind Task::task_loss_kind() const { return loss_for_head(head_for_kind(kind)); }
PerfMetricKind Task::perf_metric_kind() const { return metric_for_loss(task_loss_kind()); }

std::vector<Task> sample_sine_tasks(Rng& rng, int n_tasks, std::pair<double, double> x_range) {
    if (n_tasks < 1) throw std::invalid_argument("sample_sine_tasks: n_tasks must be >= 1");
    if (!(x_range.first < x_range.second)) {
        throw std::invalid_argument("sample_sine_tasks: empty x_range");
    }
    std::uniform_real_distribution<double> amp_dist(0.2, 5.0);
    std::uniform_real_distribution<double> phase_dist(-std::numbers::pi, std::numbers::pi);
    std::vector<Task> tasks;
    tasks.reserve(static_cast<std::size_t>(n_tasks));
    for (int i = 0; i < n_tasks; ++i) {
        const double amplitude = amp_dist(rng);
        const double phase = phase_dist(rng);
        Task t;
        t.kind = TaskKind::Regression;
        t.d_in = 1;
        t.n_outputs = 1;
        t.name = "sine_" + std::to_string(i);
        t.sampler = [amplitude, phase, x_range](int batch_size, Rng& r) {
            std::uniform_real_distribution<double> x_dist(x_range.first, x_range.second);
            Batch b;
            b.X.resize(batch_size, 1);
            b.y.resize(batch_size, 1);
            for (int k = 0; k < batch_size; ++k) {
                const double x = x_dist(r);
                b.X(k, 0) = x;
                b.y(k, 0) = amplitude * std::sin(x + phase);
            }
            return b;
        };
        tasks.push_back(std::move(t));
    }
    return tasks;
}

Task make_synthetic_classification(Rng& rng, const BlobSpec& spec) {
    if (spec.n_classes < 2) throw std::invalid_argument("blob task: n_classes must be >= 2");
    if (spec.d_in < 1) throw std::invalid_argument("blob task: d_in must be >= 1");
    if (spec.separation <= 0.0 && spec.noise_sigma <= 0.0) {
        throw std::invalid_argument("blob task: degenerate spec (no separation, no noise)");
    }
    if (spec.binary_labels && spec.n_classes != 2) {
        throw std::invalid_argument("blob task: binary_labels requires n_classes == 2");
    }

    // Class means drawn once per task so tasks from the same spec differ.
    std::normal_distribution<double> mean_dist(0.0, 1.0);
    std::vector<Eigen::VectorXd> means(static_cast<std::size_t>(spec.n_classes));
    for (auto& m : means) {
        m.resize(spec.d_in);
        for (int d = 0; d < spec.d_in; ++d) m(d) = spec.separation * mean_dist(rng);
    }

    Task t;
    t.kind = spec.binary_labels ? TaskKind::Binary : TaskKind::Multiclass;
    t.d_in = spec.d_in;
    t.n_outputs = spec.binary_labels ? 1 : spec.n_classes;
    t.name = "blobs_c" + std::to_string(spec.n_classes);
    const double sigma = spec.noise_sigma;
    const int n_classes = spec.n_classes;
    const bool binary = spec.binary_labels;
    t.sampler = [means, sigma, n_classes, binary](int batch_size, Rng& r) {
        std::uniform_int_distribution<int> class_dist(0, n_classes - 1);
        std::normal_distribution<double> noise(0.0, sigma);
        Batch b;
        const int d_in = static_cast<int>(means[0].size());
        b.X.resize(batch_size, d_in);
        b.y = Tensor::Zero(batch_size, binary ? 1 : n_classes);
        for (int k = 0; k < batch_size; ++k) {
            const int c = class_dist(r);
            for (int d = 0; d < d_in; ++d) b.X(k, d) = means[static_cast<std::size_t>(c)](d) + noise(r);
            if (binary) {
                b.y(k, 0) = static_cast<double>(c);
            } else {
                b.y(k, c) = 1.0;
            }
        }
        return b;
    };
    return t;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trimmed(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

Task load_csv_task(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("csv task: cannot open file " + path);
    if (schema.feature_columns.empty()) throw std::runtime_error("csv task: no feature columns");
    const bool classification = schema.kind != TaskKind::Regression;
    if (classification && schema.n_classes < 2) {
        throw std::runtime_error("csv task: classification requires n_classes >= 2");
    }
    if (schema.kind == TaskKind::Binary && schema.n_classes != 2) {
        throw std::runtime_error("csv task: binary kind requires n_classes == 2");
    }

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv task: empty file " + path);
    const std::vector<std::string> header = split_csv_line(line);

    auto column_index = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (trimmed(header[i]) == name) return static_cast<int>(i);
        }
        throw std::runtime_error("csv task: unknown column '" + name + "' in " + path);
    };
    std::vector<int> feat_idx;
    for (const auto& c : schema.feature_columns) feat_idx.push_back(column_index(c));
    const int label_idx = column_index(schema.label_column);

    const int d_in = static_cast<int>(feat_idx.size());
    std::vector<Eigen::VectorXd> features;
    std::vector<double> labels;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trimmed(line).empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw std::runtime_error("csv task: row " + std::to_string(row) + " has " +
                                     std::to_string(fields.size()) + " fields, expected " +
                                     std::to_string(header.size()));
        }
        Eigen::VectorXd x(d_in);
        for (int d = 0; d < d_in; ++d) {
            const std::string& cell = fields[static_cast<std::size_t>(feat_idx[d])];
            try {
                std::size_t used = 0;
                x(d) = std::stod(cell, &used);
                if (used != trimmed(cell).size() && used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw std::runtime_error("csv task: non-numeric value '" + cell + "' at row " +
                                         std::to_string(row) + " column '" +
                                         schema.feature_columns[static_cast<std::size_t>(d)] + "'");
            }
        }
        const std::string& lcell = fields[static_cast<std::size_t>(label_idx)];
        double y = 0.0;
        try {
            y = std::stod(lcell);
        } catch (const std::exception&) {
            throw std::runtime_error("csv task: non-numeric label '" + lcell + "' at row " +
                                     std::to_string(row));
        }
        if (classification) {
            const double rounded = std::round(y);
            if (rounded != y || y < 0 || y >= schema.n_classes) {
                throw std::runtime_error("csv task: label " + lcell + " at row " +
                                         std::to_string(row) + " outside [0, " +
                                         std::to_string(schema.n_classes - 1) + "]");
            }
        }
        features.push_back(std::move(x));
        labels.push_back(y);
    }
    if (features.empty()) throw std::runtime_error("csv task: no data rows in " + path);

    if (schema.standardize) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(d_in);
        for (const auto& x : features) mean += x;
        mean /= static_cast<double>(features.size());
        Eigen::VectorXd var = Eigen::VectorXd::Zero(d_in);
        for (const auto& x : features) var += (x - mean).cwiseAbs2();
        var /= static_cast<double>(features.size());
        Eigen::VectorXd sd = var.cwiseSqrt().cwiseMax(1e-12);
        for (auto& x : features) x = (x - mean).cwiseQuotient(sd);
    }

    Task t;
    t.kind = schema.kind;
    t.d_in = d_in;
    t.n_outputs = schema.kind == TaskKind::Multiclass ? schema.n_classes : 1;
    t.name = "csv:" + path;
    const int n_outputs = t.n_outputs;
    const TaskKind kind = schema.kind;
    t.sampler = [features, labels, n_outputs, kind](int batch_size, Rng& r) {
        std::uniform_int_distribution<std::size_t> pick(0, features.size() - 1);
        Batch b;
        const int d = static_cast<int>(features[0].size());
        b.X.resize(batch_size, d);
        b.y = Tensor::Zero(batch_size, n_outputs);
        for (int k = 0; k < batch_size; ++k) {
            const std::size_t i = pick(r);
            b.X.row(k) = features[i].transpose();
            if (kind == TaskKind::Multiclass) {
                b.y(k, static_cast<int>(labels[i])) = 1.0;
            } else {
                b.y(k, 0) = labels[i];
            }
        }
        return b;
    };
    return t;
}

}  // namespace evoloss
