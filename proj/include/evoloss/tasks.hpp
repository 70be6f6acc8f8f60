#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "evoloss/autodiff.hpp"
#include "evoloss/learner.hpp"
#include "evoloss/rng.hpp"

namespace evoloss {

struct Batch {
    Tensor X;  // batch x d_in
    Tensor y;  // batch x n_outputs
};

enum class TaskKind { Regression, Binary, Multiclass };

Head head_for_kind(TaskKind kind);

// An immutable task description plus a deterministic batch sampler; all
// randomness comes from the rng passed to sample().
struct Task {
    TaskKind kind = TaskKind::Regression;
    int d_in = 1;
    int n_outputs = 1;
    std::string name;
    std::function<Batch(int, Rng&)> sampler;

    Batch sample(int batch_size, Rng& rng) const { return sampler(batch_size, rng); }
    TaskLossKind task_loss_kind() const;
    PerfMetricKind perf_metric_kind() const;
};

struct MetaDataset {
    std::vector<Task> train_tasks;
    std::vector<Task> test_tasks;
};

// Sine regression family: amplitude ~ U[0.2, 5.0], phase ~ U[-pi, pi],
// x ~ U[x_range], y = A * sin(x + p).
std::vector<Task> sample_sine_tasks(Rng& rng, int n_tasks, std::pair<double, double> x_range);

struct BlobSpec {
    int n_classes = 2;
    int d_in = 2;
    double separation = 2.0;
    double noise_sigma = 1.0;
    bool binary_labels = false;  // n_classes == 2 with a single {0,1} output column
};

// Gaussian-blob classification; class means are resampled per task.
Task make_synthetic_classification(Rng& rng, const BlobSpec& spec);

struct CsvSchema {
    std::vector<std::string> feature_columns;
    std::string label_column;
    TaskKind kind = TaskKind::Regression;
    int n_classes = 0;  // required for classification kinds
    bool standardize = false;
};

// Minibatch sampling with replacement over the file's rows. Header required.
Task load_csv_task(const std::string& path, const CsvSchema& schema);

}  // namespace evoloss
