#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "evoloss/expr.hpp"
#include "evoloss/rng.hpp"

namespace evoloss {

struct GpConfig {
    int population_size = 25;
    int generations = 50;
    double crossover_rate = 0.70;
    double mutation_rate = 0.25;
    int tournament_size = 4;
    double elitism_rate = 0.05;
    int min_init_depth = 2;  // ramped half-and-half depth range
    int max_init_depth = 6;
    int max_depth = 8;  // hard cap after variation

    void validate() const;  // throws std::invalid_argument naming the field
    int elite_count() const;
};

struct ArchiveEntry {
    double fitness = 0.0;
    std::vector<double> phi;
    bool diverged = false;
};

// Key-value store of already-evaluated canonical keys; a key, once inserted,
// is never re-evaluated.
class Archive {
public:
    const ArchiveEntry* find(const std::string& key) const;
    void insert(const std::string& key, ArchiveEntry entry);
    std::size_t size() const { return entries_.size(); }

private:
    std::unordered_map<std::string, ArchiveEntry> entries_;
};

struct EvalOutcome {
    double fitness = 0.0;  // +inf sentinel on divergence
    std::vector<double> phi;
    bool diverged = false;
};

// Implemented by the meta module; must be safe to call concurrently.
// eval_seed identifies the candidate's private rng stream.
class CandidateEvaluator {
public:
    virtual ~CandidateEvaluator() = default;
    virtual EvalOutcome evaluate(const LossExpr& expr, std::uint64_t eval_seed) const = 0;
};

struct GenerationStats {
    int generation = 0;
    double best_fitness = 0.0;
    double mean_fitness = 0.0;  // over finite fitnesses
    int evaluations = 0;
    int archive_hits = 0;
};

struct SearchResult {
    LossExpr best;
    double best_fitness = 0.0;
    std::vector<double> best_phi;
    std::vector<GenerationStats> history;
    int total_evaluations = 0;
    int total_archive_hits = 0;
};

// If both required arguments already occur, returns the input unchanged;
// otherwise replaces a uniformly chosen terminal with a random binary operator
// over f and y in random order.
LossExpr enforce_arguments_constraint(const LossExpr& expr, Rng& rng);

// Subtree exchange; retries when the child would exceed max_depth, falling
// back to a copy of parent_a.
LossExpr one_point_crossover(const LossExpr& parent_a, const LossExpr& parent_b, Rng& rng,
                             int max_depth);

// Replaces one uniformly chosen subtree with a fresh Grow tree.
LossExpr uniform_mutation(const LossExpr& expr, Rng& rng, const GpConfig& cfg);

// Lower fitness is better. Samples tournament_size members with replacement;
// ties break to the first sampled.
int tournament_select(const std::vector<double>& fitnesses, int tournament_size, Rng& rng);

// Generational GP loop with ramped half-and-half initialization, elitism,
// constraint repair on every new individual, and the evaluation archive.
SearchResult evolve(const GpConfig& cfg, const CandidateEvaluator& evaluator, std::uint64_t seed,
                    int workers = 1);

}  // namespace evoloss
