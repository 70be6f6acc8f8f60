#include "evoloss/gp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace evoloss {

void GpConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("gp." + field + ": " + why);
    };
    if (population_size < 1) fail("population_size", "must be >= 1");
    if (generations < 0) fail("generations", "must be >= 0");
    if (crossover_rate < 0.0 || crossover_rate > 1.0) fail("crossover_rate", "must be in [0, 1]");
    if (mutation_rate < 0.0 || mutation_rate > 1.0) fail("mutation_rate", "must be in [0, 1]");
    if (elitism_rate < 0.0 || elitism_rate > 1.0) fail("elitism_rate", "must be in [0, 1]");
    if (tournament_size < 1) fail("tournament_size", "must be >= 1");
    if (tournament_size > population_size) fail("tournament_size", "must be <= population_size");
    if (min_init_depth < 1) fail("min_init_depth", "must be >= 1");
    if (max_init_depth < min_init_depth) fail("max_init_depth", "must be >= min_init_depth");
    if (max_depth < max_init_depth) fail("max_depth", "must be >= max_init_depth");
}

int GpConfig::elite_count() const {
    return static_cast<int>(std::ceil(elitism_rate * population_size));
}

const ArchiveEntry* Archive::find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

void Archive::insert(const std::string& key, ArchiveEntry entry) {
    entries_.emplace(key, std::move(entry));
}

namespace {

void collect_slots(std::unique_ptr<ExprNode>& slot, std::vector<std::unique_ptr<ExprNode>*>& out) {
    out.push_back(&slot);
    for (auto& c : slot->children) collect_slots(c, out);
}

void collect_nodes(const ExprNode& n, std::vector<const ExprNode*>& out) {
    out.push_back(&n);
    for (const auto& c : n.children) collect_nodes(*c, out);
}

constexpr int kVariationRetries = 8;

}  // namespace

LossExpr enforce_arguments_constraint(const LossExpr& expr, Rng& rng) {
    const RequiredArguments args = contains_required_arguments(expr);
    if (args.has_f && args.has_y) return expr;

    LossExpr out = expr;
    std::vector<std::unique_ptr<ExprNode>*> slots;
    collect_slots(out.root_ptr(), slots);
    std::vector<std::unique_ptr<ExprNode>*> terminals;
    for (auto* s : slots) {
        if (!(*s)->is_op) terminals.push_back(s);
    }
    std::uniform_int_distribution<std::size_t> pick(0, terminals.size() - 1);
    std::uniform_int_distribution<int> binary_pick(0, 3);  // Add, Sub, Mul, Aq
    std::uniform_int_distribution<int> order_pick(0, 1);
    const Op op = static_cast<Op>(binary_pick(rng));
    const bool f_first = order_pick(rng) == 0;
    std::vector<std::unique_ptr<ExprNode>> ch;
    ch.push_back(ExprNode::make_terminal(f_first ? Terminal::PredY : Terminal::TrueY));
    ch.push_back(ExprNode::make_terminal(f_first ? Terminal::TrueY : Terminal::PredY));
    *terminals[pick(rng)] = ExprNode::make_op(op, std::move(ch));
    return out;
}

LossExpr one_point_crossover(const LossExpr& parent_a, const LossExpr& parent_b, Rng& rng,
                             int max_depth) {
    std::vector<const ExprNode*> donors;
    collect_nodes(parent_b.root(), donors);
    for (int attempt = 0; attempt < kVariationRetries; ++attempt) {
        LossExpr child = parent_a;
        std::vector<std::unique_ptr<ExprNode>*> slots;
        collect_slots(child.root_ptr(), slots);
        std::uniform_int_distribution<std::size_t> pick_a(0, slots.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_b(0, donors.size() - 1);
        *slots[pick_a(rng)] = donors[pick_b(rng)]->clone();
        if (child.depth() <= max_depth) return child;
    }
    return parent_a;
}

LossExpr uniform_mutation(const LossExpr& expr, Rng& rng, const GpConfig& cfg) {
    std::uniform_int_distribution<int> depth_pick(cfg.min_init_depth, cfg.max_init_depth);
    for (int attempt = 0; attempt < kVariationRetries; ++attempt) {
        LossExpr out = expr;
        std::vector<std::unique_ptr<ExprNode>*> slots;
        collect_slots(out.root_ptr(), slots);
        std::uniform_int_distribution<std::size_t> pick(0, slots.size() - 1);
        LossExpr fresh = generate_tree(rng, GenMethod::Grow, depth_pick(rng));
        *slots[pick(rng)] = std::move(fresh.root_ptr());
        if (out.depth() <= cfg.max_depth) return out;
    }
    return expr;
}

int tournament_select(const std::vector<double>& fitnesses, int tournament_size, Rng& rng) {
    if (fitnesses.empty()) throw std::invalid_argument("tournament_select: empty population");
    std::uniform_int_distribution<std::size_t> pick(0, fitnesses.size() - 1);
    std::size_t best = pick(rng);
    for (int i = 1; i < tournament_size; ++i) {
        const std::size_t cand = pick(rng);
        if (fitnesses[cand] < fitnesses[best]) best = cand;
    }
    return static_cast<int>(best);
}

namespace {

struct EvalRound {
    int evaluations = 0;
    int archive_hits = 0;
};

// Evaluates the population against the archive. Unique unseen keys are
// evaluated (possibly in parallel); everything else is an archive hit.
EvalRound evaluate_population(const std::vector<LossExpr>& population,
                              const std::vector<std::string>& keys, Archive& archive,
                              const CandidateEvaluator& evaluator, std::uint64_t seed, int generation,
                              int workers, std::vector<double>& fitnesses) {
    EvalRound round;
    std::vector<std::size_t> pending;  // index of first individual per unseen key
    for (std::size_t i = 0; i < population.size(); ++i) {
        if (archive.find(keys[i]) != nullptr) {
            ++round.archive_hits;
            continue;
        }
        bool already_pending = false;
        for (std::size_t p : pending) {
            if (keys[p] == keys[i]) {
                already_pending = true;
                break;
            }
        }
        if (already_pending) {
            ++round.archive_hits;
        } else {
            pending.push_back(i);
        }
    }

    std::vector<EvalOutcome> outcomes(pending.size());
    auto eval_slot = [&](std::size_t slot) {
        const std::uint64_t eval_seed = mix_seed(seed, static_cast<std::uint64_t>(generation),
                                                 static_cast<std::uint64_t>(slot));
        outcomes[slot] = evaluator.evaluate(population[pending[slot]], eval_seed);
    };
    if (workers > 1 && pending.size() > 1) {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        const int n_threads = std::min<int>(workers, static_cast<int>(pending.size()));
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t s = next.fetch_add(1); s < pending.size(); s = next.fetch_add(1)) {
                    eval_slot(s);
                }
            });
        }
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t s = 0; s < pending.size(); ++s) eval_slot(s);
    }

    for (std::size_t s = 0; s < pending.size(); ++s) {
        const EvalOutcome& o = outcomes[s];
        archive.insert(keys[pending[s]], ArchiveEntry{o.fitness, o.phi, o.diverged});
    }
    round.evaluations = static_cast<int>(pending.size());

    for (std::size_t i = 0; i < population.size(); ++i) {
        fitnesses[i] = archive.find(keys[i])->fitness;
    }
    return round;
}

double finite_mean(const std::vector<double>& xs) {
    double sum = 0.0;
    int n = 0;
    for (double x : xs) {
        if (std::isfinite(x)) {
            sum += x;
            ++n;
        }
    }
    return n > 0 ? sum / n : std::numeric_limits<double>::infinity();
}

}  // namespace

SearchResult evolve(const GpConfig& cfg, const CandidateEvaluator& evaluator, std::uint64_t seed,
                    int workers) {
    cfg.validate();
    Rng rng = make_rng(seed, 0x9Eu);

    // Ramped half-and-half initialization with repair.
    std::vector<LossExpr> population;
    population.reserve(static_cast<std::size_t>(cfg.population_size));
    const int depth_span = cfg.max_init_depth - cfg.min_init_depth + 1;
    for (int i = 0; i < cfg.population_size; ++i) {
        const int depth = cfg.min_init_depth + (i / 2) % depth_span;
        const GenMethod method = (i % 2 == 0) ? GenMethod::Full : GenMethod::Grow;
        population.push_back(enforce_arguments_constraint(generate_tree(rng, method, depth), rng));
    }

    Archive archive;
    SearchResult result;
    result.best_fitness = std::numeric_limits<double>::infinity();
    std::vector<double> fitnesses(population.size());

    auto evaluate_and_track = [&](int generation) {
        std::vector<std::string> keys(population.size());
        for (std::size_t i = 0; i < population.size(); ++i) keys[i] = canonical_key(population[i]);
        const EvalRound round = evaluate_population(population, keys, archive, evaluator, seed,
                                                    generation, workers, fitnesses);
        result.total_evaluations += round.evaluations;
        result.total_archive_hits += round.archive_hits;
        for (std::size_t i = 0; i < population.size(); ++i) {
            if (fitnesses[i] < result.best_fitness) {
                result.best_fitness = fitnesses[i];
                result.best = population[i];
                result.best_phi = archive.find(keys[i])->phi;
            }
        }
        return round;
    };

    evaluate_and_track(0);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int gen = 1; gen <= cfg.generations; ++gen) {
        std::vector<std::size_t> order(population.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return fitnesses[a] < fitnesses[b]; });

        std::vector<LossExpr> next;
        next.reserve(population.size());
        const int n_elites = std::min(cfg.elite_count(), cfg.population_size);
        for (int e = 0; e < n_elites; ++e) next.push_back(population[order[static_cast<std::size_t>(e)]]);

        while (static_cast<int>(next.size()) < cfg.population_size) {
            const int ia = tournament_select(fitnesses, cfg.tournament_size, rng);
            LossExpr child;
            if (unit(rng) < cfg.crossover_rate) {
                const int ib = tournament_select(fitnesses, cfg.tournament_size, rng);
                child = one_point_crossover(population[static_cast<std::size_t>(ia)],
                                            population[static_cast<std::size_t>(ib)], rng,
                                            cfg.max_depth);
            } else {
                child = population[static_cast<std::size_t>(ia)];
            }
            if (unit(rng) < cfg.mutation_rate) child = uniform_mutation(child, rng, cfg);
            next.push_back(enforce_arguments_constraint(child, rng));
        }
        population = std::move(next);

        const EvalRound round = evaluate_and_track(gen);
        GenerationStats stats;
        stats.generation = gen;
        stats.best_fitness = *std::min_element(fitnesses.begin(), fitnesses.end());
        stats.mean_fitness = finite_mean(fitnesses);
        stats.evaluations = round.evaluations;
        stats.archive_hits = round.archive_hits;
        result.history.push_back(stats);
    }

    return result;
}

}  // namespace evoloss
