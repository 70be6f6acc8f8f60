#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evoloss/runner.hpp"

using namespace evoloss;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("tmp_cli_test") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all("tmp_cli_test"); }
    std::string str(const std::string& rel = "") const {
        return rel.empty() ? path.string() : (path / rel).string();
    }
};

std::string write_file(const fs::path& p, const std::string& contents) {
    std::ofstream(p) << contents;
    return p.string();
}

std::string read_file(const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small-but-real settings so end-to-end runs finish in seconds.
std::string tiny_config(const std::string& method, const std::string& out_dir,
                        const std::string& extra_gp = "") {
    return "{\n"
           "  \"method\": \"" + method + "\",\n"
           "  \"seed\": 5,\n"
           "  \"curve_interval\": 10,\n"
           "  \"output_dir\": \"" + out_dir + "\",\n"
           "  \"tasks\": {\"family\": \"sine\", \"n_train\": 1, \"n_test\": 1},\n"
           "  \"gp\": {\"population_size\": 6, \"generations\": 2" + extra_gp + "},\n"
           "  \"meta\": {\"s_meta\": 2, \"s_base\": 3, \"s_base_eval\": 20, \"batch_size\": 16},\n"
           "  \"learner\": {\"hidden\": [8]}\n"
           "}\n";
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys with a field path") {
    try {
        RunConfig::from_json_text("{\"methud\": \"baseline\"}");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("config.methud") != std::string::npos);
    }
    try {
        RunConfig::from_json_text("{\"gp\": {\"popsize\": 3}}");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("gp.popsize") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"seed\": \"zebra\"}"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("not json at all"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"method\": \"gradient-descent\"}"), ConfigError);
}

TEST_CASE("validation names the offending field") {
    RunConfig cfg = RunConfig::from_json_text("{\"gp\": {\"crossover_rate\": 1.5}}");
    try {
        cfg.validate();
        FAIL("expected a validation error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("crossover_rate") != std::string::npos);
    }
}

TEST_CASE("defaults survive a parse of the empty object") {
    RunConfig cfg = RunConfig::from_json_text("{}");
    CHECK(cfg.method == Method::Baseline);
    CHECK(cfg.gp.population_size == 25);
    CHECK(cfg.gp.generations == 50);
    CHECK(cfg.gp.crossover_rate == 0.70);
    CHECK(cfg.gp.mutation_rate == 0.25);
    CHECK(cfg.gp.tournament_size == 4);
    CHECK(cfg.gp.elitism_rate == 0.05);
    CHECK(cfg.meta.s_meta == 500);
    CHECK(cfg.meta.s_base == 100);
    CHECK(cfg.meta.alpha == 1e-3);
    CHECK(cfg.meta.eta == 1e-3);
    CHECK(cfg.meta.batch_size == 100);
    CHECK(cfg.learner.hidden == std::vector<int>{40, 40});
    CHECK(cfg.wrapper);
    CHECK(cfg.tasks.n_train == 5);
    CHECK(cfg.tasks.n_test == 5);
    CHECK(cfg.tasks.train_x_range == std::pair<double, double>{-2.0, 2.0});
    CHECK(cfg.tasks.test_x_range == std::pair<double, double>{-5.0, 5.0});
}

TEST_CASE("config snapshot round trips") {
    RunConfig cfg = RunConfig::from_json_text(
        "{\"method\": \"evomal\", \"seed\": 9, \"tasks\": {\"family\": \"blobs\", "
        "\"n_classes\": 3, \"separation\": 1.5}}");
    RunConfig back = RunConfig::from_json_text(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.method == Method::EvoMAL);
    CHECK(back.tasks.family == TaskFamily::Blobs);
    CHECK(back.tasks.blobs.n_classes == 3);
    CHECK(back.tasks.blobs.separation == 1.5);
}

TEST_CASE("train and test tasks come from disjoint streams") {
    RunConfig cfg = RunConfig::from_json_text(
        "{\"tasks\": {\"family\": \"sine\", \"n_train\": 3, \"n_test\": 3, "
        "\"test_x_range\": [-2.0, 2.0]}}");
    MetaDataset data = cfg.build_tasks();
    REQUIRE(data.train_tasks.size() == 3);
    REQUIRE(data.test_tasks.size() == 3);
    Rng a(1), b(1);
    const Batch train = data.train_tasks[0].sample(50, a);
    const Batch test = data.test_tasks[0].sample(50, b);
    CHECK((train.y - test.y).cwiseAbs().maxCoeff() > 1e-9);  // different sine parameters
}

TEST_CASE("output root comes from the environment") {
    ::setenv("EVOLOSS_OUT", "elsewhere", 1);
    CHECK(default_output_root() == "elsewhere");
    ::unsetenv("EVOLOSS_OUT");
    CHECK(default_output_root() == "runs");
    RunConfig cfg;
    cfg.method = Method::Ml3;
    cfg.seed = 4;
    CHECK(resolve_output_dir(cfg) == "runs/ml3_seed4");
    cfg.output_dir = "explicit/place";
    CHECK(resolve_output_dir(cfg) == "explicit/place");
}

TEST_CASE("baseline end to end: record and curves, no loss files") {
    TempDir tmp("baseline");
    const std::string cfg_path =
        write_file(tmp.path / "cfg.json", tiny_config("baseline", tmp.str("out")));
    CHECK(cmd_meta_train(cfg_path) == 0);
    CHECK(fs::exists(tmp.str("out/record.json")));
    CHECK(fs::exists(tmp.str("out/curves.csv")));
    CHECK_FALSE(fs::exists(tmp.str("out/loss.sexp")));
    CHECK_FALSE(fs::exists(tmp.str("out/loss_weights.json")));
    const std::string curves = read_file(tmp.str("out/curves.csv"));
    CHECK(curves.find("seed,method,task_id,split,step,metric,value") == 0);
    CHECK(curves.find("baseline") != std::string::npos);
    CHECK(curves.find("test") != std::string::npos);
}

TEST_CASE("evolutionary end to end: history rows equal generations") {
    TempDir tmp("evomal");
    const std::string cfg_path =
        write_file(tmp.path / "cfg.json", tiny_config("evomal", tmp.str("out")));
    CHECK(cmd_meta_train(cfg_path) == 0);
    CHECK(fs::exists(tmp.str("out/loss.sexp")));
    CHECK(fs::exists(tmp.str("out/loss_weights.json")));
    std::ifstream hist(tmp.str("out/fitness_history.csv"));
    std::string line;
    int rows = 0;
    while (std::getline(hist, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 1 + 2);  // header + one row per generation

    // The exported loss is importable and matches the saved expression.
    const std::string sexp = read_file(tmp.str("out/loss.sexp"));
    CHECK_NOTHROW(parse_expr(sexp.substr(0, sexp.find_last_not_of(" \n") + 1)));
    CHECK_NOTHROW(import_loss(read_file(tmp.str("out/loss_weights.json"))));
}

TEST_CASE("config errors exit with code 1") {
    TempDir tmp("bad");
    const std::string cfg_path = write_file(
        tmp.path / "cfg.json", "{\"gp\": {\"crossover_rate\": 1.5}}");
    CHECK(cmd_meta_train(cfg_path) == 1);
    CHECK(cmd_meta_train(tmp.str("missing.json")) == 1);
}

TEST_CASE("meta-test appends identical rows for identical seeds") {
    TempDir tmp("mt");
    const std::string cfg_a =
        write_file(tmp.path / "a.json", tiny_config("baseline", tmp.str("a")));
    const std::string cfg_b =
        write_file(tmp.path / "b.json", tiny_config("baseline", tmp.str("b")));
    CHECK(cmd_meta_test("baseline", cfg_a) == 0);
    CHECK(cmd_meta_test("baseline", cfg_b) == 0);
    CHECK(read_file(tmp.str("a/curves.csv")) == read_file(tmp.str("b/curves.csv")));
}

TEST_CASE("meta-test with an exported loss and with a corrupt one") {
    TempDir tmp("mt2");
    Rng rng(3);
    MetaLossNetwork net =
        MetaLossNetwork::from_expr(parse_expr("(sq (sub y f))"), rng, true);
    const std::string loss_path = write_file(tmp.path / "loss.json", export_loss(net));
    const std::string cfg_path =
        write_file(tmp.path / "cfg.json", tiny_config("baseline", tmp.str("out")));
    CHECK(cmd_meta_test(loss_path, cfg_path) == 0);
    const std::string curves = read_file(tmp.str("out/curves.csv"));
    CHECK(curves.find("learned") != std::string::npos);

    // Structurally valid file whose expression uses an unknown operator token.
    const std::string corrupt = write_file(
        tmp.path / "corrupt.json",
        "{\"expression\": \"(frobnicate y f)\", \"wrapper\": true, \"phi\": [1.0, 1.0]}");
    try {
        import_loss(read_file(corrupt));
        FAIL("expected a parse error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("frobnicate") != std::string::npos);
    }
    CHECK(cmd_meta_test(corrupt, cfg_path) == 1);
    CHECK(cmd_meta_test(tmp.str("nope.json"), cfg_path) == 1);
}

TEST_CASE("report aggregates final metrics per method and split") {
    TempDir tmp("report");
    // Three synthetic run records with known test metrics 1, 2, 3.
    for (int i = 0; i < 3; ++i) {
        fs::create_directories(tmp.str("r" + std::to_string(i)));
        write_file(tmp.path / ("r" + std::to_string(i)) / "record.json",
                   "{\"method\": \"baseline\", \"seed\": " + std::to_string(i) +
                       ", \"train_final_metric\": 0.5, \"test_final_metric\": " +
                       std::to_string(i + 1) + ".0, \"config\": {\"tasks\": {\"n_test\": 1}}}");
    }
    const Report rep =
        collect_report({tmp.str("r0"), tmp.str("r1"), tmp.str("r2"), tmp.str("missing")});
    CHECK(rep.warnings.size() == 1);
    REQUIRE(rep.rows.size() == 2);  // train and test
    for (const ReportRow& row : rep.rows) {
        CHECK(row.method == "baseline");
        CHECK(row.n_runs == 3);
        if (row.split == "test") {
            CHECK(row.mean == doctest::Approx(2.0));
            CHECK(row.sd == doctest::Approx(1.0));  // sample sd of {1,2,3}
        } else {
            CHECK(row.mean == doctest::Approx(0.5));
            CHECK(row.sd == doctest::Approx(0.0));
        }
    }
    CHECK(format_report_csv(rep).find("baseline,test,3,2,1") != std::string::npos);

    CHECK(cmd_report({}) == 1);
    CHECK(cmd_report({tmp.str("missing")}) == 1);
    CHECK(cmd_report({tmp.str("r0"), tmp.str("missing")}) == 2);
    CHECK(cmd_report({tmp.str("r0"), tmp.str("r1")}) == 0);
}
