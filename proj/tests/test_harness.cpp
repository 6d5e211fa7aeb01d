#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "clgeo/analysis.hpp"
#include "clgeo/checkpoint.hpp"
#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"
#include "clgeo/harness.hpp"
#include "clgeo/hash.hpp"
#include "oracles.hpp"

using namespace clgeo;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("clgeo_harness_" + name);
    fs::remove_all(p);
    return p;
}

std::string config_error(const json& j) {
    try {
        parse_config(j);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        return e.what();
    }
    FAIL("config accepted");
    return {};
}

json tiny_config(const std::string& out) {
    return json{{"name", "tiny"},
                {"dataset", {{"kind", "toy"}, {"n_per_class", 20}, {"data_seed", 3}}},
                {"model", {{"hidden", {6, 6}}}},
                {"algorithm", {{"name", "ogd_gtl"}, {"sample_cap", 10}}},
                {"train", {{"lr", 0.05}, {"epochs", {3, 2}}, {"batch_size", 8}}},
                {"diagnostics", {{"hessians", true}, {"taylor", true}, {"vnc", true}, {"record_trace", true}}},
                {"seeds", {1, 2}},
                {"output_dir", out}};
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(CLGEO_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config defaults") {
    ExperimentConfig c = parse_config(json::object());
    CHECK(c.seeds == std::vector<std::uint64_t>{11, 13, 21, 33, 55});
    CHECK(c.train.batch_size == 10);
    CHECK(c.model.hidden == std::vector<int>{8, 8, 8});
    CHECK_FALSE(c.model.use_bias);
    CHECK(c.dataset.source.kind == "synthetic");

    // to_json round trips and the hash ignores output_dir.
    ExperimentConfig back = parse_config(c.to_json());
    CHECK(back.canonical() == c.canonical());
    back.output_dir = "elsewhere";
    CHECK(back.hash() == c.hash());
    back.train.rest.lr = 0.5;
    CHECK(back.hash() != c.hash());
}

TEST_CASE("config errors are collected, not first-fail") {
    json j = {{"bogus", 1},
              {"model", {{"hidden", {4, 0}}, {"activation", "tanh"}}},
              {"train", {{"lr", -1.0}, {"epochz", 3}}},
              {"algorithm", {{"name", "ewc"}}}};
    const std::string msg = config_error(j);
    CHECK(msg.find("6 problems") != std::string::npos);
    for (const char* part : {"config.bogus: unknown key", "model.hidden", "model.activation", "train.lr",
                             "train.epochz: unknown key", "algorithm.name"})
        CHECK_MESSAGE(msg.find(part) != std::string::npos, part);

    CHECK(config_error({{"seeds", json::array()}}).find("seeds") != std::string::npos);
    CHECK(config_error({{"diagnostics", {{"vnc", true}}}}).find("diagnostics.hessians") != std::string::npos);
    CHECK(config_error({{"algorithm", {{"name", "gpm"}}}, {"model", {{"use_bias", true}}}}).find("gpm") !=
          std::string::npos);
    CHECK(config_error({{"train", {{"batch_size", "ten"}}}}).find("train.batch_size: must be an integer") != std::string::npos);

    const fs::path p = scratch("badjson.json");
    write_file_atomic(p.string(), "{ not json");
    CHECK_THROWS_AS(load_config(p.string()), Error);
    fs::remove(p);
}

TEST_CASE("train schedule per task") {
    TrainSchedule s;
    s.first = {0.1, 7};
    s.rest = {0.001, 2};
    CHECK(s.for_task(1, 5).learning_rate == 0.1);
    CHECK(s.for_task(1, 5).epochs == 7);
    CHECK(s.for_task(3, 5).learning_rate == 0.001);
    CHECK(s.for_task(3, 5).seed != s.for_task(2, 5).seed);
    ExperimentConfig c = parse_config({{"train", {{"lr", {0.01, 1e-5}}, {"epochs", {15, 5}}}}});
    CHECK(c.train.first.lr == 0.01);
    CHECK(c.train.rest.lr == 1e-5);
    CHECK(c.train.rest.epochs == 5);
}

TEST_CASE("checkpoint binary layout") {
    Checkpoint ck{0x0123456789abcdefULL, 4, 33, oracle::random_vector(5, 1)};
    const std::string b = encode_checkpoint(ck);
    REQUIRE(b.size() == 36 + 5 * 8);
    CHECK(b.substr(0, 4) == "CLGK");
    std::uint32_t u32 = 0;
    std::uint64_t u64 = 0;
    std::memcpy(&u32, b.data() + 4, 4);
    CHECK(u32 == checkpoint_version);
    std::memcpy(&u64, b.data() + 8, 8);
    CHECK(u64 == ck.spec_hash);
    std::memcpy(&u32, b.data() + 16, 4);
    CHECK(u32 == 4);
    std::memcpy(&u64, b.data() + 20, 8);
    CHECK(u64 == 33);
    std::memcpy(&u64, b.data() + 28, 8);
    CHECK(u64 == 5);
    double v = 0.0;
    std::memcpy(&v, b.data() + 36 + 2 * 8, 8);
    CHECK(v == ck.params(2));

    Checkpoint back = decode_checkpoint(b);
    CHECK(back.params == ck.params);
    CHECK(back.seed == 33);
    CHECK(back.task_index == 4);

    CHECK_THROWS_AS(decode_checkpoint("XXXX" + b.substr(4)), Error);
    CHECK_THROWS_AS(decode_checkpoint(b.substr(0, b.size() - 1)), Error);
    CHECK_THROWS_AS(decode_checkpoint(b.substr(0, 20)), Error);

    MlpSpec s = oracle::make_spec({2, 3, 2}, false);
    const fs::path p = scratch("ck.ckpt");
    save_checkpoint(p.string(), {s.hash(), 1, 0, ParamVector::Zero(ParamLayout(s).size())});
    CHECK_NOTHROW(load_checkpoint(p.string(), s));
    try {
        load_checkpoint(p.string(), oracle::make_spec({2, 3, 2}, true));
        FAIL("hash mismatch accepted");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("spec hash") != std::string::npos);
    }
    fs::remove(p);
}

TEST_CASE("csv utilities") {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, 123456789.125})
        CHECK(parse_double(format_double(v)) == v);
    CHECK(std::isnan(parse_double(format_double(NAN))));
    CsvTable t({"a", "b"});
    t.add_row({"1", "x"});
    t.add_row({"2", "y"});
    CHECK_THROWS_AS(t.add_row({"3"}), Error);
    CsvTable back = CsvTable::parse(t.str());
    CHECK(back.header() == t.header());
    CHECK(back.rows() == t.rows());
    CHECK(back.column("b") == 1);
    CHECK_THROWS_AS(back.column("c"), Error);
}

TEST_CASE("aggregation") {
    std::vector<MetricRow> rows;
    const double vals[] = {0.3, 0.1, 0.7, 0.2};
    for (int s = 0; s < 4; ++s) {
        rows.push_back({"avg_forgetting", 0, 3, static_cast<std::uint64_t>(s), vals[s]});
        rows.push_back({"single", 1, 2, static_cast<std::uint64_t>(s), 5.0});
    }
    rows.push_back({"one", 0, 1, 0, 2.0});
    auto agg = aggregate(rows);
    const AggregateRow* a = find_aggregate(agg, "avg_forgetting", 0, 3);
    REQUIRE(a != nullptr);
    CHECK(a->n == 4);
    const double mean = (0.3 + 0.1 + 0.7 + 0.2) / 4;
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    CHECK(a->mean == doctest::Approx(mean).epsilon(1e-15));
    CHECK(a->std == doctest::Approx(std::sqrt(ss / 3)).epsilon(1e-14));
    CHECK(find_aggregate(agg, "single", 1, 2)->std == 0.0);
    CHECK(find_aggregate(agg, "one", 0, 1)->std == 0.0);
    CHECK(find_aggregate(agg, "missing", 0, 0) == nullptr);

    auto parsed = parse_metrics_csv(metrics_csv(7, rows));
    REQUIRE(parsed.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(parsed[i].metric == rows[i].metric);
        CHECK(parsed[i].value == rows[i].value);
        CHECK(parsed[i].seed == rows[i].seed);
    }
}

TEST_CASE("experiment runs are deterministic and re-evaluable") {
    const fs::path a = scratch("run_a"), b = scratch("run_b");
    ExperimentConfig ca = parse_config(tiny_config(a.string()));
    ExperimentConfig cb = parse_config(tiny_config(b.string()));
    RunSummary sa = run_experiment(ca);
    run_experiment(cb);

    CHECK(read_file((a / "aggregate.csv").string()) == read_file((b / "aggregate.csv").string()));
    CHECK(read_file((a / "seed_2/metrics.csv").string()) == read_file((b / "seed_2/metrics.csv").string()));
    CHECK_FALSE(fs::exists(a / "FAILED"));
    for (const char* f : {"config.json", "manifest.json", "seed_1/ledger.csv", "seed_1/theta_0.ckpt", "seed_1/theta_3.ckpt"})
        CHECK_MESSAGE(fs::exists(a / f), f);

    json man = json::parse(read_file((a / "manifest.json").string()));
    CHECK(man["config_hash"] == hex64(ca.hash()));
    CHECK(man["synthetic_data"] == false);

    // OGD keeps the per-step constraint residual at round-off.
    CHECK(find_aggregate(sa.aggregate, "max_constraint_violation", 0, 0)->mean < 1e-10);

    // The ledger recomputed from the stored checkpoints matches the file.
    LoadedRun lr = load_run(a.string());
    TaskSequence seq = build_tasks(lr.config);
    const MlpSpec spec = lr.config.mlp_spec(seq.input_dim, seq.num_classes);
    for (const auto& [seed, thetas] : lr.thetas) {
        const ForgettingLedger stored =
            ForgettingLedger::from_csv(read_file((a / ("seed_" + std::to_string(seed)) / "ledger.csv").string()));
        CHECK(evaluate_ledger(spec, seq, thetas).to_csv() == stored.to_csv());
    }

    // approx and score read the run back.
    CsvTable ap = approx_tables(a.string(), {2});
    CHECK(ap.rows().size() == 2 * 2 * (3 + 2 + 2));
    CsvTable sc = score_tables(a.string(), ScoreOptions{.vnc = true});
    CHECK(sc.rows().size() == 2 * 2);
    const auto v = sc.column("value");
    for (const auto& r : sc.rows()) CHECK(parse_double(r[v]) >= 0.0);

    CsvTable cmp = compare_runs({a.string(), b.string()});
    CHECK(cmp.rows().size() > 0);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("a failing seed leaves a FAILED marker") {
    const fs::path d = scratch("run_fail");
    json j = tiny_config(d.string());
    j["train"]["lr"] = 1e12;
    j["diagnostics"] = json::object();
    ExperimentConfig c = parse_config(j);
    CHECK_THROWS(run_experiment(c));
    REQUIRE(fs::exists(d / "FAILED"));
    CHECK(read_file((d / "FAILED").string()).find("seed 1") != std::string::npos);
    fs::remove_all(d);
}

TEST_CASE("quadsim outputs re-analyse to exact estimates") {
    const fs::path d = scratch("quad");
    QuadRunConfig qc;
    qc.suite.dim = 30;
    qc.suite.rank = 4;
    qc.policy = QuadPolicy::unconstrained;
    qc.output_dir = d.string();
    QuadsimOutcome o = run_quadsim(qc);
    CHECK(o.all_passed);
    QuadRun back = load_quad_run(d.string());
    CHECK(back.ledger.num_tasks() == 5);
    CsvTable ap = approx_tables(d.string(), {});
    const auto src = ap.column("source"), err = ap.column("abs_error"), meas = ap.column("measured");
    double worst = 0.0, biggest = 0.0;
    for (const auto& r : ap.rows()) {
        CHECK(r[src] == "exact");
        worst = std::max(worst, parse_double(r[err]));
        biggest = std::max(biggest, std::abs(parse_double(r[meas])));
    }
    CHECK(biggest > 1e-3);
    CHECK(worst < 1e-9);
    fs::remove_all(d);

    CHECK_THROWS_AS(parse_quad_config({{"dim", 501}}), Error);
    CHECK_THROWS_AS(parse_quad_config({{"policy", "greedy"}}), Error);
}

TEST_CASE("cli exit codes") {
    const fs::path d = scratch("cli");
    fs::create_directories(d);
    const fs::path log = d / "log.txt";

    CHECK(run_cli("", log) == exit_config);
    CHECK(run_cli("frobnicate", log) == exit_config);
    CHECK(run_cli("--help", log) == exit_ok);

    write_file_atomic((d / "bad.json").string(), R"({"model": {"hiddn": [3]}})");
    CHECK(run_cli("run " + (d / "bad.json").string(), log) == exit_config);
    CHECK(read_file(log.string()).find("model.hiddn: unknown key") != std::string::npos);

    CHECK(run_cli("quadsim --out " + (d / "q").string(), log) == exit_ok);
    CHECK(read_file(log.string()).find("all theorem checks passed") != std::string::npos);
    CHECK(run_cli("approx " + (d / "q").string(), log) == exit_ok);
    CHECK(fs::exists(d / "q" / "approx.csv"));

    write_file_atomic((d / "tiny.json").string(), tiny_config((d / "r").string()).dump());
    CHECK(run_cli("run " + (d / "tiny.json").string(), log) == exit_ok);
    CHECK(run_cli("perturb " + (d / "r/seed_1/theta_1.ckpt").string() + " --radii 0.01 1 --draws 4 -o " +
                      (d / "p.csv").string(),
                  log) == exit_ok);
    CHECK(CsvTable::read((d / "p.csv").string()).rows().size() == 2);
    CHECK(run_cli("score " + (d / "r").string() + " --vnc --blockdiag", log) == exit_ok);
    CHECK(run_cli("gen " + (d / "tiny.json").string() + " -o " + (d / "seq.csv").string(), log) == exit_ok);
    CHECK(run_cli("compare " + (d / "r").string(), log) == exit_ok);
    CHECK(run_cli("approx " + (d / "missing").string(), log) == exit_config);

    write_file_atomic((d / "r/seed_2/theta_2.ckpt").string(), "CLGK");
    CHECK(run_cli("approx " + (d / "r").string(), log) == exit_runtime);
    CHECK(read_file(log.string()).find("checkpoint") != std::string::npos);
    fs::remove_all(d);
}

}  // TEST_SUITE
