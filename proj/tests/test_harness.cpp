#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "prs/error.hpp"
#include "prs/harness.hpp"

using namespace prs;
using namespace prs::harness;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("prs_harness_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<coop::MonteCarloResult> synthetic(double slope, double offset)
{
    std::vector<coop::MonteCarloResult> c;
    for (int i = 0; i <= 16; ++i) {
        coop::MonteCarloResult r;
        r.snr_db = 2.5 * i;
        r.outage_prob = std::min(1.0, std::pow(10.0, offset + slope * r.snr_db / 10.0));
        r.capacity = 0.1 * i;
        c.push_back(r);
    }
    return c;
}

ExperimentConfig small_sweep(const fs::path& dir)
{
    ExperimentConfig c;
    c.kind = ExperimentKind::outage;
    c.output_dir = dir;
    c.trials = 3000;
    c.snr_db = {0.0, 10.0, 20.0};
    c.workers = 2;
    c.block_size = 512;
    return c;
}

} // namespace

TEST_CASE("experiment kinds parse")
{
    CHECK(parse_kind("sweep-hyper") == ExperimentKind::hyper);
    CHECK(parse_kind("hyper") == ExperimentKind::hyper);
    CHECK(parse_kind("contend") == ExperimentKind::contend);
    CHECK_THROWS_AS(parse_kind("plot"), ConfigError);
}

TEST_CASE("config validation")
{
    ExperimentConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.snr_grid().size() == 13);

    auto bad = c;
    bad.sample_rate_hz = 200.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.snr_db = {0, 10, 10};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.snr_db = {10, 0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.trials = 999;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.kind = ExperimentKind::complexity;
    CHECK_NOTHROW(bad.validate());
    bad = c;
    bad.mode = "timeseries";
    bad.delays_ms = {2.5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.sample_rate_hz = 2000.0;
    CHECK_NOTHROW(bad.validate());
    bad = c;
    bad.architectures = {"lstm:0"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.schemes = {coop::Scheme::ors, coop::Scheme::ors};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.kind = ExperimentKind::contend;
    bad.delays_ms = {2.0, 3.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.kind = ExperimentKind::train;
    bad.trace_length = 30;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(delay_samples(3.0, 1000.0) == 3);
    CHECK_THROWS_AS(delay_samples(0.5, 1000.0), ConfigError);
}

TEST_CASE("config JSON round-trip and overrides")
{
    ExperimentConfig c;
    c.kind = ExperimentKind::capacity;
    c.relays = 3;
    c.delays_ms = {2.0, 3.0};
    c.schemes = {coop::Scheme::ostc};
    c.architectures = {"gru:7", "lstm:3,rnn:2"};
    c.seed = 0xfeedfacecafebeefULL;
    ExperimentConfig back;
    back.apply_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.seed == c.seed);

    ExperimentConfig o;
    o.apply_json(Json::parse(R"({"trials": 5000, "snr_db": 12, "schemes": "ors", "learning_rate": 0.01})"));
    CHECK(o.trials == 5000);
    CHECK(o.snr_db == std::vector<double>{12.0});
    CHECK(o.schemes == std::vector<coop::Scheme>{coop::Scheme::ors});
    CHECK(o.learning_rate == 0.01);
    CHECK_THROWS_AS(o.apply_json(Json::parse(R"({"trails": 5})")), ConfigError);
    CHECK_THROWS_AS(o.apply_json(Json::parse(R"({"relays": -2})")), ConfigError);
    CHECK_THROWS_AS(o.apply_json(Json::parse(R"({"relays": "many"})")), ConfigError);
    CHECK_THROWS_AS(o.apply_json(Json::parse(R"({"schemes": ["best"]})")), ConfigError);
    CHECK_THROWS_AS(o.apply_json(Json::parse("[1, 2]")), ConfigError);

    const auto dir = scratch("cfg");
    fs::create_directories(dir);
    {
        std::ofstream f(dir / "c.json");
        f << R"({"relays": 4, "mode": "timeseries"})";
    }
    const auto loaded = load_config(dir / "c.json", c);
    CHECK(loaded.relays == 4);
    CHECK(loaded.mode == "timeseries");
    CHECK(loaded.delays_ms == c.delays_ms);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), IoError);
    {
        std::ofstream f(dir / "broken.json");
        f << "{relays";
    }
    CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
}

TEST_CASE("output directory falls back to the environment")
{
    ExperimentConfig c;
    ::setenv("PRS_OUTPUT_DIR", "/tmp/prs_env_dir", 1);
    CHECK(c.resolved_output_dir() == fs::path("/tmp/prs_env_dir"));
    c.output_dir = "explicit";
    CHECK(c.resolved_output_dir() == fs::path("explicit"));
    ::unsetenv("PRS_OUTPUT_DIR");
    c.output_dir.clear();
    CHECK(c.resolved_output_dir() == fs::path("results"));
}

TEST_CASE("curve analysis")
{
    const auto c = synthetic(-2.0, 1.0);
    const auto s = tail_slope(c);
    REQUIRE(s.has_value());
    CHECK(*s == Approx(-2.0).epsilon(1e-9));
    // p = 10^(1 - 2 x) crosses 1e-3 at x = 2, i.e. 20 dB.
    CHECK(*snr_at_outage(c, 1e-3) == Approx(20.0).epsilon(1e-9));
    CHECK_FALSE(snr_at_outage(c, 1e-12).has_value());
    CHECK(*capacity_at(c, 20.0) == Approx(0.8));
    CHECK(*capacity_at(c, 21.25) == Approx(0.85));
    CHECK_FALSE(capacity_at(c, 99.0).has_value());
    CHECK_FALSE(tail_slope(synthetic(-2.0, -10.0)).has_value());

    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS(median({}), InvalidArgument);
}

TEST_CASE("outage sweep writes CSV and a manifest that reproduces it")
{
    const auto dir = scratch("sweep");
    const auto r = run_experiment(small_sweep(dir));
    REQUIRE(r.files.size() == 2);
    const auto csv = slurp(r.files[0]);
    std::istringstream lines(csv);
    std::string header;
    std::getline(lines, header);
    CHECK(header == "scheme,mode,K,R,tau_ms,snr_db,trials,outage_prob,outage_stderr,capacity_bps_hz,capacity_stderr");
    std::size_t rows = 0;
    for (std::string line; std::getline(lines, line);) {
        ++rows;
    }
    CHECK(rows == 4 * 3);

    const auto manifest = Json::parse(slurp(r.files[1]));
    CHECK(manifest["tool"] == "prs");
    CHECK(manifest["version"] == std::string(kVersion));
    CHECK(manifest["seed"] == 1);
    CHECK(manifest["config"]["trials"] == 3000);
    CHECK(manifest.contains("wall_time_s"));

    const auto again = rerun(r.files[1], dir / "again");
    CHECK(slurp(again.files[0]) == csv);
    CHECK(again.files[0].parent_path() == dir / "again");

    // Worker count does not change the numbers.
    auto one = small_sweep(dir / "one");
    one.workers = 1;
    CHECK(slurp(run_experiment(one).files[0]) == csv);
}

TEST_CASE("timeseries sweep with an oracle-free scheme set")
{
    auto c = small_sweep(scratch("ts"));
    c.mode = "timeseries";
    c.schemes = {coop::Scheme::perfect, coop::Scheme::ors};
    c.trials = 1000;
    const auto r = run_experiment(c);
    CHECK(slurp(r.files[0]).find("ors,timeseries,8,1,3,20,1000,") != std::string::npos);
}

TEST_CASE("train, contend and complexity experiments")
{
    const auto dir = scratch("pipeline");
    ExperimentConfig t;
    t.kind = ExperimentKind::train;
    t.output_dir = dir;
    t.architectures = {"lstm:4"};
    t.horizon_steps = 3;
    t.window = 8;
    t.trace_length = 4000;
    t.epochs = 2;
    t.batch_size = 64;
    const auto trained = run_experiment(t);
    REQUIRE(trained.files.size() == 5);
    CHECK(fs::exists(dir / "train.model"));
    CHECK(slurp(dir / "train_epochs.csv").rfind("epoch,train_loss\n0,", 0) == 0);
    CHECK(slurp(dir / "train.csv").find("\"lstm:4\"") == std::string::npos);
    const auto report = Json::parse(slurp(dir / "train_report.json"));
    CHECK(report.contains("mse"));
    CHECK(report["horizon"] == 3);
    const auto first = slurp(dir / "train.csv");
    CHECK(slurp(rerun(dir / "train.manifest.json", dir / "retrain").files[1]) == first);

    ExperimentConfig c;
    c.kind = ExperimentKind::contend;
    c.output_dir = dir;
    c.model_path = (dir / "train.model").string();
    c.frames = 300;
    c.relays = 4;
    const auto contended = run_experiment(c);
    CHECK(contended.summary["frames"] == 300);
    CHECK(contended.summary["winner_mismatches"] == 0);
    const auto csv = slurp(dir / "contend.csv");
    CHECK(csv.rfind("frame,sample,ds_size,status,winner,separation_us,prs_selection,agree\n", 0) == 0);
    CHECK(slurp(dir / "contend_events.csv").rfind("frame,relay,event,time_us\n", 0) == 0);
    CHECK(slurp(rerun(dir / "contend.manifest.json", dir / "recontend").files[0]) == csv);

    c.delays_ms = {2.0};
    CHECK_THROWS_AS(run_experiment(c), ConfigError);

    c.oracle_forecast = true;
    c.model_path.clear();
    c.name = "oracle";
    const auto oracle = run_experiment(c);
    CHECK(oracle.summary["winner_mismatches"] == 0);

    ExperimentConfig x;
    x.kind = ExperimentKind::complexity;
    x.output_dir = dir;
    x.architectures = {"lstm:25,lstm:25"};
    x.capacities_flops = {179e9, 2.7e9};
    run_experiment(x);
    CHECK(slurp(dir / "complexity.csv") ==
          "architecture,counting,ops_per_prediction,prediction_rate_hz,flops,capacity_flops,utilization\n"
          "\"lstm:25,lstm:25\",matmul,15300,1000,15300000,1.79e+11,8.547486034e-05\n"
          "\"lstm:25,lstm:25\",matmul,15300,1000,15300000,2700000000,0.005666666667\n");
}

TEST_CASE("hyper-parameter sweep")
{
    ExperimentConfig h;
    h.kind = ExperimentKind::hyper;
    h.output_dir = scratch("hyper");
    h.architectures = {"rnn:3", "gru:2,gru:2"};
    h.window = 6;
    h.trace_length = 3000;
    h.epochs = 1;
    h.seeds = 3;
    const auto r = run_experiment(h);
    const auto cells = slurp(r.files[1]);
    CHECK(cells.rfind("architecture,name,total_neurons,seeds,median_mse,median_correlation\n", 0) == 0);
    CHECK(cells.find("\"gru:2,gru:2\",\"GRU-2(2,2)\",4,3,") != std::string::npos);
    std::istringstream runs(slurp(r.files[0]));
    std::size_t n = 0;
    for (std::string line; std::getline(runs, line);) {
        ++n;
    }
    CHECK(n == 1 + 2 * 3);
}

TEST_CASE("figure configs and the sidecar")
{
    CHECK(figure_config("3a").kind == ExperimentKind::hyper);
    CHECK(figure_config("3a").architectures.size() == 36);
    CHECK(figure_config("3a").architectures.front() == "lstm:20");
    CHECK(figure_config("3b").delays_ms == std::vector<double>{2.0, 3.0});
    CHECK(figure_config("3c").kind == ExperimentKind::capacity);
    CHECK_THROWS_AS(figure_config("4"), ConfigError);
    for (const auto& arch : figure_config("3a").architectures) {
        CHECK_NOTHROW(predictor::parse_hidden_layers(arch));
    }
    CHECK(figure_config("3a").architectures[2 * 6 + 0] == "lstm:7,lstm:7,lstm:6");

    auto c = figure_config("3c");
    c.output_dir = scratch("fig");
    c.trials = 200'000;
    const auto r = reproduce_figure("3c", c);
    const auto sidecar = Json::parse(slurp(c.output_dir / "fig3c.expected.json"));
    CHECK(sidecar["figure"] == "3c");
    REQUIRE(sidecar["checks"].size() == 3);
    for (const auto& chk : sidecar["checks"]) {
        CHECK(chk["pass"] == true);
    }
    const auto manifest = Json::parse(slurp(r.files.back()));
    CHECK(manifest["figure"] == "3c");
    const auto again = rerun(r.files.back(), c.output_dir / "again");
    CHECK(slurp(again.files[0]) == slurp(r.files[0]));
    CHECK(fs::exists(c.output_dir / "again" / "fig3c.expected.json"));
}
