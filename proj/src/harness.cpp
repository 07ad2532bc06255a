#include "prs/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "prs/complexity.hpp"
#include "prs/contention.hpp"
#include "prs/error.hpp"
#include "prs/fading.hpp"
#include "prs/rng.hpp"

namespace prs::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTraceStream = 0x7472;
constexpr std::uint64_t kSrStream = 0x5352;
constexpr std::uint64_t kRdStream = 0x5244;

std::string num(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void say(const Logger& log, const std::string& msg)
{
    if (log) {
        log(msg);
    }
}

class CsvFile {
public:
    CsvFile(const fs::path& path, std::string_view header) : path_(path), out_(path, std::ios::binary)
    {
        if (!out_) {
            throw IoError("cannot write " + path.string());
        }
        out_ << header << '\n';
    }

    template <class... Cells>
    void row(const Cells&... cells)
    {
        bool first = true;
        ((out_ << (first ? "" : ",") << cell(cells), first = false), ...);
        out_ << '\n';
    }

    void close()
    {
        out_.close();
        if (!out_) {
            throw IoError("error writing " + path_.string());
        }
    }

private:
    static std::string cell(double v) { return num(v); }
    static std::string cell(std::size_t v) { return std::to_string(v); }
    static std::string cell(int v) { return std::to_string(v); }
    static std::string cell(std::string_view v)
    {
        if (v.find_first_of(",\"\n") == std::string_view::npos) {
            return std::string(v);
        }
        std::string q = "\"";
        for (char ch : v) {
            q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        }
        return q + "\"";
    }
    static std::string cell(const std::string& v) { return cell(std::string_view(v)); }
    static std::string cell(const char* v) { return cell(std::string_view(v)); }

    fs::path path_;
    std::ofstream out_;
};

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    out.close();
    if (!out) {
        throw IoError("error writing " + path.string());
    }
}

void check(bool ok, const std::string& msg)
{
    if (!ok) {
        throw ConfigError(msg);
    }
}

bool is_sweep(ExperimentKind k) { return k == ExperimentKind::outage || k == ExperimentKind::capacity; }

fading::FadingTrace training_trace(const ExperimentConfig& c, std::uint64_t seed)
{
    return fading::generate_trace({c.doppler_hz, c.sample_rate_hz, 1.0, c.trace_length}, seed);
}

/// Loads `model_path` or trains a fresh predictor for `horizon`.
std::shared_ptr<const predictor::ChannelPredictor> obtain_predictor(const ExperimentConfig& c, std::size_t horizon,
                                                                    std::uint64_t seed, const Logger& log)
{
    if (!c.model_path.empty()) {
        auto p = std::make_shared<predictor::ChannelPredictor>(predictor::ChannelPredictor::load(c.model_path));
        if (p->config().horizon_steps != horizon) {
            throw ConfigError("model " + c.model_path + " predicts " + std::to_string(p->config().horizon_steps) +
                              " steps ahead but the delay is " + std::to_string(horizon) + " samples");
        }
        return p;
    }
    const auto pc = predictor_config(c, c.architectures.front(), horizon);
    say(log, "training " + pc.name() + " for D = " + std::to_string(horizon));
    auto trained = predictor::train_predictor(pc, training_trace(c, derive_seed(seed, kTraceStream)), seed,
                                              [&](std::size_t e, double loss) {
                                                  say(log, "  epoch " + std::to_string(e) + " loss " + num(loss));
                                              });
    say(log, "  test correlation " + num(trained.report.correlation));
    return std::make_shared<predictor::ChannelPredictor>(std::move(trained.predictor));
}

struct Curve {
    double tau_ms;
    coop::Scheme scheme;
    std::vector<coop::MonteCarloResult> points;
};

struct HyperRun {
    std::string architecture;
    std::string name;
    std::size_t neurons;
    std::size_t seed_index;
    predictor::PredictionReport report;
};

struct HyperCell {
    std::string architecture;
    std::string name;
    std::size_t neurons;
    double median_mse;
    double median_correlation;
};

std::size_t total_neurons(const std::vector<predictor::HiddenLayer>& layers)
{
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.neurons;
    }
    return n;
}

struct Outcome {
    ExperimentResult result;
    std::vector<Curve> curves;
    std::vector<HyperCell> cells;
};

Outcome run_sweep_experiment(const ExperimentConfig& c, const fs::path& dir, const Logger& log)
{
    Outcome o;
    const auto grid = c.snr_grid();
    const bool timeseries = c.mode == "timeseries";
    const auto path = dir / (c.stem() + ".csv");
    CsvFile csv(path, "scheme,mode,K,R,tau_ms,snr_db,trials,outage_prob,outage_stderr,capacity_bps_hz,capacity_stderr");
    for (std::size_t ti = 0; ti < c.delays_ms.size(); ++ti) {
        const double tau = c.delays_ms[ti];
        coop::NetworkScenario s;
        s.relays = c.relays;
        s.target_rate = c.target_rate;
        s.doppler_hz = c.doppler_hz;
        s.delay_s = tau / 1000.0;
        std::shared_ptr<const predictor::ChannelPredictor> model;
        for (auto scheme : c.schemes) {
            s.scheme = scheme;
            coop::Mode mode = coop::StatisticalMode{};
            if (timeseries) {
                coop::TimeseriesMode ts;
                ts.sample_rate_hz = c.sample_rate_hz;
                ts.frame_stride = c.frame_stride;
                if (scheme == coop::Scheme::prs) {
                    if (!model) {
                        model = obtain_predictor(c, delay_samples(tau, c.sample_rate_hz), derive_seed(c.seed, ti), log);
                    }
                    ts.predictor = model;
                }
                mode = ts;
            } else if (scheme == coop::Scheme::prs) {
                mode = coop::StatisticalMode{predictor::complex_correlation(c.prs_correlation)};
            }
            say(log, std::string(coop::to_string(scheme)) + ", tau = " + num(tau) + " ms");
            auto points = coop::run_sweep(s, mode, grid, {c.trials, c.seed, c.workers, c.block_size});
            for (const auto& p : points) {
                csv.row(coop::to_string(scheme), c.mode, c.relays, c.target_rate, tau, p.snr_db, p.trials,
                        p.outage_prob, p.outage_stderr, p.capacity, p.capacity_stderr);
            }
            o.curves.push_back({tau, scheme, std::move(points)});
        }
    }
    csv.close();
    o.result.files.push_back(path);

    Json curves = Json::array();
    for (const auto& cv : o.curves) {
        Json j;
        j["tau_ms"] = cv.tau_ms;
        j["scheme"] = coop::to_string(cv.scheme);
        if (const auto s = tail_slope(cv.points)) {
            j["tail_slope"] = *s;
        }
        if (const auto x = snr_at_outage(cv.points, 1e-3)) {
            j["snr_db_at_1e-3"] = *x;
        }
        if (const auto cap = capacity_at(cv.points, 20.0)) {
            j["capacity_at_20db"] = *cap;
        }
        curves.push_back(j);
    }
    o.result.summary["curves"] = curves;
    return o;
}

Outcome run_train(const ExperimentConfig& c, const fs::path& dir, const Logger& log)
{
    Outcome o;
    const auto pc = predictor_config(c, c.architectures.front(), c.horizon_steps);
    say(log, "training " + pc.name());
    auto t = predictor::train_predictor(pc, training_trace(c, derive_seed(c.seed, kTraceStream)), c.seed,
                                        [&](std::size_t e, double loss) {
                                            say(log, "  epoch " + std::to_string(e) + " loss " + num(loss));
                                        });
    const auto epochs_path = dir / (c.stem() + "_epochs.csv");
    CsvFile epochs(epochs_path, "epoch,train_loss");
    for (std::size_t e = 0; e < t.training.epoch_loss.size(); ++e) {
        epochs.row(e, t.training.epoch_loss[e]);
    }
    epochs.close();

    const auto report_path = dir / (c.stem() + ".csv");
    CsvFile report(report_path, "architecture,name,horizon,test_samples,mse,correlation");
    report.row(c.architectures.front(), pc.name(), pc.horizon_steps, t.report.count, t.report.mse,
               t.report.correlation);
    report.close();

    const auto json_path = dir / (c.stem() + "_report.json");
    write_text(json_path, t.report.to_json() + "\n");
    const fs::path model_path = c.model_path.empty() ? dir / (c.stem() + ".model") : fs::path(c.model_path);
    t.predictor.save(model_path);
    say(log, "  test mse " + num(t.report.mse) + ", correlation " + num(t.report.correlation));

    o.result.files = {epochs_path, report_path, json_path, model_path};
    o.result.summary["mse"] = t.report.mse;
    o.result.summary["correlation"] = t.report.correlation;
    return o;
}

Outcome run_hyper(const ExperimentConfig& c, const fs::path& dir, const Logger& log)
{
    Outcome o;
    std::vector<HyperRun> runs;
    for (std::size_t si = 0; si < c.seeds; ++si) {
        const auto seed = derive_seed(c.seed, si);
        const auto trace = training_trace(c, derive_seed(seed, kTraceStream));
        for (const auto& arch : c.architectures) {
            const auto pc = predictor_config(c, arch, c.horizon_steps);
            say(log, "seed " + std::to_string(si) + ": " + pc.name());
            auto t = predictor::train_predictor(pc, trace, seed);
            say(log, "  mse " + num(t.report.mse) + ", correlation " + num(t.report.correlation));
            runs.push_back({arch, pc.name(), total_neurons(pc.hidden_layers), si, t.report});
        }
    }
    const auto runs_path = dir / (c.stem() + "_runs.csv");
    CsvFile rcsv(runs_path, "architecture,name,total_neurons,seed_index,mse,correlation");
    for (const auto& r : runs) {
        rcsv.row(r.architecture, r.name, r.neurons, r.seed_index, r.report.mse, r.report.correlation);
    }
    rcsv.close();

    const auto path = dir / (c.stem() + ".csv");
    CsvFile csv(path, "architecture,name,total_neurons,seeds,median_mse,median_correlation");
    Json cells = Json::array();
    for (const auto& arch : c.architectures) {
        std::vector<double> mse;
        std::vector<double> rho;
        HyperCell cell{arch, "", 0, 0.0, 0.0};
        for (const auto& r : runs) {
            if (r.architecture == arch) {
                mse.push_back(r.report.mse);
                rho.push_back(r.report.correlation);
                cell.name = r.name;
                cell.neurons = r.neurons;
            }
        }
        cell.median_mse = median(mse);
        cell.median_correlation = median(rho);
        csv.row(arch, cell.name, cell.neurons, mse.size(), cell.median_mse, cell.median_correlation);
        cells.push_back({{"name", cell.name}, {"total_neurons", cell.neurons}, {"median_mse", cell.median_mse}});
        o.cells.push_back(std::move(cell));
    }
    csv.close();
    o.result.files = {runs_path, path};
    o.result.summary["cells"] = cells;
    return o;
}

Outcome run_contend(const ExperimentConfig& c, const fs::path& dir, const Logger& log)
{
    Outcome o;
    const auto horizon = delay_samples(c.delays_ms.front(), c.sample_rate_hz);
    std::shared_ptr<const predictor::ChannelPredictor> model;
    contention::Forecaster forecaster;
    if (c.oracle_forecast) {
        forecaster = contention::oracle(horizon, c.window);
    } else {
        model = obtain_predictor(c, horizon, derive_seed(c.seed, 0), log);
        forecaster = contention::from_predictor(*model);
    }
    const double snr_db = c.snr_db.empty() ? 20.0 : c.snr_db.front();
    const double total = coop::db_to_linear(snr_db);

    const auto length = contention::required_samples(forecaster, c.frames);
    const fading::FadingParams fp{c.doppler_hz, c.sample_rate_hz, 1.0, length};
    std::vector<std::vector<double>> sr(c.relays);
    std::vector<std::vector<double>> rd(c.relays);
    for (std::size_t k = 0; k < c.relays; ++k) {
        sr[k] = fading::magnitudes(fading::generate_trace(fp, derive_seed(c.seed, kSrStream + 2 * k)));
        rd[k] = fading::magnitudes(fading::generate_trace(fp, derive_seed(c.seed, kRdStream + 2 * k)));
    }
    contention::PipelineConfig pc;
    pc.contention = {c.base_time_us, c.guard_us};
    pc.frames = c.frames;
    pc.sr_snr = 0.5 * total;
    pc.target_rate = c.target_rate;
    pc.sample_rate_hz = c.sample_rate_hz;
    say(log, "contention over " + std::to_string(c.frames) + " frames");
    const auto schedules = contention::run_pipeline(sr, rd, forecaster, pc);

    const auto path = dir / (c.stem() + ".csv");
    CsvFile csv(path, "frame,sample,ds_size,status,winner,separation_us,prs_selection,agree");
    std::size_t mismatches = 0;
    std::vector<double> predicted_snr(c.relays);
    for (const auto& f : schedules) {
        for (std::size_t k = 0; k < c.relays; ++k) {
            predicted_snr[k] = f.buffered[k] * f.buffered[k] * 0.5 * total;
        }
        const auto choice = coop::select_prs(f.decoding_subset, predicted_snr);
        std::string agree = "-";
        if (f.outcome.status == contention::Status::winner) {
            const bool same = f.outcome.winner == choice;
            mismatches += same ? 0 : 1;
            agree = same ? "1" : "0";
        }
        csv.row(f.frame, f.sample, f.decoding_subset.size(), contention::to_string(f.outcome.status),
                f.outcome.winner ? std::to_string(*f.outcome.winner) : std::string("-"),
                std::isfinite(f.outcome.separation_us) ? num(f.outcome.separation_us) : std::string("inf"),
                choice ? std::to_string(*choice) : std::string("-"), agree);
    }
    csv.close();

    const auto events_path = dir / (c.stem() + "_events.csv");
    {
        std::ofstream ev(events_path, std::ios::binary);
        if (!ev) {
            throw IoError("cannot write " + events_path.string());
        }
        contention::write_event_log(schedules, ev);
    }
    const auto sum = contention::summarize(schedules);
    o.result.files = {path, events_path};
    o.result.summary["frames"] = sum.frames;
    o.result.summary["contended"] = sum.contended;
    o.result.summary["collisions"] = sum.collisions;
    o.result.summary["collision_rate"] = sum.collision_rate;
    o.result.summary["winner_mismatches"] = mismatches;
    return o;
}

Outcome run_complexity(const ExperimentConfig& c, const fs::path& dir)
{
    Outcome o;
    const auto path = dir / (c.stem() + ".csv");
    CsvFile csv(path, "architecture,counting,ops_per_prediction,prediction_rate_hz,flops,capacity_flops,utilization");
    const auto counting = c.exact_counting ? complexity::Counting::exact : complexity::Counting::matmul;
    Json rows = Json::array();
    for (const auto& arch : c.architectures) {
        complexity::NetShape shape{1, 1, {}};
        for (const auto& l : predictor::parse_hidden_layers(arch)) {
            shape.hidden.push_back({l.kind, l.neurons});
        }
        const std::string counting_name = c.exact_counting ? "exact" : "matmul";
        if (c.capacities_flops.empty()) {
            const auto r = complexity::flops(shape, c.prediction_rate_hz, std::nullopt, counting);
            csv.row(arch, counting_name, static_cast<std::size_t>(r.ops_per_prediction), r.prediction_rate_hz,
                    r.flops, "", "");
            rows.push_back(Json::parse(r.to_json()));
        }
        for (double cap : c.capacities_flops) {
            const auto r = complexity::flops(shape, c.prediction_rate_hz, cap, counting);
            csv.row(arch, counting_name, static_cast<std::size_t>(r.ops_per_prediction), r.prediction_rate_hz,
                    r.flops, cap, *r.utilization);
            rows.push_back(Json::parse(r.to_json()));
        }
    }
    csv.close();
    o.result.files = {path};
    o.result.summary["reports"] = rows;
    return o;
}

Outcome run_outcome(const ExperimentConfig& c, const fs::path& dir, const Logger& log)
{
    switch (c.kind) {
    case ExperimentKind::train: return run_train(c, dir, log);
    case ExperimentKind::hyper: return run_hyper(c, dir, log);
    case ExperimentKind::outage:
    case ExperimentKind::capacity: return run_sweep_experiment(c, dir, log);
    case ExperimentKind::contend: return run_contend(c, dir, log);
    case ExperimentKind::complexity: return run_complexity(c, dir);
    }
    throw ConfigError("unknown experiment kind");
}

void write_manifest(const ExperimentConfig& c, const fs::path& dir, ExperimentResult& r, double seconds,
                    std::optional<std::string_view> figure)
{
    Json m;
    m["tool"] = "prs";
    m["version"] = kVersion;
    m["kind"] = to_string(c.kind);
    m["figure"] = figure ? Json(std::string(*figure)) : Json(nullptr);
    m["seed"] = c.seed;
    m["config"] = c.to_json();
    Json outputs = Json::array();
    for (const auto& f : r.files) {
        outputs.push_back(f.filename().string());
    }
    m["outputs"] = outputs;
    m["summary"] = r.summary;
    m["wall_time_s"] = seconds;
    const auto path = dir / (c.stem() + ".manifest.json");
    write_text(path, m.dump(2) + "\n");
    r.files.push_back(path);
}

struct Started {
    fs::path dir;
    std::chrono::steady_clock::time_point t0;
};

Started start(const ExperimentConfig& c)
{
    c.validate();
    Started s{c.resolved_output_dir(), std::chrono::steady_clock::now()};
    std::error_code ec;
    fs::create_directories(s.dir, ec);
    if (ec || !fs::is_directory(s.dir)) {
        throw IoError("cannot create output directory " + s.dir.string());
    }
    return s;
}

double elapsed(const Started& s)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - s.t0).count();
}

template <class T>
std::vector<T> json_list(const Json& v, const char* key)
{
    if (v.is_array()) {
        return v.get<std::vector<T>>();
    }
    if constexpr (std::is_same_v<T, std::string>) {
        if (v.is_string()) {
            return {v.get<std::string>()};
        }
    } else {
        if (v.is_number()) {
            return {v.get<T>()};
        }
    }
    throw ConfigError(std::string("field ") + key + " has the wrong type");
}

std::size_t as_count(const Json& v)
{
    if (v.is_number_unsigned()) {
        return v.get<std::size_t>();
    }
    if (v.is_number()) {
        const double d = v.get<double>();
        if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) {
            return static_cast<std::size_t>(d);
        }
    }
    throw ConfigError("expected a non-negative integer, got " + v.dump());
}

std::vector<std::string> split_figure_architectures()
{
    std::vector<std::string> out;
    const std::vector<std::pair<std::string, std::size_t>> families{{"lstm", 1}, {"lstm", 2}, {"lstm", 3},
                                                                     {"lstm", 4}, {"rnn", 2},  {"gru", 2}};
    for (const auto& [kind, depth] : families) {
        for (std::size_t total : {20, 40, 50, 60, 80, 100}) {
            std::string arch;
            for (std::size_t l = 0; l < depth; ++l) {
                const auto n = total / depth + (l < total % depth ? 1 : 0);
                arch += (l ? "," : "") + kind + ":" + std::to_string(n);
            }
            out.push_back(arch);
        }
    }
    return out;
}

Json check_json(const std::string& name, const Json& expected, const Json& observed, bool pass)
{
    return {{"check", name}, {"expected", expected}, {"observed", observed}, {"pass", pass}};
}

const Curve* find_curve(const std::vector<Curve>& curves, double tau, coop::Scheme s)
{
    for (const auto& c : curves) {
        if (c.scheme == s && std::abs(c.tau_ms - tau) < 1e-9) {
            return &c;
        }
    }
    return nullptr;
}

Json figure_checks(std::string_view tag, const Outcome& o)
{
    using coop::Scheme;
    Json checks = Json::array();
    const auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };

    if (tag == "3a") {
        const auto cell = [&](const std::string& name, std::size_t n) -> const HyperCell* {
            for (const auto& c : o.cells) {
                if (c.name.rfind(name, 0) == 0 && c.neurons == n) {
                    return &c;
                }
            }
            return nullptr;
        };
        const auto* l1 = cell("LSTM-1", 50);
        const auto* l2 = cell("LSTM-2", 50);
        const auto* r2 = cell("RNN-2", 50);
        const auto* g2 = cell("GRU-2", 50);
        if (l1 && l2) {
            checks.push_back(check_json("median MSE LSTM-2 < LSTM-1 at 50 neurons", "LSTM-2 lower",
                                        Json{{"LSTM-2", l2->median_mse}, {"LSTM-1", l1->median_mse}},
                                        l2->median_mse < l1->median_mse));
        }
        if (r2 && g2) {
            checks.push_back(check_json("median MSE RNN-2 > GRU-2 at 50 neurons", "RNN-2 higher",
                                        Json{{"RNN-2", r2->median_mse}, {"GRU-2", g2->median_mse}},
                                        r2->median_mse > g2->median_mse));
        }
        if (l2 && g2) {
            const double rel = std::abs(g2->median_mse - l2->median_mse) / l2->median_mse;
            checks.push_back(check_json("GRU-2 within 20% of LSTM-2 at 50 neurons", 0.2, rel, rel <= 0.2));
        }
        return checks;
    }

    for (double tau : {2.0, 3.0}) {
        const auto* perfect = find_curve(o.curves, tau, Scheme::perfect);
        const auto* ors = find_curve(o.curves, tau, Scheme::ors);
        const auto* ostc = find_curve(o.curves, tau, Scheme::ostc);
        const auto* prs = find_curve(o.curves, tau, Scheme::prs);
        const std::string at = " (tau " + num(tau) + " ms)";
        if (tag == "3b") {
            if (perfect && ors && ostc && prs) {
                const std::vector<std::pair<const Curve*, const Curve*>> pairs{
                    {perfect, prs}, {prs, ostc}, {ostc, ors}};
                for (const auto& [lo, hi] : pairs) {
                    Json bad = Json::array();
                    for (std::size_t i = 0; i < lo->points.size(); ++i) {
                        const auto& a = lo->points[i];
                        const auto& b = hi->points[i];
                        if (a.outage_prob > b.outage_prob + 2.0 * (a.outage_stderr + b.outage_stderr)) {
                            bad.push_back(a.snr_db);
                        }
                    }
                    checks.push_back(check_json(std::string("outage ") + std::string(coop::to_string(lo->scheme)) +
                                                    " <= " + std::string(coop::to_string(hi->scheme)) + at,
                                                "every SNR point", Json{{"violating_snr_db", bad}}, bad.empty()));
                }
            }
            if (tau == 3.0 && ors && ostc && perfect && prs) {
                const auto s_ors = tail_slope(ors->points);
                const auto s_ostc = tail_slope(ostc->points);
                checks.push_back(check_json("ORS tail slope" + at, Json::array({-1.4, -0.6}), opt(s_ors),
                                            s_ors && *s_ors >= -1.4 && *s_ors <= -0.6));
                checks.push_back(check_json("OSTC tail slope" + at, Json::array({-2.5, -1.5}), opt(s_ostc),
                                            s_ostc && *s_ostc >= -2.5 && *s_ostc <= -1.5));
                const auto x_perfect = snr_at_outage(perfect->points, 1e-3);
                const auto x_prs = snr_at_outage(prs->points, 1e-3);
                const auto x_ostc = snr_at_outage(ostc->points, 1e-3);
                if (x_perfect && x_prs) {
                    const double gap = *x_prs - *x_perfect;
                    checks.push_back(check_json("PRS loss to perfect selection at 1e-3, dB" + at, "<= 2", gap,
                                                gap <= 2.0));
                }
                if (x_prs && x_ostc) {
                    const double gain = *x_ostc - *x_prs;
                    checks.push_back(check_json("PRS gain over OSTC at 1e-3, dB" + at, 8.0, gain,
                                                gain >= 6.0 && gain <= 10.0));
                }
            }
        } else if (tag == "3c" && tau == 3.0) {
            const std::vector<std::tuple<const Curve*, double>> refs{{ors, 2.6}, {ostc, 2.75}, {prs, 3.5}};
            for (const auto& [cv, ref] : refs) {
                if (!cv) {
                    continue;
                }
                const auto cap = capacity_at(cv->points, 20.0);
                checks.push_back(check_json(std::string(coop::to_string(cv->scheme)) + " capacity at 20 dB" + at,
                                            Json{{"value", ref}, {"tolerance", 0.2}}, opt(cap),
                                            cap && std::abs(*cap - ref) <= 0.2));
            }
        }
    }
    return checks;
}

} // namespace

std::string_view to_string(ExperimentKind kind)
{
    switch (kind) {
    case ExperimentKind::train: return "train";
    case ExperimentKind::hyper: return "sweep-hyper";
    case ExperimentKind::outage: return "outage";
    case ExperimentKind::capacity: return "capacity";
    case ExperimentKind::contend: return "contend";
    case ExperimentKind::complexity: return "complexity";
    }
    return "?";
}

ExperimentKind parse_kind(std::string_view name)
{
    if (name == "hyper") {
        return ExperimentKind::hyper;
    }
    for (auto k : {ExperimentKind::train, ExperimentKind::hyper, ExperimentKind::outage, ExperimentKind::capacity,
                   ExperimentKind::contend, ExperimentKind::complexity}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown experiment kind: " + std::string(name));
}

std::size_t delay_samples(double delay_ms, double sample_rate_hz)
{
    const double d = delay_ms * 1e-3 * sample_rate_hz;
    const double r = std::round(d);
    check(std::abs(d - r) <= 1e-9 * std::max(1.0, d),
          "delay " + num(delay_ms) + " ms is not a whole number of samples at " + num(sample_rate_hz) + " Hz");
    return static_cast<std::size_t>(r);
}

void ExperimentConfig::validate() const
{
    check(relays >= 1, "relays must be >= 1");
    check(target_rate > 0.0 && std::isfinite(target_rate), "target_rate must be positive");
    check(doppler_hz >= 0.0 && std::isfinite(doppler_hz), "doppler_hz must be non-negative");
    check(sample_rate_hz > 2.0 * doppler_hz && std::isfinite(sample_rate_hz),
          "sample_rate_hz must exceed twice the Doppler frequency");
    check(!delays_ms.empty(), "delays_ms must not be empty");
    for (double d : delays_ms) {
        check(d >= 0.0 && std::isfinite(d), "delays must be non-negative");
    }
    check(!schemes.empty(), "schemes must not be empty");
    check(std::set<coop::Scheme>(schemes.begin(), schemes.end()).size() == schemes.size(), "duplicate scheme");
    const auto grid = snr_grid();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        check(std::isfinite(grid[i]), "SNR grid values must be finite");
        check(i == 0 || grid[i] > grid[i - 1], "SNR grid must be strictly increasing");
    }
    check(mode == "statistical" || mode == "timeseries", "mode must be statistical or timeseries");
    check(prs_correlation >= 0.0 && prs_correlation <= 1.0, "prs_correlation must lie in [0, 1]");
    check(frame_stride >= 1, "frame_stride must be >= 1");
    check(trials >= 1, "trials must be >= 1");
    check(!is_sweep(kind) || trials >= 1000, "sweeps need at least 1000 trials");
    check(workers >= 1, "workers must be >= 1");
    check(block_size >= 1, "block_size must be >= 1");
    check(!architectures.empty(), "architectures must not be empty");
    for (const auto& a : architectures) {
        try {
            (void)predictor::parse_hidden_layers(a);
        } catch (const InvalidArgument& e) {
            throw ConfigError("bad architecture '" + a + "': " + e.what());
        }
    }
    check(horizon_steps >= 1, "horizon_steps must be >= 1");
    check(window >= 1, "window must be >= 1");
    check(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
    check(epochs >= 1, "epochs must be >= 1");
    check(batch_size >= 1, "batch_size must be >= 1");
    check(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
    check(seeds >= 1, "seeds must be >= 1");
    check(frames >= 1, "frames must be >= 1");
    check(base_time_us > 0.0 && guard_us > 0.0, "contention times must be positive");
    check(prediction_rate_hz > 0.0, "prediction_rate_hz must be positive");
    for (double c : capacities_flops) {
        check(c > 0.0 && std::isfinite(c), "capacities must be positive");
    }
    if (kind == ExperimentKind::train || kind == ExperimentKind::hyper) {
        const auto span = window + horizon_steps;
        const auto split = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(trace_length)));
        check(split >= span && trace_length - split >= span, "trace_length too short for the window and split");
    }
    if (kind == ExperimentKind::contend) {
        check(delays_ms.size() == 1, "contend takes a single delay");
        check(snr_db.size() <= 1, "contend takes a single SNR");
        check(delay_samples(delays_ms.front(), sample_rate_hz) >= 1, "contend needs a delay of at least one sample");
    }
    if (is_sweep(kind) && mode == "timeseries") {
        for (double d : delays_ms) {
            (void)delay_samples(d, sample_rate_hz);
        }
        const bool prs = std::find(schemes.begin(), schemes.end(), coop::Scheme::prs) != schemes.end();
        check(!prs || model_path.empty() || delays_ms.size() == 1, "a model file serves a single delay");
    }
}

std::vector<double> ExperimentConfig::snr_grid() const
{
    if (!snr_db.empty()) {
        return snr_db;
    }
    std::vector<double> g;
    for (int i = 0; i <= 12; ++i) {
        g.push_back(2.5 * i);
    }
    return g;
}

fs::path ExperimentConfig::resolved_output_dir() const
{
    if (!output_dir.empty()) {
        return output_dir;
    }
    if (const char* env = std::getenv("PRS_OUTPUT_DIR"); env && *env) {
        return env;
    }
    return "results";
}

std::string ExperimentConfig::stem() const
{
    if (!name.empty()) {
        return name;
    }
    return kind == ExperimentKind::hyper ? "hyper" : std::string(to_string(kind));
}

Json ExperimentConfig::to_json() const
{
    Json j;
    j["kind"] = to_string(kind);
    j["name"] = name;
    j["relays"] = relays;
    j["target_rate"] = target_rate;
    j["doppler_hz"] = doppler_hz;
    j["sample_rate_hz"] = sample_rate_hz;
    j["delays_ms"] = delays_ms;
    Json s = Json::array();
    for (auto x : schemes) {
        s.push_back(coop::to_string(x));
    }
    j["schemes"] = s;
    j["snr_db"] = snr_db;
    j["mode"] = mode;
    j["prs_correlation"] = prs_correlation;
    j["frame_stride"] = frame_stride;
    j["trials"] = trials;
    j["seed"] = seed;
    j["workers"] = workers;
    j["block_size"] = block_size;
    j["architectures"] = architectures;
    j["horizon_steps"] = horizon_steps;
    j["window"] = window;
    j["train_fraction"] = train_fraction;
    j["trace_length"] = trace_length;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["seeds"] = seeds;
    j["model_path"] = model_path;
    j["frames"] = frames;
    j["base_time_us"] = base_time_us;
    j["guard_us"] = guard_us;
    j["oracle_forecast"] = oracle_forecast;
    j["prediction_rate_hz"] = prediction_rate_hz;
    j["capacities_flops"] = capacities_flops;
    j["exact_counting"] = exact_counting;
    return j;
}

void ExperimentConfig::apply_json(const Json& j)
{
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "kind") kind = parse_kind(v.get<std::string>());
            else if (key == "name") name = v.get<std::string>();
            else if (key == "output_dir") output_dir = v.get<std::string>();
            else if (key == "relays") relays = as_count(v);
            else if (key == "target_rate") target_rate = v.get<double>();
            else if (key == "doppler_hz") doppler_hz = v.get<double>();
            else if (key == "sample_rate_hz") sample_rate_hz = v.get<double>();
            else if (key == "delays_ms") delays_ms = json_list<double>(v, "delays_ms");
            else if (key == "schemes") {
                schemes.clear();
                for (const auto& s : json_list<std::string>(v, "schemes")) {
                    schemes.push_back(coop::parse_scheme(s));
                }
            }
            else if (key == "snr_db") snr_db = json_list<double>(v, "snr_db");
            else if (key == "mode") mode = v.get<std::string>();
            else if (key == "prs_correlation") prs_correlation = v.get<double>();
            else if (key == "frame_stride") frame_stride = as_count(v);
            else if (key == "trials") trials = as_count(v);
            else if (key == "seed") seed = v.get<std::uint64_t>();
            else if (key == "workers") workers = as_count(v);
            else if (key == "block_size") block_size = as_count(v);
            else if (key == "architectures") architectures = json_list<std::string>(v, "architectures");
            else if (key == "horizon_steps") horizon_steps = as_count(v);
            else if (key == "window") window = as_count(v);
            else if (key == "train_fraction") train_fraction = v.get<double>();
            else if (key == "trace_length") trace_length = as_count(v);
            else if (key == "epochs") epochs = as_count(v);
            else if (key == "batch_size") batch_size = as_count(v);
            else if (key == "learning_rate") learning_rate = v.get<double>();
            else if (key == "seeds") seeds = as_count(v);
            else if (key == "model_path") model_path = v.get<std::string>();
            else if (key == "frames") frames = as_count(v);
            else if (key == "base_time_us") base_time_us = v.get<double>();
            else if (key == "guard_us") guard_us = v.get<double>();
            else if (key == "oracle_forecast") oracle_forecast = v.get<bool>();
            else if (key == "prediction_rate_hz") prediction_rate_hz = v.get<double>();
            else if (key == "capacities_flops") capacities_flops = json_list<double>(v, "capacities_flops");
            else if (key == "exact_counting") exact_counting = v.get<bool>();
            else throw ConfigError("unknown config key: " + key);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key " + key + ": " + e.what());
        } catch (const InvalidArgument& e) {
            throw ConfigError("config key " + key + ": " + e.what());
        }
    }
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config " + path.string());
    }
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    base.apply_json(j);
    return base;
}

predictor::PredictorConfig predictor_config(const ExperimentConfig& c, const std::string& architecture,
                                            std::size_t horizon)
{
    predictor::PredictorConfig p;
    p.hidden_layers = predictor::parse_hidden_layers(architecture);
    p.horizon_steps = horizon;
    p.window = c.window;
    p.train_fraction = c.train_fraction;
    p.training.epochs = c.epochs;
    p.training.batch_size = c.batch_size;
    p.training.adam.learning_rate = c.learning_rate;
    p.training.seed = c.seed;
    return p;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const Logger& log)
{
    const auto s = start(config);
    auto o = run_outcome(config, s.dir, log);
    write_manifest(config, s.dir, o.result, elapsed(s), std::nullopt);
    return std::move(o.result);
}

ExperimentConfig config_from_manifest(const fs::path& manifest, const std::optional<fs::path>& output_dir)
{
    std::ifstream in(manifest);
    if (!in) {
        throw IoError("cannot read manifest " + manifest.string());
    }
    Json m;
    try {
        m = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("manifest " + manifest.string() + ": " + e.what());
    }
    if (!m.contains("config")) {
        throw ConfigError("manifest " + manifest.string() + " has no config");
    }
    ExperimentConfig c;
    c.apply_json(m["config"]);
    c.output_dir = output_dir ? *output_dir : manifest.parent_path();
    if (c.output_dir.empty()) {
        c.output_dir = ".";
    }
    return c;
}

ExperimentResult rerun(const fs::path& manifest, const std::optional<fs::path>& output_dir, const Logger& log)
{
    const auto c = config_from_manifest(manifest, output_dir);
    std::ifstream in(manifest);
    const auto m = Json::parse(in);
    if (m.contains("figure") && m["figure"].is_string()) {
        return reproduce_figure(m["figure"].get<std::string>(), c, log);
    }
    return run_experiment(c, log);
}

ExperimentConfig figure_config(std::string_view tag)
{
    ExperimentConfig c;
    if (tag == "3a") {
        c.kind = ExperimentKind::hyper;
        c.name = "fig3a";
        c.architectures = split_figure_architectures();
        c.horizon_steps = 2;
        c.trace_length = 250'000;
        c.epochs = 3;
        c.seeds = 1;
    } else if (tag == "3b") {
        c.kind = ExperimentKind::outage;
        c.name = "fig3b";
        c.delays_ms = {2.0, 3.0};
        for (int i = 0; i <= 16; ++i) {
            c.snr_db.push_back(2.5 * i);
        }
    } else if (tag == "3c") {
        c.kind = ExperimentKind::capacity;
        c.name = "fig3c";
        c.delays_ms = {3.0};
        for (int i = 0; i <= 12; ++i) {
            c.snr_db.push_back(2.5 * i);
        }
    } else {
        throw ConfigError("unknown figure tag: " + std::string(tag) + " (expected 3a, 3b or 3c)");
    }
    return c;
}

ExperimentResult reproduce_figure(std::string_view tag, const ExperimentConfig& config, const Logger& log)
{
    (void)figure_config(tag);
    const auto s = start(config);
    auto o = run_outcome(config, s.dir, log);

    Json sidecar;
    sidecar["figure"] = std::string(tag);
    const auto checks = figure_checks(tag, o);
    sidecar["checks"] = checks;
    bool all = true;
    for (const auto& c : checks) {
        all = all && c["pass"].get<bool>();
    }
    sidecar["all_pass"] = all;
    const auto path = s.dir / (config.stem() + ".expected.json");
    write_text(path, sidecar.dump(2) + "\n");
    o.result.files.push_back(path);
    o.result.summary["checks_pass"] = all;
    write_manifest(config, s.dir, o.result, elapsed(s), tag);
    return std::move(o.result);
}

std::optional<double> tail_slope(std::span<const coop::MonteCarloResult> curve, double floor, double decades)
{
    double lowest = std::numeric_limits<double>::infinity();
    for (const auto& p : curve) {
        if (p.outage_prob >= floor) {
            lowest = std::min(lowest, p.outage_prob);
        }
    }
    if (!std::isfinite(lowest)) {
        return std::nullopt;
    }
    const double ceiling = lowest * std::pow(10.0, decades);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t n = 0;
    for (const auto& p : curve) {
        if (p.outage_prob < floor || p.outage_prob > ceiling) {
            continue;
        }
        const double x = p.snr_db / 10.0;
        const double y = std::log10(p.outage_prob);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    if (n < 3) {
        return std::nullopt;
    }
    const double dn = static_cast<double>(n);
    return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

std::optional<double> snr_at_outage(std::span<const coop::MonteCarloResult> curve, double target)
{
    for (std::size_t i = 1; i < curve.size(); ++i) {
        const auto& a = curve[i - 1];
        const auto& b = curve[i];
        if (a.outage_prob >= target && b.outage_prob < target) {
            if (b.outage_prob <= 0.0) {
                return b.snr_db;
            }
            const double la = std::log10(a.outage_prob);
            const double lb = std::log10(b.outage_prob);
            const double lt = std::log10(target);
            return a.snr_db + (b.snr_db - a.snr_db) * (la - lt) / (la - lb);
        }
    }
    return std::nullopt;
}

std::optional<double> capacity_at(std::span<const coop::MonteCarloResult> curve, double snr_db)
{
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (std::abs(curve[i].snr_db - snr_db) < 1e-9) {
            return curve[i].capacity;
        }
        if (i > 0 && curve[i - 1].snr_db < snr_db && curve[i].snr_db > snr_db) {
            const double w = (snr_db - curve[i - 1].snr_db) / (curve[i].snr_db - curve[i - 1].snr_db);
            return (1 - w) * curve[i - 1].capacity + w * curve[i].capacity;
        }
    }
    return std::nullopt;
}

double median(std::vector<double> values)
{
    require(!values.empty(), "median of an empty sample");
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

} // namespace prs::harness
