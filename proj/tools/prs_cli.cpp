// Command-line front end for the experiment harness.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prs/error.hpp"
#include "prs/harness.hpp"

using prs::harness::ExperimentConfig;
using prs::harness::ExperimentKind;
using prs::harness::Json;

namespace {

enum class FieldType { number, text, numbers, texts, flag };

struct Field {
    const char* flag;
    const char* key;
    FieldType type;
    const char* help;
    std::vector<ExperimentKind> kinds; ///< empty: every experiment
};

using K = ExperimentKind;

const std::vector<Field>& fields()
{
    static const std::vector<Field> f{
        {"--name", "name", FieldType::text, "Output file stem", {}},
        {"--seed", "seed", FieldType::number, "Master seed", {}},
        {"--relays,-K", "relays", FieldType::number, "Number of relays", {K::outage, K::capacity, K::contend}},
        {"--rate,-R", "target_rate", FieldType::number, "Target rate (bps/Hz)", {K::outage, K::capacity, K::contend}},
        {"--doppler", "doppler_hz", FieldType::number, "Maximum Doppler frequency (Hz)", {}},
        {"--sample-rate", "sample_rate_hz", FieldType::number, "Channel sample rate (Hz)", {}},
        {"--delays", "delays_ms", FieldType::numbers, "CSI delays in ms, comma separated",
         {K::outage, K::capacity, K::contend}},
        {"--schemes", "schemes", FieldType::texts, "perfect,ors,ostc,prs", {K::outage, K::capacity}},
        {"--snr", "snr_db", FieldType::numbers, "SNR grid in dB: a,b,c or start:step:stop",
         {K::outage, K::capacity, K::contend}},
        {"--mode", "mode", FieldType::text, "statistical or timeseries", {K::outage, K::capacity}},
        {"--prs-correlation", "prs_correlation", FieldType::number,
         "Predictor magnitude correlation for statistical PRS", {K::outage, K::capacity}},
        {"--frame-stride", "frame_stride", FieldType::number, "Samples between frames in timeseries mode",
         {K::outage, K::capacity}},
        {"--trials", "trials", FieldType::number, "Monte-Carlo trials per SNR point", {K::outage, K::capacity}},
        {"--workers,-j", "workers", FieldType::number, "Worker threads", {K::outage, K::capacity}},
        {"--block-size", "block_size", FieldType::number, "Trials per seeded block", {K::outage, K::capacity}},
        {"--arch", "architectures", FieldType::texts,
         "Hidden layers such as lstm:25,lstm:25; repeat for several", {}},
        {"--horizon,-D", "horizon_steps", FieldType::number, "Prediction horizon in samples", {K::train, K::hyper}},
        {"--window", "window", FieldType::number, "Input window length", {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--train-fraction", "train_fraction", FieldType::number, "Chronological train share",
         {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--trace-length", "trace_length", FieldType::number, "Training trace length in samples",
         {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--epochs", "epochs", FieldType::number, "Training epochs", {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--batch", "batch_size", FieldType::number, "Mini-batch size", {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--lr", "learning_rate", FieldType::number, "Adam learning rate",
         {K::train, K::hyper, K::outage, K::capacity, K::contend}},
        {"--seeds", "seeds", FieldType::number, "Seeds per architecture", {K::hyper}},
        {"--model", "model_path", FieldType::text, "Model file to save (train) or load",
         {K::train, K::outage, K::capacity, K::contend}},
        {"--frames", "frames", FieldType::number, "Frames to simulate", {K::contend}},
        {"--base-time", "base_time_us", FieldType::number, "Timer constant lambda (us)", {K::contend}},
        {"--guard", "guard_us", FieldType::number, "Guard time (us)", {K::contend}},
        {"--oracle", "oracle_forecast", FieldType::flag, "Use the true future magnitudes", {K::contend}},
        {"--prediction-rate", "prediction_rate_hz", FieldType::number, "Predictions per second", {K::complexity}},
        {"--capacity", "capacities_flops", FieldType::numbers, "Hardware FLOPS, comma separated", {K::complexity}},
        {"--exact", "exact_counting", FieldType::flag, "Count element-wise operations too", {K::complexity}},
    };
    return f;
}

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, sep)) {
        if (!part.empty()) {
            out.push_back(part);
        }
    }
    return out;
}

double to_number(const std::string& s)
{
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size()) {
        throw prs::ConfigError("not a number: " + s);
    }
    return v;
}

Json numbers(const std::string& s)
{
    Json a = Json::array();
    if (s.find(':') != std::string::npos) {
        const auto p = split(s, ':');
        if (p.size() != 3) {
            throw prs::ConfigError("range must be start:step:stop, got " + s);
        }
        const double start = to_number(p[0]);
        const double step = to_number(p[1]);
        const double stop = to_number(p[2]);
        if (!(step > 0)) {
            throw prs::ConfigError("range step must be positive");
        }
        for (int i = 0; start + i * step <= stop + 1e-9 * step; ++i) {
            a.push_back(start + i * step);
        }
        return a;
    }
    for (const auto& x : split(s, ',')) {
        a.push_back(to_number(x));
    }
    return a;
}

/// Flag values of one subcommand, turned into config JSON after parsing.
struct Bound {
    std::vector<std::pair<const Field*, CLI::Option*>> options;
    std::vector<std::unique_ptr<std::string>> scalars;
    std::vector<std::unique_ptr<std::vector<std::string>>> lists;
    std::vector<std::unique_ptr<bool>> flags;
    std::string config_file;
    std::string output_dir;

    Json overrides() const
    {
        Json j = Json::object();
        std::size_t si = 0;
        std::size_t li = 0;
        std::size_t fi = 0;
        for (const auto& [field, opt] : options) {
            const bool given = opt->count() > 0;
            switch (field->type) {
            case FieldType::number: {
                const auto& v = *scalars[si++];
                if (given) {
                    const double d = to_number(v);
                    if (d >= 0 && v.find_first_of(".eE") == std::string::npos) {
                        j[field->key] = static_cast<std::uint64_t>(std::stoull(v));
                    } else {
                        j[field->key] = d;
                    }
                }
                break;
            }
            case FieldType::text: {
                const auto& v = *scalars[si++];
                if (given) {
                    j[field->key] = v;
                }
                break;
            }
            case FieldType::numbers: {
                const auto& v = *scalars[si++];
                if (given) {
                    j[field->key] = numbers(v);
                }
                break;
            }
            case FieldType::texts: {
                const auto& v = *lists[li++];
                if (given) {
                    Json a = Json::array();
                    for (const auto& item : v) {
                        if (std::string(field->key) == "architectures") {
                            a.push_back(item);
                        } else {
                            for (const auto& part : split(item, ',')) {
                                a.push_back(part);
                            }
                        }
                    }
                    j[field->key] = a;
                }
                break;
            }
            case FieldType::flag: {
                const bool v = *flags[fi++];
                if (given) {
                    j[field->key] = v;
                }
                break;
            }
            }
        }
        return j;
    }
};

bool applies(const Field& f, std::optional<ExperimentKind> kind)
{
    if (f.kinds.empty() || !kind) {
        return true;
    }
    return std::find(f.kinds.begin(), f.kinds.end(), *kind) != f.kinds.end();
}

void bind_fields(CLI::App* app, Bound& b, std::optional<ExperimentKind> kind)
{
    app->add_option("--config,-c", b.config_file, "JSON config file; its keys override flags")->check(CLI::ExistingFile);
    app->add_option("--output-dir,-o", b.output_dir, "Output directory (default: $PRS_OUTPUT_DIR or ./results)");
    for (const auto& f : fields()) {
        if (!applies(f, kind)) {
            continue;
        }
        CLI::Option* opt = nullptr;
        switch (f.type) {
        case FieldType::number:
        case FieldType::text:
        case FieldType::numbers:
            b.scalars.push_back(std::make_unique<std::string>());
            opt = app->add_option(f.flag, *b.scalars.back(), f.help);
            break;
        case FieldType::texts:
            b.lists.push_back(std::make_unique<std::vector<std::string>>());
            opt = app->add_option(f.flag, *b.lists.back(), f.help);
            break;
        case FieldType::flag:
            b.flags.push_back(std::make_unique<bool>(false));
            opt = app->add_flag(f.flag, *b.flags.back(), f.help);
            break;
        }
        b.options.emplace_back(&f, opt);
    }
}

ExperimentConfig resolve(ExperimentConfig base, const Bound& b)
{
    base.apply_json(b.overrides());
    if (!b.config_file.empty()) {
        base = prs::harness::load_config(b.config_file, base);
    }
    if (!b.output_dir.empty()) {
        base.output_dir = b.output_dir;
    }
    return base;
}

void report(const prs::harness::ExperimentResult& r)
{
    for (const auto& f : r.files) {
        std::cout << "wrote " << f.string() << '\n';
    }
    if (!r.summary.empty()) {
        std::cout << r.summary.dump(2) << '\n';
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Predictive relay selection experiments"};
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    bool print_config = false;
    app.add_flag("--quiet,-q", quiet, "Suppress progress messages");
    app.add_flag("--print-config", print_config, "Print the resolved config and exit");
    app.set_version_flag("--version", std::string(prs::harness::kVersion));

    struct Command {
        const char* name;
        ExperimentKind kind;
        const char* help;
    };
    const std::vector<Command> commands{
        {"train", K::train, "Train a channel predictor and evaluate it"},
        {"sweep-hyper", K::hyper, "Median test MSE over seeds for several architectures"},
        {"outage", K::outage, "Outage probability against SNR"},
        {"capacity", K::capacity, "Capacity against SNR"},
        {"contend", K::contend, "Timer contention over consecutive frames"},
        {"complexity", K::complexity, "Operation counts and FLOPS"},
    };
    std::vector<std::unique_ptr<Bound>> bounds;
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        bounds.push_back(std::make_unique<Bound>());
        bind_fields(sub, *bounds.back(), c.kind);
        subs.push_back(sub);
    }

    auto* figure = app.add_subcommand("figure", "Reproduce figure 3a, 3b or 3c with reference checks");
    std::string tag;
    figure->add_option("tag", tag, "3a, 3b or 3c")->required();
    Bound figure_bound;
    bind_fields(figure, figure_bound, std::nullopt);

    auto* rerun = app.add_subcommand("rerun", "Rerun an experiment from its manifest");
    std::string manifest;
    std::string rerun_dir;
    rerun->add_option("manifest", manifest, "Manifest written by an earlier run")->required()->check(CLI::ExistingFile);
    rerun->add_option("--output-dir,-o", rerun_dir, "Output directory (default: next to the manifest)");

    CLI11_PARSE(app, argc, argv);

    const prs::harness::Logger log = [quiet](const std::string& msg) {
        if (!quiet) {
            std::cerr << "[prs] " << msg << '\n';
        }
    };

    try {
        if (rerun->parsed()) {
            std::optional<std::filesystem::path> dir;
            if (!rerun_dir.empty()) {
                dir = rerun_dir;
            }
            report(prs::harness::rerun(manifest, dir, log));
            return 0;
        }
        if (figure->parsed()) {
            const auto config = resolve(prs::harness::figure_config(tag), figure_bound);
            if (print_config) {
                std::cout << config.to_json().dump(2) << '\n';
                return 0;
            }
            const auto r = prs::harness::reproduce_figure(tag, config, log);
            report(r);
            return 0;
        }
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (!subs[i]->parsed()) {
                continue;
            }
            ExperimentConfig base;
            base.kind = commands[i].kind;
            if (base.kind == K::complexity) {
                base.architectures = {"lstm:25,lstm:25", "gru:25,gru:25", "rnn:25,rnn:25"};
            }
            const auto config = resolve(base, *bounds[i]);
            if (print_config) {
                std::cout << config.to_json().dump(2) << '\n';
                return 0;
            }
            report(prs::harness::run_experiment(config, log));
            return 0;
        }
    } catch (const prs::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
