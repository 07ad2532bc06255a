#pragma once

// Experiment orchestration: configuration, CSV output, run manifests and the
// canned figure reproductions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prs/cooperative.hpp"
#include "prs/predictor.hpp"

namespace prs::harness {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kVersion = "0.1.0";

enum class ExperimentKind { train, hyper, outage, capacity, contend, complexity };

std::string_view to_string(ExperimentKind kind);
/// Accepts the CLI names: train, sweep-hyper (or hyper), outage, capacity,
/// contend, complexity. Throws ConfigError.
ExperimentKind parse_kind(std::string_view name);

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::outage;
    std::string name;                 ///< output file stem; defaults to the kind
    std::filesystem::path output_dir; ///< empty: PRS_OUTPUT_DIR or "results"

    // Network scenario.
    std::size_t relays = 8;
    double target_rate = 1.0;
    double doppler_hz = 100.0;
    double sample_rate_hz = 1000.0;
    std::vector<double> delays_ms{3.0};
    std::vector<coop::Scheme> schemes{coop::Scheme::perfect, coop::Scheme::ors, coop::Scheme::ostc,
                                      coop::Scheme::prs};
    std::vector<double> snr_db; ///< empty: 0..30 dB in 2.5 dB steps
    std::string mode = "statistical";
    /// Magnitude correlation of the modeled predictor in statistical PRS.
    double prs_correlation = 0.95;
    std::size_t frame_stride = 10;

    // Monte Carlo.
    std::size_t trials = 1'000'000;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::size_t block_size = 4096;

    // Predictor and training.
    std::vector<std::string> architectures{"lstm:25,lstm:25"};
    std::size_t horizon_steps = 2;
    std::size_t window = 16;
    double train_fraction = 0.8;
    std::size_t trace_length = 1'000'000;
    std::size_t epochs = 10;
    std::size_t batch_size = 256;
    double learning_rate = 3e-3;
    std::size_t seeds = 1;
    /// train: where to save; timeseries PRS and contend: model to load
    /// (trained on the fly when empty).
    std::string model_path;

    // Contention.
    std::size_t frames = 10'000;
    double base_time_us = 100.0;
    double guard_us = 5.0;
    bool oracle_forecast = false;

    // Complexity.
    double prediction_rate_hz = 1000.0;
    std::vector<double> capacities_flops{179e9, 2.7e9};
    bool exact_counting = false;

    /// Throws ConfigError describing the first problem found.
    void validate() const;

    std::vector<double> snr_grid() const;
    std::filesystem::path resolved_output_dir() const;
    std::string stem() const;

    /// Every field except output_dir.
    Json to_json() const;
    /// Overrides the fields present in `j`; unknown keys throw ConfigError.
    void apply_json(const Json& j);
};

/// Loads a JSON config file on top of `base`. Throws ConfigError / IoError.
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Predictor configuration for one architecture string.
predictor::PredictorConfig predictor_config(const ExperimentConfig& config, const std::string& architecture,
                                            std::size_t horizon);

/// Delay in samples; throws ConfigError unless it is a whole number.
std::size_t delay_samples(double delay_ms, double sample_rate_hz);

/// Progress messages; ignored when empty.
using Logger = std::function<void(const std::string&)>;

struct ExperimentResult {
    std::vector<std::filesystem::path> files; ///< CSV and other outputs, manifest last
    Json summary;
};

/// Runs the experiment, writing CSV files plus "<stem>.manifest.json".
/// Rerunning the config stored in a manifest reproduces every CSV byte for
/// byte.
ExperimentResult run_experiment(const ExperimentConfig& config, const Logger& log = {});

/// Config stored in a manifest. Outputs go next to the manifest unless
/// `output_dir` is given.
ExperimentConfig config_from_manifest(const std::filesystem::path& manifest,
                                      const std::optional<std::filesystem::path>& output_dir = std::nullopt);

/// Reruns the experiment (or figure) recorded in a manifest.
ExperimentResult rerun(const std::filesystem::path& manifest,
                       const std::optional<std::filesystem::path>& output_dir = std::nullopt, const Logger& log = {});

/// Canned desk-scale config for figure "3a", "3b" or "3c". Throws
/// ConfigError for other tags.
ExperimentConfig figure_config(std::string_view tag);

/// Runs `config` (usually figure_config(tag) with overrides) and writes
/// "<stem>.expected.json" holding the reference values, what was observed
/// and whether each check held.
ExperimentResult reproduce_figure(std::string_view tag, const ExperimentConfig& config, const Logger& log = {});

// Curve analysis used by the figure checks.

/// Least-squares slope of log10(P_out) against log10(SNR) over the last
/// `decades` decades of the curve above `floor`. Nullopt when fewer than
/// three points qualify.
std::optional<double> tail_slope(std::span<const coop::MonteCarloResult> curve, double floor = 1e-4,
                                 double decades = 2.0);

/// SNR in dB where the outage curve crosses `target`, interpolating log10
/// P_out linearly in dB. Nullopt if the curve never crosses it.
std::optional<double> snr_at_outage(std::span<const coop::MonteCarloResult> curve, double target);

/// Linear interpolation of capacity at `snr_db`.
std::optional<double> capacity_at(std::span<const coop::MonteCarloResult> curve, double snr_db);

/// Median of a non-empty sample.
double median(std::vector<double> values);

} // namespace prs::harness
