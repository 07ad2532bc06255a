#pragma once

// Dual-hop decode-and-forward relay network: decoding subset, relay
// selection schemes, per-frame rate/outage and Monte-Carlo estimation of
// outage probability and capacity.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "prs/predictor.hpp"

namespace prs::coop {

enum class Scheme { perfect, ors, prs, ostc };

std::string_view to_string(Scheme scheme);
Scheme parse_scheme(std::string_view name);

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

/// SNR threshold 2^(2R) - 1 of either hop for end-to-end rate R.
double snr_threshold(double rate);

struct NetworkScenario {
    std::size_t relays = 8;       ///< K
    double target_rate = 1.0;     ///< R, bps/Hz
    double total_snr = 100.0;     ///< P / noise power, linear
    double source_fraction = 0.5; ///< share of P used by the source phase
    double relay_fraction = 0.5;  ///< share of P used by the relay phase
    double doppler_hz = 100.0;
    double delay_s = 0.003; ///< CSI age at selection time
    Scheme scheme = Scheme::prs;

    /// Throws InvalidArgument.
    void validate() const;
    double sr_snr() const { return source_fraction * total_snr; }
    double rd_snr() const { return relay_fraction * total_snr; }
};

using RelaySet = std::vector<std::size_t>;

/// Relays whose source-relay SNR supports rate 2R (threshold inclusive).
RelaySet decoding_subset(std::span<const double> sr_snrs, double target_rate);

/// Argmax of `metric` over `ds`, lowest index on ties; nullopt when ds is
/// empty. Used with outdated SNRs (ORS), predicted SNRs (PRS) or actual
/// SNRs (perfect selection).
std::optional<std::size_t> select_best(const RelaySet& ds, std::span<const double> metric);
std::optional<std::size_t> select_ors(const RelaySet& ds, std::span<const double> outdated);
std::optional<std::size_t> select_prs(const RelaySet& ds, std::span<const double> predicted);

/// Best and second-best relay by outdated SNR; a single relay when |ds| = 1,
/// none when ds is empty.
std::vector<std::size_t> select_ostc(const RelaySet& ds, std::span<const double> outdated);

struct RateOutcome {
    double rate = 0.0; ///< bps/Hz, half-duplex factor included
    bool outage = true;
    double e2e_snr = 0.0;
};

/// Rate and outage given the selected relays and the actual relay-destination
/// SNRs. Two selected relays are Alamouti-combined at half power each.
RateOutcome e2e_rate(std::span<const std::size_t> selected, std::span<const double> actual_rd,
                     double target_rate);

struct FrameOutcome {
    RelaySet decoding_subset;
    std::vector<std::size_t> selected;
    double e2e_snr = 0.0;
    double rate = 0.0;
    bool outage = true;
};

/// One frame: decoding subset from `sr_snrs`, selection on `metric`
/// (ignored for perfect, which selects on `actual_rd`), rate on `actual_rd`.
FrameOutcome run_frame(Scheme scheme, std::span<const double> sr_snrs, std::span<const double> metric,
                       std::span<const double> actual_rd, double target_rate);

/// Outdated/actual pairs drawn with correlation rho. Unset rho means the
/// Jakes value for (doppler, delay) for ORS/OSTC and 1 for perfect; PRS
/// needs an explicit (complex-coefficient) rho.
struct StatisticalMode {
    std::optional<double> rho;
};

/// Walks generated fading traces frame by frame; PRS queries the predictor,
/// ORS/OSTC use the sample delay_s earlier, perfect uses the current one.
struct TimeseriesMode {
    std::shared_ptr<const predictor::ChannelPredictor> predictor;
    double sample_rate_hz = 1000.0;
    std::size_t frame_stride = 10; ///< samples between consecutive frames
};

using Mode = std::variant<StatisticalMode, TimeseriesMode>;

std::string_view mode_name(const Mode& mode);

struct MonteCarloConfig {
    std::size_t trials = 1'000'000;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    /// Trials per independently seeded block; results do not depend on
    /// `workers`, but they do depend on this.
    std::size_t block_size = 4096;
};

struct MonteCarloResult {
    double snr_db = 0.0;
    std::size_t trials = 0;
    std::size_t outages = 0;
    double outage_prob = 0.0;
    double outage_stderr = 0.0;
    double capacity = 0.0;
    double capacity_stderr = 0.0;
};

/// Monte-Carlo estimates at every point of `snr_db` (the scenario's
/// total_snr is ignored). All points share the same channel draws, so
/// curves are smooth in SNR. Throws ConfigError for unusable mode/scheme
/// combinations and InvalidArgument for bad arguments.
std::vector<MonteCarloResult> run_sweep(const NetworkScenario& scenario, const Mode& mode,
                                        std::span<const double> snr_db, const MonteCarloConfig& config);

/// Single-point convenience wrapper using scenario.total_snr.
MonteCarloResult run_montecarlo(const NetworkScenario& scenario, const Mode& mode, const MonteCarloConfig& config);

} // namespace prs::coop
