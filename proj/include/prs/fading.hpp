#pragma once

// Temporally correlated Rayleigh fading under the Jakes (isotropic scattering)
// Doppler model.

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace prs::fading {

using Complex = std::complex<double>;

/// Zeroth-order Bessel function of the first kind.
/// Throws InvalidArgument for non-finite input.
double bessel_j0(double x);

/// Correlation between a fading coefficient and its copy `delay_s` seconds
/// earlier: J0(2*pi*doppler_hz*delay_s).
double jakes_correlation(double doppler_hz, double delay_s);

struct FadingParams {
    double doppler_hz = 100.0;
    double sample_rate_hz = 1000.0;
    double mean_power = 1.0;
    std::size_t length = 1;

    /// Throws InvalidArgument unless doppler >= 0, fs > 2 fd, power > 0, length >= 1.
    void validate() const;
};

struct FadingTrace {
    FadingParams params;
    std::vector<Complex> samples;
};

/// Number of sinusoids summed per realization.
inline constexpr std::size_t kDefaultOscillators = 256;

/// Sum-of-sinusoids Rayleigh trace. Arrival angles are equally spaced on the
/// circle with a common random rotation and every oscillator gets an
/// independent uniform phase, so the time-averaged autocorrelation is an
/// N-point trapezoid rule of the J0 integral.
FadingTrace generate_trace(const FadingParams& params, std::uint64_t seed,
                           std::size_t oscillators = kDefaultOscillators);

/// Magnitudes |h[t]| of a trace.
std::vector<double> magnitudes(const FadingTrace& trace);

/// Sample autocorrelation Re E[h[t+lag] h*[t]] / E[|h|^2].
double autocorrelation(const FadingTrace& trace, std::size_t lag);

/// Mean of |h[t]|^2.
double mean_power(const FadingTrace& trace);

struct CorrelatedPair {
    Complex outdated; ///< the estimate available at selection time
    Complex actual;   ///< the coefficient during transmission
};

/// Draws jointly Gaussian (outdated, actual) coefficients with
/// actual = rho*outdated + sqrt(1-rho^2)*w.
class CorrelatedPairSampler {
public:
    explicit CorrelatedPairSampler(double rho, double mean_power = 1.0);

    template <class Engine>
    CorrelatedPair operator()(Engine& engine)
    {
        const Complex outdated{normal_(engine), normal_(engine)};
        if (innovation_scale_ == 0.0) {
            return {outdated, outdated};
        }
        const Complex w{normal_(engine), normal_(engine)};
        return {outdated, rho_ * outdated + innovation_scale_ * w};
    }

    double rho() const noexcept { return rho_; }

private:
    double rho_;
    double innovation_scale_;
    std::normal_distribution<double> normal_;
};

std::vector<CorrelatedPair> correlated_pair(double rho, std::uint64_t seed, std::size_t count,
                                            double mean_power = 1.0);

/// CSV with header "index,re,im".
void write_trace_csv(const FadingTrace& trace, const std::filesystem::path& path);

/// Binary layout, all fields little-endian:
///   "PRSTRACE" (8 bytes), u32 version (=1), f64 doppler_hz, f64 sample_rate_hz,
///   f64 mean_power, u64 length, then length x (f64 re, f64 im).
void write_trace_binary(const FadingTrace& trace, const std::filesystem::path& path);
FadingTrace read_trace_binary(const std::filesystem::path& path);

} // namespace prs::fading
