#include "prs/fading.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "prs/byte_io.hpp"
#include "prs/error.hpp"
#include "prs/rng.hpp"

namespace prs::fading {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::size_t kResyncInterval = 4096;
constexpr char kTraceMagic[8] = {'P', 'R', 'S', 'T', 'R', 'A', 'C', 'E'};

} // namespace

double bessel_j0(double x)
{
    if (!std::isfinite(x)) {
        throw InvalidArgument("bessel_j0: argument must be finite");
    }
    // J0(x) = 1/(2 pi) * integral over [0, 2 pi) of cos(x sin t) dt. The integrand
    // is periodic and entire, so the N-point trapezoid rule has error of order
    // J_N(x); N well above |x| gives full double precision.
    const double ax = std::abs(x);
    const auto n = static_cast<std::size_t>(2.0 * std::ceil(ax)) + 48;
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        sum += std::cos(ax * std::sin(kTwoPi * static_cast<double>(k) / static_cast<double>(n)));
    }
    return sum / static_cast<double>(n);
}

double jakes_correlation(double doppler_hz, double delay_s)
{
    if (!(doppler_hz >= 0.0) || !(delay_s >= 0.0)) {
        throw InvalidArgument("jakes_correlation: doppler and delay must be non-negative");
    }
    return bessel_j0(kTwoPi * doppler_hz * delay_s);
}

void FadingParams::validate() const
{
    require(std::isfinite(doppler_hz) && doppler_hz >= 0.0, "doppler_hz must be >= 0");
    require(std::isfinite(sample_rate_hz) && sample_rate_hz > 2.0 * doppler_hz,
            "sample_rate_hz must exceed twice the Doppler frequency");
    require(std::isfinite(mean_power) && mean_power > 0.0, "mean_power must be > 0");
    require(length >= 1, "trace length must be >= 1");
}

FadingTrace generate_trace(const FadingParams& params, std::uint64_t seed, std::size_t oscillators)
{
    params.validate();
    require(oscillators >= 32, "at least 32 oscillators are required");

    Engine engine(derive_seed(seed, 0));
    std::uniform_real_distribution<double> uniform(0.0, kTwoPi);

    // Mirror-image angles share a Doppler frequency when the rotation is near
    // 0 or pi; keeping it within pi/4 of pi/2 keeps all frequencies distinct.
    const double rotation = 0.5 * kPi + std::uniform_real_distribution<double>(-0.25 * kPi, 0.25 * kPi)(engine);
    std::vector<double> step(oscillators);  // phase advance per sample
    std::vector<double> offset(oscillators);
    for (std::size_t n = 0; n < oscillators; ++n) {
        const double angle = (kTwoPi * static_cast<double>(n) + rotation) / static_cast<double>(oscillators);
        step[n] = kTwoPi * params.doppler_hz * std::cos(angle) / params.sample_rate_hz;
        offset[n] = uniform(engine);
    }

    const double amplitude = std::sqrt(params.mean_power / static_cast<double>(oscillators));
    FadingTrace trace{params, std::vector<Complex>(params.length)};

    // Phasors advance by a fixed rotation each sample and are recomputed
    // exactly every kResyncInterval samples to bound rounding drift.
    std::vector<Complex> phasor(oscillators);
    std::vector<Complex> rotor(oscillators);
    for (std::size_t n = 0; n < oscillators; ++n) {
        rotor[n] = std::polar(1.0, step[n]);
    }
    for (std::size_t t = 0; t < params.length; ++t) {
        if (t % kResyncInterval == 0) {
            for (std::size_t n = 0; n < oscillators; ++n) {
                const double phase = std::fmod(step[n] * static_cast<double>(t), kTwoPi) + offset[n];
                phasor[n] = std::polar(1.0, phase);
            }
        }
        Complex acc{0.0, 0.0};
        for (std::size_t n = 0; n < oscillators; ++n) {
            acc += phasor[n];
            phasor[n] *= rotor[n];
        }
        trace.samples[t] = amplitude * acc;
    }
    return trace;
}

std::vector<double> magnitudes(const FadingTrace& trace)
{
    std::vector<double> out(trace.samples.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::abs(trace.samples[i]);
    }
    return out;
}

double mean_power(const FadingTrace& trace)
{
    require(!trace.samples.empty(), "mean_power: empty trace");
    double sum = 0.0;
    for (const auto& h : trace.samples) {
        sum += std::norm(h);
    }
    return sum / static_cast<double>(trace.samples.size());
}

double autocorrelation(const FadingTrace& trace, std::size_t lag)
{
    const auto& h = trace.samples;
    require(lag < h.size(), "autocorrelation: lag exceeds trace length");
    double cross = 0.0;
    for (std::size_t t = lag; t < h.size(); ++t) {
        cross += (h[t] * std::conj(h[t - lag])).real();
    }
    cross /= static_cast<double>(h.size() - lag);
    return cross / mean_power(trace);
}

CorrelatedPairSampler::CorrelatedPairSampler(double rho, double mean_power)
    : rho_(rho),
      innovation_scale_(0.0),
      normal_(0.0, std::sqrt(mean_power / 2.0))
{
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw InvalidArgument("correlation coefficient must lie in [0, 1]");
    }
    require(std::isfinite(mean_power) && mean_power > 0.0, "mean_power must be > 0");
    innovation_scale_ = std::sqrt(1.0 - rho * rho);
}

std::vector<CorrelatedPair> correlated_pair(double rho, std::uint64_t seed, std::size_t count,
                                            double mean_power)
{
    CorrelatedPairSampler sampler(rho, mean_power);
    Engine engine(derive_seed(seed, 0));
    std::vector<CorrelatedPair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        pairs.push_back(sampler(engine));
    }
    return pairs;
}

void write_trace_csv(const FadingTrace& trace, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.precision(17);
    out << "index,re,im\n";
    for (std::size_t i = 0; i < trace.samples.size(); ++i) {
        out << i << ',' << trace.samples[i].real() << ',' << trace.samples[i].imag() << '\n';
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

void write_trace_binary(const FadingTrace& trace, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(kTraceMagic, sizeof kTraceMagic);
    io::write_u32(out, 1);
    io::write_f64(out, trace.params.doppler_hz);
    io::write_f64(out, trace.params.sample_rate_hz);
    io::write_f64(out, trace.params.mean_power);
    io::write_u64(out, trace.samples.size());
    for (const auto& h : trace.samples) {
        io::write_f64(out, h.real());
        io::write_f64(out, h.imag());
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

FadingTrace read_trace_binary(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8]{};
    in.read(magic, sizeof magic);
    if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kTraceMagic))) {
        throw IoError("not a trace file: " + path.string());
    }
    if (const auto version = io::read_u32(in); version != 1) {
        throw IoError("unsupported trace version " + std::to_string(version));
    }
    FadingTrace trace;
    trace.params.doppler_hz = io::read_f64(in);
    trace.params.sample_rate_hz = io::read_f64(in);
    trace.params.mean_power = io::read_f64(in);
    trace.params.length = io::read_u64(in);
    trace.samples.resize(trace.params.length);
    for (auto& h : trace.samples) {
        const double re = io::read_f64(in);
        const double im = io::read_f64(in);
        h = {re, im};
    }
    return trace;
}

} // namespace prs::fading
