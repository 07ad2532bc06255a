#pragma once

// Channel-magnitude predictor: a scalar tanh input layer, a stack of
// recurrent hidden layers and a scalar tanh output layer, trained to map a
// window of past normalized magnitudes to the magnitude D steps ahead.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prs/fading.hpp"
#include "prs/recurrent.hpp"

namespace prs::predictor {

struct HiddenLayer {
    nn::LayerKind kind = nn::LayerKind::lstm;
    std::size_t neurons = 25;

    friend bool operator==(const HiddenLayer&, const HiddenLayer&) = default;
};

struct PredictorConfig {
    std::vector<HiddenLayer> hidden_layers{{nn::LayerKind::lstm, 25}, {nn::LayerKind::lstm, 25}};
    std::size_t horizon_steps = 2; ///< D
    std::size_t window = 16;       ///< past magnitudes per prediction
    double train_fraction = 0.8;
    /// Multiplier applied to magnitudes. Unset: derived from the training
    /// split so that its 99.9th percentile maps to 0.9.
    std::optional<double> normalization;
    nn::TrainConfig training;

    /// Throws InvalidArgument.
    void validate() const;
    /// e.g. "LSTM-2(25,25)".
    std::string name() const;
};

/// Parses "lstm:25,lstm:25" style layer lists.
std::vector<HiddenLayer> parse_hidden_layers(const std::string& text);

nn::RecurrentNet build_predictor(const PredictorConfig& config);

/// 0.9 divided by the 99.9th percentile of `magnitudes`.
double quantile_scale(std::span<const double> magnitudes);

/// Sliding windows over a shared normalized magnitude series. Sample i uses
/// inputs a[first + i .. first + i + window - 1] and target
/// a[first + i + window - 1 + horizon].
class MagnitudeWindows final : public nn::SequenceDataset {
public:
    MagnitudeWindows(std::shared_ptr<const std::vector<double>> series, std::size_t first, std::size_t count,
                     std::size_t window, std::size_t horizon);

    std::size_t size() const override { return count_; }
    std::size_t window() const override { return window_; }
    std::size_t input_size() const override { return 1; }
    std::size_t output_size() const override { return 1; }
    void gather(std::span<const std::size_t> indices, std::vector<nn::Matrix>& inputs,
                nn::Matrix& targets) const override;

    std::size_t horizon() const noexcept { return horizon_; }
    /// Series index of the first input of sample i and of its target.
    std::size_t input_index(std::size_t i) const { return first_ + i; }
    std::size_t target_index(std::size_t i) const { return first_ + i + window_ - 1 + horizon_; }
    /// Smallest and largest series index touched by any sample.
    std::size_t min_index() const noexcept { return first_; }
    std::size_t max_index() const noexcept { return first_ + count_ + window_ - 2 + horizon_; }
    double target(std::size_t i) const { return (*series_)[target_index(i)]; }

private:
    std::shared_ptr<const std::vector<double>> series_;
    std::size_t first_;
    std::size_t count_;
    std::size_t window_;
    std::size_t horizon_;
};

struct PredictionDataset {
    MagnitudeWindows train;
    MagnitudeWindows test;
    double scale;                                  ///< normalized = magnitude * scale
    std::shared_ptr<const std::vector<double>> series; ///< normalized magnitudes
};

/// Chronological split at floor(train_fraction * length): every train sample
/// lies entirely before the split, every test sample entirely after it.
/// Throws InvalidArgument when either side has no complete sample.
PredictionDataset make_dataset(const fading::FadingTrace& trace, std::size_t horizon, std::size_t window,
                               double train_fraction, std::optional<double> normalization = std::nullopt);

struct PredictionReport {
    double mse = 0.0;
    double correlation = 0.0; ///< Pearson, on magnitudes
    std::size_t horizon_steps = 0;
    std::size_t count = 0;

    std::string to_json() const;
};

/// MSE and Pearson correlation of predicted vs actual magnitudes. A pair of
/// constant sequences has correlation 1 when equal and 0 otherwise.
PredictionReport compare(std::span<const double> predicted, std::span<const double> actual,
                         std::size_t horizon_steps);

class ChannelPredictor {
public:
    /// An untrained predictor with freshly initialized weights.
    ChannelPredictor(PredictorConfig config, double scale, std::uint64_t seed);
    /// Wraps an existing (trained) network.
    ChannelPredictor(PredictorConfig config, nn::RecurrentNet net, double scale);

    const PredictorConfig& config() const noexcept { return config_; }
    const nn::RecurrentNet& net() const noexcept { return net_; }
    double scale() const noexcept { return scale_; }
    bool trained() const noexcept { return trained_; }

    nn::TrainResult fit(const MagnitudeWindows& train, const nn::EpochCallback& on_epoch = {});

    /// Predicted magnitude D steps after the last entry of `recent`, which
    /// must hold exactly window() de-normalized magnitudes. Never negative.
    /// Throws InvalidState if untrained or the weights are not finite.
    double predict(std::span<const double> recent) const;

    /// De-normalized predictions for every sample of `windows`.
    std::vector<double> predict_all(const MagnitudeWindows& windows) const;

    /// Predictions for windows ending at each of `ends` (indices into the
    /// de-normalized `magnitudes`); each end must be >= window() - 1.
    std::vector<double> predict_at(std::span<const double> magnitudes, std::span<const std::size_t> ends) const;

    /// Throws InvalidArgument on an empty set.
    PredictionReport evaluate(const MagnitudeWindows& test) const;

    void save(const std::filesystem::path& path) const;
    static ChannelPredictor load(const std::filesystem::path& path);

private:
    void check_ready() const;

    PredictorConfig config_;
    nn::RecurrentNet net_;
    double scale_;
    bool trained_ = false;
};

struct TrainedPredictor {
    ChannelPredictor predictor;
    PredictionReport report;
    nn::TrainResult training;
};

/// Builds the dataset from `trace`, fits a predictor seeded with `seed` and
/// evaluates it on the held-out split.
TrainedPredictor train_predictor(const PredictorConfig& config, const fading::FadingTrace& trace,
                                 std::uint64_t seed, const nn::EpochCallback& on_epoch = {});

/// Correlation of Rayleigh envelopes |x|, |y| whose complex Gaussian
/// coefficients have correlation magnitude rho, and its inverse.
double envelope_correlation(double complex_rho);
double complex_correlation(double envelope_rho);

} // namespace prs::predictor
