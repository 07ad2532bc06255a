#include "prs/predictor.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "prs/error.hpp"

namespace prs::predictor {

using nlohmann::json;

namespace {

std::string upper(std::string_view s)
{
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
    return out;
}

json config_to_json(const PredictorConfig& c)
{
    json layers = json::array();
    for (const auto& h : c.hidden_layers) {
        layers.push_back({{"kind", nn::to_string(h.kind)}, {"neurons", h.neurons}});
    }
    json j{{"hidden_layers", layers},
           {"horizon_steps", c.horizon_steps},
           {"window", c.window},
           {"train_fraction", c.train_fraction},
           {"batch_size", c.training.batch_size},
           {"epochs", c.training.epochs},
           {"learning_rate", c.training.adam.learning_rate},
           {"bptt_window", c.training.bptt_window}};
    if (c.normalization) {
        j["normalization"] = *c.normalization;
    }
    return j;
}

PredictorConfig config_from_json(const json& j)
{
    PredictorConfig c;
    c.hidden_layers.clear();
    for (const auto& h : j.at("hidden_layers")) {
        c.hidden_layers.push_back({nn::parse_layer_kind(h.at("kind").get<std::string>()),
                                   h.at("neurons").get<std::size_t>()});
    }
    c.horizon_steps = j.at("horizon_steps").get<std::size_t>();
    c.window = j.at("window").get<std::size_t>();
    c.train_fraction = j.at("train_fraction").get<double>();
    c.training.batch_size = j.at("batch_size").get<std::size_t>();
    c.training.epochs = j.at("epochs").get<std::size_t>();
    c.training.adam.learning_rate = j.at("learning_rate").get<double>();
    c.training.bptt_window = j.at("bptt_window").get<std::size_t>();
    if (j.contains("normalization")) {
        c.normalization = j.at("normalization").get<double>();
    }
    return c;
}

double mean(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

} // namespace

void PredictorConfig::validate() const
{
    require(!hidden_layers.empty(), "at least one hidden layer is required");
    for (const auto& h : hidden_layers) {
        require(h.neurons >= 1, "hidden layers need at least one neuron");
        require(nn::is_recurrent(h.kind), "hidden layers must be rnn, lstm or gru");
    }
    require(horizon_steps >= 1, "horizon must be at least one step");
    require(window >= 1, "window must be at least one step");
    require(train_fraction > 0.0 && train_fraction < 1.0, "train fraction must lie in (0, 1)");
    if (normalization) {
        require(std::isfinite(*normalization) && *normalization > 0.0, "normalization must be positive");
    }
}

std::string PredictorConfig::name() const
{
    std::ostringstream out;
    const bool uniform = std::all_of(hidden_layers.begin(), hidden_layers.end(),
                                     [&](const HiddenLayer& h) { return h.kind == hidden_layers.front().kind; });
    out << (uniform && !hidden_layers.empty() ? upper(nn::to_string(hidden_layers.front().kind)) : "MIXED") << '-'
        << hidden_layers.size() << '(';
    for (std::size_t i = 0; i < hidden_layers.size(); ++i) {
        out << (i ? "," : "") << hidden_layers[i].neurons;
    }
    out << ')';
    return out.str();
}

std::vector<HiddenLayer> parse_hidden_layers(const std::string& text)
{
    std::vector<HiddenLayer> layers;
    std::istringstream in(text);
    for (std::string item; std::getline(in, item, ',');) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw InvalidArgument("hidden layer '" + item + "' is not of the form kind:neurons");
        }
        std::string kind = item.substr(0, colon);
        std::transform(kind.begin(), kind.end(), kind.begin(), [](unsigned char c) { return std::tolower(c); });
        std::size_t used = 0;
        long long n = 0;
        try {
            n = std::stoll(item.substr(colon + 1), &used);
        } catch (const std::exception&) {
            throw InvalidArgument("bad neuron count in '" + item + "'");
        }
        if (used != item.size() - colon - 1 || n < 1) {
            throw InvalidArgument("bad neuron count in '" + item + "'");
        }
        layers.push_back({nn::parse_layer_kind(kind), static_cast<std::size_t>(n)});
    }
    require(!layers.empty(), "empty hidden layer list");
    return layers;
}

nn::RecurrentNet build_predictor(const PredictorConfig& config)
{
    config.validate();
    std::vector<nn::LayerSpec> specs{{nn::LayerKind::dense, 1, 1, nn::Activation::tanh}};
    std::size_t previous = 1;
    for (const auto& h : config.hidden_layers) {
        specs.push_back({h.kind, previous, h.neurons});
        previous = h.neurons;
    }
    specs.push_back({nn::LayerKind::dense, previous, 1, nn::Activation::tanh});
    return nn::RecurrentNet(std::move(specs));
}

double quantile_scale(std::span<const double> magnitudes)
{
    require(!magnitudes.empty(), "quantile of an empty sample");
    std::vector<double> sorted(magnitudes.begin(), magnitudes.end());
    // Linear interpolation between order statistics.
    const double pos = 0.999 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(lo), sorted.end());
    const double a = sorted[lo];
    const double b = hi == lo ? a : *std::min_element(sorted.begin() + static_cast<std::ptrdiff_t>(lo) + 1, sorted.end());
    const double q = a + (pos - static_cast<double>(lo)) * (b - a);
    require(q > 0.0 && std::isfinite(q), "99.9th percentile magnitude must be positive");
    return 0.9 / q;
}

MagnitudeWindows::MagnitudeWindows(std::shared_ptr<const std::vector<double>> series, std::size_t first,
                                   std::size_t count, std::size_t window, std::size_t horizon)
    : series_(std::move(series)),
      first_(first),
      count_(count),
      window_(window),
      horizon_(horizon)
{
    require(series_ != nullptr, "null series");
    require(window >= 1 && horizon >= 1, "window and horizon must be >= 1");
    if (count > 0 && max_index() >= series_->size()) {
        throw InvalidArgument("windows run past the end of the series");
    }
}

void MagnitudeWindows::gather(std::span<const std::size_t> indices, std::vector<nn::Matrix>& inputs,
                              nn::Matrix& targets) const
{
    const auto n = static_cast<Eigen::Index>(indices.size());
    inputs.resize(window_);
    for (auto& m : inputs) {
        m.resize(1, n);
    }
    targets.resize(1, n);
    const auto& a = *series_;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto i = indices[static_cast<std::size_t>(j)];
        if (i >= count_) {
            throw ContractViolation("sample index out of range");
        }
        const auto start = first_ + i;
        for (std::size_t t = 0; t < window_; ++t) {
            inputs[t](0, j) = a[start + t];
        }
        targets(0, j) = a[start + window_ - 1 + horizon_];
    }
}

PredictionDataset make_dataset(const fading::FadingTrace& trace, std::size_t horizon, std::size_t window,
                               double train_fraction, std::optional<double> normalization)
{
    require(horizon >= 1 && window >= 1, "window and horizon must be >= 1");
    require(train_fraction > 0.0 && train_fraction < 1.0, "train fraction must lie in (0, 1)");
    const auto length = trace.samples.size();
    const auto span = window + horizon; // indices touched by one sample
    require(length > span, "trace too short for the window and horizon");

    const auto split = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(length)));
    require(split >= span && length - split >= span, "trace too short for a train/test split");

    auto raw = fading::magnitudes(trace);
    const double scale =
        normalization ? *normalization : quantile_scale(std::span<const double>(raw.data(), split));
    require(std::isfinite(scale) && scale > 0.0, "normalization must be positive");
    for (double& a : raw) {
        a *= scale;
    }
    auto series = std::make_shared<const std::vector<double>>(std::move(raw));
    MagnitudeWindows train(series, 0, split - span + 1, window, horizon);
    MagnitudeWindows test(series, split, length - split - span + 1, window, horizon);
    return {std::move(train), std::move(test), scale, std::move(series)};
}

std::string PredictionReport::to_json() const
{
    return json{{"mse", mse}, {"correlation", correlation}, {"horizon", horizon_steps}, {"count", count}}.dump(2);
}

PredictionReport compare(std::span<const double> predicted, std::span<const double> actual,
                         std::size_t horizon_steps)
{
    require(!predicted.empty(), "cannot evaluate an empty set");
    require(predicted.size() == actual.size(), "prediction and target counts differ");
    const double mp = mean(predicted);
    const double ma = mean(actual);
    double se = 0.0;
    double cov = 0.0;
    double vp = 0.0;
    double va = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double e = predicted[i] - actual[i];
        se += e * e;
        const double dp = predicted[i] - mp;
        const double da = actual[i] - ma;
        cov += dp * da;
        vp += dp * dp;
        va += da * da;
    }
    PredictionReport r;
    r.mse = se / static_cast<double>(predicted.size());
    r.horizon_steps = horizon_steps;
    r.count = predicted.size();
    if (vp > 0.0 && va > 0.0) {
        r.correlation = std::clamp(cov / std::sqrt(vp * va), -1.0, 1.0);
    } else {
        r.correlation = se == 0.0 ? 1.0 : 0.0;
    }
    return r;
}

ChannelPredictor::ChannelPredictor(PredictorConfig config, double scale, std::uint64_t seed)
    : config_(std::move(config)),
      net_(build_predictor(config_)),
      scale_(scale)
{
    require(std::isfinite(scale) && scale > 0.0, "normalization must be positive");
    net_.initialize(seed);
}

ChannelPredictor::ChannelPredictor(PredictorConfig config, nn::RecurrentNet net, double scale)
    : config_(std::move(config)),
      net_(std::move(net)),
      scale_(scale),
      trained_(true)
{
    require(std::isfinite(scale) && scale > 0.0, "normalization must be positive");
    if (net_.layers() != build_predictor(config_).layers()) {
        throw ContractViolation("network layout does not match the predictor configuration");
    }
}

nn::TrainResult ChannelPredictor::fit(const MagnitudeWindows& train, const nn::EpochCallback& on_epoch)
{
    require(train.window() == config_.window, "training windows do not match the configured window");
    auto result = nn::train(net_, train, config_.training, on_epoch);
    trained_ = true;
    return result;
}

void ChannelPredictor::check_ready() const
{
    if (!trained_) {
        throw InvalidState("predictor has not been trained");
    }
    if (!net_.parameters_finite()) {
        throw InvalidState("predictor weights are not finite");
    }
}

double ChannelPredictor::predict(std::span<const double> recent) const
{
    check_ready();
    if (recent.size() != config_.window) {
        throw InvalidArgument("expected " + std::to_string(config_.window) + " recent magnitudes, got " +
                              std::to_string(recent.size()));
    }
    std::vector<nn::Matrix> inputs(recent.size(), nn::Matrix(1, 1));
    for (std::size_t t = 0; t < recent.size(); ++t) {
        inputs[t](0, 0) = recent[t] * scale_;
    }
    return std::max(0.0, nn::forward_last(net_, inputs)(0, 0) / scale_);
}

std::vector<double> ChannelPredictor::predict_all(const MagnitudeWindows& windows) const
{
    check_ready();
    require(windows.window() == config_.window, "windows do not match the configured window");
    const auto out = nn::predict_last(net_, windows);
    std::vector<double> result(static_cast<std::size_t>(out.cols()));
    for (std::size_t i = 0; i < result.size(); ++i) {
        result[i] = std::max(0.0, out(0, static_cast<Eigen::Index>(i)) / scale_);
    }
    return result;
}

std::vector<double> ChannelPredictor::predict_at(std::span<const double> magnitudes,
                                                 std::span<const std::size_t> ends) const
{
    check_ready();
    const auto w = config_.window;
    constexpr std::size_t kBatch = 1024;
    std::vector<double> result;
    result.reserve(ends.size());
    std::vector<nn::Matrix> inputs(w);
    for (std::size_t begin = 0; begin < ends.size(); begin += kBatch) {
        const auto n = std::min(kBatch, ends.size() - begin);
        for (auto& m : inputs) {
            m.resize(1, static_cast<Eigen::Index>(n));
        }
        for (std::size_t j = 0; j < n; ++j) {
            const auto end = ends[begin + j];
            if (end + 1 < w || end >= magnitudes.size()) {
                throw InvalidArgument("prediction window out of range");
            }
            for (std::size_t t = 0; t < w; ++t) {
                inputs[t](0, static_cast<Eigen::Index>(j)) = magnitudes[end + 1 - w + t] * scale_;
            }
        }
        const auto out = nn::forward_last(net_, inputs);
        for (std::size_t j = 0; j < n; ++j) {
            result.push_back(std::max(0.0, out(0, static_cast<Eigen::Index>(j)) / scale_));
        }
    }
    return result;
}

PredictionReport ChannelPredictor::evaluate(const MagnitudeWindows& test) const
{
    if (test.size() == 0) {
        throw InvalidArgument("cannot evaluate an empty set");
    }
    const auto predicted = predict_all(test);
    std::vector<double> actual(test.size());
    for (std::size_t i = 0; i < actual.size(); ++i) {
        actual[i] = test.target(i) / scale_;
    }
    return compare(predicted, actual, test.horizon());
}

void ChannelPredictor::save(const std::filesystem::path& path) const
{
    check_ready();
    const json meta{{"predictor", config_to_json(config_)}, {"scale", scale_}};
    nn::save_net(net_, path, meta.dump());
}

ChannelPredictor ChannelPredictor::load(const std::filesystem::path& path)
{
    auto loaded = nn::load_net(path);
    try {
        const auto meta = json::parse(loaded.metadata);
        return ChannelPredictor(config_from_json(meta.at("predictor")), std::move(loaded.net),
                                meta.at("scale").get<double>());
    } catch (const json::exception& e) {
        throw IoError("bad predictor metadata in " + path.string() + ": " + e.what());
    }
}

TrainedPredictor train_predictor(const PredictorConfig& config, const fading::FadingTrace& trace,
                                 std::uint64_t seed, const nn::EpochCallback& on_epoch)
{
    config.validate();
    const auto data = make_dataset(trace, config.horizon_steps, config.window, config.train_fraction,
                                   config.normalization);
    PredictorConfig effective = config;
    effective.training.seed = seed;
    ChannelPredictor predictor(effective, data.scale, seed);
    auto training = predictor.fit(data.train, on_epoch);
    auto report = predictor.evaluate(data.test);
    return {std::move(predictor), report, std::move(training)};
}

double envelope_correlation(double complex_rho)
{
    require(complex_rho >= 0.0 && complex_rho <= 1.0, "correlation must lie in [0, 1]");
    if (complex_rho == 1.0) {
        return 1.0;
    }
    const double k = complex_rho;
    // 2F1(-1/2, -1/2; 1; k^2) in terms of complete elliptic integrals.
    const double f = (2.0 / std::numbers::pi) *
                     (2.0 * std::comp_ellint_2(k) - (1.0 - k * k) * std::comp_ellint_1(k));
    return (f - 1.0) / (4.0 / std::numbers::pi - 1.0);
}

double complex_correlation(double envelope_rho)
{
    require(envelope_rho >= 0.0 && envelope_rho <= 1.0, "correlation must lie in [0, 1]");
    double lo = 0.0;
    double hi = 1.0;
    for (int i = 0; i < 60; ++i) {
        const double mid = 0.5 * (lo + hi);
        (envelope_correlation(mid) < envelope_rho ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace prs::predictor
