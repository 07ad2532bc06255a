#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>

#include "prs/error.hpp"
#include "prs/predictor.hpp"

using namespace prs;
using namespace prs::predictor;
using Catch::Approx;

namespace {

fading::FadingTrace ramp_trace(std::size_t length)
{
    fading::FadingTrace t{{0.0, 1000.0, 1.0, length}, {}};
    for (std::size_t i = 0; i < length; ++i) {
        t.samples.emplace_back(static_cast<double>(i), 0.0);
    }
    return t;
}

// Gauss hypergeometric 2F1(-1/2, -1/2; 1; x) by its power series.
long double hyp_series(long double x)
{
    long double term = 1.0L;
    long double sum = 1.0L;
    for (int k = 0; k < 200000; ++k) {
        const long double a = -0.5L + k;
        term *= a * a / ((k + 1.0L) * (k + 1.0L)) * x;
        sum += term;
        if (std::fabs(term) < 1e-22L) {
            break;
        }
    }
    return sum;
}

PredictorConfig small_config(nn::LayerKind kind, std::size_t neurons)
{
    PredictorConfig c;
    c.hidden_layers = {{kind, neurons}};
    c.horizon_steps = 1;
    c.window = 8;
    c.training.batch_size = 64;
    c.training.epochs = 3;
    c.training.adam.learning_rate = 1e-2;
    return c;
}

} // namespace

TEST_CASE("PredictorConfig validation and naming")
{
    PredictorConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.name() == "LSTM-2(25,25)");

    auto bad = c;
    bad.horizon_steps = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.hidden_layers.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.hidden_layers[1].neurons = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.hidden_layers[0].kind = nn::LayerKind::dense;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.train_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.normalization = -1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("parse_hidden_layers")
{
    const auto layers = parse_hidden_layers("lstm:25,GRU:30");
    REQUIRE(layers.size() == 2);
    CHECK(layers[0] == HiddenLayer{nn::LayerKind::lstm, 25});
    CHECK(layers[1] == HiddenLayer{nn::LayerKind::gru, 30});
    CHECK_THROWS_AS(parse_hidden_layers(""), InvalidArgument);
    CHECK_THROWS_AS(parse_hidden_layers("lstm"), InvalidArgument);
    CHECK_THROWS_AS(parse_hidden_layers("lstm:0"), InvalidArgument);
    CHECK_THROWS_AS(parse_hidden_layers("lstm:2x"), InvalidArgument);
    CHECK_THROWS_AS(parse_hidden_layers("conv:3"), InvalidArgument);
}

TEST_CASE("build_predictor")
{
    SECTION("LSTM-2(25,25) has scalar input and output layers")
    {
        const auto net = build_predictor(PredictorConfig{});
        const auto& l = net.layers();
        REQUIRE(l.size() == 4);
        CHECK(l[0] == nn::LayerSpec{nn::LayerKind::dense, 1, 1, nn::Activation::tanh});
        CHECK(l[1].kind == nn::LayerKind::lstm);
        CHECK(l[1].input_size == 1);
        CHECK(l[1].output_size == 25);
        CHECK(l[2].input_size == 25);
        CHECK(l[2].output_size == 25);
        CHECK(l[3] == nn::LayerSpec{nn::LayerKind::dense, 25, 1, nn::Activation::tanh});
        CHECK(net.input_size() == 1);
        CHECK(net.output_size() == 1);
    }
    SECTION("RNN-1 with one neuron stays inside (-1, 1)")
    {
        PredictorConfig c;
        c.hidden_layers = {{nn::LayerKind::rnn, 1}};
        auto net = build_predictor(c);
        net.initialize(3);
        for (double& v : net.parameters()) {
            v *= 3.0;
        }
        for (double x : {-100.0, -1.0, 0.0, 0.5, 100.0}) {
            const double y = net.step(nn::Vector(nn::Vector::Constant(1, x)))(0);
            CHECK(std::abs(y) < 1.0);
        }
    }
    SECTION("GRU-2 parameter bookkeeping")
    {
        PredictorConfig gru;
        gru.hidden_layers = {{nn::LayerKind::gru, 30}, {nn::LayerKind::gru, 30}};
        PredictorConfig rnn;
        rnn.hidden_layers = {{nn::LayerKind::rnn, 30}, {nn::LayerKind::rnn, 30}};
        const auto g = build_predictor(gru);
        const auto r = build_predictor(rnn);
        auto recurrent = [](const nn::RecurrentNet& net) {
            return net.parameter_offset(3) - net.parameter_offset(1);
        };
        CHECK(recurrent(g) == 3 * recurrent(r));
        // Hand count: (30*1 + 30*30 + 30) + (30*30 + 30*30 + 30).
        CHECK(recurrent(r) == 960 + 1830);
    }
}

TEST_CASE("MagnitudeWindows index arithmetic")
{
    auto series = std::make_shared<const std::vector<double>>(std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    const MagnitudeWindows w(series, 0, 6, 3, 2);
    CHECK(w.input_index(0) == 0);
    CHECK(w.target_index(0) == 4);
    CHECK(w.target_index(5) == 9);
    CHECK(w.max_index() == 9);

    std::vector<nn::Matrix> inputs;
    nn::Matrix targets;
    const std::vector<std::size_t> idx{0, 5};
    w.gather(idx, inputs, targets);
    REQUIRE(inputs.size() == 3);
    CHECK(inputs[0](0, 0) == 0.0);
    CHECK(inputs[2](0, 0) == 2.0);
    CHECK(targets(0, 0) == 4.0);
    CHECK(inputs[0](0, 1) == 5.0);
    CHECK(targets(0, 1) == 9.0);

    CHECK_THROWS_AS(MagnitudeWindows(series, 0, 7, 3, 2), InvalidArgument);
    const std::vector<std::size_t> out_of_range{6};
    CHECK_THROWS_AS(w.gather(out_of_range, inputs, targets), ContractViolation);
}

TEST_CASE("make_dataset")
{
    SECTION("chronological split without leakage")
    {
        const auto data = make_dataset(ramp_trace(100), 2, 3, 0.8, 1.0);
        CHECK(data.train.max_index() < 80);
        CHECK(data.test.min_index() >= 80);
        CHECK(data.train.max_index() < data.test.min_index());
        CHECK(data.train.size() == 80 - 5 + 1);
        CHECK(data.test.size() == 20 - 5 + 1);
        CHECK(data.test.target_index(data.test.size() - 1) == 99);
        // With the ramp, every target is the last input plus D.
        for (std::size_t i = 0; i < data.train.size(); ++i) {
            CHECK(data.train.target(i) == static_cast<double>(data.train.target_index(i)));
        }
    }

    SECTION("constant channel gives identical inputs and targets")
    {
        const auto trace = fading::generate_trace({0.0, 1000.0, 1.0, 500}, 4);
        const auto data = make_dataset(trace, 3, 16, 0.8);
        std::vector<nn::Matrix> inputs;
        nn::Matrix targets;
        std::vector<std::size_t> idx(data.train.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        data.train.gather(idx, inputs, targets);
        for (const auto& m : inputs) {
            CHECK((m.array() == targets.array()).all());
        }
        CHECK(targets(0, 0) == Approx(0.9).epsilon(1e-12));
    }

    SECTION("quantile normalization on Rayleigh magnitudes")
    {
        const auto trace = fading::generate_trace({100.0, 1000.0, 1.0, 1'000'000}, 21);
        const auto data = make_dataset(trace, 2, 16, 0.8);
        // Rayleigh 99.9% quantile with E|h|^2 = 1 is sqrt(ln 1000).
        const double rayleigh_q = std::sqrt(std::log(1000.0));
        CHECK(data.scale == Approx(0.9 / rayleigh_q).epsilon(0.01));

        std::size_t above_09 = 0;
        std::size_t above_1 = 0;
        for (std::size_t i = 0; i < 800'000; ++i) {
            above_09 += (*data.series)[i] > 0.9;
            above_1 += (*data.series)[i] > 1.0;
        }
        CHECK(static_cast<double>(above_09) / 8e5 == Approx(1e-3).margin(2e-5));
        // A tanh output cannot reach these; the expected share is
        // exp(-ln(1000) / 0.81) ~ 2e-4, not zero.
        const double expected = std::exp(-std::log(1000.0) / 0.81);
        CHECK(static_cast<double>(above_1) / 8e5 == Approx(expected).margin(1e-4));
    }

    SECTION("errors")
    {
        CHECK_THROWS_AS(make_dataset(ramp_trace(10), 2, 16, 0.8, 1.0), InvalidArgument);
        CHECK_THROWS_AS(make_dataset(ramp_trace(30), 2, 8, 0.9, 1.0), InvalidArgument);
        CHECK_THROWS_AS(make_dataset(ramp_trace(100), 0, 8, 0.8, 1.0), InvalidArgument);
        CHECK_THROWS_AS(make_dataset(ramp_trace(100), 2, 8, 0.8, 0.0), InvalidArgument);
    }
}

TEST_CASE("quantile_scale")
{
    std::vector<double> v(1001);
    std::iota(v.begin(), v.end(), 0.0);
    CHECK(quantile_scale(v) == Approx(0.9 / 999.0).epsilon(1e-12));
    CHECK_THROWS_AS(quantile_scale(std::vector<double>{}), InvalidArgument);
    CHECK_THROWS_AS(quantile_scale(std::vector<double>(10, 0.0)), InvalidArgument);
}

TEST_CASE("compare")
{
    SECTION("perfect predictions")
    {
        const std::vector<double> a{0.1, 0.5, 0.2, 1.3};
        const auto r = compare(a, a, 2);
        CHECK(r.mse == 0.0);
        CHECK(r.correlation == Approx(1.0).epsilon(1e-15));
        CHECK(r.horizon_steps == 2);
        CHECK(r.count == 4);
    }
    SECTION("hand example")
    {
        const auto r = compare(std::vector<double>{1.0, 2.0, 3.0}, std::vector<double>{1.0, 3.0, 2.0}, 1);
        CHECK(r.mse == Approx(2.0 / 3.0));
        CHECK(r.correlation == Approx(0.5));
    }
    SECTION("shuffling destroys correlation")
    {
        const auto trace = fading::generate_trace({100.0, 1000.0, 1.0, 100'000}, 8);
        auto actual = fading::magnitudes(trace);
        auto shuffled = actual;
        std::mt19937_64 rng(5);
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(std::abs(compare(shuffled, actual, 1).correlation) < 0.05);
    }
    SECTION("constant sequences")
    {
        const std::vector<double> c(5, 0.7);
        CHECK(compare(c, c, 1).correlation == 1.0);
        CHECK(compare(std::vector<double>(5, 0.2), c, 1).correlation == 0.0);
    }
    SECTION("errors")
    {
        CHECK_THROWS_AS(compare(std::vector<double>{}, std::vector<double>{}, 1), InvalidArgument);
        CHECK_THROWS_AS(compare(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 1), InvalidArgument);
    }
    SECTION("report json")
    {
        const auto json = PredictionReport{0.25, 0.5, 3, 10}.to_json();
        CHECK(json.find("\"mse\": 0.25") != std::string::npos);
        CHECK(json.find("\"correlation\": 0.5") != std::string::npos);
        CHECK(json.find("\"horizon\": 3") != std::string::npos);
    }
}

TEST_CASE("ChannelPredictor state checks")
{
    PredictorConfig c = small_config(nn::LayerKind::rnn, 2);
    ChannelPredictor fresh(c, 1.0, 1);
    const std::vector<double> window(c.window, 0.5);
    CHECK_FALSE(fresh.trained());
    CHECK_THROWS_AS(fresh.predict(window), InvalidState);

    auto net = build_predictor(c);
    ChannelPredictor zero(c, net, 1.0);
    CHECK(zero.predict(window) == 0.0);
    CHECK(zero.predict(std::vector<double>(c.window, 0.0)) >= 0.0);
    CHECK_THROWS_AS(zero.predict(std::vector<double>(c.window + 1, 0.0)), InvalidArgument);

    // A negative output bias is clamped to zero after de-normalization.
    net.layer_params(net.layers().size() - 1).b(0) = -2.0;
    CHECK(ChannelPredictor(c, net, 1.0).predict(window) == 0.0);

    net.parameters()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(ChannelPredictor(c, net, 1.0).predict(window), InvalidState);

    PredictorConfig other = c;
    other.hidden_layers[0].neurons = 3;
    CHECK_THROWS_AS(ChannelPredictor(other, build_predictor(c), 1.0), ContractViolation);

    const auto data = make_dataset(ramp_trace(100), 1, c.window, 0.8, 0.01);
    const MagnitudeWindows empty(data.series, 0, 0, c.window, 1);
    CHECK_THROWS_AS(zero.evaluate(empty), InvalidArgument);
}

TEST_CASE("constant channel is learned to within 1%")
{
    const auto trace = fading::generate_trace({0.0, 1000.0, 1.0, 4000}, 6);
    PredictorConfig c = small_config(nn::LayerKind::lstm, 4);
    c.training.epochs = 30;
    const auto trained = train_predictor(c, trace, 2);
    const double level = std::abs(trace.samples.front());
    const std::vector<double> window(c.window, level);
    CHECK(trained.predictor.predict(window) == Approx(level).epsilon(0.01));
}

TEST_CASE("short training on a slowly fading channel")
{
    const auto trace = fading::generate_trace({20.0, 1000.0, 1.0, 60'000}, 12);
    PredictorConfig c = small_config(nn::LayerKind::lstm, 8);
    const auto a = train_predictor(c, trace, 5);
    CHECK(a.report.correlation > 0.95);
    CHECK(a.report.count == 12'000 - 9 + 1);
    CHECK(a.training.epoch_loss.size() == 3);

    SECTION("training is deterministic")
    {
        const auto b = train_predictor(c, trace, 5);
        CHECK(b.report.mse == a.report.mse);
        CHECK(b.report.correlation == a.report.correlation);
    }

    SECTION("the prediction paths agree")
    {
        const auto data = make_dataset(trace, c.horizon_steps, c.window, c.train_fraction);
        const auto all = a.predictor.predict_all(data.test);
        const auto mags = fading::magnitudes(trace);
        std::vector<std::size_t> ends;
        for (std::size_t i = 0; i < 50; ++i) {
            ends.push_back(data.test.input_index(i) + c.window - 1);
        }
        const auto at = a.predictor.predict_at(mags, ends);
        for (std::size_t i = 0; i < 50; ++i) {
            const std::span<const double> recent(mags.data() + data.test.input_index(i), c.window);
            const double single = a.predictor.predict(recent);
            CHECK(single == Approx(all[i]).margin(1e-12));
            CHECK(at[i] == Approx(all[i]).margin(1e-12));
            CHECK(single >= 0.0);
        }
        const std::vector<std::size_t> too_early{c.window - 2};
        CHECK_THROWS_AS(a.predictor.predict_at(mags, too_early), InvalidArgument);
    }

    SECTION("save and load")
    {
        const auto path = std::filesystem::temp_directory_path() / "prs_test_predictor.bin";
        a.predictor.save(path);
        const auto loaded = ChannelPredictor::load(path);
        CHECK(loaded.scale() == a.predictor.scale());
        CHECK(loaded.config().hidden_layers == c.hidden_layers);
        CHECK(loaded.config().window == c.window);
        const std::vector<double> recent(c.window, 0.8);
        CHECK(loaded.predict(recent) == a.predictor.predict(recent));
        std::filesystem::remove(path);
    }
}

TEST_CASE("envelope and complex correlation")
{
    CHECK(envelope_correlation(0.0) == Approx(0.0).margin(1e-15));
    CHECK(envelope_correlation(1.0) == 1.0);
    for (double rho = 0.05; rho < 0.999; rho += 0.05) {
        const double oracle =
            static_cast<double>((hyp_series(static_cast<long double>(rho) * rho) - 1.0L) /
                                (4.0L / std::numbers::pi_v<long double> - 1.0L));
        CHECK(envelope_correlation(rho) == Approx(oracle).margin(1e-9));
        CHECK(complex_correlation(envelope_correlation(rho)) == Approx(rho).margin(1e-12));
    }
    double previous = -1.0;
    for (double rho = 0.0; rho <= 1.0; rho += 0.01) {
        const double e = envelope_correlation(std::min(rho, 1.0));
        CHECK(e > previous);
        CHECK(e <= rho + 1e-12);
        previous = e;
    }
    CHECK(complex_correlation(0.95) == Approx(0.9779).margin(1e-3));
    CHECK_THROWS_AS(envelope_correlation(1.5), InvalidArgument);
    CHECK_THROWS_AS(complex_correlation(-0.1), InvalidArgument);

    SECTION("Monte-Carlo oracle")
    {
        const auto pairs = fading::correlated_pair(0.9, 31, 400'000);
        std::vector<double> a;
        std::vector<double> b;
        for (const auto& p : pairs) {
            a.push_back(std::abs(p.actual));
            b.push_back(std::abs(p.outdated));
        }
        CHECK(compare(a, b, 1).correlation == Approx(envelope_correlation(0.9)).margin(0.005));
    }
}
