#include "prs/complexity.hpp"

#include <cmath>

#include <json.hpp>

#include "prs/error.hpp"

namespace prs::complexity {

namespace {

// Element-wise operations per neuron beyond the matrix products.
std::uint64_t elementwise_per_neuron(nn::LayerKind kind)
{
    switch (kind) {
    case nn::LayerKind::rnn: return 2;   // bias, tanh
    case nn::LayerKind::lstm: return 13; // 4 biases, 4 activations, cell update 3, tanh(c), output gate
    case nn::LayerKind::gru: return 11;  // 3 biases, 3 activations, reset product, interpolation 4
    case nn::LayerKind::dense: break;
    }
    throw InvalidArgument("dense layers are not hidden recurrent layers");
}

std::uint64_t ops_of_kind(const NetShape& shape, nn::LayerKind kind)
{
    shape.validate();
    for (const auto& h : shape.hidden) {
        if (h.kind != kind) {
            throw InvalidArgument("hidden layer kind " + std::string(nn::to_string(h.kind)) + " where " +
                                  std::string(nn::to_string(kind)) + " was expected");
        }
    }
    return ops(shape);
}

} // namespace

void NetShape::validate() const
{
    require(input_size >= 1 && output_size >= 1, "input and output sizes must be >= 1");
    require(!hidden.empty(), "at least one hidden layer is required");
    for (const auto& h : hidden) {
        require(h.neurons >= 1, "hidden layers need at least one neuron");
        require(nn::is_recurrent(h.kind), "hidden layers must be rnn, lstm or gru");
    }
}

NetShape NetShape::uniform(nn::LayerKind kind, std::size_t input, std::vector<std::size_t> hidden,
                           std::size_t output)
{
    NetShape s{input, output, {}};
    for (auto n : hidden) {
        s.hidden.push_back({kind, n});
    }
    return s;
}

NetShape shape_of(const nn::RecurrentNet& net)
{
    NetShape s{net.input_size(), net.output_size(), {}};
    for (const auto& l : net.layers()) {
        if (nn::is_recurrent(l.kind)) {
            s.hidden.push_back({l.kind, l.output_size});
        }
    }
    s.validate();
    return s;
}

std::uint64_t gate_factor(nn::LayerKind kind)
{
    require(nn::is_recurrent(kind), "gate factor is defined for recurrent layers only");
    return nn::gate_count(kind);
}

std::uint64_t hidden_layer_ops(nn::LayerKind kind, std::size_t in, std::size_t out, Counting counting)
{
    const std::uint64_t i = in;
    const std::uint64_t o = out;
    std::uint64_t n = 2 * gate_factor(kind) * (i * o + o * o);
    if (counting == Counting::exact) {
        n += elementwise_per_neuron(kind) * o;
    }
    return n;
}

std::uint64_t ops(const NetShape& shape, Counting counting)
{
    shape.validate();
    const std::uint64_t ni = shape.input_size;
    const std::uint64_t no = shape.output_size;
    std::uint64_t n = 2 * (ni * shape.hidden.front().neurons + shape.hidden.back().neurons * no);
    if (counting == Counting::exact) {
        n += 2 * no; // output bias and activation
    }
    std::size_t prev = shape.input_size;
    for (const auto& h : shape.hidden) {
        n += hidden_layer_ops(h.kind, prev, h.neurons, counting);
        prev = h.neurons;
    }
    return n;
}

std::uint64_t ops_rnn(const NetShape& shape) { return ops_of_kind(shape, nn::LayerKind::rnn); }
std::uint64_t ops_lstm(const NetShape& shape) { return ops_of_kind(shape, nn::LayerKind::lstm); }
std::uint64_t ops_gru(const NetShape& shape) { return ops_of_kind(shape, nn::LayerKind::gru); }

std::string ComplexityReport::to_json() const
{
    nlohmann::ordered_json j;
    j["ops_per_prediction"] = ops_per_prediction;
    j["prediction_rate_hz"] = prediction_rate_hz;
    j["flops"] = flops;
    if (capacity_flops) {
        j["capacity_flops"] = *capacity_flops;
        j["utilization"] = *utilization;
    }
    return j.dump(2);
}

ComplexityReport flops(const NetShape& shape, double prediction_rate_hz, std::optional<double> capacity_flops,
                       Counting counting)
{
    require(prediction_rate_hz > 0.0 && std::isfinite(prediction_rate_hz), "prediction rate must be positive");
    ComplexityReport r;
    r.ops_per_prediction = ops(shape, counting);
    r.prediction_rate_hz = prediction_rate_hz;
    r.flops = static_cast<double>(r.ops_per_prediction) * prediction_rate_hz;
    if (capacity_flops) {
        require(*capacity_flops > 0.0 && std::isfinite(*capacity_flops), "capacity must be positive");
        r.capacity_flops = capacity_flops;
        r.utilization = r.flops / *capacity_flops;
    }
    return r;
}

} // namespace prs::complexity
