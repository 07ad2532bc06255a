#pragma once

// Floating-point operation counts per prediction for recurrent predictors,
// counting one multiply and one add per weight, and their FLOPS rate.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prs/recurrent.hpp"

namespace prs::complexity {

struct HiddenShape {
    nn::LayerKind kind = nn::LayerKind::lstm;
    std::size_t neurons = 1;
};

struct NetShape {
    std::size_t input_size = 1;  ///< N_i
    std::size_t output_size = 1; ///< N_o
    std::vector<HiddenShape> hidden;

    /// Throws InvalidArgument on zero sizes, no hidden layers or a dense
    /// hidden layer.
    void validate() const;

    /// Shape with every hidden layer of one kind.
    static NetShape uniform(nn::LayerKind kind, std::size_t input, std::vector<std::size_t> hidden,
                            std::size_t output);
};

/// Recurrent layers of `net` as hidden layers; input and output sizes are
/// those of the whole network.
NetShape shape_of(const nn::RecurrentNet& net);

enum class Counting {
    matmul, ///< weight products only
    exact,  ///< adds bias additions, activations and gate arithmetic
};

/// 1 for rnn, 3 for gru, 4 for lstm.
std::uint64_t gate_factor(nn::LayerKind kind);

/// Operations of one hidden layer: 2 * gates * (in * out + out^2), plus the
/// element-wise work under Counting::exact.
std::uint64_t hidden_layer_ops(nn::LayerKind kind, std::size_t in, std::size_t out,
                               Counting counting = Counting::matmul);

/// Any mix of recurrent kinds.
std::uint64_t ops(const NetShape& shape, Counting counting = Counting::matmul);

// These require every hidden layer to be of the named kind.
std::uint64_t ops_rnn(const NetShape& shape);
std::uint64_t ops_lstm(const NetShape& shape);
std::uint64_t ops_gru(const NetShape& shape);

struct ComplexityReport {
    std::uint64_t ops_per_prediction = 0;
    double prediction_rate_hz = 0.0;
    double flops = 0.0; ///< ops_per_prediction * prediction_rate_hz
    std::optional<double> capacity_flops;
    std::optional<double> utilization; ///< flops / capacity_flops

    std::string to_json() const;
};

/// Throws InvalidArgument for a non-positive rate or capacity.
ComplexityReport flops(const NetShape& shape, double prediction_rate_hz,
                       std::optional<double> capacity_flops = std::nullopt,
                       Counting counting = Counting::matmul);

} // namespace prs::complexity
