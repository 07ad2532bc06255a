#pragma once

// Minimal recurrent network engine: dense, simple-RNN, LSTM and GRU layers,
// backpropagation through time, Adam and an MSE training loop.
//
// Activations are stored column-wise: a batch of B feature vectors of size n
// is an n x B matrix. A single vector is the B = 1 case.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace prs::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
/// Flat parameter storage. Aligned so that Eigen picks the same kernels on
/// every run, which keeps training bit-reproducible.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

enum class LayerKind : std::uint8_t { dense = 0, rnn = 1, lstm = 2, gru = 3 };
enum class Activation : std::uint8_t { tanh = 0, sigmoid = 1, identity = 2 };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Activation activation);
LayerKind parse_layer_kind(std::string_view name);
Activation parse_activation(std::string_view name);

/// Recurrent kinds always use sigmoid gates and tanh candidates; `activation`
/// only applies to dense layers.
struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t input_size = 1;
    std::size_t output_size = 1;
    Activation activation = Activation::tanh;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Number of stacked affine blocks: 1 for dense/rnn, 4 for lstm (i, o, f, g),
/// 3 for gru (z, r, s).
std::size_t gate_count(LayerKind kind);
bool is_recurrent(LayerKind kind);

/// |W| + |U| + |b| for one layer.
std::size_t parameter_count(const LayerSpec& spec);

/// Views of one layer's parameters inside the network's flat buffer.
/// W is (gates*out) x in, U is (gates*out) x out (empty for dense), b has
/// gates*out rows. Gate blocks are stacked in the order listed above.
struct LayerParams {
    Eigen::Map<Matrix> W;
    Eigen::Map<Matrix> U;
    Eigen::Map<Vector> b;
};

struct ConstLayerParams {
    Eigen::Map<const Matrix> W;
    Eigen::Map<const Matrix> U;
    Eigen::Map<const Vector> b;
};

struct LstmStep {
    Matrix output; ///< o * tanh(c), also the new short-term state
    Matrix cell;   ///< long-term state c_t
};

// Single-layer forward steps. Shape mismatches throw ContractViolation.
Matrix forward_dense_layer(const ConstLayerParams& p, Activation activation, const Matrix& input);
Matrix forward_rnn_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_output);
LstmStep forward_lstm_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_output,
                            const Matrix& prev_cell);
Matrix forward_gru_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_state);

/// Per-layer recurrent state. `cell` is only used by LSTM layers.
struct LayerState {
    Matrix output;
    Matrix cell;
};

class RecurrentNet {
public:
    /// Throws ContractViolation if consecutive layer sizes do not chain.
    explicit RecurrentNet(std::vector<LayerSpec> layers);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t input_size() const noexcept { return layers_.front().input_size; }
    std::size_t output_size() const noexcept { return layers_.back().output_size; }

    std::span<double> parameters() noexcept { return params_; }
    std::span<const double> parameters() const noexcept { return params_; }
    std::size_t parameter_count() const noexcept { return params_.size(); }
    /// Offset of layer `l` within parameters().
    std::size_t parameter_offset(std::size_t l) const { return offsets_.at(l); }

    LayerParams layer_params(std::size_t l);
    ConstLayerParams layer_params(std::size_t l) const;

    /// Uniform initialization in +-1/sqrt(fan_in), where fan_in counts the
    /// layer input plus, for recurrent layers, the fed-back output.
    void initialize(std::uint64_t seed);

    bool parameters_finite() const noexcept;

    /// Zero all recurrent state for a batch of `batch` sequences.
    void reset_state(std::size_t batch = 1);
    const LayerState& state(std::size_t l) const { return state_.at(l); }

    /// Advances every layer by one time step and returns the network output.
    /// The batch width must match the last reset_state().
    Matrix step(const Matrix& input);
    Vector step(const Vector& input);

    /// Resets state, then runs the whole sequence. Throws InvalidArgument on
    /// an empty sequence.
    std::vector<Vector> forward(const std::vector<Vector>& sequence);
    std::vector<Matrix> forward(const std::vector<Matrix>& sequence);

private:
    std::vector<LayerSpec> layers_;
    std::vector<std::size_t> offsets_;
    AlignedBuffer params_;
    std::vector<LayerState> state_;
};

/// Gradient of the mean squared error with respect to every parameter, laid
/// out like RecurrentNet::parameters().
struct Gradients {
    std::vector<double> values;
    double loss = 0.0;
};

/// Backpropagation through time over one batch of sequences starting from
/// zero state. `targets[t]` may be an empty matrix, meaning no loss at step t;
/// the loss is the mean over all targeted elements. Throws InvalidArgument
/// when the two sequences differ in length or nothing is targeted.
Gradients bptt_gradients(const RecurrentNet& net, const std::vector<Matrix>& inputs,
                         const std::vector<Matrix>& targets);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Throws TrainingDivergence on a non-finite
/// gradient (parameters are left untouched in that case).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config);

/// Fixed-length sequence-to-one samples: every sample is `window()` input
/// vectors followed by one target vector compared with the output at the
/// last step.
class SequenceDataset {
public:
    virtual ~SequenceDataset() = default;

    virtual std::size_t size() const = 0;
    virtual std::size_t window() const = 0;
    virtual std::size_t input_size() const = 0;
    virtual std::size_t output_size() const = 0;

    /// Fills inputs[t] (input_size x n) and targets (output_size x n) for the
    /// n requested samples. `inputs` is resized to window().
    virtual void gather(std::span<const std::size_t> indices, std::vector<Matrix>& inputs,
                        Matrix& targets) const = 0;
};

/// Dataset held as flat arrays: sample-major, then step, then feature.
class InMemoryDataset final : public SequenceDataset {
public:
    InMemoryDataset(std::size_t window, std::size_t input_size, std::size_t output_size);

    void add(std::span<const double> inputs, std::span<const double> target);

    std::size_t size() const override { return count_; }
    std::size_t window() const override { return window_; }
    std::size_t input_size() const override { return input_size_; }
    std::size_t output_size() const override { return output_size_; }
    void gather(std::span<const std::size_t> indices, std::vector<Matrix>& inputs,
                Matrix& targets) const override;

private:
    std::size_t window_;
    std::size_t input_size_;
    std::size_t output_size_;
    std::size_t count_ = 0;
    std::vector<double> inputs_;
    std::vector<double> targets_;
};

struct TrainConfig {
    std::size_t batch_size = 256;
    std::size_t epochs = 10;
    AdamConfig adam;
    /// Gradients flow through at most this many trailing steps of a sample.
    std::size_t bptt_window = 32;
    std::uint64_t seed = 1;
};

struct TrainResult {
    std::vector<double> epoch_loss; ///< mean training loss per epoch
    std::size_t updates = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Mini-batch training with reshuffling every epoch. Deterministic given
/// (net, dataset, config). Throws InvalidArgument for an empty dataset and
/// TrainingDivergence on a non-finite loss.
TrainResult train(RecurrentNet& net, const SequenceDataset& dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Network output after the last step of `inputs`, starting from zero state.
/// Unlike RecurrentNet::forward this leaves the net untouched, so concurrent
/// calls on a shared net are safe.
Matrix forward_last(const RecurrentNet& net, const std::vector<Matrix>& inputs);

/// Output at the last step for each sample, evaluated in batches.
/// Returns an output_size x n matrix.
Matrix predict_last(const RecurrentNet& net, const SequenceDataset& dataset, std::size_t batch_size = 1024);

/// Model file, little-endian:
///   "PRSNET\0\0", u32 version (=1), u32 byte-order mark 0x01020304,
///   u64 layer count, per layer {u32 kind, u32 activation, u64 in, u64 out},
///   u64 parameter count, parameters as IEEE-754 f64, u64-length-prefixed
///   UTF-8 metadata string.
void save_net(const RecurrentNet& net, const std::filesystem::path& path, const std::string& metadata = {});

struct LoadedNet {
    RecurrentNet net;
    std::string metadata;
};

LoadedNet load_net(const std::filesystem::path& path);

} // namespace prs::nn
