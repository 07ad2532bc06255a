#include "prs/recurrent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "prs/byte_io.hpp"
#include "prs/error.hpp"
#include "prs/rng.hpp"

namespace prs::nn {

namespace {

using Ref = Eigen::Ref<Matrix>;

// tanh is evaluated as 2*sigmoid(2x) - 1 so both activations vectorize
// through Eigen's packet exp.
void sigmoid_inplace(Ref m) { m.array() = (1.0 + (-m.array()).exp()).inverse(); }
void tanh_inplace(Ref m) { m.array() = 2.0 / (1.0 + (-2.0 * m.array()).exp()) - 1.0; }

void activate(Activation a, Ref m)
{
    switch (a) {
    case Activation::tanh: tanh_inplace(m); break;
    case Activation::sigmoid: sigmoid_inplace(m); break;
    case Activation::identity: break;
    }
}

/// Everything the backward pass needs from one layer at one step. The layer
/// input and previous state are not copied; they live in neighbouring caches.
struct StepCache {
    Matrix act;    // post-activation gate blocks (or the dense/rnn output)
    Matrix y;      // layer output
    Matrix c;      // lstm cell
    Matrix tanh_c; // lstm tanh(cell)
    Matrix rs;     // gru r * s_prev
};

void layer_forward(const LayerSpec& spec, const ConstLayerParams& p, const Matrix& x, const Matrix& s_prev,
                   const Matrix& c_prev, StepCache& k)
{
    const auto h = static_cast<Eigen::Index>(spec.output_size);
    switch (spec.kind) {
    case LayerKind::dense:
        k.act.noalias() = p.W * x;
        k.act.colwise() += p.b;
        activate(spec.activation, k.act);
        k.y = k.act;
        break;
    case LayerKind::rnn:
        k.act.noalias() = p.W * x;
        k.act.noalias() += p.U * s_prev;
        k.act.colwise() += p.b;
        tanh_inplace(k.act);
        k.y = k.act;
        break;
    case LayerKind::lstm: {
        k.act.noalias() = p.W * x;
        k.act.noalias() += p.U * s_prev;
        k.act.colwise() += p.b;
        sigmoid_inplace(k.act.topRows(3 * h));
        tanh_inplace(k.act.bottomRows(h));
        const auto i = k.act.middleRows(0, h).array();
        const auto o = k.act.middleRows(h, h).array();
        const auto f = k.act.middleRows(2 * h, h).array();
        const auto g = k.act.middleRows(3 * h, h).array();
        k.c.resize(h, x.cols());
        k.c.array() = f * c_prev.array() + i * g;
        k.tanh_c = k.c;
        tanh_inplace(k.tanh_c);
        k.y.resize(h, x.cols());
        k.y.array() = o * k.tanh_c.array();
        break;
    }
    case LayerKind::gru: {
        k.act.resize(3 * h, x.cols());
        k.act.noalias() = p.W * x;
        k.act.topRows(2 * h).noalias() += p.U.topRows(2 * h) * s_prev;
        k.act.colwise() += p.b;
        sigmoid_inplace(k.act.topRows(2 * h));
        k.rs.resize(h, x.cols());
        k.rs.array() = k.act.middleRows(h, h).array() * s_prev.array();
        k.act.bottomRows(h).noalias() += p.U.bottomRows(h) * k.rs;
        tanh_inplace(k.act.bottomRows(h));
        const auto z = k.act.topRows(h).array();
        const auto cand = k.act.bottomRows(h).array();
        k.y.resize(h, x.cols());
        k.y.array() = s_prev.array() + z * (cand - s_prev.array());
        break;
    }
    }
}

struct LayerGrads {
    Eigen::Map<Matrix> W;
    Eigen::Map<Matrix> U;
    Eigen::Map<Vector> b;
};

/// Backward through one layer at one step. `dy` already contains the
/// gradient carried from the next step's recurrence. Writes the gradients
/// for the layer input (if `dx` is non-null) and the previous state.
struct BackwardScratch {
    Matrix dz;
    Matrix dc;
    Matrix drs;
};

void layer_backward(const LayerSpec& spec, const ConstLayerParams& p, const Matrix& x, const Matrix& s_prev,
                    const Matrix& c_prev, const StepCache& k, const Matrix& dy, const Matrix& dc_next,
                    LayerGrads& g, Matrix* dx, Matrix& ds_prev, Matrix& dc_prev, BackwardScratch& w)
{
    const auto h = static_cast<Eigen::Index>(spec.output_size);
    const auto batch = dy.cols();
    auto& dz = w.dz;
    switch (spec.kind) {
    case LayerKind::dense:
        switch (spec.activation) {
        case Activation::tanh: dz = (dy.array() * (1.0 - k.y.array().square())).matrix(); break;
        case Activation::sigmoid: dz = (dy.array() * k.y.array() * (1.0 - k.y.array())).matrix(); break;
        case Activation::identity: dz = dy; break;
        }
        break;
    case LayerKind::rnn:
        dz = (dy.array() * (1.0 - k.y.array().square())).matrix();
        break;
    case LayerKind::lstm: {
        const auto i = k.act.middleRows(0, h).array();
        const auto o = k.act.middleRows(h, h).array();
        const auto f = k.act.middleRows(2 * h, h).array();
        const auto gg = k.act.middleRows(3 * h, h).array();
        const auto tc = k.tanh_c.array();
        w.dc.resize(h, batch);
        w.dc.array() = dy.array() * o * (1.0 - tc.square()) + dc_next.array();
        dz.resize(4 * h, batch);
        dz.middleRows(0, h).array() = w.dc.array() * gg * i * (1.0 - i);
        dz.middleRows(h, h).array() = dy.array() * tc * o * (1.0 - o);
        dz.middleRows(2 * h, h).array() = w.dc.array() * c_prev.array() * f * (1.0 - f);
        dz.middleRows(3 * h, h).array() = w.dc.array() * i * (1.0 - gg.square());
        dc_prev.resize(h, batch);
        dc_prev.array() = w.dc.array() * f;
        break;
    }
    case LayerKind::gru: {
        const auto z = k.act.topRows(h).array();
        const auto r = k.act.middleRows(h, h).array();
        const auto cand = k.act.bottomRows(h).array();
        dz.resize(3 * h, batch);
        dz.bottomRows(h).array() = dy.array() * z * (1.0 - cand.square());
        w.drs.noalias() = p.U.bottomRows(h).transpose() * dz.bottomRows(h);
        dz.topRows(h).array() = dy.array() * (cand - s_prev.array()) * z * (1.0 - z);
        dz.middleRows(h, h).array() = w.drs.array() * s_prev.array() * r * (1.0 - r);
        g.W.noalias() += dz * x.transpose();
        g.U.topRows(2 * h).noalias() += dz.topRows(2 * h) * s_prev.transpose();
        g.U.bottomRows(h).noalias() += dz.bottomRows(h) * k.rs.transpose();
        g.b += dz.rowwise().sum();
        if (dx != nullptr) {
            dx->noalias() = p.W.transpose() * dz;
        }
        ds_prev.resize(h, batch);
        ds_prev.array() = dy.array() * (1.0 - z) + w.drs.array() * r;
        ds_prev.noalias() += p.U.topRows(2 * h).transpose() * dz.topRows(2 * h);
        return;
    }
    }

    g.W.noalias() += dz * x.transpose();
    g.b += dz.rowwise().sum();
    if (dx != nullptr) {
        dx->noalias() = p.W.transpose() * dz;
    }
    if (is_recurrent(spec.kind)) {
        g.U.noalias() += dz * s_prev.transpose();
        ds_prev.noalias() = p.U.transpose() * dz;
    }
}

void check_input(const Matrix& m, Eigen::Index rows, const char* what)
{
    if (m.rows() != rows) {
        throw ContractViolation(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " +
                                std::to_string(m.rows()));
    }
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractViolation(std::string(what) + ": shape mismatch");
    }
}

LayerSpec spec_from_params(LayerKind kind, const ConstLayerParams& p)
{
    const auto gates = static_cast<Eigen::Index>(gate_count(kind));
    if (p.W.rows() % gates != 0 || p.b.size() != p.W.rows()) {
        throw ContractViolation("layer parameters are not consistent with the layer kind");
    }
    LayerSpec spec{kind, static_cast<std::size_t>(p.W.cols()), static_cast<std::size_t>(p.W.rows() / gates)};
    if (is_recurrent(kind) &&
        (p.U.rows() != p.W.rows() || p.U.cols() != static_cast<Eigen::Index>(spec.output_size))) {
        throw ContractViolation("recurrent matrix shape does not match the layer output size");
    }
    return spec;
}

/// Reusable buffers for forward/backward over a batch of sequences.
struct Tape {
    std::vector<std::vector<StepCache>> steps; // [t][layer]
    std::vector<Matrix> initial_output;       // state entering the first cached step
    std::vector<Matrix> initial_cell;
    std::vector<Matrix> ds;
    std::vector<Matrix> dc;
    std::vector<Matrix> ds_next;
    std::vector<Matrix> dc_next;
    Matrix dy;
    Matrix dx;
    BackwardScratch scratch;
    StepCache warmup;
};

const Matrix& prev_output(const Tape& tape, std::size_t t, std::size_t l)
{
    return t == 0 ? tape.initial_output[l] : tape.steps[t - 1][l].y;
}

const Matrix& prev_cell(const Tape& tape, std::size_t t, std::size_t l)
{
    return t == 0 ? tape.initial_cell[l] : tape.steps[t - 1][l].c;
}

/// Runs the net over `inputs` from zero state. Steps before `first_cached`
/// only advance the state; the remaining steps are recorded on the tape.
void record(const RecurrentNet& net, const std::vector<Matrix>& inputs, std::size_t first_cached, Tape& tape)
{
    const auto& layers = net.layers();
    const auto n_layers = layers.size();
    const auto batch = inputs.front().cols();

    tape.initial_output.resize(n_layers);
    tape.initial_cell.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto h = static_cast<Eigen::Index>(layers[l].output_size);
        tape.initial_output[l].setZero(h, batch);
        tape.initial_cell[l].setZero(h, batch);
    }

    for (std::size_t t = 0; t < first_cached; ++t) {
        const Matrix* x = &inputs[t];
        for (std::size_t l = 0; l < n_layers; ++l) {
            layer_forward(layers[l], net.layer_params(l), *x, tape.initial_output[l], tape.initial_cell[l],
                          tape.warmup);
            if (layers[l].kind == LayerKind::lstm) {
                tape.initial_cell[l] = tape.warmup.c;
            }
            tape.initial_output[l] = tape.warmup.y;
            x = &tape.initial_output[l];
        }
    }

    const auto cached = inputs.size() - first_cached;
    tape.steps.resize(cached);
    for (std::size_t t = 0; t < cached; ++t) {
        tape.steps[t].resize(n_layers);
        const Matrix* x = &inputs[first_cached + t];
        for (std::size_t l = 0; l < n_layers; ++l) {
            layer_forward(layers[l], net.layer_params(l), *x, prev_output(tape, t, l), prev_cell(tape, t, l),
                          tape.steps[t][l]);
            x = &tape.steps[t][l].y;
        }
    }
}

/// Backward pass over the recorded steps; returns the loss.
double backpropagate(const RecurrentNet& net, const std::vector<Matrix>& inputs,
                     const std::vector<const Matrix*>& targets, std::size_t first_cached, Tape& tape,
                     std::span<double> grad)
{
    const auto& layers = net.layers();
    const auto n_layers = layers.size();
    const auto batch = inputs.front().cols();

    double elements = 0.0;
    for (std::size_t t = first_cached; t < inputs.size(); ++t) {
        if (targets[t] != nullptr) {
            elements += static_cast<double>(targets[t]->size());
        }
    }
    const double scale = 2.0 / elements;

    std::vector<LayerGrads> g;
    g.reserve(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& spec = layers[l];
        const auto rows = static_cast<Eigen::Index>(gate_count(spec.kind) * spec.output_size);
        const auto in = static_cast<Eigen::Index>(spec.input_size);
        const auto u_cols = is_recurrent(spec.kind) ? static_cast<Eigen::Index>(spec.output_size) : 0;
        double* base = grad.data() + net.parameter_offset(l);
        g.push_back({Eigen::Map<Matrix>(base, rows, in), Eigen::Map<Matrix>(base + rows * in, rows, u_cols),
                     Eigen::Map<Vector>(base + rows * in + rows * u_cols, rows)});
    }

    tape.ds.resize(n_layers);
    tape.dc.resize(n_layers);
    tape.ds_next.resize(n_layers);
    tape.dc_next.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto h = static_cast<Eigen::Index>(layers[l].output_size);
        tape.ds_next[l].setZero(h, batch);
        tape.dc_next[l].setZero(h, batch);
    }

    double loss = 0.0;
    for (std::size_t t = inputs.size(); t-- > first_cached;) {
        const auto step = t - first_cached;
        const auto top = n_layers - 1;
        const auto& y = tape.steps[step][top].y;
        if (targets[t] != nullptr) {
            const Matrix diff = y - *targets[t];
            loss += diff.squaredNorm();
            tape.dy = scale * diff;
        } else {
            tape.dy.setZero(y.rows(), y.cols());
        }
        for (std::size_t l = n_layers; l-- > 0;) {
            const auto& spec = layers[l];
            const Matrix& x = l == 0 ? inputs[t] : tape.steps[step][l - 1].y;
            if (is_recurrent(spec.kind)) {
                tape.dy += tape.ds_next[l];
            }
            Matrix* dx = l == 0 ? nullptr : &tape.dx;
            layer_backward(spec, net.layer_params(l), x, prev_output(tape, step, l), prev_cell(tape, step, l),
                           tape.steps[step][l], tape.dy, tape.dc_next[l], g[l], dx, tape.ds[l], tape.dc[l],
                           tape.scratch);
            if (is_recurrent(spec.kind)) {
                std::swap(tape.ds_next[l], tape.ds[l]);
            }
            if (spec.kind == LayerKind::lstm) {
                std::swap(tape.dc_next[l], tape.dc[l]);
            }
            if (l > 0) {
                std::swap(tape.dy, tape.dx);
            }
        }
    }
    return loss / elements;
}

} // namespace

std::string_view to_string(LayerKind kind)
{
    switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::rnn: return "rnn";
    case LayerKind::lstm: return "lstm";
    case LayerKind::gru: return "gru";
    }
    return "?";
}

std::string_view to_string(Activation activation)
{
    switch (activation) {
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
    }
    return "?";
}

LayerKind parse_layer_kind(std::string_view name)
{
    for (auto kind : {LayerKind::dense, LayerKind::rnn, LayerKind::lstm, LayerKind::gru}) {
        if (to_string(kind) == name) {
            return kind;
        }
    }
    throw InvalidArgument("unknown layer kind: " + std::string(name));
}

Activation parse_activation(std::string_view name)
{
    for (auto a : {Activation::tanh, Activation::sigmoid, Activation::identity}) {
        if (to_string(a) == name) {
            return a;
        }
    }
    throw InvalidArgument("unknown activation: " + std::string(name));
}

std::size_t gate_count(LayerKind kind)
{
    switch (kind) {
    case LayerKind::dense:
    case LayerKind::rnn: return 1;
    case LayerKind::lstm: return 4;
    case LayerKind::gru: return 3;
    }
    return 1;
}

bool is_recurrent(LayerKind kind) { return kind != LayerKind::dense; }

std::size_t parameter_count(const LayerSpec& spec)
{
    const auto rows = gate_count(spec.kind) * spec.output_size;
    const auto u = is_recurrent(spec.kind) ? rows * spec.output_size : 0;
    return rows * spec.input_size + u + rows;
}

Matrix forward_dense_layer(const ConstLayerParams& p, Activation activation, const Matrix& input)
{
    auto spec = spec_from_params(LayerKind::dense, p);
    spec.activation = activation;
    check_input(input, p.W.cols(), "dense layer input");
    StepCache k;
    const Matrix none;
    layer_forward(spec, p, input, none, none, k);
    return k.y;
}

Matrix forward_rnn_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_output)
{
    const auto spec = spec_from_params(LayerKind::rnn, p);
    check_input(input, p.W.cols(), "rnn layer input");
    check_input(prev_output, static_cast<Eigen::Index>(spec.output_size), "rnn previous output");
    if (prev_output.cols() != input.cols()) {
        throw ContractViolation("rnn layer: batch width mismatch");
    }
    StepCache k;
    layer_forward(spec, p, input, prev_output, prev_output, k);
    return k.y;
}

LstmStep forward_lstm_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_output,
                            const Matrix& prev_cell)
{
    const auto spec = spec_from_params(LayerKind::lstm, p);
    check_input(input, p.W.cols(), "lstm layer input");
    check_input(prev_output, static_cast<Eigen::Index>(spec.output_size), "lstm previous output");
    check_same_shape(prev_output, prev_cell, "lstm state");
    if (prev_output.cols() != input.cols()) {
        throw ContractViolation("lstm layer: batch width mismatch");
    }
    StepCache k;
    layer_forward(spec, p, input, prev_output, prev_cell, k);
    return {k.y, k.c};
}

Matrix forward_gru_layer(const ConstLayerParams& p, const Matrix& input, const Matrix& prev_state)
{
    const auto spec = spec_from_params(LayerKind::gru, p);
    check_input(input, p.W.cols(), "gru layer input");
    check_input(prev_state, static_cast<Eigen::Index>(spec.output_size), "gru previous state");
    if (prev_state.cols() != input.cols()) {
        throw ContractViolation("gru layer: batch width mismatch");
    }
    StepCache k;
    layer_forward(spec, p, input, prev_state, prev_state, k);
    return k.y;
}

RecurrentNet::RecurrentNet(std::vector<LayerSpec> layers)
    : layers_(std::move(layers))
{
    if (layers_.empty()) {
        throw ContractViolation("a network needs at least one layer");
    }
    std::size_t total = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& spec = layers_[l];
        if (spec.input_size == 0 || spec.output_size == 0) {
            throw ContractViolation("layer sizes must be >= 1");
        }
        if (l > 0 && layers_[l - 1].output_size != spec.input_size) {
            throw ContractViolation("layer " + std::to_string(l) + " input size does not match previous output");
        }
        offsets_.push_back(total);
        total += nn::parameter_count(spec);
    }
    params_.assign(total, 0.0);
    reset_state(1);
}

LayerParams RecurrentNet::layer_params(std::size_t l)
{
    const auto& spec = layers_.at(l);
    const auto rows = static_cast<Eigen::Index>(gate_count(spec.kind) * spec.output_size);
    const auto in = static_cast<Eigen::Index>(spec.input_size);
    const auto u_cols = is_recurrent(spec.kind) ? static_cast<Eigen::Index>(spec.output_size) : 0;
    double* base = params_.data() + offsets_[l];
    return {Eigen::Map<Matrix>(base, rows, in), Eigen::Map<Matrix>(base + rows * in, rows, u_cols),
            Eigen::Map<Vector>(base + rows * in + rows * u_cols, rows)};
}

ConstLayerParams RecurrentNet::layer_params(std::size_t l) const
{
    const auto& spec = layers_.at(l);
    const auto rows = static_cast<Eigen::Index>(gate_count(spec.kind) * spec.output_size);
    const auto in = static_cast<Eigen::Index>(spec.input_size);
    const auto u_cols = is_recurrent(spec.kind) ? static_cast<Eigen::Index>(spec.output_size) : 0;
    const double* base = params_.data() + offsets_[l];
    return {Eigen::Map<const Matrix>(base, rows, in), Eigen::Map<const Matrix>(base + rows * in, rows, u_cols),
            Eigen::Map<const Vector>(base + rows * in + rows * u_cols, rows)};
}

void RecurrentNet::initialize(std::uint64_t seed)
{
    Engine engine(derive_seed(seed, 0x1417));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& spec = layers_[l];
        const auto fan_in = spec.input_size + (is_recurrent(spec.kind) ? spec.output_size : 0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        const auto begin = params_.begin() + static_cast<std::ptrdiff_t>(offsets_[l]);
        std::generate(begin, begin + static_cast<std::ptrdiff_t>(nn::parameter_count(spec)),
                      [&] { return dist(engine); });
    }
    reset_state(1);
}

bool RecurrentNet::parameters_finite() const noexcept
{
    return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

void RecurrentNet::reset_state(std::size_t batch)
{
    state_.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto h = static_cast<Eigen::Index>(layers_[l].output_size);
        state_[l].output.setZero(h, static_cast<Eigen::Index>(batch));
        state_[l].cell.setZero(h, static_cast<Eigen::Index>(batch));
    }
}

Matrix RecurrentNet::step(const Matrix& input)
{
    check_input(input, static_cast<Eigen::Index>(input_size()), "network input");
    if (input.cols() != state_.front().output.cols()) {
        throw ContractViolation("batch width differs from the state; call reset_state first");
    }
    StepCache k;
    const Matrix* x = &input;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layer_forward(layers_[l], std::as_const(*this).layer_params(l), *x, state_[l].output, state_[l].cell, k);
        if (layers_[l].kind == LayerKind::lstm) {
            state_[l].cell = k.c;
        }
        state_[l].output = k.y;
        x = &state_[l].output;
    }
    return *x;
}

Vector RecurrentNet::step(const Vector& input) { return step(Matrix(input)); }

std::vector<Matrix> RecurrentNet::forward(const std::vector<Matrix>& sequence)
{
    if (sequence.empty()) {
        throw InvalidArgument("forward: empty sequence");
    }
    reset_state(static_cast<std::size_t>(sequence.front().cols()));
    std::vector<Matrix> out;
    out.reserve(sequence.size());
    for (const auto& x : sequence) {
        out.push_back(step(x));
    }
    return out;
}

std::vector<Vector> RecurrentNet::forward(const std::vector<Vector>& sequence)
{
    if (sequence.empty()) {
        throw InvalidArgument("forward: empty sequence");
    }
    reset_state(1);
    std::vector<Vector> out;
    out.reserve(sequence.size());
    for (const auto& x : sequence) {
        out.push_back(step(x));
    }
    return out;
}

Gradients bptt_gradients(const RecurrentNet& net, const std::vector<Matrix>& inputs,
                         const std::vector<Matrix>& targets)
{
    if (inputs.size() != targets.size()) {
        throw InvalidArgument("bptt_gradients: input and target sequences differ in length");
    }
    if (inputs.empty()) {
        throw InvalidArgument("bptt_gradients: empty sequence");
    }
    const auto batch = inputs.front().cols();
    std::vector<const Matrix*> target_ptrs(targets.size(), nullptr);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        check_input(inputs[t], static_cast<Eigen::Index>(net.input_size()), "bptt input");
        if (inputs[t].cols() != batch) {
            throw ContractViolation("bptt_gradients: batch width changes within the sequence");
        }
        if (targets[t].size() != 0) {
            if (targets[t].rows() != static_cast<Eigen::Index>(net.output_size()) || targets[t].cols() != batch) {
                throw ContractViolation("bptt_gradients: target shape mismatch");
            }
            target_ptrs[t] = &targets[t];
        }
    }
    if (std::all_of(target_ptrs.begin(), target_ptrs.end(), [](const Matrix* m) { return m == nullptr; })) {
        throw InvalidArgument("bptt_gradients: no step has a target");
    }

    Tape tape;
    record(net, inputs, 0, tape);
    AlignedBuffer grad(net.parameter_count(), 0.0);
    Gradients out;
    out.loss = backpropagate(net, inputs, target_ptrs, 0, tape, grad);
    out.values.assign(grad.begin(), grad.end());
    return out;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& config)
{
    if (params.size() != grads.size()) {
        throw ContractViolation("adam_step: parameter and gradient sizes differ");
    }
    if (!std::all_of(grads.begin(), grads.end(), [](double v) { return std::isfinite(v); })) {
        throw TrainingDivergence("adam_step: non-finite gradient");
    }
    if (state.first_moment.size() != params.size()) {
        state.first_moment.assign(params.size(), 0.0);
        state.second_moment.assign(params.size(), 0.0);
        state.step = 0;
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
        v = config.beta2 * v + (1.0 - config.beta2) * grads[i] * grads[i];
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
}

InMemoryDataset::InMemoryDataset(std::size_t window, std::size_t input_size, std::size_t output_size)
    : window_(window),
      input_size_(input_size),
      output_size_(output_size)
{
    require(window >= 1 && input_size >= 1 && output_size >= 1, "dataset dimensions must be >= 1");
}

void InMemoryDataset::add(std::span<const double> inputs, std::span<const double> target)
{
    if (inputs.size() != window_ * input_size_ || target.size() != output_size_) {
        throw ContractViolation("InMemoryDataset::add: sample shape mismatch");
    }
    inputs_.insert(inputs_.end(), inputs.begin(), inputs.end());
    targets_.insert(targets_.end(), target.begin(), target.end());
    ++count_;
}

void InMemoryDataset::gather(std::span<const std::size_t> indices, std::vector<Matrix>& inputs,
                             Matrix& targets) const
{
    const auto n = static_cast<Eigen::Index>(indices.size());
    inputs.resize(window_);
    for (auto& m : inputs) {
        m.resize(static_cast<Eigen::Index>(input_size_), n);
    }
    targets.resize(static_cast<Eigen::Index>(output_size_), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto s = indices[static_cast<std::size_t>(j)];
        const double* in = inputs_.data() + s * window_ * input_size_;
        for (std::size_t t = 0; t < window_; ++t) {
            for (std::size_t f = 0; f < input_size_; ++f) {
                inputs[t](static_cast<Eigen::Index>(f), j) = in[t * input_size_ + f];
            }
        }
        for (std::size_t f = 0; f < output_size_; ++f) {
            targets(static_cast<Eigen::Index>(f), j) = targets_[s * output_size_ + f];
        }
    }
}

TrainResult train(RecurrentNet& net, const SequenceDataset& dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch)
{
    if (dataset.size() == 0) {
        throw InvalidArgument("train: empty dataset");
    }
    require(config.batch_size >= 1, "batch_size must be >= 1");
    require(config.epochs >= 1, "epochs must be >= 1");
    require(config.bptt_window >= 1, "bptt_window must be >= 1");
    if (dataset.input_size() != net.input_size() || dataset.output_size() != net.output_size()) {
        throw ContractViolation("train: dataset and network dimensions differ");
    }

    const auto window = dataset.window();
    const auto first_cached = window > config.bptt_window ? window - config.bptt_window : 0;

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Engine engine(derive_seed(config.seed, 0x5417));

    Tape tape;
    AdamState adam;
    std::vector<Matrix> inputs;
    Matrix targets;
    std::vector<const Matrix*> target_ptrs(window, nullptr);
    AlignedBuffer grad(net.parameter_count());

    TrainResult result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), engine);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const auto end = std::min(order.size(), begin + config.batch_size);
            const std::span<const std::size_t> batch(order.data() + begin, end - begin);
            dataset.gather(batch, inputs, targets);
            target_ptrs.back() = &targets;

            std::fill(grad.begin(), grad.end(), 0.0);
            record(net, inputs, first_cached, tape);
            const double loss = backpropagate(net, inputs, target_ptrs, first_cached, tape, grad);
            if (!std::isfinite(loss)) {
                throw TrainingDivergence("train: loss became non-finite in epoch " + std::to_string(epoch));
            }
            adam_step(net.parameters(), grad, adam, config.adam);
            epoch_loss += loss * static_cast<double>(batch.size());
            ++result.updates;
        }
        epoch_loss /= static_cast<double>(order.size());
        result.epoch_loss.push_back(epoch_loss);
        if (on_epoch) {
            on_epoch(epoch, epoch_loss);
        }
    }
    net.reset_state(1);
    return result;
}

Matrix forward_last(const RecurrentNet& net, const std::vector<Matrix>& inputs)
{
    if (inputs.empty()) {
        throw InvalidArgument("forward_last: empty sequence");
    }
    for (const auto& x : inputs) {
        check_input(x, static_cast<Eigen::Index>(net.input_size()), "forward_last input");
        if (x.cols() != inputs.front().cols()) {
            throw ContractViolation("forward_last: batch width changes within the sequence");
        }
    }
    Tape tape;
    record(net, inputs, inputs.size() - 1, tape);
    return tape.steps.front().back().y;
}

Matrix predict_last(const RecurrentNet& net, const SequenceDataset& dataset, std::size_t batch_size)
{
    require(batch_size >= 1, "batch_size must be >= 1");
    if (dataset.input_size() != net.input_size()) {
        throw ContractViolation("predict_last: dataset and network input sizes differ");
    }
    const auto n = dataset.size();
    Matrix out(static_cast<Eigen::Index>(net.output_size()), static_cast<Eigen::Index>(n));
    std::vector<std::size_t> idx;
    std::vector<Matrix> inputs;
    Matrix targets;
    Tape tape;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const auto end = std::min(n, begin + batch_size);
        idx.resize(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        dataset.gather(idx, inputs, targets);
        // Everything but the last step is warm-up; only one step is cached.
        record(net, inputs, inputs.size() - 1, tape);
        out.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
            tape.steps.front().back().y;
    }
    return out;
}

namespace {
constexpr char kNetMagic[8] = {'P', 'R', 'S', 'N', 'E', 'T', '\0', '\0'};
constexpr std::uint32_t kNetVersion = 1;
constexpr std::uint32_t kByteOrderMark = 0x01020304;
} // namespace

void save_net(const RecurrentNet& net, const std::filesystem::path& path, const std::string& metadata)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(kNetMagic, sizeof kNetMagic);
    io::write_u32(out, kNetVersion);
    io::write_u32(out, kByteOrderMark);
    io::write_u64(out, net.layers().size());
    for (const auto& spec : net.layers()) {
        io::write_u32(out, static_cast<std::uint32_t>(spec.kind));
        io::write_u32(out, static_cast<std::uint32_t>(spec.activation));
        io::write_u64(out, spec.input_size);
        io::write_u64(out, spec.output_size);
    }
    io::write_u64(out, net.parameter_count());
    for (double v : net.parameters()) {
        io::write_f64(out, v);
    }
    io::write_string(out, metadata);
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

LoadedNet load_net(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8]{};
    in.read(magic, sizeof magic);
    if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kNetMagic))) {
        throw IoError("not a network file: " + path.string());
    }
    if (const auto version = io::read_u32(in); version != kNetVersion) {
        throw IoError("unsupported network file version " + std::to_string(version));
    }
    if (io::read_u32(in) != kByteOrderMark) {
        throw IoError("corrupt byte-order mark in " + path.string());
    }
    const auto n_layers = io::read_u64(in);
    if (n_layers == 0 || n_layers > 1024) {
        throw IoError("implausible layer count in " + path.string());
    }
    std::vector<LayerSpec> layers;
    for (std::uint64_t l = 0; l < n_layers; ++l) {
        LayerSpec spec;
        const auto kind = io::read_u32(in);
        const auto activation = io::read_u32(in);
        if (kind > 3 || activation > 2) {
            throw IoError("unknown layer kind or activation in " + path.string());
        }
        spec.kind = static_cast<LayerKind>(kind);
        spec.activation = static_cast<Activation>(activation);
        spec.input_size = io::read_u64(in);
        spec.output_size = io::read_u64(in);
        layers.push_back(spec);
    }
    RecurrentNet net(std::move(layers));
    if (io::read_u64(in) != net.parameter_count()) {
        throw IoError("parameter count does not match layer specs in " + path.string());
    }
    for (double& v : net.parameters()) {
        v = io::read_f64(in);
    }
    auto metadata = io::read_string(in);
    return {std::move(net), std::move(metadata)};
}

} // namespace prs::nn
