#pragma once

// Distributed relay contention: each decoding relay starts a timer inversely
// proportional to its buffered channel-gain prediction; the first expiry
// announces itself unless another timer expires within the guard time.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "prs/cooperative.hpp"
#include "prs/predictor.hpp"

namespace prs::contention {

struct ContentionParams {
    double base_time_us = 100.0; ///< lambda in T = lambda / |h|
    double guard_us = 5.0;

    /// Throws InvalidArgument.
    void validate() const;
};

enum class Status { winner, collision, no_contention };

std::string_view to_string(Status status);

struct ContentionOutcome {
    Status status = Status::no_contention;
    std::optional<std::size_t> winner;
    /// Per relay; infinity for relays outside the decoding subset.
    std::vector<double> timers_us;
    /// Expiry gap between the first and second timer (infinity if alone).
    double separation_us = std::numeric_limits<double>::infinity();
};

/// One contention round on buffered magnitudes. Members of `ds` need a
/// strictly positive buffered value. Throws InvalidArgument otherwise.
ContentionOutcome run_frame(std::span<const double> buffered, const coop::RelaySet& ds,
                            const ContentionParams& params);

enum class EventKind {
    rts_decode,
    cts_receive,
    csi_estimate,
    buffer_fetch,
    timer_start,
    timer_expiry,
    predict_buffer,
    announce,
    collision,
};

std::string_view to_string(EventKind kind);

struct Event {
    static constexpr std::size_t no_relay = std::numeric_limits<std::size_t>::max();

    std::size_t frame = 0;
    std::size_t relay = no_relay;
    EventKind kind = EventKind::rts_decode;
    double time_us = 0.0; ///< from the start of frame 0
};

struct FrameSchedule {
    std::size_t frame = 0;
    std::size_t sample = 0; ///< trace index of this frame
    coop::RelaySet decoding_subset;
    /// Magnitudes fetched for contention, per relay.
    std::vector<double> buffered;
    /// Frame whose prediction was fetched; unset on the outdated-CSI fallback.
    std::optional<std::size_t> buffered_from;
    ContentionOutcome outcome;
    std::vector<Event> events;
};

/// Predicts the magnitude `horizon` samples after `series[e]` for each e in
/// `ends`, from samples up to and including e.
struct Forecaster {
    std::size_t horizon = 1;
    std::size_t window = 1;
    std::function<std::vector<double>(std::span<const double> series, std::span<const std::size_t> ends)> predict;
};

Forecaster from_predictor(const predictor::ChannelPredictor& predictor);
/// Reads the future directly; a perfect predictor for testing.
Forecaster oracle(std::size_t horizon, std::size_t window = 1);

struct PipelineConfig {
    ContentionParams contention;
    std::size_t frames = 1;
    double sr_snr = 50.0;
    double target_rate = 1.0;
    double sample_rate_hz = 1000.0;
};

/// Samples needed per trace for `frames` frames.
std::size_t required_samples(const Forecaster& forecaster, std::size_t frames);

/// Frames are `horizon` samples apart. At frame t every relay estimates its
/// channel, predicts the next frame's magnitude and buffers it; contention at
/// frame t uses what was buffered at t-1, and frame 0 uses the magnitude
/// estimated one frame earlier. Throws InvalidArgument on short traces.
std::vector<FrameSchedule> run_pipeline(std::span<const std::vector<double>> sr_magnitudes,
                                        std::span<const std::vector<double>> rd_magnitudes,
                                        const Forecaster& forecaster, const PipelineConfig& config);

struct ContentionSummary {
    std::size_t frames = 0;
    std::size_t contended = 0; ///< frames with a non-empty decoding subset
    std::size_t collisions = 0;
    double collision_rate = 0.0; ///< collisions / contended
};

ContentionSummary summarize(std::span<const FrameSchedule> schedules);

/// "frame,relay,event,time_us" lines, relay "-" for frame-level events.
void write_event_log(std::span<const FrameSchedule> schedules, std::ostream& out);

} // namespace prs::contention
