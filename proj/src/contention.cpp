#include "prs/contention.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "prs/error.hpp"

namespace prs::contention {

namespace {

// Offsets within a frame, microseconds.
constexpr double kCtsUs = 10.0;
constexpr double kContentionStartUs = 20.0;

} // namespace

void ContentionParams::validate() const
{
    require(base_time_us > 0.0 && std::isfinite(base_time_us), "timer base time must be positive");
    require(guard_us > 0.0 && std::isfinite(guard_us), "guard time must be positive");
}

std::string_view to_string(Status status)
{
    switch (status) {
    case Status::winner: return "winner";
    case Status::collision: return "collision";
    case Status::no_contention: return "no_contention";
    }
    return "?";
}

std::string_view to_string(EventKind kind)
{
    switch (kind) {
    case EventKind::rts_decode: return "rts_decode";
    case EventKind::cts_receive: return "cts_receive";
    case EventKind::csi_estimate: return "csi_estimate";
    case EventKind::buffer_fetch: return "buffer_fetch";
    case EventKind::timer_start: return "timer_start";
    case EventKind::timer_expiry: return "timer_expiry";
    case EventKind::predict_buffer: return "predict_buffer";
    case EventKind::announce: return "announce";
    case EventKind::collision: return "collision";
    }
    return "?";
}

ContentionOutcome run_frame(std::span<const double> buffered, const coop::RelaySet& ds,
                            const ContentionParams& params)
{
    params.validate();
    ContentionOutcome out;
    out.timers_us.assign(buffered.size(), std::numeric_limits<double>::infinity());
    if (ds.empty()) {
        return out;
    }
    std::size_t first = Event::no_relay;
    std::size_t second = Event::no_relay;
    for (auto k : ds) {
        require(k < buffered.size(), "relay index outside the buffered vector");
        require(buffered[k] > 0.0 && !std::isnan(buffered[k]), "buffered magnitudes must be positive");
        const double t = params.base_time_us / buffered[k];
        out.timers_us[k] = t;
        if (first == Event::no_relay || t < out.timers_us[first]) {
            second = first;
            first = k;
        } else if (second == Event::no_relay || t < out.timers_us[second]) {
            second = k;
        }
    }
    if (second == Event::no_relay) {
        out.status = Status::winner;
        out.winner = first;
        return out;
    }
    out.separation_us = out.timers_us[second] - out.timers_us[first];
    // NaN (two never-expiring timers) also counts as a collision.
    if (out.separation_us >= params.guard_us) {
        out.status = Status::winner;
        out.winner = first;
    } else {
        out.status = Status::collision;
    }
    return out;
}

Forecaster from_predictor(const predictor::ChannelPredictor& predictor)
{
    Forecaster f;
    f.horizon = predictor.config().horizon_steps;
    f.window = predictor.config().window;
    f.predict = [&predictor](std::span<const double> series, std::span<const std::size_t> ends) {
        return predictor.predict_at(series, ends);
    };
    return f;
}

Forecaster oracle(std::size_t horizon, std::size_t window)
{
    require(horizon >= 1 && window >= 1, "horizon and window must be >= 1");
    Forecaster f;
    f.horizon = horizon;
    f.window = window;
    f.predict = [horizon](std::span<const double> series, std::span<const std::size_t> ends) {
        std::vector<double> out;
        out.reserve(ends.size());
        for (auto e : ends) {
            require(e + horizon < series.size(), "oracle reads past the end of the series");
            out.push_back(series[e + horizon]);
        }
        return out;
    };
    return f;
}

std::size_t required_samples(const Forecaster& forecaster, std::size_t frames)
{
    return forecaster.window + frames * forecaster.horizon;
}

std::vector<FrameSchedule> run_pipeline(std::span<const std::vector<double>> sr_magnitudes,
                                        std::span<const std::vector<double>> rd_magnitudes,
                                        const Forecaster& forecaster, const PipelineConfig& config)
{
    config.contention.validate();
    require(static_cast<bool>(forecaster.predict), "forecaster has no prediction function");
    require(forecaster.horizon >= 1 && forecaster.window >= 1, "forecaster horizon and window must be >= 1");
    require(config.frames >= 1, "at least one frame is required");
    require(config.sr_snr > 0.0 && config.target_rate > 0.0 && config.sample_rate_hz > 0.0,
            "SNR, rate and sample rate must be positive");
    const auto k = rd_magnitudes.size();
    require(k >= 1 && sr_magnitudes.size() == k, "need one SR and one RD trace per relay");
    const auto needed = required_samples(forecaster, config.frames);
    for (std::size_t r = 0; r < k; ++r) {
        require(sr_magnitudes[r].size() >= needed && rd_magnitudes[r].size() >= needed,
                "trace underrun: " + std::to_string(needed) + " samples needed");
    }

    const auto h = forecaster.horizon;
    const auto sample_of = [&](std::size_t t) { return forecaster.window - 1 + (t + 1) * h; };
    const double period_us = 1e6 * static_cast<double>(h) / config.sample_rate_hz;

    // Predictions made at frames 0..N-2 for the following frame.
    std::vector<std::vector<double>> predicted(k);
    if (config.frames > 1) {
        std::vector<std::size_t> ends(config.frames - 1);
        for (std::size_t t = 0; t + 1 < config.frames; ++t) {
            ends[t] = sample_of(t);
        }
        for (std::size_t r = 0; r < k; ++r) {
            predicted[r] = forecaster.predict(rd_magnitudes[r], ends);
            require(predicted[r].size() == ends.size(), "forecaster returned the wrong number of predictions");
        }
    }

    std::vector<FrameSchedule> out;
    out.reserve(config.frames);
    std::vector<double> sr_snr(k);
    for (std::size_t t = 0; t < config.frames; ++t) {
        FrameSchedule f;
        f.frame = t;
        f.sample = sample_of(t);
        const double t0 = static_cast<double>(t) * period_us;
        for (std::size_t r = 0; r < k; ++r) {
            const double a = sr_magnitudes[r][f.sample];
            sr_snr[r] = a * a * config.sr_snr;
        }
        f.decoding_subset = coop::decoding_subset(sr_snr, config.target_rate);

        f.buffered.resize(k);
        for (std::size_t r = 0; r < k; ++r) {
            double v = t == 0 ? rd_magnitudes[r][f.sample - h] : predicted[r][t - 1];
            // A zero prediction never expires.
            f.buffered[r] = std::max(v, std::numeric_limits<double>::min());
        }
        if (t > 0) {
            f.buffered_from = t - 1;
        }
        f.outcome = run_frame(f.buffered, f.decoding_subset, config.contention);

        auto& ev = f.events;
        for (std::size_t r = 0; r < k; ++r) {
            ev.push_back({t, r, EventKind::rts_decode, t0});
        }
        for (std::size_t r = 0; r < k; ++r) {
            ev.push_back({t, r, EventKind::cts_receive, t0 + kCtsUs});
            ev.push_back({t, r, EventKind::csi_estimate, t0 + kCtsUs});
        }
        for (auto r : f.decoding_subset) {
            ev.push_back({t, r, EventKind::buffer_fetch, t0 + kContentionStartUs});
            ev.push_back({t, r, EventKind::timer_start, t0 + kContentionStartUs});
        }
        std::vector<std::size_t> by_expiry(f.decoding_subset.begin(), f.decoding_subset.end());
        std::stable_sort(by_expiry.begin(), by_expiry.end(), [&](std::size_t a, std::size_t b) {
            return f.outcome.timers_us[a] < f.outcome.timers_us[b];
        });
        double resolved = t0 + kContentionStartUs;
        for (std::size_t i = 0; i < by_expiry.size(); ++i) {
            const auto r = by_expiry[i];
            const double at = t0 + kContentionStartUs + f.outcome.timers_us[r];
            if (!std::isfinite(at)) {
                break;
            }
            ev.push_back({t, r, EventKind::timer_expiry, at});
            if (i == 0 && f.outcome.status == Status::winner) {
                ev.push_back({t, r, EventKind::announce, at});
                resolved = at + config.contention.guard_us;
            } else if (i == 1 && f.outcome.status == Status::collision) {
                ev.push_back({t, Event::no_relay, EventKind::collision, at});
                resolved = at;
            }
        }
        if (t + 1 < config.frames) {
            for (std::size_t r = 0; r < k; ++r) {
                ev.push_back({t, r, EventKind::predict_buffer, resolved});
            }
        }
        std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.time_us < b.time_us; });
        out.push_back(std::move(f));
    }
    return out;
}

ContentionSummary summarize(std::span<const FrameSchedule> schedules)
{
    ContentionSummary s;
    s.frames = schedules.size();
    for (const auto& f : schedules) {
        if (f.outcome.status != Status::no_contention) {
            ++s.contended;
        }
        if (f.outcome.status == Status::collision) {
            ++s.collisions;
        }
    }
    s.collision_rate = s.contended ? static_cast<double>(s.collisions) / static_cast<double>(s.contended) : 0.0;
    return s;
}

void write_event_log(std::span<const FrameSchedule> schedules, std::ostream& out)
{
    const auto flags = out.flags();
    const auto precision = out.precision();
    out << std::fixed << std::setprecision(3);
    out << "frame,relay,event,time_us\n";
    for (const auto& f : schedules) {
        for (const auto& e : f.events) {
            out << e.frame << ',';
            if (e.relay == Event::no_relay) {
                out << '-';
            } else {
                out << e.relay;
            }
            out << ',' << to_string(e.kind) << ',' << e.time_us << '\n';
        }
    }
    out.flags(flags);
    out.precision(precision);
}

} // namespace prs::contention
