#include "prs/cooperative.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "prs/error.hpp"
#include "prs/fading.hpp"
#include "prs/rng.hpp"

namespace prs::coop {

namespace {

constexpr std::uint64_t kSrStream = 0x5352;
constexpr std::uint64_t kRdStream = 0x5244;

struct Accumulator {
    std::size_t trials = 0;
    std::size_t outages = 0;
    double rate_sum = 0.0;
    double rate_sq_sum = 0.0;

    void add(const RateOutcome& r)
    {
        ++trials;
        outages += r.outage ? 1 : 0;
        rate_sum += r.rate;
        rate_sq_sum += r.rate * r.rate;
    }

    void merge(const Accumulator& o)
    {
        trials += o.trials;
        outages += o.outages;
        rate_sum += o.rate_sum;
        rate_sq_sum += o.rate_sq_sum;
    }
};

/// Unit-power channel gains of one frame. SNRs are these times the per-hop
/// SNR of the sweep point.
struct FrameGains {
    std::vector<double> sr;
    std::vector<double> actual;
    std::vector<double> metric;
};

/// Evaluates one frame at every sweep point. Selection depends only on the
/// ordering of `metric`, which SNR scaling preserves, but the decoding
/// subset changes with SNR.
class FrameEvaluator {
public:
    FrameEvaluator(const NetworkScenario& s, std::span<const double> snr_db)
        : scheme_(s.scheme),
          threshold_(snr_threshold(s.target_rate))
    {
        for (double db : snr_db) {
            const double p = db_to_linear(db);
            sr_.push_back(s.source_fraction * p);
            rd_.push_back(s.relay_fraction * p);
        }
        const auto k = s.relays;
        order_.resize(k);
    }

    void evaluate(const FrameGains& g, std::vector<Accumulator>& acc)
    {
        const auto k = g.sr.size();
        // Relays sorted by descending selection metric, lowest index first on ties.
        const auto& key = scheme_ == Scheme::perfect ? g.actual : g.metric;
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });

        for (std::size_t p = 0; p < sr_.size(); ++p) {
            // A relay decodes iff sr_snr * gain >= threshold.
            std::size_t picked[2];
            std::size_t n_picked = 0;
            const std::size_t wanted = scheme_ == Scheme::ostc ? 2 : 1;
            for (std::size_t i = 0; i < k && n_picked < wanted; ++i) {
                if (sr_[p] * g.sr[order_[i]] >= threshold_) {
                    picked[n_picked++] = order_[i];
                }
            }
            RateOutcome r;
            if (n_picked == 1) {
                r = outcome(rd_[p] * g.actual[picked[0]]);
            } else if (n_picked == 2) {
                r = outcome(0.5 * rd_[p] * (g.actual[picked[0]] + g.actual[picked[1]]));
            }
            acc[p].add(r);
        }
    }

private:
    RateOutcome outcome(double snr) const
    {
        return {0.5 * std::log2(1.0 + snr), snr < threshold_, snr};
    }

    Scheme scheme_;
    double threshold_;
    std::vector<double> sr_;
    std::vector<double> rd_;
    std::vector<std::size_t> order_;
};

double resolve_rho(const NetworkScenario& s, const StatisticalMode& m)
{
    if (m.rho) {
        if (!(*m.rho >= 0.0 && *m.rho <= 1.0)) {
            throw ConfigError("statistical-mode correlation must lie in [0, 1]");
        }
        return *m.rho;
    }
    switch (s.scheme) {
    case Scheme::perfect: return 1.0;
    case Scheme::ors:
    case Scheme::ostc: return std::abs(fading::jakes_correlation(s.doppler_hz, s.delay_s));
    case Scheme::prs: break;
    }
    throw ConfigError("statistical PRS needs an explicit predictor correlation");
}

/// Runs `body(block, accumulators)` for every block on `workers` threads and
/// reduces the per-block results in block order.
template <class Body>
std::vector<Accumulator> run_blocks(std::size_t blocks, std::size_t points, std::size_t workers, Body body)
{
    std::vector<std::vector<Accumulator>> per_block(blocks, std::vector<Accumulator>(points));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        try {
            for (std::size_t b = next++; b < blocks; b = next++) {
                body(b, per_block[b]);
            }
        } catch (...) {
            const std::lock_guard lock(failure_mutex);
            if (!failure) {
                failure = std::current_exception();
            }
            next = blocks;
        }
    };
    const auto n_threads = std::min(workers, blocks);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) {
            pool.emplace_back(worker);
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    std::vector<Accumulator> total(points);
    for (const auto& block : per_block) {
        for (std::size_t p = 0; p < points; ++p) {
            total[p].merge(block[p]);
        }
    }
    return total;
}

std::vector<Accumulator> run_statistical(const NetworkScenario& s, const StatisticalMode& mode,
                                         std::span<const double> snr_db, const MonteCarloConfig& config)
{
    const double rho = resolve_rho(s, mode);
    const auto blocks = (config.trials + config.block_size - 1) / config.block_size;
    return run_blocks(blocks, snr_db.size(), config.workers, [&](std::size_t b, std::vector<Accumulator>& acc) {
        Engine engine(derive_seed(config.seed, b));
        fading::CorrelatedPairSampler pair(rho);
        std::exponential_distribution<double> exponential(1.0);
        FrameEvaluator evaluator(s, snr_db);
        FrameGains g{std::vector<double>(s.relays), std::vector<double>(s.relays), std::vector<double>(s.relays)};
        const auto n = std::min(config.block_size, config.trials - b * config.block_size);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < s.relays; ++k) {
                g.sr[k] = exponential(engine);
                const auto p = pair(engine);
                g.metric[k] = std::norm(p.outdated);
                g.actual[k] = std::norm(p.actual);
            }
            evaluator.evaluate(g, acc);
        }
    });
}

std::size_t delay_samples(const NetworkScenario& s, double sample_rate_hz)
{
    const double d = s.delay_s * sample_rate_hz;
    const double rounded = std::round(d);
    if (std::abs(d - rounded) > 1e-9 * std::max(1.0, d)) {
        throw ConfigError("delay must be a whole number of samples in timeseries mode");
    }
    return static_cast<std::size_t>(rounded);
}

std::vector<Accumulator> run_timeseries(const NetworkScenario& s, const TimeseriesMode& mode,
                                        std::span<const double> snr_db, const MonteCarloConfig& config)
{
    const fading::FadingParams probe{s.doppler_hz, mode.sample_rate_hz, 1.0, 1};
    try {
        probe.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("timeseries mode: ") + e.what());
    }
    if (mode.frame_stride == 0) {
        throw ConfigError("frame stride must be at least one sample");
    }
    const auto delay = delay_samples(s, mode.sample_rate_hz);
    std::size_t window = 1;
    if (s.scheme == Scheme::prs) {
        if (!mode.predictor) {
            throw ConfigError("timeseries PRS needs a trained predictor");
        }
        if (mode.predictor->config().horizon_steps != delay) {
            throw ConfigError("predictor horizon (" + std::to_string(mode.predictor->config().horizon_steps) +
                              " steps) does not match the CSI delay (" + std::to_string(delay) + " samples)");
        }
        window = mode.predictor->config().window;
    }
    // First frame sits where both the outdated sample and a full prediction
    // window are available.
    const auto first = delay + window - 1;
    const auto blocks = (config.trials + config.block_size - 1) / config.block_size;

    return run_blocks(blocks, snr_db.size(), config.workers, [&](std::size_t b, std::vector<Accumulator>& acc) {
        const auto n = std::min(config.block_size, config.trials - b * config.block_size);
        const auto block_seed = derive_seed(config.seed, b);
        const fading::FadingParams params{s.doppler_hz, mode.sample_rate_hz, 1.0, first + (n - 1) * mode.frame_stride + 1};

        std::vector<std::size_t> frames(n);
        for (std::size_t t = 0; t < n; ++t) {
            frames[t] = first + t * mode.frame_stride;
        }
        std::vector<std::vector<double>> sr(s.relays);
        std::vector<std::vector<double>> rd(s.relays);
        std::vector<std::vector<double>> predicted(s.relays);
        std::vector<std::size_t> ends;
        if (s.scheme == Scheme::prs) {
            ends.resize(n);
            for (std::size_t t = 0; t < n; ++t) {
                ends[t] = frames[t] - delay;
            }
        }
        for (std::size_t k = 0; k < s.relays; ++k) {
            sr[k] = fading::magnitudes(fading::generate_trace(params, derive_seed(block_seed, kSrStream + 2 * k)));
            rd[k] = fading::magnitudes(fading::generate_trace(params, derive_seed(block_seed, kRdStream + 2 * k)));
            if (s.scheme == Scheme::prs) {
                predicted[k] = mode.predictor->predict_at(rd[k], ends);
            }
        }

        FrameEvaluator evaluator(s, snr_db);
        FrameGains g{std::vector<double>(s.relays), std::vector<double>(s.relays), std::vector<double>(s.relays)};
        for (std::size_t t = 0; t < n; ++t) {
            const auto i = frames[t];
            for (std::size_t k = 0; k < s.relays; ++k) {
                g.sr[k] = sr[k][i] * sr[k][i];
                g.actual[k] = rd[k][i] * rd[k][i];
                const double m = s.scheme == Scheme::prs ? predicted[k][t] : rd[k][i - delay];
                g.metric[k] = m * m;
            }
            evaluator.evaluate(g, acc);
        }
    });
}

} // namespace

std::string_view to_string(Scheme scheme)
{
    switch (scheme) {
    case Scheme::perfect: return "perfect";
    case Scheme::ors: return "ors";
    case Scheme::prs: return "prs";
    case Scheme::ostc: return "ostc";
    }
    return "?";
}

Scheme parse_scheme(std::string_view name)
{
    for (auto s : {Scheme::perfect, Scheme::ors, Scheme::prs, Scheme::ostc}) {
        if (to_string(s) == name) {
            return s;
        }
    }
    throw InvalidArgument("unknown scheme: " + std::string(name));
}

double snr_threshold(double rate) { return std::exp2(2.0 * rate) - 1.0; }

void NetworkScenario::validate() const
{
    require(relays >= 1, "at least one relay is required");
    require(target_rate > 0.0 && std::isfinite(target_rate), "target rate must be positive");
    require(total_snr > 0.0 && std::isfinite(total_snr), "SNR must be positive");
    require(source_fraction > 0.0 && relay_fraction > 0.0 &&
                std::abs(source_fraction + relay_fraction - 1.0) < 1e-12,
            "power fractions must be positive and sum to 1");
    require(doppler_hz >= 0.0 && std::isfinite(doppler_hz), "Doppler must be non-negative");
    require(delay_s >= 0.0 && std::isfinite(delay_s), "delay must be non-negative");
}

RelaySet decoding_subset(std::span<const double> sr_snrs, double target_rate)
{
    const double threshold = snr_threshold(target_rate);
    RelaySet ds;
    for (std::size_t k = 0; k < sr_snrs.size(); ++k) {
        require(sr_snrs[k] >= 0.0, "SNRs must be non-negative");
        if (sr_snrs[k] >= threshold) {
            ds.push_back(k);
        }
    }
    return ds;
}

std::optional<std::size_t> select_best(const RelaySet& ds, std::span<const double> metric)
{
    std::optional<std::size_t> best;
    for (auto k : ds) {
        if (k >= metric.size()) {
            throw InvalidArgument("relay index outside the metric vector");
        }
        if (!best || metric[k] > metric[*best] || (metric[k] == metric[*best] && k < *best)) {
            best = k;
        }
    }
    return best;
}

std::optional<std::size_t> select_ors(const RelaySet& ds, std::span<const double> outdated)
{
    return select_best(ds, outdated);
}

std::optional<std::size_t> select_prs(const RelaySet& ds, std::span<const double> predicted)
{
    return select_best(ds, predicted);
}

std::vector<std::size_t> select_ostc(const RelaySet& ds, std::span<const double> outdated)
{
    std::vector<std::size_t> out;
    const auto first = select_best(ds, outdated);
    if (!first) {
        return out;
    }
    out.push_back(*first);
    RelaySet rest;
    std::copy_if(ds.begin(), ds.end(), std::back_inserter(rest), [&](std::size_t k) { return k != *first; });
    if (const auto second = select_best(rest, outdated)) {
        out.push_back(*second);
    }
    return out;
}

RateOutcome e2e_rate(std::span<const std::size_t> selected, std::span<const double> actual_rd, double target_rate)
{
    for (auto k : selected) {
        require(k < actual_rd.size(), "selected relay outside the SNR vector");
    }
    double snr = 0.0;
    switch (selected.size()) {
    case 0: return {0.0, true, 0.0};
    case 1: snr = actual_rd[selected[0]]; break;
    case 2: snr = 0.5 * (actual_rd[selected[0]] + actual_rd[selected[1]]); break;
    default: throw InvalidArgument("at most two relays can be selected");
    }
    return {0.5 * std::log2(1.0 + snr), snr < snr_threshold(target_rate), snr};
}

FrameOutcome run_frame(Scheme scheme, std::span<const double> sr_snrs, std::span<const double> metric,
                       std::span<const double> actual_rd, double target_rate)
{
    require(sr_snrs.size() == actual_rd.size(), "SR and RD vectors differ in length");
    FrameOutcome f;
    f.decoding_subset = decoding_subset(sr_snrs, target_rate);
    if (scheme == Scheme::ostc) {
        require(metric.size() == actual_rd.size(), "metric and RD vectors differ in length");
        f.selected = select_ostc(f.decoding_subset, metric);
    } else {
        const auto& key = scheme == Scheme::perfect ? actual_rd : metric;
        require(key.size() == actual_rd.size(), "metric and RD vectors differ in length");
        if (const auto k = select_best(f.decoding_subset, key)) {
            f.selected.push_back(*k);
        }
    }
    const auto r = e2e_rate(f.selected, actual_rd, target_rate);
    f.e2e_snr = r.e2e_snr;
    f.rate = r.rate;
    f.outage = r.outage;
    return f;
}

std::string_view mode_name(const Mode& mode)
{
    return std::holds_alternative<StatisticalMode>(mode) ? "statistical" : "timeseries";
}

std::vector<MonteCarloResult> run_sweep(const NetworkScenario& scenario, const Mode& mode,
                                        std::span<const double> snr_db, const MonteCarloConfig& config)
{
    scenario.validate();
    require(config.trials >= 1, "at least one trial is required");
    require(config.block_size >= 1, "block size must be >= 1");
    require(config.workers >= 1, "at least one worker is required");
    require(!snr_db.empty(), "empty SNR grid");
    for (double db : snr_db) {
        require(std::isfinite(db), "SNR grid values must be finite");
    }

    const auto acc = std::holds_alternative<StatisticalMode>(mode)
                         ? run_statistical(scenario, std::get<StatisticalMode>(mode), snr_db, config)
                         : run_timeseries(scenario, std::get<TimeseriesMode>(mode), snr_db, config);

    std::vector<MonteCarloResult> out;
    for (std::size_t p = 0; p < snr_db.size(); ++p) {
        const auto& a = acc[p];
        const double n = static_cast<double>(a.trials);
        MonteCarloResult r;
        r.snr_db = snr_db[p];
        r.trials = a.trials;
        r.outages = a.outages;
        r.outage_prob = static_cast<double>(a.outages) / n;
        r.outage_stderr = std::sqrt(r.outage_prob * (1.0 - r.outage_prob) / n);
        r.capacity = a.rate_sum / n;
        const double var = a.trials > 1 ? std::max(0.0, (a.rate_sq_sum - n * r.capacity * r.capacity) / (n - 1.0)) : 0.0;
        r.capacity_stderr = std::sqrt(var / n);
        out.push_back(r);
    }
    return out;
}

MonteCarloResult run_montecarlo(const NetworkScenario& scenario, const Mode& mode, const MonteCarloConfig& config)
{
    scenario.validate();
    const double db = 10.0 * std::log10(scenario.total_snr);
    auto results = run_sweep(scenario, mode, std::span<const double>(&db, 1), config);
    return results.front();
}

} // namespace prs::coop
