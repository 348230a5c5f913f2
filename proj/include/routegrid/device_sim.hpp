#pragma once

#include "routegrid/geogrid.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace routegrid {

/// Path the simulated device walks: a waypoint polyline at constant speed,
/// reporting a fix every ping_interval_s.
struct RoutePlan {
    std::vector<GeoPoint> waypoints;  // timestamps ignored
    double speed_mps = 1.4;           // walking pace
    int ping_interval_s = 5;
};

void validate_plan(const RoutePlan& plan);

// Total polyline length in meters.
double plan_length_m(const RoutePlan& plan);

/// Isotropic Gaussian position noise in the local tangent plane.
/// Same seed, same stream.
struct NoiseModel {
    double sigma_m = 10.0;
    std::uint64_t seed = 0;
};

struct BatteryModel {
    double start_pct = 100.0;
    double hours_full_to_empty = 12.0;
    double lowbat_pct = 15.0;
    bool standby = false;  // standby draw is 50/115 of continuous
};

enum class DeviceEventKind { Ping, Sos, LowBat };

const char* to_string(DeviceEventKind k);

/// One wire message from the device. SOS and LOWBAT never carry a fresh fix,
/// only the most recent successful one (nullopt = no fix ever obtained).
struct DeviceEvent {
    DeviceEventKind kind = DeviceEventKind::Ping;
    std::string device_id;
    std::optional<GeoPoint> point;
    int battery_pct = 100;
    std::int64_t ts = 0;
};

/// [start, end) offsets in seconds from simulation start during which the
/// receiver has no satellite signal: no pings, last known position serves.
struct FixLossWindow {
    std::int64_t start_offset_s = 0;
    std::int64_t end_offset_s = 0;
};

struct SimRun {
    std::string device_id = "dev";
    std::int64_t start_ts = 0;
    std::int64_t duration_s = 0;  // 0: run until the plan is walked to the end
    std::vector<FixLossWindow> fix_loss;
    std::vector<std::int64_t> sos_offsets;  // seconds from start
};

// Deterministic event stream: pings along the plan with Gaussian noise,
// linear battery drain with a single LOWBAT at the threshold crossing,
// SOS events at the scheduled offsets.
std::vector<DeviceEvent> simulate_track(const RoutePlan& plan, const NoiseModel& noise,
                                        const BatteryModel& battery, const SimRun& run);

// From at_fraction of the event timeline onward, positions follow the detour
// plan instead. Timestamps, cadence and battery are untouched; the noise
// realization of the tail is re-drawn (seeded, still deterministic).
std::vector<DeviceEvent> inject_deviation(const std::vector<DeviceEvent>& events,
                                          double at_fraction, const RoutePlan& detour,
                                          const NoiseModel& noise);

// Pure last-known rule: an SOS carries the most recent fix, or an explicit
// no-fix marker (nullopt point), never a fabricated coordinate.
DeviceEvent trigger_sos(const std::optional<GeoPoint>& last_known, const std::string& device_id,
                        std::int64_t ts, int battery_pct);

// Protocol text for one event, without the trailing newline:
//   PING <id> <lat> <lon> <ts> <batt> | SOS <id> <ts> | LOWBAT <id> <batt> <ts>
std::string wire_line(const DeviceEvent& ev);

// The PING positions of a stream, for CSV export.
std::vector<GeoPoint> ping_points(std::span<const DeviceEvent> events);

/// A scenario file fully describes a run: key = value lines, '#' comments.
/// Multi-trip scenarios repeat the same plan trips times, trip_spacing_s
/// apart, deriving the per-trip noise seed from `seed` + trip index.
struct Scenario {
    std::string device_id = "dev";
    RoutePlan plan;
    NoiseModel noise;
    BatteryModel battery;
    std::int64_t start_ts = 0;
    std::int64_t duration_s = 0;
    int trips = 1;
    std::int64_t trip_spacing_s = 86400;
    double deviation_at = -1.0;  // < 0: no deviation
    RoutePlan deviation_plan;
    std::vector<FixLossWindow> fix_loss;
    std::vector<std::int64_t> sos_offsets;
};

struct ScenarioError : std::runtime_error {
    explicit ScenarioError(const std::string& what, std::vector<std::string> bad = {})
        : std::runtime_error(what), bad_keys(std::move(bad)) {}
    std::vector<std::string> bad_keys;
};

Scenario parse_scenario(std::istream& in);
Scenario load_scenario_file(const std::string& path);

// Full scenario run: all trips, deviation spliced in when configured.
std::vector<DeviceEvent> run_scenario(const Scenario& sc);

}  // namespace routegrid
