#include "routegrid/device_sim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace routegrid {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kMetersPerDegLat = kEarthRadiusM * kPi / 180.0;  // ~111194.93

// Standby draw is 50 mW against 115 mW continuous.
constexpr double kStandbyDrainRatio = 50.0 / 115.0;

// Hand-rolled Box-Muller so event streams are identical across standard
// library implementations for a given seed.
class GaussianGen {
public:
    explicit GaussianGen(std::uint64_t seed) : rng_(seed) {}

    double next(double sigma) {
        if (have_spare_) {
            have_spare_ = false;
            return spare_ * sigma;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * kPi * u2) * sigma;
    }

private:
    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 rng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Position along the waypoint polyline after `dist` meters; clamps at the
// final waypoint.
class PolylineWalker {
public:
    explicit PolylineWalker(const RoutePlan& plan) : points_(plan.waypoints) {
        cumulative_.push_back(0.0);
        for (std::size_t k = 1; k < points_.size(); ++k) {
            cumulative_.push_back(cumulative_.back() + haversine_m(points_[k - 1], points_[k]));
        }
    }

    double total_m() const { return cumulative_.back(); }

    GeoPoint at(double dist) const {
        if (dist <= 0.0) {
            return points_.front();
        }
        if (dist >= total_m()) {
            return points_.back();
        }
        std::size_t seg = 1;
        while (cumulative_[seg] < dist) {
            ++seg;
        }
        const double seg_len = cumulative_[seg] - cumulative_[seg - 1];
        const double f = seg_len > 0.0 ? (dist - cumulative_[seg - 1]) / seg_len : 0.0;
        const GeoPoint& a = points_[seg - 1];
        const GeoPoint& b = points_[seg];
        return GeoPoint{a.lat + (b.lat - a.lat) * f, a.lon + (b.lon - a.lon) * f, 0};
    }

private:
    std::vector<GeoPoint> points_;
    std::vector<double> cumulative_;
};

GeoPoint perturb(const GeoPoint& p, double sigma_m, GaussianGen& gen, std::int64_t ts) {
    const double dy = gen.next(sigma_m);  // north, meters
    const double dx = gen.next(sigma_m);  // east, meters
    const double lat = p.lat + dy / kMetersPerDegLat;
    const double lon = p.lon + dx / (kMetersPerDegLat * std::cos(p.lat * kPi / 180.0));
    return make_geopoint(lat, lon, ts);
}

double battery_pct_at(const BatteryModel& b, std::int64_t offset_s) {
    const double drain_per_hour = (100.0 / b.hours_full_to_empty) *
                                  (b.standby ? kStandbyDrainRatio : 1.0);
    const double pct = b.start_pct - drain_per_hour * (static_cast<double>(offset_s) / 3600.0);
    return std::clamp(pct, 0.0, 100.0);
}

int battery_int(double pct) { return static_cast<int>(std::floor(pct)); }

bool in_fix_loss(std::span<const FixLossWindow> windows, std::int64_t offset) {
    for (const FixLossWindow& w : windows) {
        if (offset >= w.start_offset_s && offset < w.end_offset_s) {
            return true;
        }
    }
    return false;
}

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

double require_double(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (end != value.c_str() + value.size() || value.empty() || !std::isfinite(v)) {
        throw ScenarioError("scenario key '" + key + "': bad number '" + value + "'");
    }
    return v;
}

std::int64_t require_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (end != value.c_str() + value.size() || value.empty()) {
        throw ScenarioError("scenario key '" + key + "': bad integer '" + value + "'");
    }
    return v;
}

std::vector<GeoPoint> parse_waypoints(const std::string& key, const std::string& value) {
    std::vector<GeoPoint> out;
    std::istringstream ss(value);
    std::string pair;
    while (std::getline(ss, pair, ';')) {
        const std::string p = trim(pair);
        if (p.empty()) {
            continue;
        }
        const std::size_t comma = p.find(',');
        if (comma == std::string::npos) {
            throw ScenarioError("scenario key '" + key + "': waypoint needs 'lat,lon': " + p);
        }
        const double lat = require_double(key, trim(p.substr(0, comma)));
        const double lon = require_double(key, trim(p.substr(comma + 1)));
        try {
            out.push_back(make_geopoint(lat, lon, 0));
        } catch (const std::invalid_argument& e) {
            throw ScenarioError("scenario key '" + key + "': " + e.what());
        }
    }
    return out;
}

}  // namespace

void validate_plan(const RoutePlan& plan) {
    if (plan.waypoints.size() < 2) {
        throw std::invalid_argument("route plan needs at least 2 waypoints");
    }
    for (std::size_t k = 1; k < plan.waypoints.size(); ++k) {
        if (plan.waypoints[k].lat == plan.waypoints[k - 1].lat &&
            plan.waypoints[k].lon == plan.waypoints[k - 1].lon) {
            throw std::invalid_argument("consecutive waypoints must be distinct");
        }
    }
    if (!(plan.speed_mps > 0.0)) {
        throw std::invalid_argument("speed_mps must be positive");
    }
    if (plan.ping_interval_s < 1) {
        throw std::invalid_argument("ping_interval_s must be >= 1");
    }
}

double plan_length_m(const RoutePlan& plan) {
    validate_plan(plan);
    return PolylineWalker(plan).total_m();
}

const char* to_string(DeviceEventKind k) {
    switch (k) {
        case DeviceEventKind::Ping: return "PING";
        case DeviceEventKind::Sos: return "SOS";
        case DeviceEventKind::LowBat: return "LOWBAT";
    }
    return "?";
}

DeviceEvent trigger_sos(const std::optional<GeoPoint>& last_known, const std::string& device_id,
                        std::int64_t ts, int battery_pct) {
    DeviceEvent ev;
    ev.kind = DeviceEventKind::Sos;
    ev.device_id = device_id;
    ev.ts = ts;
    ev.battery_pct = battery_pct;
    if (last_known) {
        ev.point = GeoPoint{last_known->lat, last_known->lon, last_known->ts};
    }
    return ev;
}

std::vector<DeviceEvent> simulate_track(const RoutePlan& plan, const NoiseModel& noise,
                                        const BatteryModel& battery, const SimRun& run) {
    validate_plan(plan);
    if (noise.sigma_m < 0.0) {
        throw std::invalid_argument("sigma_m must be >= 0");
    }
    if (!(battery.hours_full_to_empty > 0.0)) {
        throw std::invalid_argument("hours_full_to_empty must be positive");
    }

    PolylineWalker walker(plan);
    const std::int64_t duration =
        run.duration_s > 0 ? run.duration_s
                           : static_cast<std::int64_t>(std::ceil(walker.total_m() / plan.speed_mps));

    GaussianGen gen(noise.seed);
    std::vector<DeviceEvent> events;
    std::optional<GeoPoint> last_fix;
    bool lowbat_sent = false;

    std::vector<std::int64_t> sos = run.sos_offsets;
    std::sort(sos.begin(), sos.end());
    std::size_t sos_next = 0;

    auto emit_sos_upto = [&](std::int64_t offset_inclusive) {
        while (sos_next < sos.size() && sos[sos_next] <= offset_inclusive) {
            const std::int64_t off = sos[sos_next++];
            events.push_back(trigger_sos(last_fix, run.device_id, run.start_ts + off,
                                         battery_int(battery_pct_at(battery, off))));
        }
    };

    for (std::int64_t t = 0; t < duration; t += plan.ping_interval_s) {
        emit_sos_upto(t - 1);

        const std::int64_t ts = run.start_ts + t;
        if (!in_fix_loss(run.fix_loss, t)) {
            const GeoPoint true_pos = walker.at(plan.speed_mps * static_cast<double>(t));
            GeoPoint fix = noise.sigma_m > 0.0 ? perturb(true_pos, noise.sigma_m, gen, ts)
                                               : GeoPoint{true_pos.lat, true_pos.lon, ts};
            DeviceEvent ping;
            ping.kind = DeviceEventKind::Ping;
            ping.device_id = run.device_id;
            ping.point = fix;
            ping.battery_pct = battery_int(battery_pct_at(battery, t));
            ping.ts = ts;
            last_fix = fix;
            events.push_back(std::move(ping));
        }

        if (!lowbat_sent && battery_pct_at(battery, t) <= battery.lowbat_pct) {
            DeviceEvent lb;
            lb.kind = DeviceEventKind::LowBat;
            lb.device_id = run.device_id;
            lb.point = last_fix;
            lb.battery_pct = battery_int(battery_pct_at(battery, t));
            lb.ts = ts;
            events.push_back(std::move(lb));
            lowbat_sent = true;
        }

        emit_sos_upto(t);
    }
    emit_sos_upto(duration);
    return events;
}

std::vector<DeviceEvent> inject_deviation(const std::vector<DeviceEvent>& events,
                                          double at_fraction, const RoutePlan& detour,
                                          const NoiseModel& noise) {
    if (!(at_fraction >= 0.0 && at_fraction <= 1.0)) {
        throw std::invalid_argument("at_fraction must be in [0, 1]");
    }
    validate_plan(detour);
    if (events.empty()) {
        return {};
    }

    const std::int64_t t0 = events.front().ts;
    const std::int64_t t1 = events.back().ts;
    const std::int64_t splice_ts =
        t0 + static_cast<std::int64_t>(std::llround(at_fraction * static_cast<double>(t1 - t0)));

    PolylineWalker walker(detour);
    // Tail noise is re-drawn from a seed derived from the base stream's.
    GaussianGen gen(noise.seed ^ 0x6a09e667f3bcc909ULL);

    std::vector<DeviceEvent> out;
    out.reserve(events.size());
    std::optional<GeoPoint> last_fix;
    for (const DeviceEvent& ev : events) {
        DeviceEvent copy = ev;
        if (ev.ts >= splice_ts) {
            if (ev.kind == DeviceEventKind::Ping) {
                const double dist =
                    detour.speed_mps * static_cast<double>(ev.ts - splice_ts);
                const GeoPoint true_pos = walker.at(dist);
                copy.point = noise.sigma_m > 0.0
                                 ? perturb(true_pos, noise.sigma_m, gen, ev.ts)
                                 : GeoPoint{true_pos.lat, true_pos.lon, ev.ts};
                last_fix = copy.point;
            } else {
                copy.point = last_fix ? last_fix : copy.point;
            }
        } else if (ev.kind == DeviceEventKind::Ping && ev.point) {
            last_fix = ev.point;
        }
        out.push_back(std::move(copy));
    }
    return out;
}

std::string wire_line(const DeviceEvent& ev) {
    std::ostringstream out;
    switch (ev.kind) {
        case DeviceEventKind::Ping:
            out << "PING " << ev.device_id << " " << format_degrees(ev.point->lat) << " "
                << format_degrees(ev.point->lon) << " " << ev.ts << " " << ev.battery_pct;
            break;
        case DeviceEventKind::Sos:
            out << "SOS " << ev.device_id << " " << ev.ts;
            break;
        case DeviceEventKind::LowBat:
            out << "LOWBAT " << ev.device_id << " " << ev.battery_pct << " " << ev.ts;
            break;
    }
    return out.str();
}

std::vector<GeoPoint> ping_points(std::span<const DeviceEvent> events) {
    std::vector<GeoPoint> out;
    for (const DeviceEvent& ev : events) {
        if (ev.kind == DeviceEventKind::Ping && ev.point) {
            out.push_back(*ev.point);
        }
    }
    return out;
}

Scenario parse_scenario(std::istream& in) {
    Scenario sc;
    sc.plan.waypoints.clear();
    std::vector<std::string> unknown;
    bool have_waypoints = false;
    bool have_dev_waypoints = false;
    double dev_speed = -1.0;

    std::string line;
    while (std::getline(in, line)) {
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') {
            continue;
        }
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ScenarioError("scenario line is not 'key = value': " + stripped);
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));

        if (key == "device_id") {
            sc.device_id = value;
        } else if (key == "start_ts") {
            sc.start_ts = require_int(key, value);
        } else if (key == "duration_s") {
            sc.duration_s = require_int(key, value);
        } else if (key == "trips") {
            sc.trips = static_cast<int>(require_int(key, value));
        } else if (key == "trip_spacing_s") {
            sc.trip_spacing_s = require_int(key, value);
        } else if (key == "waypoints") {
            sc.plan.waypoints = parse_waypoints(key, value);
            have_waypoints = true;
        } else if (key == "speed_mps") {
            sc.plan.speed_mps = require_double(key, value);
        } else if (key == "ping_interval_s") {
            sc.plan.ping_interval_s = static_cast<int>(require_int(key, value));
        } else if (key == "sigma_m") {
            sc.noise.sigma_m = require_double(key, value);
        } else if (key == "seed") {
            sc.noise.seed = static_cast<std::uint64_t>(require_int(key, value));
        } else if (key == "battery_start_pct") {
            sc.battery.start_pct = require_double(key, value);
        } else if (key == "battery_hours") {
            sc.battery.hours_full_to_empty = require_double(key, value);
        } else if (key == "lowbat_pct") {
            sc.battery.lowbat_pct = require_double(key, value);
        } else if (key == "standby") {
            if (value == "on" || value == "true") {
                sc.battery.standby = true;
            } else if (value == "off" || value == "false") {
                sc.battery.standby = false;
            } else {
                throw ScenarioError("scenario key 'standby': expected on|off");
            }
        } else if (key == "deviation_at") {
            sc.deviation_at = require_double(key, value);
        } else if (key == "deviation_waypoints") {
            sc.deviation_plan.waypoints = parse_waypoints(key, value);
            have_dev_waypoints = true;
        } else if (key == "deviation_speed_mps") {
            dev_speed = require_double(key, value);
        } else if (key == "fixloss") {
            std::istringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                const std::string w = trim(item);
                const std::size_t dash = w.find('-');
                if (dash == std::string::npos) {
                    throw ScenarioError("scenario key 'fixloss': expected start-end, got " + w);
                }
                FixLossWindow win;
                win.start_offset_s = require_int(key, trim(w.substr(0, dash)));
                win.end_offset_s = require_int(key, trim(w.substr(dash + 1)));
                if (win.end_offset_s <= win.start_offset_s) {
                    throw ScenarioError("scenario key 'fixloss': empty window " + w);
                }
                sc.fix_loss.push_back(win);
            }
        } else if (key == "sos_at") {
            std::istringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                sc.sos_offsets.push_back(require_int(key, trim(item)));
            }
        } else {
            unknown.push_back(key);
        }
    }

    if (!unknown.empty()) {
        std::string msg = "unknown scenario keys:";
        for (const std::string& k : unknown) {
            msg += " " + k;
        }
        throw ScenarioError(msg, unknown);
    }
    if (!have_waypoints) {
        throw ScenarioError("scenario is missing 'waypoints'");
    }
    if (sc.deviation_at >= 0.0 && !have_dev_waypoints) {
        throw ScenarioError("'deviation_at' set without 'deviation_waypoints'");
    }
    if (sc.trips < 1) {
        throw ScenarioError("'trips' must be >= 1");
    }
    sc.deviation_plan.speed_mps = dev_speed > 0.0 ? dev_speed : sc.plan.speed_mps;
    sc.deviation_plan.ping_interval_s = sc.plan.ping_interval_s;
    validate_plan(sc.plan);
    if (have_dev_waypoints) {
        validate_plan(sc.deviation_plan);
    }
    return sc;
}

Scenario load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open scenario file: " + path);
    }
    return parse_scenario(in);
}

std::vector<DeviceEvent> run_scenario(const Scenario& sc) {
    std::vector<DeviceEvent> all;
    for (int k = 0; k < sc.trips; ++k) {
        SimRun run;
        run.device_id = sc.device_id;
        run.start_ts = sc.start_ts + static_cast<std::int64_t>(k) * sc.trip_spacing_s;
        run.duration_s = sc.duration_s;
        run.fix_loss = sc.fix_loss;
        run.sos_offsets = sc.sos_offsets;
        NoiseModel noise{sc.noise.sigma_m, sc.noise.seed + static_cast<std::uint64_t>(k)};
        std::vector<DeviceEvent> events = simulate_track(sc.plan, noise, sc.battery, run);
        if (sc.deviation_at >= 0.0) {
            events = inject_deviation(events, sc.deviation_at, sc.deviation_plan, noise);
        }
        all.insert(all.end(), std::make_move_iterator(events.begin()),
                   std::make_move_iterator(events.end()));
    }
    return all;
}

}  // namespace routegrid
