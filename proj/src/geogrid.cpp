#include "routegrid/geogrid.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace routegrid {

namespace {

constexpr double kDegToRad = 0.017453292519943295;  // pi / 180

// A coordinate within this many degrees of a grid line counts as on it.
// Decimal text read into a double lands within ~4e-14 deg of its exact value,
// while distinct 7-decimal values differ by >= 1e-7 deg, so 1e-10 separates
// "this is the grid line, blurred by binary rounding" from "genuinely below".
constexpr double kSnapDegrees = 1e-10;

std::int64_t scaled_floor(double value, double scale) {
    const double s = value * scale;
    const double nearest = std::nearbyint(s);
    if (std::fabs(s - nearest) < kSnapDegrees * scale) {
        return static_cast<std::int64_t>(nearest);
    }
    return static_cast<std::int64_t>(std::floor(s));
}

}  // namespace

double normalize_lon(double lon) {
    double r = std::fmod(lon + 180.0, 360.0);
    if (r < 0.0) {
        r += 360.0;
    }
    return r - 180.0;
}

GeoPoint make_geopoint(double lat, double lon, std::int64_t ts) {
    if (!(lat >= -90.0 && lat <= 90.0)) {
        throw std::invalid_argument("latitude out of range [-90, 90]: " + std::to_string(lat));
    }
    if (!std::isfinite(lon)) {
        throw std::invalid_argument("longitude not finite");
    }
    if (ts < 0) {
        throw std::invalid_argument("timestamp before epoch: " + std::to_string(ts));
    }
    return GeoPoint{lat, normalize_lon(lon), ts};
}

std::size_t CellIdHash::operator()(const CellId& c) const noexcept {
    // splitmix64 over the two indexes
    auto mix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    const std::uint64_t h = mix(static_cast<std::uint64_t>(c.i)) ^
                            (mix(static_cast<std::uint64_t>(c.j)) * 0x100000001b3ULL);
    return static_cast<std::size_t>(h);
}

void validate_grid(const GridConfig& cfg) {
    if (cfg.decimals < 1 || cfg.decimals > 7) {
        throw std::invalid_argument("grid decimals must be in [1, 7], got " +
                                    std::to_string(cfg.decimals));
    }
}

double grid_scale(const GridConfig& cfg) {
    static const double kPow10[] = {1.0,    10.0,    100.0,    1000.0,
                                    10000.0, 100000.0, 1000000.0, 10000000.0};
    validate_grid(cfg);
    return kPow10[cfg.decimals];
}

CellId quantize(const GeoPoint& p, const GridConfig& cfg) {
    const double scale = grid_scale(cfg);
    return CellId{scaled_floor(p.lat, scale), scaled_floor(p.lon, scale)};
}

std::pair<GeoPoint, GeoPoint> cell_bounds(const CellId& c, const GridConfig& cfg) {
    const double scale = grid_scale(cfg);
    GeoPoint sw{static_cast<double>(c.i) / scale, static_cast<double>(c.j) / scale, 0};
    GeoPoint ne{static_cast<double>(c.i + 1) / scale, static_cast<double>(c.j + 1) / scale, 0};
    return {sw, ne};
}

double haversine_m(const GeoPoint& a, const GeoPoint& b) {
    const double lat1 = a.lat * kDegToRad;
    const double lat2 = b.lat * kDegToRad;
    const double dlat = (b.lat - a.lat) * kDegToRad;
    const double dlon = (b.lon - a.lon) * kDegToRad;
    const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1) * std::cos(lat2) * std::sin(dlon / 2) * std::sin(dlon / 2);
    const double c = 2.0 * std::atan2(std::sqrt(s), std::sqrt(1.0 - s));
    return kEarthRadiusM * c;
}

std::string format_degrees(double deg, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, deg);
    std::string out(buf);
    if (out.find_first_not_of("-0.") == std::string::npos) {
        // -0.000... collapses to its unsigned form
        if (!out.empty() && out[0] == '-') {
            out.erase(0, 1);
        }
    }
    return out;
}

}  // namespace routegrid
