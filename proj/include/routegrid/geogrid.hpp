#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>

namespace routegrid {

/// WGS-84 position in decimal degrees plus a UNIX timestamp in seconds.
/// Construct through make_geopoint() so the range invariants hold.
struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
    std::int64_t ts = 0;
};

// Throws std::invalid_argument on out-of-range lat or negative/invalid ts.
// Longitude is normalized into [-180, 180).
GeoPoint make_geopoint(double lat, double lon, std::int64_t ts);

double normalize_lon(double lon);

/// One grid square. i = floor(lat * 10^d), j = floor(lon * 10^d).
/// Ordered lexicographically on (i, j) for deterministic serialization.
struct CellId {
    std::int64_t i = 0;
    std::int64_t j = 0;
    friend auto operator<=>(const CellId&, const CellId&) = default;
};

struct CellIdHash {
    std::size_t operator()(const CellId& c) const noexcept;
};

/// Grid resolution: number of decimal places kept. d = 4 gives the nominal
/// 11 m x 11 m square (one fourth-decimal step of latitude is ~11.1 m).
struct GridConfig {
    int decimals = 4;
};

// Throws std::invalid_argument unless 1 <= decimals <= 7.
void validate_grid(const GridConfig& cfg);

double grid_scale(const GridConfig& cfg);  // 10^decimals

// Pure quantization of a position to its grid square. Values that sit exactly
// on a grid line (up to double rounding) are snapped onto it, so printed
// 4-decimal tags land in the cell they name.
CellId quantize(const GeoPoint& p, const GridConfig& cfg);

// South-west and north-east corners of a cell. Any point strictly inside
// quantizes back to the same cell. Timestamps in the result are zero.
std::pair<GeoPoint, GeoPoint> cell_bounds(const CellId& c, const GridConfig& cfg);

// Great-circle distance in meters on a sphere of radius 6,371,000 m.
double haversine_m(const GeoPoint& a, const GeoPoint& b);

inline constexpr double kEarthRadiusM = 6371000.0;

// Fixed-point text with the given number of fraction digits, never exponent
// notation, '-' only for negative values (no "-0.00...").
std::string format_degrees(double deg, int decimals = 7);

}  // namespace routegrid
