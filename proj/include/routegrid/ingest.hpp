#pragma once

#include "routegrid/geogrid.hpp"
#include "routegrid/route_model.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace routegrid {

enum class NmeaStatus {
    Point,          // valid fix, `point` is set
    Skip,           // sentence type we do not use, or blank line
    NoFix,          // fix-invalid flag; `ts` carries the sentence time if known
    ChecksumError,  // framing fine, XOR mismatch
    ParseError,     // anything else
};

struct NmeaResult {
    NmeaStatus status = NmeaStatus::Skip;
    std::optional<GeoPoint> point;
    std::optional<std::int64_t> ts;
    std::string detail;
};

/// Line-at-a-time NMEA 0183 reader for GGA/RMC. Stateful across a stream:
/// RMC carries the date, GGA only the time of day, so the parser remembers
/// the last seen date (or a supplied base date) and rolls it over midnight.
/// parse_line is total -- arbitrary bytes produce a status, never a throw.
class NmeaParser {
public:
    NmeaParser() = default;

    // Fallback date for streams that never emit RMC.
    void set_base_date(int year, int month, int day);

    NmeaResult parse_line(std::string_view line);

private:
    std::optional<std::int64_t> date_base_;  // UTC midnight of current stream date
    std::int64_t last_ts_ = -1;

    std::int64_t resolve_ts(std::int64_t seconds_of_day);
};

std::int64_t days_from_civil(int year, int month, int day);  // days since 1970-01-01

struct TrackError : std::runtime_error {
    enum class Kind { Format, Range, Order, Checksum };

    TrackError(Kind k, int line_number, const std::string& what)
        : std::runtime_error("line " + std::to_string(line_number) + ": " + what),
          kind(k),
          line(line_number) {}

    Kind kind;
    int line;
};

// CSV track format: header "ts,lat,lon", one record per line, epoch-second
// timestamps, decimal-degree coordinates. Throws TrackError with the
// offending line number.
std::vector<GeoPoint> parse_csv_track(std::istream& in);
void write_csv_track(std::ostream& out, std::span<const GeoPoint> points);

struct TrackReadReport {
    std::size_t points = 0;
    std::size_t skipped = 0;  // NMEA sentences not used (other types, no-fix)
};

// Reads a CSV or NMEA file, sniffing the format from the first byte ('$'
// starts NMEA). NMEA checksum/parse failures are fatal (TrackError with the
// line number); unknown sentence types and no-fix sentences are skipped.
std::vector<GeoPoint> read_track_file(const std::string& path, TrackReadReport* report = nullptr);

struct SegmentationConfig {
    int gap_seconds = 600;       // silence longer than this starts a new trip
    int min_pings_per_trip = 5;  // shorter runs are reported and dropped
};

void validate_segmentation(const SegmentationConfig& cfg);

struct DiscardedRun {
    std::int64_t start_ts = 0;
    std::size_t ping_count = 0;
};

struct SegmentationResult {
    std::vector<Trip> trips;
    std::vector<DiscardedRun> discarded;
};

// Splits a time-ascending ping stream into trips at gaps, drops undersized
// runs into `discarded`, and fills each Trip's cell set. Trip ids are
// "<prefix>1", "<prefix>2", ... over the kept trips, in order.
SegmentationResult segment_trips(std::span<const GeoPoint> pings, const SegmentationConfig& seg,
                                 const GridConfig& grid, std::string_view trip_id_prefix = "t");

}  // namespace routegrid
