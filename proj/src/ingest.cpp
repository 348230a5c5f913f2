#include "routegrid/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace routegrid {

namespace {

constexpr std::int64_t kSecondsPerDay = 86400;

bool parse_double(std::string_view s, double& out) {
    if (s.empty()) {
        return false;
    }
    std::string buf(s);
    char* end = nullptr;
    out = std::strtod(buf.c_str(), &end);
    return end == buf.c_str() + buf.size() && std::isfinite(out);
}

bool parse_int(std::string_view s, std::int64_t& out) {
    if (s.empty()) {
        return false;
    }
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

// ddmm.mmmm (lat) or dddmm.mmmm (lon) plus hemisphere -> signed degrees
bool parse_ddmm(std::string_view field, std::string_view hemi, bool is_lat, double& out) {
    const std::size_t dot = field.find('.');
    const std::size_t head = dot == std::string_view::npos ? field.size() : dot;
    if (head < 3) {
        return false;
    }
    double degrees = 0.0;
    double minutes = 0.0;
    if (!parse_double(field.substr(0, head - 2), degrees) ||
        !parse_double(field.substr(head - 2), minutes)) {
        return false;
    }
    if (minutes >= 60.0 || degrees < 0.0) {
        return false;
    }
    out = degrees + minutes / 60.0;
    if (hemi == "S" || hemi == "W") {
        out = -out;
    } else if (hemi != "N" && hemi != "E") {
        return false;
    }
    if (is_lat && (hemi == "E" || hemi == "W")) {
        return false;
    }
    if (!is_lat && (hemi == "N" || hemi == "S")) {
        return false;
    }
    return std::fabs(out) <= (is_lat ? 90.0 : 180.0);
}

// hhmmss or hhmmss.sss -> seconds of day (fraction truncated)
bool parse_hms(std::string_view field, std::int64_t& out) {
    if (field.size() < 6) {
        return false;
    }
    for (int k = 0; k < 6; ++k) {
        if (!std::isdigit(static_cast<unsigned char>(field[k]))) {
            return false;
        }
    }
    const int h = (field[0] - '0') * 10 + (field[1] - '0');
    const int m = (field[2] - '0') * 10 + (field[3] - '0');
    const int s = (field[4] - '0') * 10 + (field[5] - '0');
    if (h > 23 || m > 59 || s > 60) {
        return false;
    }
    out = h * 3600 + m * 60 + s;
    return true;
}

NmeaResult nmea_error(NmeaStatus status, std::string detail) {
    NmeaResult r;
    r.status = status;
    r.detail = std::move(detail);
    return r;
}

}  // namespace

std::int64_t days_from_civil(int year, int month, int day) {
    // Howard Hinnant's algorithm, proleptic Gregorian
    year -= month <= 2;
    const std::int64_t era = (year >= 0 ? year : year - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(year - era * 400);
    const unsigned doy = (153u * static_cast<unsigned>(month + (month > 2 ? -3 : 9)) + 2) / 5 +
                         static_cast<unsigned>(day) - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void NmeaParser::set_base_date(int year, int month, int day) {
    date_base_ = days_from_civil(year, month, day) * kSecondsPerDay;
}

std::int64_t NmeaParser::resolve_ts(std::int64_t seconds_of_day) {
    std::int64_t ts = date_base_.value_or(0) + seconds_of_day;
    // GGA-only streams wrap at midnight; roll the date forward when the
    // time of day jumps backwards by more than half a day.
    if (last_ts_ >= 0 && ts < last_ts_ && last_ts_ - ts > kSecondsPerDay / 2) {
        date_base_ = date_base_.value_or(0) + kSecondsPerDay;
        ts += kSecondsPerDay;
    }
    if (ts >= last_ts_) {
        last_ts_ = ts;
    }
    return ts;
}

NmeaResult NmeaParser::parse_line(std::string_view line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) {
        line.remove_suffix(1);
    }
    if (line.empty()) {
        return NmeaResult{};  // Skip
    }
    if (line.front() != '$') {
        return nmea_error(NmeaStatus::ParseError, "sentence does not start with '$'");
    }
    const std::size_t star = line.rfind('*');
    if (star == std::string_view::npos || line.size() - star != 3) {
        return nmea_error(NmeaStatus::ParseError, "missing '*' + two-digit checksum");
    }
    const int hi = hex_value(line[star + 1]);
    const int lo = hex_value(line[star + 2]);
    if (hi < 0 || lo < 0) {
        return nmea_error(NmeaStatus::ParseError, "checksum digits are not hex");
    }
    unsigned char sum = 0;
    for (std::size_t k = 1; k < star; ++k) {
        sum ^= static_cast<unsigned char>(line[k]);
    }
    if (sum != static_cast<unsigned char>(hi * 16 + lo)) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "checksum mismatch: computed %02X", sum);
        return nmea_error(NmeaStatus::ChecksumError, buf);
    }

    const std::string_view body = line.substr(1, star - 1);
    const auto fields = split(body, ',');
    const std::string_view head = fields[0];
    if (head.size() < 5) {
        return nmea_error(NmeaStatus::ParseError, "short sentence identifier");
    }
    const std::string_view type = head.substr(head.size() - 3);

    if (type == "GGA") {
        if (fields.size() < 7) {
            return nmea_error(NmeaStatus::ParseError, "GGA needs at least 6 fields");
        }
        std::int64_t sod = 0;
        const bool have_time = parse_hms(fields[1], sod);
        const std::string_view quality = fields[6];
        if (quality.empty() || quality == "0") {
            NmeaResult r;
            r.status = NmeaStatus::NoFix;
            if (have_time) {
                r.ts = resolve_ts(sod);
            }
            return r;
        }
        double lat = 0.0, lon = 0.0;
        if (!have_time) {
            return nmea_error(NmeaStatus::ParseError, "bad GGA time field");
        }
        if (!parse_ddmm(fields[2], fields[3], true, lat) ||
            !parse_ddmm(fields[4], fields[5], false, lon)) {
            return nmea_error(NmeaStatus::ParseError, "bad GGA coordinate fields");
        }
        NmeaResult r;
        r.status = NmeaStatus::Point;
        r.ts = resolve_ts(sod);
        r.point = make_geopoint(lat, lon, *r.ts);
        return r;
    }

    if (type == "RMC") {
        if (fields.size() < 10) {
            return nmea_error(NmeaStatus::ParseError, "RMC needs at least 9 fields");
        }
        // date first: a void fix can still carry a usable date
        const std::string_view date = fields[9];
        if (date.size() == 6 &&
            std::all_of(date.begin(), date.end(),
                        [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
            const int dd = (date[0] - '0') * 10 + (date[1] - '0');
            const int mm = (date[2] - '0') * 10 + (date[3] - '0');
            const int yy = (date[4] - '0') * 10 + (date[5] - '0');
            if (dd >= 1 && dd <= 31 && mm >= 1 && mm <= 12) {
                date_base_ = days_from_civil(2000 + yy, mm, dd) * kSecondsPerDay;
            }
        }
        std::int64_t sod = 0;
        const bool have_time = parse_hms(fields[1], sod);
        if (fields[2] != "A") {
            NmeaResult r;
            r.status = NmeaStatus::NoFix;
            if (have_time) {
                r.ts = resolve_ts(sod);
            }
            return r;
        }
        if (!have_time) {
            return nmea_error(NmeaStatus::ParseError, "bad RMC time field");
        }
        double lat = 0.0, lon = 0.0;
        if (!parse_ddmm(fields[3], fields[4], true, lat) ||
            !parse_ddmm(fields[5], fields[6], false, lon)) {
            return nmea_error(NmeaStatus::ParseError, "bad RMC coordinate fields");
        }
        NmeaResult r;
        r.status = NmeaStatus::Point;
        r.ts = resolve_ts(sod);
        r.point = make_geopoint(lat, lon, *r.ts);
        return r;
    }

    return NmeaResult{};  // other sentence types are not used
}

std::vector<GeoPoint> parse_csv_track(std::istream& in) {
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line)) {
        throw TrackError(TrackError::Kind::Format, 1, "empty file, expected 'ts,lat,lon' header");
    }
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (line != "ts,lat,lon") {
        throw TrackError(TrackError::Kind::Format, line_no, "bad header, expected 'ts,lat,lon'");
    }

    std::vector<GeoPoint> points;
    std::int64_t prev_ts = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = split(line, ',');
        if (fields.size() != 3) {
            throw TrackError(TrackError::Kind::Format, line_no, "expected 3 fields");
        }
        std::int64_t ts = 0;
        double lat = 0.0, lon = 0.0;
        if (!parse_int(fields[0], ts)) {
            throw TrackError(TrackError::Kind::Format, line_no, "bad timestamp");
        }
        if (!parse_double(fields[1], lat) || !parse_double(fields[2], lon)) {
            throw TrackError(TrackError::Kind::Format, line_no, "bad coordinate");
        }
        if (ts < 0) {
            throw TrackError(TrackError::Kind::Range, line_no, "timestamp before epoch");
        }
        if (lat < -90.0 || lat > 90.0) {
            throw TrackError(TrackError::Kind::Range, line_no,
                             "latitude out of range: " + std::string(fields[1]));
        }
        if (lon < -180.0 || lon > 180.0) {
            throw TrackError(TrackError::Kind::Range, line_no,
                             "longitude out of range: " + std::string(fields[2]));
        }
        if (ts < prev_ts) {
            throw TrackError(TrackError::Kind::Order, line_no, "timestamps must be non-decreasing");
        }
        prev_ts = ts;
        points.push_back(make_geopoint(lat, lon, ts));
    }
    return points;
}

void write_csv_track(std::ostream& out, std::span<const GeoPoint> points) {
    out << "ts,lat,lon\n";
    for (const GeoPoint& p : points) {
        out << p.ts << "," << format_degrees(p.lat) << "," << format_degrees(p.lon) << "\n";
    }
}

std::vector<GeoPoint> read_track_file(const std::string& path, TrackReadReport* report) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open track file: " + path);
    }
    const int first = in.peek();
    TrackReadReport local;
    std::vector<GeoPoint> points;
    if (first == '$') {
        NmeaParser parser;
        std::string line;
        int line_no = 0;
        bool last_from_rmc = false;
        while (std::getline(in, line)) {
            ++line_no;
            const NmeaResult r = parser.parse_line(line);
            switch (r.status) {
                case NmeaStatus::Point: {
                    // receivers emit GGA and RMC for the same fix epoch; keep
                    // one point per second, preferring RMC (it carries the date)
                    const bool is_rmc = line.size() > 5 && line.compare(3, 3, "RMC") == 0;
                    if (!points.empty() && points.back().ts == r.point->ts) {
                        if (is_rmc && !last_from_rmc) {
                            points.back() = *r.point;
                            last_from_rmc = true;
                        }
                        ++local.skipped;  // either way one sentence lost out
                        break;
                    }
                    points.push_back(*r.point);
                    last_from_rmc = is_rmc;
                    break;
                }
                case NmeaStatus::Skip:
                case NmeaStatus::NoFix:
                    ++local.skipped;
                    break;
                case NmeaStatus::ChecksumError:
                    throw TrackError(TrackError::Kind::Checksum, line_no, r.detail);
                case NmeaStatus::ParseError:
                    throw TrackError(TrackError::Kind::Format, line_no, r.detail);
            }
        }
    } else {
        points = parse_csv_track(in);
    }
    local.points = points.size();
    if (report) {
        *report = local;
    }
    return points;
}

void validate_segmentation(const SegmentationConfig& cfg) {
    if (cfg.gap_seconds < 1) {
        throw std::invalid_argument("gap_seconds must be >= 1");
    }
    if (cfg.min_pings_per_trip < 1) {
        throw std::invalid_argument("min_pings_per_trip must be >= 1");
    }
}

SegmentationResult segment_trips(std::span<const GeoPoint> pings, const SegmentationConfig& seg,
                                 const GridConfig& grid, std::string_view trip_id_prefix) {
    validate_segmentation(seg);
    validate_grid(grid);

    SegmentationResult result;
    std::size_t run_start = 0;
    std::size_t next_id = 1;

    auto flush = [&](std::size_t begin, std::size_t end) {
        const std::size_t n = end - begin;
        if (n == 0) {
            return;
        }
        if (n < static_cast<std::size_t>(seg.min_pings_per_trip)) {
            result.discarded.push_back({pings[begin].ts, n});
            return;
        }
        std::string id = std::string(trip_id_prefix) + std::to_string(next_id++);
        result.trips.push_back(make_trip(std::move(id), pings.subspan(begin, n), grid));
    };

    for (std::size_t k = 1; k <= pings.size(); ++k) {
        if (k == pings.size()) {
            flush(run_start, k);
            break;
        }
        if (pings[k].ts < pings[k - 1].ts) {
            throw std::invalid_argument("pings must be time-ascending");
        }
        if (pings[k].ts - pings[k - 1].ts > seg.gap_seconds) {
            flush(run_start, k);
            run_start = k;
        }
    }
    return result;
}

}  // namespace routegrid
