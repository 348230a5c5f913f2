#pragma once

#include "routegrid/geogrid.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace routegrid {

/// One journey: the unit that increments the grid. `cells` is the
/// deduplicated, sorted set of squares visited; a square counts once per
/// trip no matter how many pings fell in it.
struct Trip {
    std::string trip_id;
    std::vector<GeoPoint> pings;  // optional detail, not persisted
    std::vector<CellId> cells;    // sorted, unique
    std::int64_t start_ts = 0;
    std::int64_t end_ts = 0;
};

// Builds a Trip from a time-ascending ping list. Throws std::invalid_argument
// on empty input or decreasing timestamps.
Trip make_trip(std::string trip_id, std::span<const GeoPoint> pings, const GridConfig& grid);

struct DeviationConfig {
    double threshold = 0.4;    // alarm when the normalized score drops below this
    int min_trips = 3;         // learning phase: no alarms before this many trips
    int min_days = 3;          // ... and before this many calendar days have elapsed
    int retention_days = 120;  // sliding window of trips kept for estimation
    int min_route_cells = 30;  // shortest prefix the online scorer will alarm on
};

void validate_deviation_config(const DeviationConfig& cfg);

/// Likelihood of a route under the matrix. The log form is authoritative;
/// raw_product underflows to zero on long unfamiliar routes.
struct RouteScore {
    double raw_product = 0.0;
    double log_likelihood = 0.0;
    std::size_t cell_count = 0;          // consecutive duplicates collapsed
    double normalized = 0.0;             // exp(log_likelihood / cell_count)
};

enum class Decision { Unarmed, Normal, Alarm };

const char* to_string(Decision d);

/// Sparse per-cell visit counts over N recorded trips.
///
/// A cell visited by c of N trips has probability (c + 1) / (N + 1): the
/// stored figure value c + 1 keeps never-visited squares at a small nonzero
/// mass so route products never hit a hard zero, and a square visited on
/// every trip scores 1. With no trips recorded every cell scores 1.
class ProbabilityMatrix {
public:
    ProbabilityMatrix() = default;
    explicit ProbabilityMatrix(GridConfig grid);

    // Throws std::invalid_argument on duplicate trip_id or an invalid trip.
    void record_trip(const Trip& t);

    double cell_probability(const CellId& c) const;

    // Consecutive duplicate cells are collapsed before scoring. Throws
    // std::invalid_argument on an empty route.
    RouteScore score_route(std::span<const CellId> cells) const;

    // Drops every trip whose end_ts is older than now - retention_days and
    // rebuilds counts accordingly. Returns the number of trips removed.
    std::size_t prune_retention(std::int64_t now, const DeviationConfig& cfg);

    // Arming rule: at least min_trips recorded and at least min_days calendar
    // days elapsed since the first trip.
    bool armed(const DeviationConfig& cfg, std::int64_t now) const;

    int trip_count() const { return static_cast<int>(trips_.size()); }
    std::size_t cell_count() const { return counts_.size(); }
    const GridConfig& grid() const { return grid_; }
    const std::vector<Trip>& trips() const { return trips_; }
    std::uint32_t count_for(const CellId& c) const;
    std::int64_t first_trip_ts() const { return created_at_; }
    bool has_trip(const std::string& trip_id) const;

    // Next free id of the form "t<n>"; survives retention pruning gaps.
    std::string next_trip_id() const;

    // Structural equality: same grid, same trips (ids, times, cells), same counts.
    bool operator==(const ProbabilityMatrix& other) const;

    // PMATRIX v1: versioned line-oriented text, LF endings, cells sorted.
    void save(std::ostream& out) const;
    static ProbabilityMatrix load(std::istream& in);
    void save_file(const std::string& path) const;
    static ProbabilityMatrix load_file(const std::string& path);

private:
    GridConfig grid_{};
    std::unordered_map<CellId, std::uint32_t, CellIdHash> counts_;
    std::unordered_set<std::string> trip_ids_;
    std::vector<Trip> trips_;       // persisted without pings
    std::int64_t created_at_ = 0;   // start_ts of the earliest retained trip
};

Decision is_deviation(const ProbabilityMatrix& m, const RouteScore& score,
                      const DeviationConfig& cfg, std::int64_t now);

/// O(1)-per-ping scorer for a live stream. At any point its score equals
/// score_route over the same cell prefix. Consecutive duplicates are ignored.
class IncrementalScorer {
public:
    void push(const ProbabilityMatrix& m, const CellId& c);
    // nullopt until at least one cell has been pushed; never divides by zero.
    std::optional<RouteScore> score() const;
    std::size_t cell_count() const { return count_; }
    void reset();

private:
    std::optional<CellId> last_;
    double log_sum_ = 0.0;
    std::size_t count_ = 0;
};

}  // namespace routegrid
