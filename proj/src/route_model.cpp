#include "routegrid/route_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace routegrid {

namespace {

constexpr std::int64_t kSecondsPerDay = 86400;

std::int64_t day_index(std::int64_t ts) {
    // UTC calendar day; ts is never negative here
    return ts / kSecondsPerDay;
}

RouteScore score_from_log(double log_sum, std::size_t count) {
    RouteScore s;
    s.log_likelihood = log_sum;
    s.cell_count = count;
    s.raw_product = std::exp(log_sum);
    s.normalized = std::exp(log_sum / static_cast<double>(count));
    return s;
}

[[noreturn]] void fail_load(int line_no, const std::string& what) {
    throw std::runtime_error("matrix line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

Trip make_trip(std::string trip_id, std::span<const GeoPoint> pings, const GridConfig& grid) {
    if (pings.empty()) {
        throw std::invalid_argument("trip needs at least one ping");
    }
    Trip t;
    t.trip_id = std::move(trip_id);
    t.pings.assign(pings.begin(), pings.end());
    for (std::size_t k = 1; k < t.pings.size(); ++k) {
        if (t.pings[k].ts < t.pings[k - 1].ts) {
            throw std::invalid_argument("trip pings must be time-ascending");
        }
    }
    t.start_ts = t.pings.front().ts;
    t.end_ts = t.pings.back().ts;
    t.cells.reserve(t.pings.size());
    for (const GeoPoint& p : t.pings) {
        t.cells.push_back(quantize(p, grid));
    }
    std::sort(t.cells.begin(), t.cells.end());
    t.cells.erase(std::unique(t.cells.begin(), t.cells.end()), t.cells.end());
    return t;
}

void validate_deviation_config(const DeviationConfig& cfg) {
    if (!(cfg.threshold > 0.0 && cfg.threshold <= 1.0)) {
        throw std::invalid_argument("threshold must be in (0, 1]");
    }
    if (cfg.min_trips < 1) {
        throw std::invalid_argument("min_trips must be >= 1");
    }
    if (cfg.min_days < 0) {
        throw std::invalid_argument("min_days must be >= 0");
    }
    if (cfg.retention_days < cfg.min_days) {
        throw std::invalid_argument("retention_days must be >= min_days");
    }
    if (cfg.min_route_cells < 1) {
        throw std::invalid_argument("min_route_cells must be >= 1");
    }
}

const char* to_string(Decision d) {
    switch (d) {
        case Decision::Unarmed: return "UNARMED";
        case Decision::Normal: return "NORMAL";
        case Decision::Alarm: return "ALARM";
    }
    return "?";
}

ProbabilityMatrix::ProbabilityMatrix(GridConfig grid) : grid_(grid) {
    validate_grid(grid_);
}

void ProbabilityMatrix::record_trip(const Trip& t) {
    if (t.trip_id.empty()) {
        throw std::invalid_argument("trip_id must not be empty");
    }
    if (trip_ids_.contains(t.trip_id)) {
        throw std::invalid_argument("duplicate trip_id: " + t.trip_id);
    }
    if (t.cells.empty()) {
        throw std::invalid_argument("trip has no cells");
    }
    if (t.end_ts < t.start_ts) {
        throw std::invalid_argument("trip ends before it starts");
    }
    if (!std::is_sorted(t.cells.begin(), t.cells.end()) ||
        std::adjacent_find(t.cells.begin(), t.cells.end()) != t.cells.end()) {
        throw std::invalid_argument("trip cells must be sorted and unique");
    }

    Trip stored = t;
    stored.pings.clear();  // counts only; pings are not retained
    for (const CellId& c : stored.cells) {
        ++counts_[c];
    }
    trip_ids_.insert(stored.trip_id);
    if (trips_.empty() || stored.start_ts < created_at_) {
        created_at_ = stored.start_ts;
    }
    trips_.push_back(std::move(stored));
}

double ProbabilityMatrix::cell_probability(const CellId& c) const {
    const auto it = counts_.find(c);
    const double count = it == counts_.end() ? 0.0 : static_cast<double>(it->second);
    return (count + 1.0) / (static_cast<double>(trips_.size()) + 1.0);
}

std::uint32_t ProbabilityMatrix::count_for(const CellId& c) const {
    const auto it = counts_.find(c);
    return it == counts_.end() ? 0 : it->second;
}

bool ProbabilityMatrix::has_trip(const std::string& trip_id) const {
    return trip_ids_.contains(trip_id);
}

RouteScore ProbabilityMatrix::score_route(std::span<const CellId> cells) const {
    IncrementalScorer scorer;
    for (const CellId& c : cells) {
        scorer.push(*this, c);
    }
    const auto s = scorer.score();
    if (!s) {
        throw std::invalid_argument("cannot score an empty route");
    }
    return *s;
}

std::size_t ProbabilityMatrix::prune_retention(std::int64_t now, const DeviationConfig& cfg) {
    const std::int64_t cutoff = now - static_cast<std::int64_t>(cfg.retention_days) * kSecondsPerDay;
    std::size_t removed = 0;
    for (auto it = trips_.begin(); it != trips_.end();) {
        if (it->end_ts < cutoff) {
            for (const CellId& c : it->cells) {
                auto cit = counts_.find(c);
                if (cit != counts_.end() && --cit->second == 0) {
                    counts_.erase(cit);
                }
            }
            trip_ids_.erase(it->trip_id);
            it = trips_.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    if (removed > 0) {
        created_at_ = 0;
        for (const Trip& t : trips_) {
            if (created_at_ == 0 || t.start_ts < created_at_) {
                created_at_ = t.start_ts;
            }
        }
    }
    return removed;
}

bool ProbabilityMatrix::armed(const DeviationConfig& cfg, std::int64_t now) const {
    if (trips_.empty() || trip_count() < cfg.min_trips) {
        return false;
    }
    return day_index(now) - day_index(created_at_) >= cfg.min_days;
}

std::string ProbabilityMatrix::next_trip_id() const {
    std::int64_t max_seq = 0;
    for (const Trip& t : trips_) {
        if (t.trip_id.size() > 1 && t.trip_id[0] == 't') {
            const std::string digits = t.trip_id.substr(1);
            if (digits.find_first_not_of("0123456789") == std::string::npos) {
                max_seq = std::max<std::int64_t>(max_seq, std::stoll(digits));
            }
        }
    }
    return "t" + std::to_string(max_seq + 1);
}

bool ProbabilityMatrix::operator==(const ProbabilityMatrix& other) const {
    if (grid_.decimals != other.grid_.decimals || trips_.size() != other.trips_.size() ||
        counts_.size() != other.counts_.size()) {
        return false;
    }
    for (std::size_t k = 0; k < trips_.size(); ++k) {
        const Trip& a = trips_[k];
        const Trip& b = other.trips_[k];
        if (a.trip_id != b.trip_id || a.start_ts != b.start_ts || a.end_ts != b.end_ts ||
            a.cells != b.cells) {
            return false;
        }
    }
    for (const auto& [cell, count] : counts_) {
        const auto it = other.counts_.find(cell);
        if (it == other.counts_.end() || it->second != count) {
            return false;
        }
    }
    return true;
}

void ProbabilityMatrix::save(std::ostream& out) const {
    out << "PMATRIX v1 d=" << grid_.decimals << " N=" << trips_.size() << "\n";
    for (const Trip& t : trips_) {
        out << "TRIP " << t.trip_id << " " << t.start_ts << " " << t.end_ts << " "
            << t.cells.size() << "\n";
        for (const CellId& c : t.cells) {
            out << c.i << " " << c.j << "\n";
        }
    }
}

ProbabilityMatrix ProbabilityMatrix::load(std::istream& in) {
    std::string line;
    int line_no = 1;
    if (!std::getline(in, line)) {
        throw std::runtime_error("matrix file is empty");
    }
    std::istringstream header(line);
    std::string magic, version, dfield, nfield;
    header >> magic >> version >> dfield >> nfield;
    if (magic != "PMATRIX") {
        fail_load(line_no, "not a PMATRIX file");
    }
    if (version != "v1") {
        fail_load(line_no, "unsupported matrix version '" + version + "' (expected v1)");
    }
    if (dfield.rfind("d=", 0) != 0 || nfield.rfind("N=", 0) != 0) {
        fail_load(line_no, "malformed header");
    }

    GridConfig grid;
    std::size_t trip_total = 0;
    try {
        grid.decimals = std::stoi(dfield.substr(2));
        trip_total = std::stoul(nfield.substr(2));
    } catch (const std::exception&) {
        fail_load(line_no, "malformed header numbers");
    }

    ProbabilityMatrix m(grid);
    for (std::size_t k = 0; k < trip_total; ++k) {
        if (!std::getline(in, line)) {
            fail_load(line_no, "unexpected end of file: expected TRIP");
        }
        ++line_no;
        std::istringstream th(line);
        std::string tag;
        Trip t;
        std::size_t ncells = 0;
        th >> tag >> t.trip_id >> t.start_ts >> t.end_ts >> ncells;
        if (th.fail() || tag != "TRIP") {
            fail_load(line_no, "malformed TRIP line");
        }
        t.cells.reserve(ncells);
        for (std::size_t c = 0; c < ncells; ++c) {
            if (!std::getline(in, line)) {
                fail_load(line_no, "unexpected end of file: expected cell");
            }
            ++line_no;
            std::istringstream cl(line);
            CellId cell;
            cl >> cell.i >> cell.j;
            std::string extra;
            if (cl.fail() || (cl >> extra)) {
                fail_load(line_no, "malformed cell line");
            }
            t.cells.push_back(cell);
        }
        m.record_trip(t);
    }
    return m;
}

void ProbabilityMatrix::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write matrix file: " + path);
    }
    save(out);
    if (!out.good()) {
        throw std::runtime_error("short write on matrix file: " + path);
    }
}

ProbabilityMatrix ProbabilityMatrix::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open matrix file: " + path);
    }
    try {
        return load(in);
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

Decision is_deviation(const ProbabilityMatrix& m, const RouteScore& score,
                      const DeviationConfig& cfg, std::int64_t now) {
    if (!m.armed(cfg, now)) {
        return Decision::Unarmed;
    }
    return score.normalized < cfg.threshold ? Decision::Alarm : Decision::Normal;
}

void IncrementalScorer::push(const ProbabilityMatrix& m, const CellId& c) {
    if (last_ && *last_ == c) {
        return;
    }
    log_sum_ += std::log(m.cell_probability(c));
    ++count_;
    last_ = c;
}

std::optional<RouteScore> IncrementalScorer::score() const {
    if (count_ == 0) {
        return std::nullopt;
    }
    return score_from_log(log_sum_, count_);
}

void IncrementalScorer::reset() {
    last_.reset();
    log_sum_ = 0.0;
    count_ = 0;
}

}  // namespace routegrid
