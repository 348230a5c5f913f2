#include "routegrid/tracker_service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>

namespace routegrid {

namespace {

std::vector<std::string> tokenize(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= line.size()) {
        const std::size_t pos = line.find(' ', start);
        if (pos == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

bool valid_token(const std::string& s) {
    if (s.empty() || s.size() > 64 || s[0] == '.') {
        return false;
    }
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

bool parse_i64(const std::string& s, std::int64_t& out) {
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

bool parse_f64(const std::string& s, double& out) {
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return !s.empty() && end == s.c_str() + s.size() && std::isfinite(out);
}

std::string fmt_coord(double v) { return format_degrees(v, 7); }

std::string fmt_norm(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::vector<std::string> err(const std::string& code, const std::string& detail) {
    return {"ERR " + code + " " + detail};
}

std::vector<std::string> ok() { return {"OK"}; }

void atomic_write(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        out << content;
        if (!out.good()) {
            throw std::runtime_error("short write on " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

TrackerService::TrackerService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    validate_grid(cfg_.grid);
    validate_deviation_config(cfg_.deviation);
    validate_segmentation(cfg_.segmentation);
    if (!cfg_.data_dir.empty()) {
        std::filesystem::create_directories(cfg_.data_dir);
    }
}

void TrackerService::attach_session(SessionId sid, std::function<void(const std::string&)> sink) {
    std::lock_guard lock(sessions_mu_);
    sessions_[sid] = std::move(sink);
}

void TrackerService::detach_session(SessionId sid) {
    std::lock_guard lock(sessions_mu_);
    sessions_.erase(sid);
}

void TrackerService::set_alarm_sink(std::function<void(const std::string&)> sink) {
    alarm_sink_ = std::move(sink);
}

void TrackerService::set_notice_sink(std::function<void(const std::string&)> sink) {
    notice_sink_ = std::move(sink);
}

TrackerService::DeviceState& TrackerService::device(const std::string& id) {
    std::lock_guard lock(devices_mu_);
    auto it = devices_.find(id);
    if (it == devices_.end()) {
        auto st = std::make_unique<DeviceState>();
        st->id = id;
        st->matrix = ProbabilityMatrix(cfg_.grid);
        st->deviation = cfg_.deviation;
        st->segmentation = cfg_.segmentation;
        load_persisted(*st);
        it = devices_.emplace(id, std::move(st)).first;
    }
    return *it->second;
}

void TrackerService::load_persisted(DeviceState& st) {
    if (cfg_.data_dir.empty()) {
        return;
    }
    const auto matrix_path = cfg_.data_dir / (st.id + ".pmatrix");
    if (std::filesystem::exists(matrix_path)) {
        st.matrix = ProbabilityMatrix::load_file(matrix_path.string());
    }
    const auto lk_path = cfg_.data_dir / (st.id + ".lastknown");
    if (std::filesystem::exists(lk_path)) {
        std::ifstream in(lk_path);
        std::string tag;
        double lat = 0.0, lon = 0.0;
        std::int64_t ts = 0;
        if (in >> tag >> lat >> lon >> ts && tag == "LASTKNOWN") {
            st.last_known = make_geopoint(lat, lon, ts);
        }
    }
}

void TrackerService::persist_matrix(DeviceState& st) {
    if (cfg_.data_dir.empty()) {
        return;
    }
    std::ostringstream out;
    st.matrix.save(out);
    atomic_write(cfg_.data_dir / (st.id + ".pmatrix"), out.str());
}

void TrackerService::persist_last_known(DeviceState& st) {
    if (cfg_.data_dir.empty() || !st.last_known) {
        return;
    }
    const GeoPoint& p = *st.last_known;
    atomic_write(cfg_.data_dir / (st.id + ".lastknown"),
                 "LASTKNOWN " + fmt_coord(p.lat) + " " + fmt_coord(p.lon) + " " +
                     std::to_string(p.ts) + "\n");
}

void TrackerService::emit_alarm(DeviceState& st, const std::string& line) {
    if (alarm_sink_) {
        alarm_sink_(line);
    }
    push_to_parent(st, line);
}

void TrackerService::push_to_parent(DeviceState& st, const std::string& line) {
    if (!st.parent_session) {
        return;
    }
    std::function<void(const std::string&)> sink;
    {
        std::lock_guard lock(sessions_mu_);
        const auto it = sessions_.find(*st.parent_session);
        if (it != sessions_.end()) {
            sink = it->second;
        }
    }
    if (sink) {
        sink(line);
    }
}

bool TrackerService::session_is_parent(DeviceState& st, SessionId sid) const {
    return !st.parent_id.empty() && st.parent_session && *st.parent_session == sid;
}

void TrackerService::close_trip_locked(DeviceState& st, const char* reason) {
    OpenTrip open = std::move(st.open);
    st.open = OpenTrip{};
    if (open.pings.empty()) {
        return;
    }
    if (open.pings.size() < static_cast<std::size_t>(st.segmentation.min_pings_per_trip)) {
        if (notice_sink_) {
            notice_sink_("NOTICE " + st.id + " trip discarded (" + reason + "): " +
                         std::to_string(open.pings.size()) + " pings < min " +
                         std::to_string(st.segmentation.min_pings_per_trip));
        }
        return;
    }
    const Trip trip = make_trip(st.matrix.next_trip_id(), open.pings, cfg_.grid);
    st.matrix.record_trip(trip);
    st.matrix.prune_retention(trip.end_ts, st.deviation);
    persist_matrix(st);
    persist_last_known(st);
    if (notice_sink_) {
        notice_sink_("NOTICE " + st.id + " trip " + trip.trip_id + " recorded (" + reason +
                     "): " + std::to_string(trip.cells.size()) + " cells, trips=" +
                     std::to_string(st.matrix.trip_count()));
    }
}

std::vector<std::string> TrackerService::handle_line(SessionId sid, std::string_view line) {
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) {
        line.remove_suffix(1);
    }
    if (line.size() > kMaxLineBytes) {
        return err("TOOLONG", "line exceeds " + std::to_string(kMaxLineBytes) + " bytes");
    }
    if (line.empty()) {
        return {};
    }
    const auto tokens = tokenize(line);
    const std::string& cmd = tokens[0];
    const bool known = cmd == "PING" || cmd == "SOS" || cmd == "LOWBAT" || cmd == "BIND" ||
                       cmd == "CONFIG" || cmd == "TRACK" || cmd == "LISTEN" || cmd == "STATUS" ||
                       cmd == "CLOSETRIP";
    if (!known) {
        return err("UNKNOWN", cmd);
    }
    if (tokens.size() < 2 || !valid_token(tokens[1])) {
        return err("BADARG", "bad or missing device id");
    }

    if (cmd == "PING") return cmd_ping(sid, tokens);
    if (cmd == "SOS") return cmd_sos(tokens);
    if (cmd == "LOWBAT") return cmd_lowbat(tokens);
    if (cmd == "BIND") return cmd_bind(sid, tokens);
    if (cmd == "CONFIG") return cmd_config(sid, tokens);
    if (cmd == "TRACK") return cmd_track(sid, tokens);
    if (cmd == "LISTEN") return cmd_listen(sid, tokens);
    if (cmd == "STATUS") return cmd_status(sid, tokens);
    if (cmd == "CLOSETRIP") return cmd_closetrip(sid, tokens);
    return err("UNKNOWN", cmd);
}

std::vector<std::string> TrackerService::cmd_ping(SessionId, const std::vector<std::string>& args) {
    if (args.size() != 6) {
        return err("BADARG", "usage: PING <id> <lat> <lon> <ts> <batt>");
    }
    double lat = 0.0, lon = 0.0;
    std::int64_t ts = 0, batt = 0;
    if (!parse_f64(args[2], lat) || !parse_f64(args[3], lon) || !parse_i64(args[4], ts) ||
        !parse_i64(args[5], batt)) {
        return err("BADARG", "non-numeric PING field");
    }
    GeoPoint pt;
    try {
        pt = make_geopoint(lat, lon, ts);
    } catch (const std::invalid_argument& e) {
        return err("BADARG", e.what());
    }

    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);

    if (!st.open.pings.empty()) {
        const std::int64_t prev = st.open.pings.back().ts;
        if (pt.ts < prev) {
            return err("BADARG", "ping timestamp out of order");
        }
        if (pt.ts - prev > st.segmentation.gap_seconds) {
            close_trip_locked(st, "gap-timeout");
        }
    }

    st.open.pings.push_back(pt);
    st.last_known = pt;
    st.battery_pct = static_cast<int>(batt);
    persist_last_known(st);

    if (st.track_on) {
        push_to_parent(st, "POS " + st.id + " " + fmt_coord(pt.lat) + " " + fmt_coord(pt.lon) +
                               " " + std::to_string(pt.ts));
    }

    st.open.scorer.push(st.matrix, quantize(pt, cfg_.grid));
    if (!st.open.deviation_latched &&
        st.open.scorer.cell_count() >= static_cast<std::size_t>(st.deviation.min_route_cells)) {
        const auto score = st.open.scorer.score();
        if (score && is_deviation(st.matrix, *score, st.deviation, pt.ts) == Decision::Alarm) {
            st.open.deviation_latched = true;  // one alarm per trip
            emit_alarm(st, "ALARM DEVIATION " + st.id + " " + fmt_norm(score->normalized) + " " +
                               fmt_coord(pt.lat) + " " + fmt_coord(pt.lon) + " " +
                               std::to_string(pt.ts));
        }
    }
    return ok();
}

std::vector<std::string> TrackerService::cmd_sos(const std::vector<std::string>& args) {
    if (args.size() != 3) {
        return err("BADARG", "usage: SOS <id> <ts>");
    }
    std::int64_t ts = 0;
    if (!parse_i64(args[2], ts)) {
        return err("BADARG", "non-numeric SOS timestamp");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    const std::string where = st.last_known
                                  ? fmt_coord(st.last_known->lat) + " " + fmt_coord(st.last_known->lon)
                                  : std::string("NOFIX -");
    emit_alarm(st, "ALARM SOS " + st.id + " " + where + " " + std::to_string(ts));
    return ok();
}

std::vector<std::string> TrackerService::cmd_lowbat(const std::vector<std::string>& args) {
    if (args.size() != 4) {
        return err("BADARG", "usage: LOWBAT <id> <batt> <ts>");
    }
    std::int64_t batt = 0, ts = 0;
    if (!parse_i64(args[2], batt) || !parse_i64(args[3], ts)) {
        return err("BADARG", "non-numeric LOWBAT field");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    st.battery_pct = static_cast<int>(batt);
    const std::string where = st.last_known
                                  ? fmt_coord(st.last_known->lat) + " " + fmt_coord(st.last_known->lon)
                                  : std::string("NOFIX -");
    emit_alarm(st, "ALARM LOWBAT " + st.id + " " + std::to_string(batt) + " " + where + " " +
                       std::to_string(ts));
    return ok();
}

std::vector<std::string> TrackerService::cmd_bind(SessionId sid,
                                                  const std::vector<std::string>& args) {
    if (args.size() != 3 || !valid_token(args[2])) {
        return err("BADARG", "usage: BIND <id> <parent_id>");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (st.parent_id.empty() || st.parent_id == args[2]) {
        st.parent_id = args[2];
        st.parent_session = sid;  // reconnecting parent takes over the push stream
        return ok();
    }
    return err("ALREADY_BOUND", "device " + st.id + " is bound to another parent");
}

std::vector<std::string> TrackerService::cmd_config(SessionId sid,
                                                    const std::vector<std::string>& args) {
    if (args.size() != 3) {
        return err("BADARG", "usage: CONFIG <id> <key>=<val>");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (!session_is_parent(st, sid)) {
        return err("UNAUTH", "CONFIG requires the bound parent session");
    }
    const std::size_t eq = args[2].find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 >= args[2].size()) {
        return err("BADARG", "expected <key>=<val>");
    }
    const std::string key = args[2].substr(0, eq);
    const std::string value = args[2].substr(eq + 1);

    DeviationConfig dev = st.deviation;
    SegmentationConfig seg = st.segmentation;
    double fval = 0.0;
    std::int64_t ival = 0;
    const bool is_f = parse_f64(value, fval);
    const bool is_i = parse_i64(value, ival);

    if (key == "threshold" && is_f) {
        dev.threshold = fval;
    } else if (key == "min_trips" && is_i) {
        dev.min_trips = static_cast<int>(ival);
    } else if (key == "min_days" && is_i) {
        dev.min_days = static_cast<int>(ival);
    } else if (key == "min_route_cells" && is_i) {
        dev.min_route_cells = static_cast<int>(ival);
    } else if (key == "retention_days" && is_i) {
        dev.retention_days = static_cast<int>(ival);
    } else if (key == "gap_seconds" && is_i) {
        seg.gap_seconds = static_cast<int>(ival);
    } else if (key == "min_pings" && is_i) {
        seg.min_pings_per_trip = static_cast<int>(ival);
    } else {
        return err("BADCONFIG", "unknown key or bad value: " + args[2]);
    }
    try {
        validate_deviation_config(dev);
        validate_segmentation(seg);
    } catch (const std::invalid_argument& e) {
        return err("BADCONFIG", e.what());
    }
    st.deviation = dev;
    st.segmentation = seg;
    return {"OK " + key + "=" + value};
}

std::vector<std::string> TrackerService::cmd_track(SessionId sid,
                                                   const std::vector<std::string>& args) {
    if (args.size() != 3 || (args[2] != "on" && args[2] != "off")) {
        return err("BADARG", "usage: TRACK <id> on|off");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (!session_is_parent(st, sid)) {
        return err("UNAUTH", "TRACK requires the bound parent session");
    }
    st.track_on = args[2] == "on";
    return ok();
}

std::vector<std::string> TrackerService::cmd_listen(SessionId sid,
                                                    const std::vector<std::string>& args) {
    if (args.size() != 3 || (args[2] != "on" && args[2] != "off")) {
        return err("BADARG", "usage: LISTEN <id> on|off");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (!session_is_parent(st, sid)) {
        return err("UNAUTH", "LISTEN requires the bound parent session");
    }
    st.listen_on = args[2] == "on";  // protocol flag only; there is no audio path
    return ok();
}

std::vector<std::string> TrackerService::cmd_status(SessionId sid,
                                                    const std::vector<std::string>& args) {
    if (args.size() != 2) {
        return err("BADARG", "usage: STATUS <id>");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (!session_is_parent(st, sid)) {
        return err("UNAUTH", "STATUS requires the bound parent session");
    }
    const std::int64_t now = st.last_known ? st.last_known->ts : 0;
    std::ostringstream out;
    out << "OK device=" << st.id << " parent=" << st.parent_id
        << " trips=" << st.matrix.trip_count() << " cells=" << st.matrix.cell_count()
        << " armed=" << (st.matrix.armed(st.deviation, now) ? "yes" : "no")
        << " track=" << (st.track_on ? "on" : "off")
        << " listen=" << (st.listen_on ? "on" : "off") << " battery=";
    if (st.battery_pct >= 0) {
        out << st.battery_pct;
    } else {
        out << "-";
    }
    out << " last=";
    if (st.last_known) {
        out << fmt_coord(st.last_known->lat) << " " << fmt_coord(st.last_known->lon) << " "
            << st.last_known->ts;
    } else {
        out << "NOFIX";
    }
    return {out.str()};
}

std::vector<std::string> TrackerService::cmd_closetrip(SessionId sid,
                                                       const std::vector<std::string>& args) {
    if (args.size() != 2) {
        return err("BADARG", "usage: CLOSETRIP <id>");
    }
    DeviceState& st = device(args[1]);
    std::lock_guard lock(st.mu);
    if (!session_is_parent(st, sid)) {
        return err("UNAUTH", "CLOSETRIP requires the bound parent session");
    }
    close_trip_locked(st, "explicit");
    return {"OK trips=" + std::to_string(st.matrix.trip_count())};
}

void TrackerService::finalize() {
    std::vector<DeviceState*> all;
    {
        std::lock_guard lock(devices_mu_);
        for (auto& [id, st] : devices_) {
            all.push_back(st.get());
        }
    }
    for (DeviceState* st : all) {
        std::lock_guard lock(st->mu);
        close_trip_locked(*st, "gap-timeout");
    }
}

int TrackerService::trip_count(const std::string& device_id) {
    DeviceState& st = device(device_id);
    std::lock_guard lock(st.mu);
    return st.matrix.trip_count();
}

std::optional<GeoPoint> TrackerService::last_known(const std::string& device_id) {
    DeviceState& st = device(device_id);
    std::lock_guard lock(st.mu);
    return st.last_known;
}

std::size_t replay_events(TrackerService& service, std::istream& events) {
    std::string line;
    std::size_t fed = 0;
    while (std::getline(events, line)) {
        if (line.empty()) {
            continue;
        }
        service.handle_line(0, line);
        ++fed;
    }
    service.finalize();
    return fed;
}

// ---------------------------------------------------------------------------
// TCP front end

namespace {

void write_all(int fd, const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
        if (n <= 0) {
            return;  // peer gone; reader will notice
        }
        off += static_cast<std::size_t>(n);
    }
}

}  // namespace

TcpServer::TcpServer(TrackerService& service) : service_(service) {}

TcpServer::~TcpServer() { stop(); }

void TcpServer::start(const std::string& host, std::uint16_t port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) {
        throw std::runtime_error("socket() failed");
    }
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    const std::string resolved = host == "localhost" ? "127.0.0.1" : host;
    if (::inet_pton(AF_INET, resolved.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("bad listen address: " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
        ::listen(listen_fd_, 16) < 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
}

void TcpServer::run() {
    while (!stopping_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (stopping_) {
                break;
            }
            continue;
        }
        const SessionId sid = next_session_++;
        std::lock_guard lock(conns_mu_);
        conn_fds_.push_back(fd);
        conn_threads_.emplace_back([this, fd, sid] { serve_connection(fd, sid); });
    }
}

void TcpServer::stop() {
    if (stopping_.exchange(true)) {
        return;
    }
    if (listen_fd_ >= 0) {
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
    std::vector<std::thread> threads;
    {
        std::lock_guard lock(conns_mu_);
        for (const int fd : conn_fds_) {
            ::shutdown(fd, SHUT_RDWR);
        }
        threads.swap(conn_threads_);
    }
    for (std::thread& t : threads) {
        if (t.joinable()) {
            t.join();
        }
    }
}

void TcpServer::serve_connection(int fd, SessionId sid) {
    auto write_mu = std::make_shared<std::mutex>();
    service_.attach_session(sid, [fd, write_mu](const std::string& line) {
        std::lock_guard lock(*write_mu);
        write_all(fd, line + "\n");
    });

    std::string buf;
    char chunk[4096];
    while (true) {
        const ssize_t n = ::read(fd, chunk, sizeof(chunk));
        if (n <= 0) {
            break;
        }
        buf.append(chunk, static_cast<std::size_t>(n));
        if (buf.size() > 1 << 20) {
            break;  // runaway line, drop the connection
        }
        std::size_t pos;
        while ((pos = buf.find('\n')) != std::string::npos) {
            const std::string line = buf.substr(0, pos);
            buf.erase(0, pos + 1);
            const auto replies = service_.handle_line(sid, line);
            std::lock_guard lock(*write_mu);
            for (const std::string& r : replies) {
                write_all(fd, r + "\n");
            }
        }
    }
    service_.detach_session(sid);
    ::close(fd);
}

}  // namespace routegrid
