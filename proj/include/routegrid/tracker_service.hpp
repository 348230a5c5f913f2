#pragma once

#include "routegrid/device_sim.hpp"
#include "routegrid/geogrid.hpp"
#include "routegrid/ingest.hpp"
#include "routegrid/route_model.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace routegrid {

using SessionId = std::uint64_t;

struct ServiceConfig {
    std::filesystem::path data_dir;  // empty: in-memory only
    GridConfig grid;
    DeviationConfig deviation;
    SegmentationConfig segmentation;
};

/// Parent-side endpoint: learns per-device matrices trip by trip, scores the
/// live ping stream, enforces single-parent authorization, and pushes alarms.
///
/// Wire protocol, one UTF-8 line per message (LF, space-delimited):
///   device:  PING <id> <lat> <lon> <ts> <batt> | SOS <id> <ts>
///            | LOWBAT <id> <batt> <ts>
///   parent:  BIND <id> <parent_id> | CONFIG <id> <key>=<val>
///            | TRACK <id> on|off | LISTEN <id> on|off | STATUS <id>
///            | CLOSETRIP <id>
///   pushes:  POS ... | ALARM DEVIATION ... | ALARM SOS ... | ALARM LOWBAT ...
///   replies: OK[ payload] | ERR <CODE> <detail>
///
/// Per-device state is mutated under that device's lock; sessions on
/// different devices proceed in parallel.
class TrackerService {
public:
    explicit TrackerService(ServiceConfig cfg);

    // Transport hooks. The sink receives push lines (POS / ALARM) for the
    // session; it is called with the device lock held and must not reenter.
    void attach_session(SessionId sid, std::function<void(const std::string&)> push_sink);
    void detach_session(SessionId sid);

    // Every ALARM line also lands here, bound parent or not. This is the
    // authoritative alarm log in replay mode.
    void set_alarm_sink(std::function<void(const std::string&)> sink);

    // Operational notices (discarded trips and the like).
    void set_notice_sink(std::function<void(const std::string&)> sink);

    std::vector<std::string> handle_line(SessionId sid, std::string_view line);

    // Closes every open trip (end of replay / shutdown).
    void finalize();

    // test introspection
    int trip_count(const std::string& device_id);
    std::optional<GeoPoint> last_known(const std::string& device_id);

    static constexpr std::size_t kMaxLineBytes = 1024;

private:
    struct OpenTrip {
        std::vector<GeoPoint> pings;
        IncrementalScorer scorer;
        bool deviation_latched = false;
    };

    struct DeviceState {
        std::string id;
        ProbabilityMatrix matrix;
        std::optional<GeoPoint> last_known;
        std::string parent_id;  // empty: unbound
        std::optional<SessionId> parent_session;
        bool listen_on = false;
        bool track_on = false;
        int battery_pct = -1;
        DeviationConfig deviation;
        SegmentationConfig segmentation;
        OpenTrip open;
        std::mutex mu;
    };

    DeviceState& device(const std::string& id);
    void load_persisted(DeviceState& st);
    void persist_matrix(DeviceState& st);
    void persist_last_known(DeviceState& st);
    void close_trip_locked(DeviceState& st, const char* reason);
    void emit_alarm(DeviceState& st, const std::string& line);
    void push_to_parent(DeviceState& st, const std::string& line);
    bool session_is_parent(DeviceState& st, SessionId sid) const;

    std::vector<std::string> cmd_ping(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_sos(const std::vector<std::string>& args);
    std::vector<std::string> cmd_lowbat(const std::vector<std::string>& args);
    std::vector<std::string> cmd_bind(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_config(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_track(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_listen(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_status(SessionId sid, const std::vector<std::string>& args);
    std::vector<std::string> cmd_closetrip(SessionId sid, const std::vector<std::string>& args);

    ServiceConfig cfg_;
    std::mutex devices_mu_;
    std::map<std::string, std::unique_ptr<DeviceState>> devices_;
    std::mutex sessions_mu_;
    std::map<SessionId, std::function<void(const std::string&)>> sessions_;
    std::function<void(const std::string&)> alarm_sink_;
    std::function<void(const std::string&)> notice_sink_;
};

// Feeds device events from a line file through the service (single session),
// then closes open trips. Returns the number of lines fed.
std::size_t replay_events(TrackerService& service, std::istream& events);

/// Line-oriented TCP front end. One thread per connection; stop() unblocks
/// the accept loop and tears down live connections.
class TcpServer {
public:
    explicit TcpServer(TrackerService& service);
    ~TcpServer();

    // Binds and listens; port 0 picks an ephemeral port. Throws on failure.
    void start(const std::string& host, std::uint16_t port);
    std::uint16_t port() const { return port_; }

    void run();   // blocking accept loop, returns after stop()
    void stop();

private:
    void serve_connection(int fd, SessionId sid);

    TrackerService& service_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::mutex conns_mu_;
    std::vector<int> conn_fds_;
    std::vector<std::thread> conn_threads_;
    std::atomic<SessionId> next_session_{1};
};

}  // namespace routegrid
