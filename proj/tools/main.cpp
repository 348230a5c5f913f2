#include "routegrid/device_sim.hpp"
#include "routegrid/geogrid.hpp"
#include "routegrid/ingest.hpp"
#include "routegrid/route_model.hpp"
#include "routegrid/tracker_service.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

using namespace routegrid;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct LearnOptions {
    std::vector<std::string> files;
    std::string out;
    int decimals = 4;
    int gap_seconds = 600;
    int min_pings = 5;
};

struct ScoreOptions {
    std::string matrix;
    std::string track;
    double threshold = 0.4;
    std::int64_t now = 0;  // 0: last ping timestamp
    bool machine = false;
};

struct SimulateOptions {
    std::string scenario;
    std::string out_prefix;
    std::int64_t seed = -1;  // -1: keep the scenario's
};

struct ServeOptions {
    std::string data_dir;
    std::string listen;  // host:port
    std::string replay;
    std::string alarms;
    double threshold = 0.4;
    int decimals = 4;
    std::vector<std::string> config;  // key=val overrides
};

struct InspectOptions {
    std::string matrix;
    bool grid = false;
};

int run_learn(const LearnOptions& opt) {
    GridConfig grid{opt.decimals};
    validate_grid(grid);
    SegmentationConfig seg{opt.gap_seconds, opt.min_pings};
    validate_segmentation(seg);

    std::vector<Trip> trips;
    std::vector<std::pair<std::int64_t, std::size_t>> discarded;
    std::size_t next_id = 1;
    for (const std::string& file : opt.files) {
        std::vector<GeoPoint> points;
        try {
            points = read_track_file(file);
        } catch (const TrackError& e) {
            std::cerr << file << ": " << e.what() << "\n";
            return kExitFailure;
        }
        SegmentationResult res = segment_trips(points, seg, grid);
        for (Trip& t : res.trips) {
            t.trip_id = "t" + std::to_string(next_id++);
            trips.push_back(std::move(t));
        }
        for (const DiscardedRun& d : res.discarded) {
            discarded.emplace_back(d.start_ts, d.ping_count);
        }
    }

    if (trips.empty()) {
        std::cerr << "no valid trips in input, nothing written\n";
        return kExitFailure;
    }

    ProbabilityMatrix matrix(grid);
    for (const Trip& t : trips) {
        matrix.record_trip(t);
    }

    std::cout << "learned " << matrix.trip_count() << " trips, " << matrix.cell_count()
              << " cells\n";
    for (const Trip& t : trips) {
        std::cout << "trip " << t.trip_id << ": " << t.pings.size() << " pings, "
                  << t.cells.size() << " cells\n";
    }
    for (const auto& [ts, n] : discarded) {
        std::cout << "discarded run at " << ts << ": " << n << " pings\n";
    }

    const std::string tmp = opt.out + ".tmp";
    matrix.save_file(tmp);
    std::filesystem::rename(tmp, opt.out);
    std::cout << "wrote " << opt.out << "\n";
    return kExitOk;
}

int run_score(const ScoreOptions& opt) {
    const ProbabilityMatrix matrix = ProbabilityMatrix::load_file(opt.matrix);
    const std::vector<GeoPoint> points = read_track_file(opt.track);
    if (points.empty()) {
        std::cerr << "track has no points\n";
        return kExitFailure;
    }

    std::vector<CellId> cells;
    cells.reserve(points.size());
    for (const GeoPoint& p : points) {
        cells.push_back(quantize(p, matrix.grid()));
    }
    const RouteScore score = matrix.score_route(cells);

    DeviationConfig cfg;
    cfg.threshold = opt.threshold;
    validate_deviation_config(cfg);
    const std::int64_t now = opt.now > 0 ? opt.now : points.back().ts;
    const Decision verdict = is_deviation(matrix, score, cfg, now);

    if (opt.machine) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "raw=%.17g loglik=%.17g norm=%.17g cells=%zu verdict=%s",
                      score.raw_product, score.log_likelihood, score.normalized, score.cell_count,
                      to_string(verdict));
        std::cout << buf << "\n";
    } else {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6g", score.raw_product);
        std::cout << "raw_product " << buf << "\n";
        std::snprintf(buf, sizeof(buf), "%.6f", score.log_likelihood);
        std::cout << "log_likelihood " << buf << "\n";
        std::snprintf(buf, sizeof(buf), "%.6f", score.normalized);
        std::cout << "normalized " << buf << "\n";
        std::cout << "cells " << score.cell_count << "\n";
        std::cout << "verdict " << to_string(verdict) << "\n";
    }
    return kExitOk;
}

int run_simulate(const SimulateOptions& opt) {
    Scenario sc = load_scenario_file(opt.scenario);
    if (opt.seed >= 0) {
        sc.noise.seed = static_cast<std::uint64_t>(opt.seed);
    }
    const std::vector<DeviceEvent> events = run_scenario(sc);

    const std::filesystem::path prefix(opt.out_prefix);
    if (prefix.has_parent_path()) {
        std::filesystem::create_directories(prefix.parent_path());
    }

    const std::string csv_path = opt.out_prefix + ".csv";
    {
        std::ofstream out(csv_path, std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot write " + csv_path);
        }
        const std::vector<GeoPoint> points = ping_points(events);
        write_csv_track(out, points);
        std::cout << "wrote " << csv_path << " (" << points.size() << " points)\n";
    }

    const std::string events_path = opt.out_prefix + ".events";
    {
        std::ofstream out(events_path, std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot write " + events_path);
        }
        for (const DeviceEvent& ev : events) {
            out << wire_line(ev) << "\n";
        }
        std::cout << "wrote " << events_path << " (" << events.size() << " lines)\n";
    }
    return kExitOk;
}

ServiceConfig build_service_config(const ServeOptions& opt) {
    ServiceConfig cfg;
    cfg.data_dir = opt.data_dir;
    cfg.grid.decimals = opt.decimals;
    cfg.deviation.threshold = opt.threshold;
    for (const std::string& kv : opt.config) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw CLI::ValidationError("--config", "expected key=val, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        try {
            if (key == "threshold") {
                cfg.deviation.threshold = std::stod(value);
            } else if (key == "min_trips") {
                cfg.deviation.min_trips = std::stoi(value);
            } else if (key == "min_days") {
                cfg.deviation.min_days = std::stoi(value);
            } else if (key == "min_route_cells") {
                cfg.deviation.min_route_cells = std::stoi(value);
            } else if (key == "retention_days") {
                cfg.deviation.retention_days = std::stoi(value);
            } else if (key == "gap_seconds") {
                cfg.segmentation.gap_seconds = std::stoi(value);
            } else if (key == "min_pings") {
                cfg.segmentation.min_pings_per_trip = std::stoi(value);
            } else if (key == "decimals") {
                cfg.grid.decimals = std::stoi(value);
            } else {
                throw CLI::ValidationError("--config", "unknown key '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            throw CLI::ValidationError("--config", "bad value in '" + kv + "'");
        }
    }
    validate_grid(cfg.grid);
    validate_deviation_config(cfg.deviation);
    validate_segmentation(cfg.segmentation);
    return cfg;
}

TcpServer* g_server = nullptr;

void handle_sigint(int) {
    if (g_server) {
        g_server->stop();
    }
}

int run_serve(const ServeOptions& opt) {
    TrackerService service(build_service_config(opt));

    if (!opt.replay.empty()) {
        std::ifstream events(opt.replay);
        if (!events) {
            std::cerr << "cannot open replay file: " << opt.replay << "\n";
            return kExitFailure;
        }
        std::ofstream alarm_out;
        std::size_t alarms = 0;
        if (!opt.alarms.empty()) {
            alarm_out.open(opt.alarms, std::ios::binary | std::ios::trunc);
            if (!alarm_out) {
                std::cerr << "cannot write alarm log: " << opt.alarms << "\n";
                return kExitFailure;
            }
        }
        service.set_alarm_sink([&](const std::string& line) {
            ++alarms;
            if (alarm_out.is_open()) {
                alarm_out << line << "\n";
            } else {
                std::cout << line << "\n";
            }
        });
        service.set_notice_sink([](const std::string& line) { std::cerr << line << "\n"; });
        const std::size_t fed = replay_events(service, events);
        std::cout << "replayed " << fed << " lines, alarms=" << alarms << "\n";
        return kExitOk;
    }

    std::string host = "127.0.0.1";
    std::uint16_t port = 7311;
    if (!opt.listen.empty()) {
        const std::size_t colon = opt.listen.rfind(':');
        if (colon == std::string::npos) {
            throw CLI::ValidationError("--listen", "expected host:port");
        }
        host = opt.listen.substr(0, colon);
        port = static_cast<std::uint16_t>(std::stoi(opt.listen.substr(colon + 1)));
    }

    service.set_alarm_sink([](const std::string& line) { std::cout << line << "\n"; });
    service.set_notice_sink([](const std::string& line) { std::cerr << line << "\n"; });

    TcpServer server(service);
    server.start(host, port);
    g_server = &server;
    std::signal(SIGINT, handle_sigint);
    std::signal(SIGTERM, handle_sigint);
    std::cout << "listening on " << host << ":" << server.port() << std::endl;
    server.run();
    service.finalize();
    return kExitOk;
}

int run_inspect(const InspectOptions& opt) {
    const ProbabilityMatrix matrix = ProbabilityMatrix::load_file(opt.matrix);
    std::cout << "PMATRIX d=" << matrix.grid().decimals << " N=" << matrix.trip_count()
              << " cells=" << matrix.cell_count() << "\n";
    for (const Trip& t : matrix.trips()) {
        std::cout << "trip " << t.trip_id << " " << t.start_ts << ".." << t.end_ts << " "
                  << t.cells.size() << " cells\n";
    }

    std::vector<CellId> cells;
    for (const Trip& t : matrix.trips()) {
        cells.insert(cells.end(), t.cells.begin(), t.cells.end());
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());

    if (!opt.grid) {
        for (const CellId& c : cells) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", matrix.cell_probability(c));
            std::cout << c.i << " " << c.j << " " << matrix.count_for(c) << " p=" << buf << "\n";
        }
        return kExitOk;
    }

    if (cells.empty()) {
        std::cout << "(empty grid)\n";
        return kExitOk;
    }
    // figure-value map: rows north to south, '.' for never-visited
    std::int64_t imin = cells.front().i, imax = cells.front().i;
    std::int64_t jmin = cells.front().j, jmax = cells.front().j;
    for (const CellId& c : cells) {
        imin = std::min(imin, c.i);
        imax = std::max(imax, c.i);
        jmin = std::min(jmin, c.j);
        jmax = std::max(jmax, c.j);
    }
    std::cout << "i " << imin << ".." << imax << ", j " << jmin << ".." << jmax
              << " (figure value = trips visiting + 1, '.' = unvisited)\n";
    for (std::int64_t i = imax; i >= imin; --i) {
        std::string row;
        for (std::int64_t j = jmin; j <= jmax; ++j) {
            const std::uint32_t count = matrix.count_for(CellId{i, j});
            if (count == 0) {
                row += '.';
            } else {
                const std::uint32_t figure = count + 1;
                row += figure <= 9 ? static_cast<char>('0' + figure) : '*';
            }
        }
        std::cout << row << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"routegrid: grid-probability route learning and deviation alarms"};
    app.require_subcommand(1);

    LearnOptions learn_opt;
    auto* learn = app.add_subcommand("learn", "Build a probability matrix from track files");
    learn->add_option("files", learn_opt.files, "CSV or NMEA track files")
        ->required()
        ->check(CLI::ExistingFile);
    learn->add_option("-o,--out", learn_opt.out, "output matrix file")->required();
    learn->add_option("--decimals", learn_opt.decimals, "grid decimal places (default 4)");
    learn->add_option("--gap-seconds", learn_opt.gap_seconds, "trip boundary gap (default 600)");
    learn->add_option("--min-pings", learn_opt.min_pings, "minimum pings per trip (default 5)");

    ScoreOptions score_opt;
    auto* score = app.add_subcommand("score", "Score a track against a learned matrix");
    score->add_option("-m,--matrix", score_opt.matrix, "matrix file")
        ->required()
        ->check(CLI::ExistingFile);
    score->add_option("-t,--track", score_opt.track, "track file")
        ->required()
        ->check(CLI::ExistingFile);
    score->add_option("--threshold", score_opt.threshold, "alarm threshold (default 0.4)");
    score->add_option("--now", score_opt.now, "evaluation time (default: last ping)");
    score->add_flag("--machine", score_opt.machine, "single-line machine-readable output");

    SimulateOptions sim_opt;
    auto* simulate = app.add_subcommand("simulate", "Run a device scenario to track + event files");
    simulate->add_option("-s,--scenario", sim_opt.scenario, "scenario file")
        ->required()
        ->check(CLI::ExistingFile);
    simulate->add_option("-o,--out-prefix", sim_opt.out_prefix, "output path prefix")->required();
    simulate->add_option("--seed", sim_opt.seed, "override the scenario seed");

    ServeOptions serve_opt;
    auto* serve = app.add_subcommand("serve", "Run the tracker service (TCP or replay)");
    serve->add_option("-d,--data-dir", serve_opt.data_dir, "persistence directory")->required();
    serve->add_option("--listen", serve_opt.listen, "listen address host:port");
    serve->add_option("--replay", serve_opt.replay, "event file to replay instead of listening")
        ->check(CLI::ExistingFile);
    serve->add_option("--alarms", serve_opt.alarms, "alarm log path (replay mode)");
    serve->add_option("--threshold", serve_opt.threshold, "deviation threshold (default 0.4)");
    serve->add_option("--decimals", serve_opt.decimals, "grid decimal places (default 4)");
    serve->add_option("--config", serve_opt.config, "config override key=val (repeatable)");

    InspectOptions inspect_opt;
    auto* inspect = app.add_subcommand("inspect", "Print a matrix summary");
    inspect->add_option("-m,--matrix", inspect_opt.matrix, "matrix file")
        ->required()
        ->check(CLI::ExistingFile);
    inspect->add_flag("--grid", inspect_opt.grid, "ASCII figure-value map");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (learn->parsed()) return run_learn(learn_opt);
        if (score->parsed()) return run_score(score_opt);
        if (simulate->parsed()) return run_simulate(sim_opt);
        if (serve->parsed()) return run_serve(serve_opt);
        if (inspect->parsed()) return run_inspect(inspect_opt);
    } catch (const CLI::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const ScenarioError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
