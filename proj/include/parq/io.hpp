#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "parq/system.hpp"

namespace parq {

// Shortest round-trip-exact decimal form.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Write via a temp file plus rename so partial artifacts never appear.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << contents;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

class CsvBuilder {
public:
    explicit CsvBuilder(const std::vector<std::string>& header) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) buf_ << ',';
            buf_ << header[i];
        }
        buf_ << '\n';
    }

    void begin_row() { first_ = true; }
    void add(double v) { sep(); buf_ << format_double(v); }
    void add(std::int64_t v) { sep(); buf_ << v; }
    void add(int v) { sep(); buf_ << v; }
    void add(const std::string& v) { sep(); buf_ << v; }
    void end_row() { buf_ << '\n'; }

    std::string str() const { return buf_.str(); }

private:
    void sep() {
        if (!first_) buf_ << ',';
        first_ = false;
    }
    std::ostringstream buf_;
    bool first_ = true;
};

enum class TrajectoryFormat { Jsonl, Binary };

inline const char* event_kind_name(EventKind kind) {
    return kind == EventKind::Arrival ? "arrival" : "departure";
}

/// One JSON object per epoch: k, x, a, event, server, dt, cost.
inline TrajectorySink make_jsonl_sink(std::ostream& out) {
    return [&out](const TrajectoryRecord& rec) {
        out << "{\"k\":" << rec.k << ",\"x\":[";
        for (std::size_t i = 0; i < rec.x.size(); ++i) {
            if (i) out << ',';
            out << rec.x[i];
        }
        out << "],\"a\":" << rec.action << ",\"event\":\""
            << event_kind_name(rec.event.kind) << "\",\"server\":" << rec.event.server
            << ",\"dt\":" << format_double(rec.dt)
            << ",\"cost\":" << format_double(rec.cost) << "}\n";
    };
}

namespace detail {
inline constexpr char kTrajectoryMagic[8] = {'P', 'Q', 'T', 'R', 'J', '0', '0', '1'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(in);
}
}  // namespace detail

/// Fixed-width little-endian records behind an 8-byte magic and the server
/// count; the compact alternative to JSONL for long runs.
inline TrajectorySink make_binary_sink(std::ostream& out, int n_servers) {
    out.write(detail::kTrajectoryMagic, sizeof(detail::kTrajectoryMagic));
    detail::write_raw(out, static_cast<std::uint32_t>(n_servers));
    return [&out](const TrajectoryRecord& rec) {
        detail::write_raw(out, rec.k);
        for (int v : rec.x) detail::write_raw(out, static_cast<std::int32_t>(v));
        detail::write_raw(out, static_cast<std::int32_t>(rec.action));
        detail::write_raw(out, static_cast<std::uint8_t>(
                                   rec.event.kind == EventKind::Arrival ? 0 : 1));
        detail::write_raw(out, static_cast<std::int32_t>(rec.event.server));
        detail::write_raw(out, rec.dt);
        detail::write_raw(out, rec.cost);
    };
}

namespace detail {
inline void parse_jsonl_stream(std::istream& in,
                               const std::function<void(const TrajectoryRecord&)>& fn);
}

/// Stream a stored trajectory into a callback without materializing it.
inline void for_each_trajectory_record(
        std::istream& in, TrajectoryFormat format,
        const std::function<void(const TrajectoryRecord&)>& fn) {
    if (format == TrajectoryFormat::Jsonl) {
        detail::parse_jsonl_stream(in, fn);
        return;
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::string(magic, 8) != std::string(detail::kTrajectoryMagic, 8))
        throw std::runtime_error("trajectory: bad binary magic");
    std::uint32_t n_servers = 0;
    if (!detail::read_raw(in, n_servers) || n_servers == 0 || n_servers > 1024)
        throw std::runtime_error("trajectory: bad server count");
    TrajectoryRecord rec;
    rec.x.resize(n_servers);
    for (;;) {
        if (!detail::read_raw(in, rec.k)) break;
        for (std::uint32_t i = 0; i < n_servers; ++i) {
            std::int32_t v = 0;
            if (!detail::read_raw(in, v))
                throw std::runtime_error("trajectory: truncated record");
            rec.x[i] = v;
        }
        std::int32_t action = 0, server = 0;
        std::uint8_t kind = 0;
        if (!detail::read_raw(in, action) || !detail::read_raw(in, kind) ||
            !detail::read_raw(in, server) || !detail::read_raw(in, rec.dt) ||
            !detail::read_raw(in, rec.cost))
            throw std::runtime_error("trajectory: truncated record");
        rec.action = action;
        rec.event.kind = kind == 0 ? EventKind::Arrival : EventKind::Departure;
        rec.event.server = server;
        fn(rec);
    }
}

inline std::vector<TrajectoryRecord> read_trajectory(std::istream& in,
                                                     TrajectoryFormat format) {
    std::vector<TrajectoryRecord> records;
    for_each_trajectory_record(in, format,
                               [&](const TrajectoryRecord& r) { records.push_back(r); });
    return records;
}

}  // namespace parq

#include <json.hpp>

namespace parq::detail {

inline void parse_jsonl_stream(std::istream& in,
                               const std::function<void(const TrajectoryRecord&)>& fn) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        TrajectoryRecord rec;
        rec.k = j.at("k").get<std::int64_t>();
        rec.x = j.at("x").get<State>();
        rec.action = j.at("a").get<int>();
        const std::string ev = j.at("event").get<std::string>();
        rec.event.kind = ev == "arrival" ? EventKind::Arrival : EventKind::Departure;
        rec.event.server = j.at("server").get<int>();
        rec.dt = j.at("dt").get<double>();
        rec.cost = j.at("cost").get<double>();
        fn(rec);
    }
}

}  // namespace parq::detail
