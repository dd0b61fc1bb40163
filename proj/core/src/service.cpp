#include "carm/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <list>
#include <mutex>
#include <shared_mutex>
#include <thread>
#include <unordered_map>

#include "carm/error.hpp"
#include "carm/image_io.hpp"
#include "httplib.h"
#include "io_util.hpp"
#include "json.hpp"

namespace carm {
namespace {

using json = nlohmann::ordered_json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[80];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

json pose_json(const CarmPose& p) { return {{"x", p.x}, {"y", p.y}, {"z", p.z}}; }

CarmPose pose_from(const json& j) { return {j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>()}; }

std::string session_name(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s-%06llu", static_cast<unsigned long long>(n));
  return buf;
}

struct CaseEntry {
  Phantom phantom;
  DrrRenderer renderer;
};

struct Session {
  mutable std::mutex mutex;
  SessionState state;
};

// Fixed-capacity least-recently-used map from render key to PNG bytes.
class RenderCache {
 public:
  explicit RenderCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<std::vector<unsigned char>> get(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
  }

  void put(const std::string& key, std::vector<unsigned char> value) {
    if (capacity_ == 0) return;
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) {
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    order_.emplace_front(key, std::move(value));
    index_[key] = order_.begin();
    if (order_.size() > capacity_) {
      index_.erase(order_.back().first);
      order_.pop_back();
    }
  }

 private:
  using Entry = std::pair<std::string, std::vector<unsigned char>>;
  std::size_t capacity_;
  std::mutex mutex_;
  std::list<Entry> order_;
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

}  // namespace

struct AnnotationService::Impl {
  ServiceConfig config;
  std::map<std::string, std::unique_ptr<CaseEntry>> cases;
  mutable std::shared_mutex sessions_mutex;
  std::map<std::string, std::unique_ptr<Session>> sessions;
  std::vector<std::string> session_order;
  std::uint64_t next_session = 1;
  std::mutex journal_mutex;
  RenderCache cache;

  explicit Impl(ServiceConfig c) : config(std::move(c)), cache(config.cache_capacity) {}

  const CaseEntry& case_entry(std::string_view id) const {
    auto it = cases.find(std::string(id));
    if (it == cases.end()) throw NotFoundError("unknown case '" + std::string(id) + "'");
    return *it->second;
  }

  Session& find(std::string_view id) const {
    std::shared_lock lock(sessions_mutex);
    auto it = sessions.find(std::string(id));
    if (it == sessions.end()) throw NotFoundError("unknown session '" + std::string(id) + "'");
    return *it->second;
  }

  void journal(const json& event) {
    if (config.journal_path.empty()) return;
    std::lock_guard lock(journal_mutex);
    std::ofstream out(config.journal_path, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot append to journal " + config.journal_path.string());
    out << event.dump() << '\n';
    out.flush();
    if (!out) throw IoError("journal write failed: " + config.journal_path.string());
  }

  SessionState add_session(const std::string& id, const std::string& case_id, const CarmPose& pose) {
    auto s = std::make_unique<Session>();
    s->state.session_id = id;
    s->state.case_id = case_id;
    s->state.pose = pose;
    SessionState copy = s->state;
    sessions.emplace(id, std::move(s));
    session_order.push_back(id);
    return copy;
  }

  void replay() {
    if (config.journal_path.empty() || !std::filesystem::exists(config.journal_path)) return;
    std::ifstream in(config.journal_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      json e;
      try {
        e = json::parse(line);
      } catch (const json::exception&) {
        // A torn final line from an interrupted append is dropped.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw ValidationError("corrupt journal line " + std::to_string(line_no));
      }
      const std::string kind = e.at("event").get<std::string>();
      const std::string id = e.at("session_id").get<std::string>();
      if (kind == "create") {
        const std::string case_id = e.at("case_id").get<std::string>();
        case_entry(case_id);
        add_session(id, case_id, pose_from(e.at("pose")));
        next_session = std::max<std::uint64_t>(next_session, std::stoull(id.substr(2)) + 1);
        continue;
      }
      Session& s = find(id);
      if (kind == "move") {
        s.state.pose = pose_from(e.at("pose"));
      } else if (kind == "annotate") {
        AnnotationRecord r;
        r.landmark_id = e.at("landmark_id").get<int>();
        r.landmark_name = std::string(landmark_name(r.landmark_id));
        r.pose = pose_from(e.at("pose"));
        r.timestamp = e.at("timestamp").get<std::string>();
        r.fine_tuned = e.at("fine_tuned").get<bool>();
        r.annotator_id = e.at("annotator_id").get<std::string>();
        s.state.annotations[r.landmark_id] = r;
      } else {
        throw ValidationError("unknown journal event '" + kind + "'");
      }
    }
  }
};

AnnotationService::AnnotationService(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {
  const auto& dir = impl_->config.phantom_dir;
  if (!std::filesystem::is_directory(dir)) throw IoError("phantom directory not found: " + dir.string());
  std::vector<std::filesystem::path> case_dirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "header.json")) case_dirs.push_back(entry.path());
  std::sort(case_dirs.begin(), case_dirs.end());
  for (const auto& p : case_dirs) {
    Phantom phantom = load_phantom(p);
    const std::string id = phantom.case_id();
    DrrRenderer renderer(phantom);
    impl_->cases.emplace(id, std::make_unique<CaseEntry>(CaseEntry{std::move(phantom), std::move(renderer)}));
  }
  if (impl_->config.detector.resolution < 8 || !(impl_->config.detector.detector_mm > 0))
    throw ValidationError("invalid detector specification");
  impl_->replay();
}

AnnotationService::~AnnotationService() = default;

const ServiceConfig& AnnotationService::config() const { return impl_->config; }

std::vector<CaseInfo> AnnotationService::cases() const {
  std::vector<CaseInfo> out;
  for (const auto& [id, c] : impl_->cases) out.push_back(case_info(c->phantom));
  return out;
}

SessionState AnnotationService::create_session(std::string_view case_id) {
  const CaseEntry& c = impl_->case_entry(case_id);
  const Vec3 e = c.phantom.extent();
  const CarmPose pose{e.x / 2, e.y / 2, c.phantom.table_z()};
  std::unique_lock lock(impl_->sessions_mutex);
  const std::string id = session_name(impl_->next_session++);
  impl_->journal({{"event", "create"}, {"session_id", id}, {"case_id", case_id}, {"pose", pose_json(pose)}});
  return impl_->add_session(id, std::string(case_id), pose);
}

SessionState AnnotationService::session(std::string_view session_id) const {
  Session& s = impl_->find(session_id);
  std::lock_guard lock(s.mutex);
  return s.state;
}

RenderResult AnnotationService::render_at(std::string_view session_id, double x, double y) {
  if (!std::isfinite(x) || !std::isfinite(y)) throw ValidationError("render coordinates must be finite numbers");
  Session& s = impl_->find(session_id);
  std::lock_guard lock(s.mutex);
  const CaseEntry& c = impl_->case_entry(s.state.case_id);
  const Vec3 e = c.phantom.extent();
  RenderResult r;
  r.pose = {std::clamp(x, 0.0, e.x), std::clamp(y, 0.0, e.y), s.state.pose.z};
  r.clamped = r.pose.x != x || r.pose.y != y;
  if (!(r.pose == s.state.pose)) {
    impl_->journal({{"event", "move"}, {"session_id", s.state.session_id}, {"pose", pose_json(r.pose)}});
    s.state.pose = r.pose;
  }
  const DetectorSpec& d = impl_->config.detector;
  const std::string key = s.state.case_id + '|' + format_exact(r.pose.x) + '|' + format_exact(r.pose.y) + '|' +
                          std::to_string(d.resolution) + '|' + format_exact(d.detector_mm);
  if (auto hit = impl_->cache.get(key)) {
    r.png = std::move(*hit);
  } else {
    r.png = encode_png16(c.renderer.render(r.pose, d));
    impl_->cache.put(key, r.png);
  }
  return r;
}

std::pair<AnnotationRecord, int> AnnotationService::record_annotation(std::string_view session_id, int landmark_id,
                                                                      bool fine_tuned, std::string annotator_id) {
  if (landmark_id < 1 || landmark_id > kLandmarkCount)
    throw ValidationError("landmark_id " + std::to_string(landmark_id) + " outside 1..20");
  if (annotator_id.empty()) annotator_id = "anonymous";
  if (annotator_id.find_first_of("\t\r\n") != std::string::npos)
    throw ValidationError("annotator id must not contain tabs or line breaks");
  Session& s = impl_->find(session_id);
  std::lock_guard lock(s.mutex);
  AnnotationRecord r;
  r.landmark_id = landmark_id;
  r.landmark_name = std::string(landmark_name(landmark_id));
  r.pose = s.state.pose;
  r.timestamp = utc_timestamp();
  r.fine_tuned = fine_tuned;
  r.annotator_id = std::move(annotator_id);
  impl_->journal({{"event", "annotate"},
                  {"session_id", s.state.session_id},
                  {"landmark_id", r.landmark_id},
                  {"pose", pose_json(r.pose)},
                  {"fine_tuned", r.fine_tuned},
                  {"annotator_id", r.annotator_id},
                  {"timestamp", r.timestamp}});
  s.state.annotations[landmark_id] = r;
  return {r, s.state.completed()};
}

std::vector<AnnotationRow> AnnotationService::export_rows(std::optional<std::string> case_id) const {
  std::vector<std::string> order;
  {
    std::shared_lock lock(impl_->sessions_mutex);
    order = impl_->session_order;
  }
  std::vector<AnnotationRow> rows;
  for (const auto& id : order) {
    const SessionState s = session(id);
    if (case_id && s.case_id != *case_id) continue;
    for (const auto& [lid, a] : s.annotations)
      rows.push_back({s.case_id, lid, a.landmark_name, a.pose, a.annotator_id});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// HTTP.

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

json session_json(const SessionState& s, const AnnotationService& service) {
  json annotations = json::array();
  json completed = json::array();
  for (const auto& [id, a] : s.annotations) {
    completed.push_back(id);
    annotations.push_back({{"landmark_id", id},
                           {"landmark_name", a.landmark_name},
                           {"pose", pose_json(a.pose)},
                           {"timestamp", a.timestamp},
                           {"fine_tuned", a.fine_tuned},
                           {"annotator_id", a.annotator_id}});
  }
  const DetectorSpec& d = service.config().detector;
  Vec3 extent;
  for (const auto& c : service.cases())
    if (c.case_id == s.case_id) extent = c.extent;
  return {{"session_id", s.session_id},
          {"case_id", s.case_id},
          {"pose", pose_json(s.pose)},
          {"extent", {extent.x, extent.y, extent.z}},
          {"detector", {{"detector_mm", d.detector_mm}, {"resolution", d.resolution}}},
          {"completed", std::move(completed)},
          {"completed_count", s.completed()},
          {"annotations", std::move(annotations)}};
}

std::optional<double> parse_coordinate(const std::string& text) {
  if (text.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const NotFoundError& e) {
    send_error(res, 404, e.what());
  } catch (const ValidationError& e) {
    send_error(res, 400, e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("malformed request body: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

}  // namespace

struct ServiceServer::Impl {
  AnnotationService& service;
  httplib::Server server;
  std::thread thread;
  bool bound = false;

  explicit Impl(AnnotationService& s) : service(s) {}
};

ServiceServer::ServiceServer(AnnotationService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svr = impl_->server;
  AnnotationService& svc = service;
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type, X-Annotator"},
                           {"Access-Control-Expose-Headers", "X-Pose-X, X-Pose-Y, X-Pose-Z, X-Clamped"}});
  svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  svr.Get("/cases", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      json cases = json::array();
      for (const auto& c : svc.cases())
        cases.push_back({{"case_id", c.case_id},
                         {"extent", {c.extent.x, c.extent.y, c.extent.z}},
                         {"table_z", c.table_z},
                         {"arm_pose", to_string(c.arm_pose)}});
      send_json(res, 200, {{"cases", std::move(cases)}});
    });
  });

  svr.Post("/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = json::parse(req.body);
      if (!body.is_object() || !body.contains("case_id") || !body["case_id"].is_string())
        throw ValidationError("request body needs a string case_id");
      send_json(res, 201, session_json(svc.create_session(body["case_id"].get<std::string>()), svc));
    });
  });

  svr.Get(R"(/sessions/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, session_json(svc.session(req.matches[1].str()), svc)); });
  });

  svr.Get(R"(/sessions/([^/]+)/render)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1].str();
      svc.session(id);  // 404 before argument checks
      const auto x = parse_coordinate(req.get_param_value("x"));
      const auto y = parse_coordinate(req.get_param_value("y"));
      if (!x || !y) throw ValidationError("x and y query parameters must be numbers");
      const RenderResult r = svc.render_at(id, *x, *y);
      res.status = 200;
      res.set_header("X-Pose-X", format_exact(r.pose.x));
      res.set_header("X-Pose-Y", format_exact(r.pose.y));
      res.set_header("X-Pose-Z", format_exact(r.pose.z));
      res.set_header("X-Clamped", r.clamped ? "true" : "false");
      res.set_content(std::string(r.png.begin(), r.png.end()), "image/png");
    });
  });

  svr.Post(R"(/sessions/([^/]+)/annotations)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1].str();
      svc.session(id);
      const json body = json::parse(req.body);
      if (!body.is_object() || !body.contains("landmark_id") || !body["landmark_id"].is_number_integer())
        throw ValidationError("request body needs an integer landmark_id");
      const bool fine_tuned = body.contains("fine_tuned") ? body["fine_tuned"].get<bool>() : false;
      std::string annotator = req.get_header_value("X-Annotator");
      const auto [record, completed] = svc.record_annotation(id, body["landmark_id"].get<int>(), fine_tuned, annotator);
      send_json(res, 200,
                {{"record",
                  {{"landmark_id", record.landmark_id},
                   {"landmark_name", record.landmark_name},
                   {"pose", pose_json(record.pose)},
                   {"timestamp", record.timestamp},
                   {"fine_tuned", record.fine_tuned},
                   {"annotator_id", record.annotator_id}}},
                 {"completed_count", completed},
                 {"total", kLandmarkCount}});
    });
  });

  svr.Get("/export", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<std::string> filter;
      if (req.has_param("case_id")) filter = req.get_param_value("case_id");
      res.status = 200;
      res.set_header("Content-Disposition", "attachment; filename=\"annotations.tsv\"");
      res.set_content(format_annotation_export(svc.export_rows(filter)), "text/tab-separated-values");
    });
  });
}

ServiceServer::~ServiceServer() { stop(); }

int ServiceServer::bind(const std::string& host, int port) {
  auto& svr = impl_->server;
  if (port == 0) {
    port = svr.bind_to_any_port(host);
    if (port < 0) throw IoError("cannot bind to " + host);
  } else if (!svr.bind_to_port(host, port)) {
    throw IoError("cannot bind to " + host + ":" + std::to_string(port));
  }
  impl_->bound = true;
  return port;
}

void ServiceServer::listen() {
  if (!impl_->bound) throw ContractError("bind() before listen()");
  impl_->server.listen_after_bind();
}

void ServiceServer::start() {
  if (!impl_->bound) throw ContractError("bind() before start()");
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void ServiceServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace carm
