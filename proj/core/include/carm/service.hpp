#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "carm/dataset.hpp"
#include "carm/drr.hpp"
#include "carm/phantom.hpp"

namespace carm {

// Unknown case or session.
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServiceConfig {
  std::filesystem::path phantom_dir;   // one exported phantom per subdirectory
  std::filesystem::path journal_path;  // empty: no persistence
  DetectorSpec detector{320.0, 256};
  std::size_t cache_capacity = 128;    // rendered images kept in memory
};

struct AnnotationRecord {
  int landmark_id = 0;
  std::string landmark_name;
  CarmPose pose;
  std::string timestamp;  // ISO 8601 UTC
  bool fine_tuned = false;
  std::string annotator_id;
};

struct SessionState {
  std::string session_id;
  std::string case_id;
  CarmPose pose;
  std::map<int, AnnotationRecord> annotations;  // latest per landmark id

  int completed() const { return static_cast<int>(annotations.size()); }
};

struct RenderResult {
  std::vector<unsigned char> png;
  CarmPose pose;
  bool clamped = false;
};

// Session bookkeeping behind the HTTP surface. Thread-safe: mutations of one
// session are serialised, distinct sessions proceed independently, and the
// renderers are shared read-only.
class AnnotationService {
 public:
  // Loads every phantom under config.phantom_dir and replays the journal.
  explicit AnnotationService(ServiceConfig config);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  const ServiceConfig& config() const;
  std::vector<CaseInfo> cases() const;

  // Starts at the case centre with z = table_z.
  SessionState create_session(std::string_view case_id);
  SessionState session(std::string_view session_id) const;

  // Moves the detector (x, y clamped into the extent, z unchanged) and
  // renders there.
  RenderResult render_at(std::string_view session_id, double x, double y);

  // Stores the current pose for the landmark, replacing any earlier record.
  // Returns the record and the number of distinct landmarks annotated.
  std::pair<AnnotationRecord, int> record_annotation(std::string_view session_id, int landmark_id, bool fine_tuned,
                                                     std::string annotator_id = "anonymous");

  // Every stored annotation, sessions in creation order, landmarks by id.
  std::vector<AnnotationRow> export_rows(std::optional<std::string> case_id = std::nullopt) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// HTTP front end (REST + PNG) for an AnnotationService.
//   GET  /cases
//   POST /sessions                      {"case_id": ...}
//   GET  /sessions/{id}
//   GET  /sessions/{id}/render?x=&y=
//   POST /sessions/{id}/annotations     {"landmark_id": n, "fine_tuned": bool}, X-Annotator header
//   GET  /export[?case_id=]
class ServiceServer {
 public:
  explicit ServiceServer(AnnotationService& service);
  ~ServiceServer();
  ServiceServer(const ServiceServer&) = delete;
  ServiceServer& operator=(const ServiceServer&) = delete;

  // Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void listen();
  // listen() on a background thread; returns once the server accepts.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace carm
