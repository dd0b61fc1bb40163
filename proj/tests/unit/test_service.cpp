#include <httplib.h>

#include <atomic>
#include <thread>

#include "carm/error.hpp"
#include "carm/image_io.hpp"
#include "carm/service.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace carm;
using json = nlohmann::json;

namespace {

struct Fixture {
  testing::TempDir dir;
  ServiceConfig config;

  Fixture() {
    export_phantom(testing::box_phantom("case-a", 20, 40, 10, 3.0), dir / "phantoms" / "case-a");
    export_phantom(testing::box_phantom("case-b", 24, 30, 10, 3.0), dir / "phantoms" / "case-b");
    config.phantom_dir = dir / "phantoms";
    config.journal_path = dir / "journal.jsonl";
    config.detector = {48, 16};
    config.cache_capacity = 4;
  }

  std::vector<Phantom> phantoms() const {
    return {load_phantom(dir / "phantoms" / "case-a"), load_phantom(dir / "phantoms" / "case-b")};
  }
};

struct Running {
  AnnotationService service;
  ServiceServer server;
  int port;
  httplib::Client client;

  explicit Running(const ServiceConfig& c)
      : service(c), server(service), port(server.bind("127.0.0.1", 0)), client("127.0.0.1", port) {
    server.start();
  }
  ~Running() { server.stop(); }
};

}  // namespace

TEST_CASE("sessions start at the case centre on the table plane") {
  Fixture f;
  AnnotationService svc(f.config);
  const auto cases = svc.cases();
  REQUIRE(cases.size() == 2);
  CHECK(cases[0].case_id == "case-a");
  const SessionState s = svc.create_session("case-a");
  CHECK(s.pose.x == 30.0);
  CHECK(s.pose.y == 60.0);
  CHECK(s.pose.z == 15.0);
  CHECK(s.completed() == 0);
  CHECK_THROWS_AS(svc.create_session("case-z"), NotFoundError);
  CHECK_THROWS_AS(svc.session("nope"), NotFoundError);
}

TEST_CASE("render clamps to the extent and keeps the depth") {
  Fixture f;
  AnnotationService svc(f.config);
  const auto s = svc.create_session("case-a");
  const RenderResult r = svc.render_at(s.session_id, -20.0, 500.0);
  CHECK(r.clamped);
  CHECK(r.pose.x == 0.0);
  CHECK(r.pose.y == 120.0);
  CHECK(r.pose.z == 15.0);
  const RenderResult inside = svc.render_at(s.session_id, 12.5, 33.0);
  CHECK_FALSE(inside.clamped);
  const Phantom p = f.phantoms()[0];
  CHECK(decode_png16(inside.png, 48).hash() == quantize16(render_drr(p, {12.5, 33.0, 15.0}, 48, 16)).hash());
  CHECK(svc.render_at(s.session_id, 12.5, 33.0).png == inside.png);
  CHECK(svc.session(s.session_id).pose == CarmPose{12.5, 33.0, 15.0});
  CHECK_THROWS_AS(svc.render_at(s.session_id, NAN, 1.0), ValidationError);
}

TEST_CASE("annotations replace per landmark and validate ids") {
  Fixture f;
  AnnotationService svc(f.config);
  const auto s = svc.create_session("case-b");
  svc.render_at(s.session_id, 10, 20);
  auto [rec, n] = svc.record_annotation(s.session_id, 14, true, "");
  CHECK(rec.landmark_name == "T12");
  CHECK(rec.annotator_id == "anonymous");
  CHECK(rec.pose == CarmPose{10, 20, 15});
  CHECK(rec.timestamp.size() == 24);
  CHECK(rec.timestamp.back() == 'Z');
  CHECK(n == 1);
  svc.render_at(s.session_id, 11, 21);
  CHECK(svc.record_annotation(s.session_id, 14, false, "r1").second == 1);
  CHECK(svc.session(s.session_id).annotations.at(14).pose.x == 11);
  CHECK_THROWS_AS(svc.record_annotation(s.session_id, 0, false), ValidationError);
  CHECK_THROWS_AS(svc.record_annotation(s.session_id, 21, false), ValidationError);
  CHECK_THROWS_AS(svc.record_annotation(s.session_id, 3, false, "a\tb"), ValidationError);
  CHECK_THROWS_AS(svc.record_annotation("s-999999", 3, false), NotFoundError);
}

TEST_CASE("journal replay restores sessions") {
  Fixture f;
  std::string id;
  {
    AnnotationService svc(f.config);
    id = svc.create_session("case-a").session_id;
    svc.render_at(id, 7.25, 8.125);
    svc.record_annotation(id, 5, true, "r2");
    svc.render_at(id, 40.0, 90.0);
  }
  AnnotationService again(f.config);
  const SessionState s = again.session(id);
  CHECK(s.pose == CarmPose{40.0, 90.0, 15.0});
  REQUIRE(s.annotations.size() == 1);
  CHECK(s.annotations.at(5).pose == CarmPose{7.25, 8.125, 15.0});
  CHECK(s.annotations.at(5).annotator_id == "r2");
  CHECK(s.annotations.at(5).fine_tuned);
  CHECK(again.create_session("case-a").session_id != id);

  // A torn trailing line from a crash is dropped.
  { std::ofstream(f.config.journal_path, std::ios::app) << "{\"event\":\"annot"; }
  AnnotationService torn(f.config);
  CHECK(torn.session(id).annotations.size() == 1);
}

TEST_CASE("HTTP surface") {
  Fixture f;
  Running run(f.config);
  auto& cli = run.client;

  auto cases = cli.Get("/cases");
  REQUIRE(cases);
  CHECK(cases->status == 200);
  const json cj = json::parse(cases->body);
  CHECK(cj["cases"].size() == 2);
  CHECK(cj["cases"][1]["case_id"] == "case-b");

  auto missing = cli.Post("/sessions", R"({"case_id":"case-q"})", "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"].get<std::string>().find("case-q") != std::string::npos);
  auto malformed = cli.Post("/sessions", "{", "application/json");
  CHECK(malformed->status == 400);

  auto created = cli.Post("/sessions", R"({"case_id":"case-a"})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const json sj = json::parse(created->body);
  const std::string sid = sj["session_id"];
  CHECK(sj["completed_count"] == 0);
  CHECK(sj["pose"]["x"] == 30.0);

  CHECK(cli.Get("/sessions/" + sid)->status == 200);
  CHECK(cli.Get("/sessions/s-424242")->status == 404);
  CHECK(cli.Get("/sessions/s-424242/render?x=1&y=2")->status == 404);
  CHECK(cli.Get("/sessions/" + sid + "/render?x=abc&y=2")->status == 400);
  CHECK(cli.Get("/sessions/" + sid + "/render?x=1")->status == 400);

  auto img = cli.Get("/sessions/" + sid + "/render?x=-5&y=12.5");
  REQUIRE(img);
  CHECK(img->status == 200);
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(img->get_header_value("X-Clamped") == "true");
  CHECK(std::stod(img->get_header_value("X-Pose-X")) == 0.0);
  CHECK(std::stod(img->get_header_value("X-Pose-Y")) == 12.5);
  CHECK(img->get_header_value("Access-Control-Expose-Headers").find("X-Pose-X") != std::string::npos);
  auto again = cli.Get("/sessions/" + sid + "/render?x=-5&y=12.5");
  CHECK(again->body == img->body);

  auto export_empty = cli.Get("/export");
  CHECK(export_empty->status == 200);
  CHECK(parse_annotation_export(export_empty->body).empty());
  CHECK(export_empty->body.rfind("# case_id", 0) == 0);

  httplib::Headers annotator = {{"X-Annotator", "r7"}};
  auto ann = cli.Post("/sessions/" + sid + "/annotations", annotator, R"({"landmark_id":14,"fine_tuned":true})",
                      "application/json");
  REQUIRE(ann);
  CHECK(ann->status == 200);
  const json aj = json::parse(ann->body);
  CHECK(aj["record"]["landmark_name"] == "T12");
  CHECK(aj["completed_count"] == 1);
  CHECK(aj["total"] == 20);
  CHECK(cli.Post("/sessions/" + sid + "/annotations", R"({"landmark_id":21})", "application/json")->status == 400);
  CHECK(cli.Post("/sessions/" + sid + "/annotations", R"({"landmark_id":"x"})", "application/json")->status == 400);

  auto pre = cli.Options("/sessions");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Origin") == "*");
}

TEST_CASE("a completed session exports rows that rebuild exact records") {
  Fixture f;
  Running run(f.config);
  auto& cli = run.client;
  const std::string sid = json::parse(cli.Post("/sessions", R"({"case_id":"case-b"})", "application/json")->body)["session_id"];
  const Phantom p = f.phantoms()[1];
  for (int id = 1; id <= 20; ++id) {
    const Vec3 lm = p.landmarks()[id - 1].position;
    const std::string q = "/sessions/" + sid + "/render?x=" + std::to_string(lm.x) + "&y=" + std::to_string(lm.y);
    REQUIRE(cli.Get(q)->status == 200);
    const std::string body = "{\"landmark_id\":" + std::to_string(id) + "}";
    REQUIRE(cli.Post("/sessions/" + sid + "/annotations", body, "application/json")->status == 200);
  }
  CHECK(json::parse(cli.Get("/sessions/" + sid)->body)["completed_count"] == 20);
  auto exp = cli.Get("/export?case_id=case-b");
  REQUIRE(exp->status == 200);
  const auto rows = parse_annotation_export(exp->body);
  REQUIRE(rows.size() == 20);
  CHECK(parse_annotation_export(cli.Get("/export?case_id=case-a")->body).empty());

  const DatasetManifest m = build_annotation_dataset({p}, rows, f.dir / "ann", f.config.detector);
  REQUIRE(m.records.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(m.records[i].pose_mm == rows[i].pose);
    CHECK(*m.records[i].label == rows[i].landmark_id);
    CHECK(read_png16(m.image_file(m.records[i]), 48).hash() ==
          quantize16(render_drr(p, rows[i].pose, 48, 16)).hash());
  }
}

TEST_CASE("concurrent sessions do not interfere") {
  Fixture f;
  f.config.journal_path.clear();
  AnnotationService svc(f.config);
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(svc.create_session(i % 2 ? "case-a" : "case-b").session_id);
  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int id = 1; id <= 20; ++id) {
        const auto r = svc.render_at(ids[t], t + id, 2 * id);
        const auto rec = svc.record_annotation(ids[t], id, false, "t" + std::to_string(t)).first;
        if (!(rec.pose == r.pose)) ++failures;
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(failures == 0);
  for (const auto& id : ids) CHECK(svc.session(id).completed() == 20);
  CHECK(svc.export_rows().size() == 80);
}
