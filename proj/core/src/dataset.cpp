#include "carm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "carm/image_io.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace carm {
namespace {

using json = nlohmann::ordered_json;

json vec_json(Vec3 v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string(what) + " must be a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json demographics_json(const Demographics& d) {
  return {{"age_years", d.age_years}, {"sex", d.sex}, {"height_mm", d.height_mm}, {"weight_kg", d.weight_kg}};
}

Demographics demographics_from(const json& j) {
  Demographics d;
  d.age_years = j.at("age_years").get<double>();
  d.sex = j.at("sex").get<int>();
  d.height_mm = j.at("height_mm").get<double>();
  d.weight_kg = j.at("weight_kg").get<double>();
  d.validate();
  return d;
}

void require_keys(const json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ValidationError(std::string(what) + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ValidationError(std::string("unknown key '") + k + "' in " + what);
  for (const char* k : keys)
    if (!j.contains(k)) throw ValidationError(std::string("missing key '") + k + "' in " + what);
}

// Portable Fisher-Yates; std::shuffle's sequence is library-defined.
template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

std::string two_digits(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", v);
  return buf;
}

std::string three_digits(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", v);
  return buf;
}

std::vector<const Phantom*> sorted_phantoms(const std::vector<Phantom>& phantoms) {
  if (phantoms.empty()) throw ValidationError("dataset needs at least one phantom");
  std::vector<const Phantom*> out;
  std::set<std::string> seen;
  for (const auto& p : phantoms) {
    if (!seen.insert(p.case_id()).second) throw ValidationError("duplicate case_id '" + p.case_id() + "'");
    out.push_back(&p);
  }
  std::sort(out.begin(), out.end(), [](const Phantom* a, const Phantom* b) { return a->case_id() < b->case_id(); });
  return out;
}

ManifestRecord render_record(const Phantom& phantom, const DrrRenderer& renderer, const CarmPose& requested,
                             const DetectorSpec& detector, const std::filesystem::path& out_dir, std::string rel_path) {
  const NormalizedPose n = normalize_pose(requested, phantom.extent(), phantom.origin());
  ManifestRecord r;
  r.case_id = phantom.case_id();
  r.arm_pose = phantom.arm_pose();
  r.pose_mm = n.clamped ? denormalize_pose(n.raw, phantom.extent(), phantom.origin()) : requested;
  r.pose_raw = n.raw;
  r.clamped = n.clamped;
  write_png16(renderer.render(r.pose_mm, detector), out_dir / rel_path);
  r.image_path = std::move(rel_path);
  return r;
}

DatasetManifest start_manifest(DatasetTask task, const std::vector<const Phantom*>& phantoms,
                               const DetectorSpec& detector, const std::filesystem::path& out_dir) {
  if (detector.resolution < 8 || !(detector.detector_mm > 0)) throw ValidationError("invalid detector specification");
  detail::ensure_directory(out_dir);
  DatasetManifest m;
  m.task = task;
  m.detector = detector;
  m.root = out_dir;
  for (const Phantom* p : phantoms) m.cases.push_back(case_info(*p));
  return m;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

std::string_view to_string(DatasetTask task) { return task == DatasetTask::regression ? "regression" : "classification"; }

DatasetTask parse_dataset_task(std::string_view text) {
  if (text == "regression") return DatasetTask::regression;
  if (text == "classification") return DatasetTask::classification;
  throw ValidationError("unknown dataset task '" + std::string(text) + "'");
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

CaseInfo case_info(const Phantom& phantom) {
  return {phantom.case_id(), phantom.extent(), phantom.origin(), phantom.table_z(), phantom.demographics(),
          phantom.arm_pose()};
}

const CaseInfo& DatasetManifest::case_info(std::string_view case_id) const {
  for (const auto& c : cases)
    if (c.case_id == case_id) return c;
  throw ValidationError("manifest has no case '" + std::string(case_id) + "'");
}

std::vector<std::string> DatasetManifest::case_ids(std::optional<Split> split) const {
  std::set<std::string> ids;
  for (const auto& r : records)
    if (!split || r.split == *split) ids.insert(r.case_id);
  return {ids.begin(), ids.end()};
}

std::vector<const ManifestRecord*> DatasetManifest::select(Split split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

void DatasetManifest::validate() const {
  if (schema_version != kManifestSchemaVersion)
    throw ValidationError("unsupported manifest schema_version " + std::to_string(schema_version));
  std::map<std::string, Split> split_of;
  for (const auto& r : records) {
    const CaseInfo& c = case_info(r.case_id);
    const double raw[3] = {r.pose_raw.x, r.pose_raw.y, r.pose_raw.z};
    for (double v : raw)
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pose_raw outside [0, 1] in " + r.image_path);
    const NormalizedPose n = normalize_pose(r.pose_mm, c.extent, c.origin);
    if (std::abs(n.raw.x - r.pose_raw.x) > 1e-12 || std::abs(n.raw.y - r.pose_raw.y) > 1e-12 ||
        std::abs(n.raw.z - r.pose_raw.z) > 1e-12)
      throw ValidationError("pose_raw does not match pose_mm in " + r.image_path);
    if ((task == DatasetTask::classification) != r.label.has_value())
      throw ValidationError("label must be present exactly for classification records: " + r.image_path);
    if (r.label && (*r.label < 1 || *r.label > kLandmarkCount))
      throw ValidationError("label out of range in " + r.image_path);
    auto [it, inserted] = split_of.emplace(r.case_id, r.split);
    if (!inserted && it->second != r.split) throw ValidationError("case '" + r.case_id + "' appears in both splits");
  }
}

std::uint64_t DatasetManifest::content_hash() const { return fnv1a(format_manifest(*this)); }

std::string format_manifest(const DatasetManifest& m) {
  json cases = json::array();
  for (const auto& c : m.cases) {
    cases.push_back({{"case_id", c.case_id},
                     {"extent", vec_json(c.extent)},
                     {"origin", vec_json(c.origin)},
                     {"table_z", c.table_z},
                     {"demographics", demographics_json(c.demographics)},
                     {"arm_pose", to_string(c.arm_pose)}});
  }
  json header = {{"schema_version", m.schema_version},
                 {"kind", "carm_dataset_manifest"},
                 {"task", to_string(m.task)},
                 {"detector", {{"detector_mm", m.detector.detector_mm}, {"resolution", m.detector.resolution}}},
                 {"record_count", m.records.size()},
                 {"cases", std::move(cases)}};
  std::string out = header.dump() + "\n";
  for (const auto& r : m.records) {
    json j = {{"image", r.image_path},
              {"case_id", r.case_id},
              {"arm_pose", to_string(r.arm_pose)},
              {"pose_mm", json::array({r.pose_mm.x, r.pose_mm.y, r.pose_mm.z})},
              {"pose_raw", vec_json(r.pose_raw)},
              {"label", r.label ? json(*r.label) : json(nullptr)},
              {"split", to_string(r.split)},
              {"clamped", r.clamped}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

DatasetManifest parse_manifest(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  DatasetManifest m;
  bool have_header = false;
  std::size_t expected = 0;
  std::size_t line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (!have_header) {
        require_keys(j, {"schema_version", "kind", "task", "detector", "record_count", "cases"}, "manifest header");
        if (j.at("kind") != "carm_dataset_manifest") throw ValidationError("not a dataset manifest");
        m.schema_version = j.at("schema_version").get<int>();
        if (m.schema_version != kManifestSchemaVersion)
          throw ValidationError("unsupported manifest schema_version " + std::to_string(m.schema_version));
        m.task = parse_dataset_task(j.at("task").get<std::string>());
        m.detector.detector_mm = j.at("detector").at("detector_mm").get<double>();
        m.detector.resolution = j.at("detector").at("resolution").get<int>();
        expected = j.at("record_count").get<std::size_t>();
        for (const auto& c : j.at("cases")) {
          require_keys(c, {"case_id", "extent", "origin", "table_z", "demographics", "arm_pose"}, "manifest case");
          m.cases.push_back({c.at("case_id").get<std::string>(), vec_from(c.at("extent"), "extent"),
                             vec_from(c.at("origin"), "origin"), c.at("table_z").get<double>(),
                             demographics_from(c.at("demographics")),
                             parse_arm_pose(c.at("arm_pose").get<std::string>())});
        }
        have_header = true;
        continue;
      }
      require_keys(j, {"image", "case_id", "arm_pose", "pose_mm", "pose_raw", "label", "split", "clamped"},
                   "manifest record");
      ManifestRecord r;
      r.image_path = j.at("image").get<std::string>();
      r.case_id = j.at("case_id").get<std::string>();
      r.arm_pose = parse_arm_pose(j.at("arm_pose").get<std::string>());
      const Vec3 p = vec_from(j.at("pose_mm"), "pose_mm");
      r.pose_mm = {p.x, p.y, p.z};
      r.pose_raw = vec_from(j.at("pose_raw"), "pose_raw");
      if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
      r.split = parse_split(j.at("split").get<std::string>());
      r.clamped = j.at("clamped").get<bool>();
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!have_header) throw ValidationError("manifest is empty");
  if (m.records.size() != expected)
    throw ValidationError("manifest declares " + std::to_string(expected) + " records but holds " +
                          std::to_string(m.records.size()));
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  detail::write_file_atomic(path, format_manifest(manifest));
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(file)) file /= kManifestFile;
  DatasetManifest m = parse_manifest(detail::read_file(file));
  m.root = file.parent_path();
  return m;
}

int grid_count(double extent_mm, double spacing_mm) {
  if (!(spacing_mm > 0) || !std::isfinite(spacing_mm)) throw ValidationError("grid spacing must be positive");
  if (!(extent_mm > 0)) throw ValidationError("grid extent must be positive");
  return static_cast<int>(std::floor(extent_mm / spacing_mm + 1e-9)) + 1;
}

std::vector<CarmPose> make_grid_poses(const Phantom& phantom, double spacing_mm) {
  const Vec3 e = phantom.extent();
  const Vec3 o = phantom.origin();
  const int nx = grid_count(e.x, spacing_mm);
  const int ny = grid_count(e.y, spacing_mm);
  const double x0 = o.x + (e.x - (nx - 1) * spacing_mm) / 2;
  const double y0 = o.y + (e.y - (ny - 1) * spacing_mm) / 2;
  std::vector<CarmPose> out;
  out.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) out.push_back({x0 + i * spacing_mm, y0 + j * spacing_mm, phantom.table_z()});
  return out;
}

NormalizedPose normalize_pose(const CarmPose& pose, Vec3 extent, Vec3 origin) {
  if (!(extent.x > 0 && extent.y > 0 && extent.z > 0)) throw ValidationError("extent components must be positive");
  const Vec3 raw{(pose.x - origin.x) / extent.x, (pose.y - origin.y) / extent.y, (pose.z - origin.z) / extent.z};
  NormalizedPose n{{clamp01(raw.x), clamp01(raw.y), clamp01(raw.z)}, false};
  n.clamped = !(n.raw == raw);
  return n;
}

CarmPose denormalize_pose(Vec3 raw, Vec3 extent, Vec3 origin) {
  if (!(extent.x > 0 && extent.y > 0 && extent.z > 0)) throw ValidationError("extent components must be positive");
  return {origin.x + raw.x * extent.x, origin.y + raw.y * extent.y, origin.z + raw.z * extent.z};
}

DatasetManifest build_regression_dataset(const std::vector<Phantom>& phantoms, double spacing_mm,
                                         const std::filesystem::path& out_dir, const DetectorSpec& detector) {
  const auto sorted = sorted_phantoms(phantoms);
  DatasetManifest m = start_manifest(DatasetTask::regression, sorted, detector, out_dir);
  for (const Phantom* p : sorted) {
    const DrrRenderer renderer(*p);
    detail::ensure_directory(out_dir / "images" / p->case_id());
    const int nx = grid_count(p->extent().x, spacing_mm);
    const auto poses = make_grid_poses(*p, spacing_mm);
    for (std::size_t i = 0; i < poses.size(); ++i) {
      const int row = static_cast<int>(i) / nx, col = static_cast<int>(i) % nx;
      std::string rel = "images/" + p->case_id() + "/r" + three_digits(row) + "_c" + three_digits(col) + ".png";
      m.records.push_back(render_record(*p, renderer, poses[i], detector, out_dir, std::move(rel)));
    }
  }
  write_manifest(m, out_dir / kManifestFile);
  return m;
}

DatasetManifest build_classification_dataset(const std::vector<Phantom>& phantoms, double jitter_mm,
                                             int samples_per_landmark, std::uint64_t seed,
                                             const std::filesystem::path& out_dir, const DetectorSpec& detector) {
  if (!(jitter_mm >= 0) || !std::isfinite(jitter_mm)) throw ValidationError("jitter_mm must be non-negative");
  if (samples_per_landmark < 1) throw ValidationError("samples_per_landmark must be at least 1");
  const auto sorted = sorted_phantoms(phantoms);
  DatasetManifest m = start_manifest(DatasetTask::classification, sorted, detector, out_dir);
  for (const Phantom* p : sorted) {
    const DrrRenderer renderer(*p);
    detail::ensure_directory(out_dir / "images" / p->case_id());
    std::mt19937_64 rng(seed ^ fnv1a(p->case_id()));
    std::uniform_real_distribution<double> jitter(-jitter_mm, jitter_mm);
    for (const auto& lm : landmark_positions(*p)) {
      for (int s = 0; s < samples_per_landmark; ++s) {
        CarmPose pose{lm.position.x, lm.position.y, p->table_z()};
        if (jitter_mm > 0) {
          pose.x += jitter(rng);
          pose.y += jitter(rng);
        }
        std::string rel = "images/" + p->case_id() + "/l" + two_digits(lm.id) + "_s" + three_digits(s) + ".png";
        ManifestRecord r = render_record(*p, renderer, pose, detector, out_dir, std::move(rel));
        r.label = lm.id;
        m.records.push_back(std::move(r));
      }
    }
  }
  write_manifest(m, out_dir / kManifestFile);
  return m;
}

std::string format_annotation_export(const std::vector<AnnotationRow>& rows) {
  std::string out = "# case_id\tlandmark_id\tlandmark_name\tx\ty\tz\tannotator_id\n";
  for (const auto& r : rows) {
    out += r.case_id + '\t' + std::to_string(r.landmark_id) + '\t' + r.landmark_name + '\t' + format_exact(r.pose.x) +
           '\t' + format_exact(r.pose.y) + '\t' + format_exact(r.pose.z) + '\t' + r.annotator_id + '\n';
  }
  return out;
}

std::vector<AnnotationRow> parse_annotation_export(std::string_view text) {
  std::vector<AnnotationRow> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 7) throw ValidationError("annotation row needs 7 tab-separated fields: '" + line + "'");
    AnnotationRow r;
    r.case_id = f[0];
    r.landmark_id = detail::parse_int(f[1], "landmark_id");
    if (r.landmark_id < 1 || r.landmark_id > kLandmarkCount)
      throw ValidationError("landmark_id out of range: " + f[1]);
    r.landmark_name = f[2];
    if (r.landmark_name != landmark_name(r.landmark_id))
      throw ValidationError("landmark name '" + f[2] + "' does not match id " + f[1]);
    r.pose = {detail::parse_double(f[3], "x"), detail::parse_double(f[4], "y"), detail::parse_double(f[5], "z")};
    r.annotator_id = f[6];
    out.push_back(std::move(r));
  }
  return out;
}

DatasetManifest build_annotation_dataset(const std::vector<Phantom>& phantoms, const std::vector<AnnotationRow>& rows,
                                         const std::filesystem::path& out_dir, const DetectorSpec& detector) {
  const auto sorted = sorted_phantoms(phantoms);
  std::vector<const Phantom*> used;
  for (const Phantom* p : sorted)
    if (std::any_of(rows.begin(), rows.end(), [&](const AnnotationRow& r) { return r.case_id == p->case_id(); }))
      used.push_back(p);
  for (const auto& r : rows)
    if (std::none_of(used.begin(), used.end(), [&](const Phantom* p) { return p->case_id() == r.case_id; }))
      throw ValidationError("annotation refers to unknown case '" + r.case_id + "'");
  DatasetManifest m = start_manifest(DatasetTask::classification, used, detector, out_dir);
  for (const Phantom* p : used) {
    const DrrRenderer renderer(*p);
    detail::ensure_directory(out_dir / "images" / p->case_id());
    int index = 0;
    for (const auto& row : rows) {
      if (row.case_id != p->case_id()) continue;
      std::string rel = "images/" + p->case_id() + "/a" + three_digits(index++) + "_l" + two_digits(row.landmark_id) + ".png";
      ManifestRecord r = render_record(*p, renderer, row.pose, detector, out_dir, std::move(rel));
      r.label = row.landmark_id;
      m.records.push_back(std::move(r));
    }
  }
  write_manifest(m, out_dir / kManifestFile);
  return m;
}

DatasetManifest split_by_case(const DatasetManifest& manifest, int test_case_count, std::uint64_t seed) {
  std::vector<std::string> ids = manifest.case_ids();
  if (test_case_count < 0) throw ValidationError("test_case_count must be non-negative");
  if (static_cast<std::size_t>(test_case_count) >= ids.size())
    throw ValidationError("test_case_count " + std::to_string(test_case_count) + " must be less than the " +
                          std::to_string(ids.size()) + " cases");
  std::mt19937_64 rng(seed);
  shuffle_in_place(ids, rng);
  const std::set<std::string> test(ids.begin(), ids.begin() + test_case_count);
  DatasetManifest out = manifest;
  for (auto& r : out.records) r.split = test.count(r.case_id) ? Split::test : Split::train;
  return out;
}

void AugmentationConfig::validate() const {
  if (!(jitter_strength >= 0) || !std::isfinite(jitter_strength))
    throw ValidationError("jitter_strength must be non-negative");
  if (posterize_levels < 2) throw ValidationError("posterize_levels must be at least 2");
}

DrrImage augment(const DrrImage& image, const AugmentationConfig& config) {
  config.validate();
  DrrImage out = image;
  auto& px = out.pixels;
  if (config.jitter_strength > 0) {
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> factor(1.0 - config.jitter_strength, 1.0 + config.jitter_strength);
    const double brightness = std::max(0.0, factor(rng));
    const double contrast = std::max(0.0, factor(rng));
    const double gamma = std::max(1e-3, factor(rng));
    for (auto& p : px) p = static_cast<float>(clamp01(p * brightness));
    double mean = 0;
    for (float p : px) mean += p;
    mean /= static_cast<double>(px.size());
    for (auto& p : px) p = static_cast<float>(clamp01((p - mean) * contrast + mean));
    for (auto& p : px) p = static_cast<float>(std::pow(static_cast<double>(p), gamma));
  }
  if (config.posterize_levels <= (std::int64_t(1) << 24)) {
    const double levels = static_cast<double>(config.posterize_levels);
    for (auto& p : px) p = static_cast<float>(std::floor(static_cast<double>(p) * levels) / levels);
  }
  for (auto& p : px) p = static_cast<float>(clamp01(p));
  return out;
}

std::uint64_t augmentation_seed(std::uint64_t seed, int epoch, std::size_t record_index) {
  Fnv1a h;
  h.update(&seed, sizeof seed);
  h.update(&epoch, sizeof epoch);
  const std::uint64_t idx = record_index;
  h.update(&idx, sizeof idx);
  return h.digest();
}

}  // namespace carm
