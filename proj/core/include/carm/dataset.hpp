#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carm/drr.hpp"
#include "carm/geometry.hpp"
#include "carm/phantom.hpp"

namespace carm {

inline constexpr int kManifestSchemaVersion = 1;

enum class DatasetTask { regression, classification };
enum class Split { train, test };

std::string_view to_string(DatasetTask task);
DatasetTask parse_dataset_task(std::string_view text);
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

// Per-case geometry and metadata carried in the manifest header.
struct CaseInfo {
  std::string case_id;
  Vec3 extent;
  Vec3 origin;
  double table_z = 0.0;
  Demographics demographics;
  ArmPose arm_pose = ArmPose::arms_raised;

  friend bool operator==(const CaseInfo&, const CaseInfo&) = default;
};

CaseInfo case_info(const Phantom& phantom);

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory
  std::string case_id;
  ArmPose arm_pose = ArmPose::arms_raised;
  CarmPose pose_mm;
  Vec3 pose_raw;
  std::optional<int> label;  // landmark id, classification only
  Split split = Split::train;
  bool clamped = false;  // pose fell outside the extent and was clamped

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  int schema_version = kManifestSchemaVersion;
  DatasetTask task = DatasetTask::regression;
  DetectorSpec detector;
  std::vector<CaseInfo> cases;  // sorted by case_id
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // directory image paths resolve against; not serialised

  const CaseInfo& case_info(std::string_view case_id) const;
  std::vector<std::string> case_ids(std::optional<Split> split = std::nullopt) const;
  std::vector<const ManifestRecord*> select(Split split) const;
  std::filesystem::path image_file(const ManifestRecord& record) const { return root / record.image_path; }

  // Checks the manifest's own invariants: raw/mm consistency, label presence,
  // known cases and split disjointness. Throws ValidationError.
  void validate() const;
  // FNV-1a of the canonical text form.
  std::uint64_t content_hash() const;
};

// Canonical line-delimited text: a header object, then one record per line.
std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

inline constexpr const char* kManifestFile = "manifest.jsonl";

// Grid over the phantom's (x, y) extent. Each axis holds
// floor(extent / spacing) + 1 points, centred in the extent, so extents that
// are multiples of the spacing include both boundary lines and a spacing
// beyond the extent gives the single central point. Row-major (y outer).
std::vector<CarmPose> make_grid_poses(const Phantom& phantom, double spacing_mm);
int grid_count(double extent_mm, double spacing_mm);

struct NormalizedPose {
  Vec3 raw;
  bool clamped = false;
};

// (pose - origin) / extent componentwise, clamped to [0, 1].
NormalizedPose normalize_pose(const CarmPose& pose, Vec3 extent, Vec3 origin);
CarmPose denormalize_pose(Vec3 raw, Vec3 extent, Vec3 origin);

DatasetManifest build_regression_dataset(const std::vector<Phantom>& phantoms, double spacing_mm,
                                         const std::filesystem::path& out_dir, const DetectorSpec& detector = {});

// Landmark-centred images with uniform in-plane jitter in [-jitter, +jitter]^2.
DatasetManifest build_classification_dataset(const std::vector<Phantom>& phantoms, double jitter_mm,
                                             int samples_per_landmark, std::uint64_t seed,
                                             const std::filesystem::path& out_dir, const DetectorSpec& detector = {});

// One annotated landmark position, as exported by the annotation service.
struct AnnotationRow {
  std::string case_id;
  int landmark_id = 0;
  std::string landmark_name;
  CarmPose pose;
  std::string annotator_id;

  friend bool operator==(const AnnotationRow&, const AnnotationRow&) = default;
};

std::string format_annotation_export(const std::vector<AnnotationRow>& rows);
std::vector<AnnotationRow> parse_annotation_export(std::string_view text);

// Classification records centred exactly at annotated poses (the zero-jitter
// path), one per row, in row order per case.
DatasetManifest build_annotation_dataset(const std::vector<Phantom>& phantoms, const std::vector<AnnotationRow>& rows,
                                         const std::filesystem::path& out_dir, const DetectorSpec& detector = {});

// Moves `test_case_count` whole cases, chosen by seed, to the test split and
// the rest to train.
DatasetManifest split_by_case(const DatasetManifest& manifest, int test_case_count, std::uint64_t seed);

struct AugmentationConfig {
  double jitter_strength = 0.2;
  std::int64_t posterize_levels = 16;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const AugmentationConfig&, const AugmentationConfig&) = default;
};

// Brightness, contrast and gamma jitter drawn from
// [1 - strength, 1 + strength], then posterize p -> floor(p * L) / L, clamped
// to [0, 1]. Levels beyond 2^24 leave float pixels unchanged and are skipped.
DrrImage augment(const DrrImage& image, const AugmentationConfig& config);

// Per-sample augmentation seed for a training pass.
std::uint64_t augmentation_seed(std::uint64_t seed, int epoch, std::size_t record_index);

}  // namespace carm
