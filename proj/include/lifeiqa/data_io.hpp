#pragma once

#include "lifeiqa/decoder.hpp"
#include "lifeiqa/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace lifeiqa {

/// Backbone features and MOS label of one image.
struct FeatureRecord {
  std::string id;
  Tensor stage3;  // h3×w3×C3
  Tensor stage4;  // h4×w4×C4
  double mos = 0.0;

  StageFeatures features() const { return {stage3, stage4}; }
};

/// LIFQ feature file (little-endian):
///   "LIFQ" | u16 version=1 | u8 tensor count=2
///   per tensor: u8 dtype (1=float32) | u8 ndim | u32 dims[ndim] | float32 values, row-major
///   f64 mos | u16 id length | id bytes (UTF-8)
///
/// Tensors are narrowed to float32 on write.
void write_feature_file(const FeatureRecord& record, const std::filesystem::path& path);
FeatureRecord read_feature_file(const std::filesystem::path& path);

/// Exact byte size of a LIFQ file for the given stage shapes and id.
std::size_t feature_file_size(const Shape& stage3, const Shape& stage4, std::size_t id_bytes);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest directory unless absolute
  double mos = 0.0;
};

struct Manifest {
  int version = 1;
  std::vector<ManifestEntry> records;
  nlohmann::json metadata = nlohmann::json::object();
  /// Directory the manifest was read from; not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& entry) const;
  FeatureRecord load(const ManifestEntry& entry) const;
  const ManifestEntry& find(const std::string& id) const;
};

nlohmann::json to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
/// Reads and validates a manifest: ids unique, every referenced file present.
Manifest read_manifest(const std::filesystem::path& path);

struct SplitSpec {
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::uint32_t run_index = 0;
};

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Deterministic shuffle keyed by (seed, run_index); the first
/// floor(train_fraction·n) ids are training ids.
Split split(const Manifest& manifest, const SplitSpec& spec);

struct SynthDims {
  std::size_t h3 = 14, w3 = 14, c3 = 16;
  std::size_t h4 = 7, w4 = 7, c4 = 32;
};

/// Parses "h3,w3,c3,h4,w4,c4".
SynthDims parse_synth_dims(const std::string& text);

/// Planted label: 50 + 25·tanh(3·mean4 + 2·mean3 + mean4²).
double planted_mos(double mean_stage4, double mean_stage3);
/// planted_mos evaluated on the means of a record's tensors.
double planted_mos(const Tensor& stage3, const Tensor& stage4);

/// Lower/upper bounds of the planted label, recorded in synthetic manifest metadata.
inline constexpr double kPlantedMosMin = 25.0;
inline constexpr double kPlantedMosMax = 75.0;

/// Samples `count` Gaussian feature records (a per-record mean offset plus
/// unit noise), labels them with the planted function, writes one LIFQ file
/// per record and `manifest.json` into `out_dir`.
Manifest synth_generate(std::size_t count, std::uint64_t seed, const SynthDims& dims,
                        const std::filesystem::path& out_dir);

/// Median; even counts average the two central values. Throws on empty input.
double median_of_runs(std::span<const double> values);

/// Named float64 tensor container used for checkpoints:
///   "LIFC" | u16 version=1 | u32 tensor count | u32 metadata length | metadata JSON
///   per tensor: u16 name length | name | u8 dtype (2=float64) | u8 ndim | u32 dims[ndim] | f64 values
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace lifeiqa
