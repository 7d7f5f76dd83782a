#include "lifeiqa/data_io.hpp"

#include "lifeiqa/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace lifeiqa {

namespace {

constexpr char kFeatureMagic[4] = {'L', 'I', 'F', 'Q'};
constexpr char kCheckpointMagic[4] = {'L', 'I', 'F', 'C'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 1;
constexpr std::uint8_t kFloat64 = 2;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  void raw(void* p, std::size_t n, const char* field) {
    need(n, field);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T le(const char* field) {
    need(sizeof(T), field);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float f32(const char* field) { return std::bit_cast<float>(le<std::uint32_t>(field)); }
  double f64(const char* field) { return std::bit_cast<double>(le<std::uint64_t>(field)); }
  std::string str(std::size_t n, const char* field) {
    need(n, field);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(source_ + ": " + what); }

 private:
  void need(std::size_t n, const char* field) const {
    if (pos_ + n > bytes_.size()) fail(std::string("truncated while reading ") + field);
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
  std::string source_;
};

std::vector<char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_shape(ByteWriter& w, std::uint8_t dtype, const Shape& shape) {
  if (shape.size() > 255) throw DimensionError("tensor rank exceeds 255");
  w.le<std::uint8_t>(dtype);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) {
    if (d > 0xFFFFFFFFu) throw DimensionError("dimension exceeds u32");
    w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
  }
}

Shape read_shape(ByteReader& r, std::uint8_t expected_dtype, const std::string& label) {
  const auto dtype = r.le<std::uint8_t>("dtype");
  if (dtype != expected_dtype)
    r.fail("dtype of " + label + " is " + std::to_string(dtype) + ", expected " + std::to_string(expected_dtype));
  const auto ndim = r.le<std::uint8_t>("ndim");
  Shape shape(ndim);
  for (auto& d : shape) d = r.le<std::uint32_t>("dims");
  return shape;
}

void write_f32_tensor(ByteWriter& w, const Tensor& t) {
  write_shape(w, kFloat32, t.shape());
  for (double v : t.values()) w.f32(static_cast<float>(v));
}

Tensor read_f32_tensor(ByteReader& r, const std::string& label) {
  Shape shape = read_shape(r, kFloat32, label);
  Tensor t(shape);
  for (double& v : t.values()) v = static_cast<double>(r.f32("tensor values"));
  return t;
}

double tensor_mean(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return t.empty() ? 0.0 : s / static_cast<double>(t.size());
}

}  // namespace

void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

// ---- LIFQ ------------------------------------------------------------------

void write_feature_file(const FeatureRecord& record, const fs::path& path) {
  if (record.id.size() > 0xFFFF) throw std::invalid_argument("record id longer than 65535 bytes");
  ByteWriter w;
  w.raw(kFeatureMagic, 4);
  w.le<std::uint16_t>(kVersion);
  w.le<std::uint8_t>(2);
  write_f32_tensor(w, record.stage3);
  write_f32_tensor(w, record.stage4);
  w.f64(record.mos);
  w.le<std::uint16_t>(static_cast<std::uint16_t>(record.id.size()));
  w.raw(record.id.data(), record.id.size());
  try {
    write_file_atomic(path, std::span<const char>(w.bytes()));
  } catch (const std::exception& e) {
    throw std::runtime_error("writing feature file " + path.string() + ": " + e.what());
  }
}

FeatureRecord read_feature_file(const fs::path& path) {
  ByteReader r(slurp(path), path.string());
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kFeatureMagic, 4) != 0) r.fail("bad magic, expected \"LIFQ\"");
  const auto version = r.le<std::uint16_t>("version");
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint8_t>("tensor count");
  if (count != 2) r.fail("tensor count is " + std::to_string(count) + ", expected 2");
  FeatureRecord rec;
  rec.stage3 = read_f32_tensor(r, "stage3");
  rec.stage4 = read_f32_tensor(r, "stage4");
  rec.mos = r.f64("mos");
  const auto id_len = r.le<std::uint16_t>("id length");
  rec.id = r.str(id_len, "id");
  if (!r.at_end()) r.fail("trailing bytes after id");
  return rec;
}

std::size_t feature_file_size(const Shape& stage3, const Shape& stage4, std::size_t id_bytes) {
  auto block = [](const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return 2 + 4 * s.size() + 4 * n;
  };
  return 4 + 2 + 1 + block(stage3) + block(stage4) + 8 + 2 + id_bytes;
}

// ---- manifest --------------------------------------------------------------

fs::path Manifest::resolve(const ManifestEntry& entry) const {
  const fs::path p(entry.path);
  return p.is_absolute() ? p : base_dir / p;
}

FeatureRecord Manifest::load(const ManifestEntry& entry) const { return read_feature_file(resolve(entry)); }

const ManifestEntry& Manifest::find(const std::string& id) const {
  for (const auto& e : records)
    if (e.id == id) return e;
  throw std::out_of_range("no record with id " + id);
}

nlohmann::json to_json(const Manifest& manifest) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : manifest.records) records.push_back({{"id", e.id}, {"path", e.path}, {"mos", e.mos}});
  return {{"version", manifest.version}, {"records", records}, {"metadata", manifest.metadata}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.version = j.at("version").get<int>();
  for (const auto& r : j.at("records"))
    m.records.push_back({r.at("id").get<std::string>(), r.at("path").get<std::string>(), r.at("mos").get<double>()});
  if (j.contains("metadata")) m.metadata = j.at("metadata");
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  write_file_atomic(path, to_json(manifest).dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  m.base_dir = path.parent_path();
  std::set<std::string> ids;
  for (const auto& e : m.records) {
    if (!ids.insert(e.id).second) throw FormatError(path.string() + ": duplicate id " + e.id);
    if (!std::isfinite(e.mos)) throw FormatError(path.string() + ": non-finite mos for " + e.id);
    if (!fs::exists(m.resolve(e))) throw FormatError(path.string() + ": missing file " + m.resolve(e).string());
  }
  return m;
}

// ---- split -----------------------------------------------------------------

Split split(const Manifest& manifest, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw ConfigError("train_fraction must lie in (0, 1)");
  if (manifest.records.size() < 2) throw ConfigError("split needs at least 2 records");
  std::vector<std::string> ids;
  ids.reserve(manifest.records.size());
  for (const auto& e : manifest.records) ids.push_back(e.id);

  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    spec.run_index};
  std::mt19937_64 rng(seq);
  std::shuffle(ids.begin(), ids.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(ids.size())));
  Split s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return s;
}

// ---- synthetic data --------------------------------------------------------

SynthDims parse_synth_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    long long x = 0;
    try {
      x = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || x < 1) throw ConfigError("dims entry '" + item + "' is not a positive integer");
    v.push_back(static_cast<std::size_t>(x));
  }
  if (v.size() != 6) throw ConfigError("dims must be h3,w3,c3,h4,w4,c4");
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

double planted_mos(double mean_stage4, double mean_stage3) {
  constexpr double a = 3.0, b = 2.0, c = 1.0;
  return 50.0 + 25.0 * std::tanh(a * mean_stage4 + b * mean_stage3 + c * mean_stage4 * mean_stage4);
}

double planted_mos(const Tensor& stage3, const Tensor& stage4) {
  return planted_mos(tensor_mean(stage4), tensor_mean(stage3));
}

Manifest synth_generate(std::size_t count, std::uint64_t seed, const SynthDims& dims, const fs::path& out_dir) {
  if (count < 1) throw ConfigError("synth_generate: count must be at least 1");
  fs::create_directories(out_dir);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> offset(0.0, 0.3);
  std::normal_distribution<double> noise(0.0, 1.0);

  auto sample = [&](Shape shape, double mean) {
    Tensor t(std::move(shape));
    // Values are rounded to float32 up front so the label matches what is read back.
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(mean + noise(rng)));
    return t;
  };

  Manifest m;
  m.base_dir = out_dir;
  m.metadata = {{"generator", "synth"},
                {"seed", seed},
                {"dims", {dims.h3, dims.w3, dims.c3, dims.h4, dims.w4, dims.c4}},
                {"mos_min", kPlantedMosMin},
                {"mos_max", kPlantedMosMax}};
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%05zu", i);
    FeatureRecord rec;
    rec.id = id;
    const double mean3 = offset(rng);
    const double mean4 = offset(rng);
    rec.stage3 = sample({dims.h3, dims.w3, dims.c3}, mean3);
    rec.stage4 = sample({dims.h4, dims.w4, dims.c4}, mean4);
    rec.mos = planted_mos(rec.stage3, rec.stage4);
    const std::string file = rec.id + ".lifq";
    write_feature_file(rec, out_dir / file);
    m.records.push_back({rec.id, file, rec.mos});
  }
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

double median_of_runs(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("median_of_runs: no values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- checkpoints -----------------------------------------------------------

void write_checkpoint(const Checkpoint& checkpoint, const fs::path& path) {
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.le<std::uint16_t>(kVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  const std::string meta = checkpoint.metadata.dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  for (const auto& [name, t] : checkpoint.tensors) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    write_shape(w, kFloat64, t.shape());
    for (double v : t.values()) w.f64(v);
  }
  write_file_atomic(path, std::span<const char>(w.bytes()));
}

Checkpoint read_checkpoint(const fs::path& path) {
  ByteReader r(slurp(path), path.string());
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad magic, expected \"LIFC\"");
  const auto version = r.le<std::uint16_t>("version");
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>("tensor count");
  const auto meta_len = r.le<std::uint32_t>("metadata length");
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(r.str(meta_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("metadata is not JSON: ") + e.what());
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint16_t>("name length");
    std::string name = r.str(name_len, "name");
    Tensor t(read_shape(r, kFloat64, name));
    for (double& v : t.values()) v = r.f64("tensor values");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return ck;
}

}  // namespace lifeiqa
