#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dermfoundry {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps Validation/Schema/Config/Shape to exit 2 and
// everything else to exit 3.
// ---------------------------------------------------------------------------
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaError : ValidationError {
  using ValidationError::ValidationError;
};
struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// ImageGrid: decoded raster, channels x height x width, values in [0,1].
// ---------------------------------------------------------------------------
struct ImageGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // [c][y][x], row-major within channel
  std::string source_path;

  ImageGrid() = default;
  ImageGrid(int c, int h, int w, double fill = 0.0);

  double& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool valid() const;  // shape invariants + finite values
};

// Decode an image file (PNG/JPEG/...) into RGB or grayscale [0,1].
ImageGrid load_image(const std::string& path);
void save_image(const ImageGrid& img, const std::string& path);

// ---------------------------------------------------------------------------
// Manifest: dataset index loaded from a header CSV. Required columns are
// image_ref and group; label and patient_id are optional; any other column
// lands in extras.
// ---------------------------------------------------------------------------
enum class Split { kTrain, kVal, kTest };
Split parse_split(const std::string& s);
std::string split_name(Split s);

struct ManifestRow {
  std::string image_ref;
  std::optional<int> label;
  std::optional<std::string> patient_id;
  Split group = Split::kTrain;
  std::map<std::string, std::string> extras;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  int num_classes = 0;  // 0 when no labels present
  std::vector<std::string> extra_columns;

  std::vector<const ManifestRow*> split(Split s) const;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

// Resolve image_ref against the manifest location / DERMFOUNDRY_DATA.
std::string resolve_data_path(const std::string& ref,
                              const std::string& manifest_dir);

// ---------------------------------------------------------------------------
// RunConfig: seed + task + free-form hyperparameters validated against the
// task schema by the CLI layer.
// ---------------------------------------------------------------------------
struct RunConfig {
  std::uint64_t seed = 0;
  std::string task;
  nlohmann::json* hyper = nullptr;  // owned via holder below
  std::string output_dir;
};

// JSON-backed config holder with typed access and unknown-key validation.
class Config {
 public:
  Config();
  explicit Config(const nlohmann::json& j);
  ~Config();
  Config(const Config&);
  Config& operator=(const Config&);

  static Config from_file(const std::string& path);

  bool has(const std::string& key) const;
  double number(const std::string& key, double def) const;
  int integer(const std::string& key, int def) const;
  std::string str(const std::string& key, const std::string& def) const;
  bool boolean(const std::string& key, bool def) const;
  void set(const std::string& key, const nlohmann::json& v);

  // Throws ConfigError naming the first key not in `allowed`.
  void validate_keys(const std::vector<std::string>& allowed) const;

  std::string canonical_dump() const;  // sorted keys, stable float format
  std::string hash() const;            // fnv1a-64 hex of canonical dump
  const nlohmann::json& object() const;

 private:
  nlohmann::json* j_;
};

// ---------------------------------------------------------------------------
// Checkpoint: directory with weights.bin (named double arrays) and
// sidecar.json (config hash, epoch, metric snapshot, weights checksum).
// ---------------------------------------------------------------------------
struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;
};
using StateDict = std::vector<NamedArray>;

struct Sidecar {
  std::string config_hash;
  int epoch = 0;
  std::map<std::string, double> metrics;
  std::string weights_checksum;
  std::map<std::string, std::string> arch;  // architecture summary
};

std::string save_checkpoint(const StateDict& state, const Sidecar& sidecar,
                            const std::string& dir);
std::pair<StateDict, Sidecar> load_checkpoint(const std::string& dir);
// As above but also verifies the sidecar config hash.
std::pair<StateDict, Sidecar> load_checkpoint(const std::string& dir,
                                              const std::string& expected_config_hash);

// ---------------------------------------------------------------------------
// CSV helpers (header row + quoted fields).
// ---------------------------------------------------------------------------
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
  int require_column(const std::string& name) const;  // SchemaError when absent
};

CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const CsvTable& t);
std::string format_double(double v);  // stable shortest round-trip format

std::uint64_t fnv1a_bytes(const void* data, std::size_t len);
std::string to_hex(std::uint64_t v);

// mkdir -p
void ensure_dir(const std::string& dir);

}  // namespace dermfoundry
