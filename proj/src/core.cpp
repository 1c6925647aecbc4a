#include "dermfoundry/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace dermfoundry {

// ---------------------------------------------------------------------------
// ImageGrid
// ---------------------------------------------------------------------------

ImageGrid::ImageGrid(int c, int h, int w, double fill)
    : channels(c), height(h), width(w),
      pixels(static_cast<std::size_t>(c) * h * w, fill) {}

bool ImageGrid::valid() const {
  if (height < 1 || width < 1) return false;
  if (channels != 1 && channels != 3) return false;
  if (pixels.size() != static_cast<std::size_t>(channels) * height * width)
    return false;
  for (double v : pixels)
    if (!std::isfinite(v)) return false;
  return true;
}

ImageGrid load_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ValidationError("cannot decode image: " + path);
  if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2BGR);
  if (m.depth() != CV_8U) m.convertTo(m, CV_8U);
  const int c = m.channels() == 1 ? 1 : 3;
  ImageGrid img(c, m.rows, m.cols);
  img.source_path = path;
  for (int y = 0; y < m.rows; ++y) {
    const unsigned char* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (c == 1) {
        img.at(0, y, x) = row[x] / 255.0;
      } else {
        // OpenCV stores BGR
        img.at(0, y, x) = row[3 * x + 2] / 255.0;
        img.at(1, y, x) = row[3 * x + 1] / 255.0;
        img.at(2, y, x) = row[3 * x + 0] / 255.0;
      }
    }
  }
  return img;
}

void save_image(const ImageGrid& img, const std::string& path) {
  cv::Mat m(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    unsigned char* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < img.width; ++x) {
      auto q = [&](int c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        return static_cast<unsigned char>(std::lround(v * 255.0));
      };
      if (img.channels == 1) {
        row[x] = q(0);
      } else {
        row[3 * x + 0] = q(2);
        row[3 * x + 1] = q(1);
        row[3 * x + 2] = q(0);
      }
    }
  }
  if (!cv::imwrite(path, m))
    throw std::runtime_error("cannot write image: " + path);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  out.push_back(field);
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

int CsvTable::require_column(const std::string& name) const {
  const int c = column(name);
  if (c < 0) throw SchemaError("missing required column: " + name);
  return c;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open file: " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line) || line.empty())
    throw SchemaError("empty file or missing header row: " + path);
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    fields.resize(t.header.size());
    t.rows.push_back(std::move(fields));
  }
  return t;
}

void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  for (std::size_t i = 0; i < t.header.size(); ++i)
    out << (i ? "," : "") << csv_escape(t.header[i]);
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i)
      out << (i ? "," : "") << csv_escape(row[i]);
    out << '\n';
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a_bytes(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("unknown group value: '" + s + "' (want train|val|test)");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

std::vector<const ManifestRow*> Manifest::split(Split s) const {
  std::vector<const ManifestRow*> out;
  for (const auto& r : rows)
    if (r.group == s) out.push_back(&r);
  return out;
}

Manifest load_manifest(const std::string& path) {
  const CsvTable t = read_csv(path);
  const int ci = t.require_column("image_ref");
  const int cg = t.require_column("group");
  const int cl = t.column("label");
  const int cp = t.column("patient_id");

  Manifest m;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    const std::string& h = t.header[i];
    if (h != "image_ref" && h != "group" && h != "label" && h != "patient_id")
      m.extra_columns.push_back(h);
  }

  std::set<std::string> seen;
  std::set<int> labels;
  for (const auto& row : t.rows) {
    ManifestRow r;
    r.image_ref = row[ci];
    if (r.image_ref.empty())
      throw ValidationError("empty image_ref in manifest row");
    if (!seen.insert(r.image_ref).second)
      throw ValidationError("duplicate image_ref: " + r.image_ref);
    r.group = parse_split(row[cg]);
    if (cl >= 0 && !row[cl].empty()) {
      int v = 0;
      const auto res =
          std::from_chars(row[cl].data(), row[cl].data() + row[cl].size(), v);
      if (res.ec != std::errc() || res.ptr != row[cl].data() + row[cl].size())
        throw ValidationError("non-integer label: '" + row[cl] + "'");
      r.label = v;
      labels.insert(v);
    }
    if (cp >= 0 && !row[cp].empty()) r.patient_id = row[cp];
    for (const auto& name : m.extra_columns) {
      const int c = t.column(name);
      r.extras[name] = row[c];
    }
    m.rows.push_back(std::move(r));
  }

  if (!labels.empty()) {
    int expect = 0;
    for (int v : labels) {
      if (v != expect)
        throw ValidationError(
            "label ids must be contiguous from 0; found gap before id " +
            std::to_string(v));
      ++expect;
    }
    m.num_classes = expect;
  }
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  CsvTable t;
  t.header = {"image_ref", "label", "patient_id", "group"};
  for (const auto& e : m.extra_columns) t.header.push_back(e);
  for (const auto& r : m.rows) {
    std::vector<std::string> row = {
        r.image_ref, r.label ? std::to_string(*r.label) : "",
        r.patient_id.value_or(""), split_name(r.group)};
    for (const auto& e : m.extra_columns) {
      auto it = r.extras.find(e);
      row.push_back(it == r.extras.end() ? "" : it->second);
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::string resolve_data_path(const std::string& ref,
                              const std::string& manifest_dir) {
  if (fs::path(ref).is_absolute()) return ref;
  if (const char* root = std::getenv("DERMFOUNDRY_DATA")) {
    const fs::path p = fs::path(root) / ref;
    if (fs::exists(p)) return p.string();
  }
  return (fs::path(manifest_dir) / ref).string();
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

Config::Config() : j_(new json(json::object())) {}
Config::Config(const json& j) : j_(new json(j)) {
  if (!j_->is_object()) throw ConfigError("config root must be a JSON object");
}
Config::~Config() { delete j_; }
Config::Config(const Config& o) : j_(new json(*o.j_)) {}
Config& Config::operator=(const Config& o) {
  if (this != &o) *j_ = *o.j_;
  return *this;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return Config(j);
}

bool Config::has(const std::string& key) const { return j_->contains(key); }

double Config::number(const std::string& key, double def) const {
  if (!j_->contains(key)) return def;
  const auto& v = (*j_)[key];
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be numeric");
  return v.get<double>();
}

int Config::integer(const std::string& key, int def) const {
  if (!j_->contains(key)) return def;
  const auto& v = (*j_)[key];
  if (!v.is_number_integer())
    throw ConfigError("config key '" + key + "' must be an integer");
  return v.get<int>();
}

std::string Config::str(const std::string& key, const std::string& def) const {
  if (!j_->contains(key)) return def;
  const auto& v = (*j_)[key];
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

bool Config::boolean(const std::string& key, bool def) const {
  if (!j_->contains(key)) return def;
  const auto& v = (*j_)[key];
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
  return v.get<bool>();
}

void Config::set(const std::string& key, const nlohmann::json& v) { (*j_)[key] = v; }

void Config::validate_keys(const std::vector<std::string>& allowed) const {
  for (auto it = j_->begin(); it != j_->end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown config key: '" + it.key() + "'");
  }
}

std::string Config::canonical_dump() const { return j_->dump(); }

std::string Config::hash() const {
  const std::string d = canonical_dump();
  return to_hex(fnv1a_bytes(d.data(), d.size()));
}

const nlohmann::json& Config::object() const { return *j_; }

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kWeightsMagic[4] = {'D', 'F', 'W', '1'};

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CorruptionError("truncated weights file");
  return v;
}

std::string weights_checksum(const StateDict& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& a : state) {
    h ^= fnv1a_bytes(a.name.data(), a.name.size());
    h *= 0x100000001b3ULL;
    h ^= fnv1a_bytes(a.data.data(), a.data.size() * sizeof(double));
    h *= 0x100000001b3ULL;
  }
  return to_hex(h);
}

}  // namespace

std::string save_checkpoint(const StateDict& state, const Sidecar& sidecar,
                            const std::string& dir) {
  ensure_dir(dir);
  const fs::path wpath = fs::path(dir) / "weights.bin";
  {
    std::ofstream out(wpath, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + wpath.string());
    out.write(kWeightsMagic, 4);
    write_raw(out, static_cast<std::uint32_t>(state.size()));
    for (const auto& a : state) {
      write_raw(out, static_cast<std::uint32_t>(a.name.size()));
      out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      write_raw(out, static_cast<std::uint32_t>(a.shape.size()));
      for (auto d : a.shape) write_raw(out, static_cast<std::int64_t>(d));
      write_raw(out, static_cast<std::uint64_t>(a.data.size()));
      out.write(reinterpret_cast<const char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
  }
  json side;
  side["config_hash"] = sidecar.config_hash;
  side["epoch"] = sidecar.epoch;
  side["metrics"] = sidecar.metrics;
  side["weights_checksum"] = weights_checksum(state);
  side["arch"] = sidecar.arch;
  std::ofstream sout(fs::path(dir) / "sidecar.json");
  sout << side.dump(2) << '\n';
  return dir;
}

std::pair<StateDict, Sidecar> load_checkpoint(const std::string& dir) {
  const fs::path wpath = fs::path(dir) / "weights.bin";
  std::ifstream in(wpath, std::ios::binary);
  if (!in) throw ValidationError("missing weights file: " + wpath.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kWeightsMagic, 4) != 0)
    throw CorruptionError("bad weights magic in " + wpath.string());
  const auto count = read_raw<std::uint32_t>(in);
  StateDict state;
  state.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto nlen = read_raw<std::uint32_t>(in);
    a.name.resize(nlen);
    in.read(a.name.data(), nlen);
    const auto ndim = read_raw<std::uint32_t>(in);
    a.shape.resize(ndim);
    for (auto& d : a.shape) d = read_raw<std::int64_t>(in);
    const auto len = read_raw<std::uint64_t>(in);
    a.data.resize(len);
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(len * sizeof(double)));
    if (!in) throw CorruptionError("truncated weights file");
    state.push_back(std::move(a));
  }

  std::ifstream sin(fs::path(dir) / "sidecar.json");
  if (!sin) throw ValidationError("missing sidecar.json in " + dir);
  json side;
  sin >> side;
  Sidecar sc;
  sc.config_hash = side.value("config_hash", "");
  sc.epoch = side.value("epoch", 0);
  if (side.contains("metrics"))
    sc.metrics = side["metrics"].get<std::map<std::string, double>>();
  sc.weights_checksum = side.value("weights_checksum", "");
  if (side.contains("arch"))
    sc.arch = side["arch"].get<std::map<std::string, std::string>>();

  if (sc.weights_checksum != weights_checksum(state))
    throw CorruptionError("weights checksum mismatch in " + dir);
  return {std::move(state), std::move(sc)};
}

std::pair<StateDict, Sidecar> load_checkpoint(
    const std::string& dir, const std::string& expected_config_hash) {
  auto loaded = load_checkpoint(dir);
  if (loaded.second.config_hash != expected_config_hash)
    throw CorruptionError("sidecar config hash mismatch in " + dir +
                          " (expected " + expected_config_hash + ", found " +
                          loaded.second.config_hash + ")");
  return loaded;
}

}  // namespace dermfoundry
