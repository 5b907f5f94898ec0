#include "voxsem/store.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace voxsem {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are not supported");

namespace {

// --- strict text-value parsing ----------------------------------------------

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& what, const std::string& text) {
  throw std::invalid_argument("bad " + what + " value: '" + text + "'");
}

long long parse_i64(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0') bad_value("integer", s);
  return v;
}

int parse_int(const std::string& s) {
  const long long v = parse_i64(s);
  if (v < INT32_MIN || v > INT32_MAX) bad_value("integer", s);
  return static_cast<int>(v);
}

uint64_t parse_u64(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  if (!s.empty() && s[0] == '-') bad_value("unsigned integer", s);
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0') bad_value("unsigned integer", s);
  return v;
}

double parse_f64(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  // Underflow to a subnormal is fine (it is still the nearest double);
  // overflow and inf/nan literals are not: no valid artifact contains them.
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) bad_value("number", s);
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  bad_value("boolean", s);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(parse_int(trim(item)));
  if (!s.empty() && s.back() == ',') bad_value("integer list", s);
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Splits a whitespace-separated record into tokens.
std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// --- key dispatch shared by config files, overrides, and checkpoints --------

bool apply_data_key(DataConfig& c, const std::string& key, const std::string& v) {
  if (key == "num_classes") c.num_classes = parse_int(v);
  else if (key == "instances_per_class") c.instances_per_class = parse_int(v);
  else if (key == "num_views") c.num_views = parse_int(v);
  else if (key == "resolution") c.resolution = parse_int(v);
  else if (key == "max_shift") c.max_shift = parse_int(v);
  else if (key == "noise_rate") c.noise_rate = parse_f64(v);
  else if (key == "camera_distance_factor") c.camera_distance_factor = parse_f64(v);
  else if (key == "camera_elevation_deg") c.camera_elevation_deg = parse_f64(v);
  else if (key == "test_instances_per_class") c.test_instances_per_class = parse_int(v);
  else return false;
  return true;
}

bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "dim_c") c.dims.c = parse_int(v);
  else if (key == "dim_i") c.dims.i = parse_int(v);
  else if (key == "dim_v") c.dims.v = parse_int(v);
  else if (key == "dim_t") c.dims.t = parse_int(v);
  else if (key == "resolution") c.resolution = parse_int(v);
  else if (key == "conv_channels") c.conv_channels = parse_int_list(v);
  else if (key == "dense_hidden") c.dense_hidden = parse_int(v);
  else if (key == "prior_hidden") c.prior_hidden = parse_int(v);
  else if (key == "dropout_rate") c.dropout_rate = parse_f64(v);
  else if (key == "n_samples") c.n_samples = parse_int(v);
  else if (key == "delta_c") c.delta_c = parse_f64(v);
  else if (key == "delta_i") c.delta_i = parse_f64(v);
  else if (key == "delta_v") c.delta_v = parse_f64(v);
  else if (key == "delta_t") c.delta_t = parse_f64(v);
  else if (key == "lambda_rg") c.lambda_rg = parse_f64(v);
  else if (key == "lr") c.lr = parse_f64(v);
  else if (key == "beta1") c.beta1 = parse_f64(v);
  else if (key == "beta2") c.beta2 = parse_f64(v);
  else if (key == "adam_eps") c.adam_eps = parse_f64(v);
  else if (key == "epochs") c.epochs = parse_int(v);
  else if (key == "batch_size") c.batch_size = parse_int(v);
  else if (key == "prob_eps") c.prob_eps = parse_f64(v);
  else if (key == "seed") c.seed = parse_u64(v);
  else return false;
  return true;
}

bool apply_slam_key(SlamConfig& c, const std::string& key, const std::string& v) {
  if (key == "num_landmarks") c.num_landmarks = parse_int(v);
  else if (key == "num_keyframes") c.num_keyframes = parse_int(v);
  else if (key == "loop_radius") c.loop_radius = parse_f64(v);
  else if (key == "sensor_range") c.sensor_range = parse_f64(v);
  else if (key == "sigma_p") c.sigma_p = parse_f64(v);
  else if (key == "sigma_f") c.sigma_f = parse_f64(v);
  else if (key == "sigma_odom_pos") c.sigma_odom_pos = parse_f64(v);
  else if (key == "sigma_odom_yaw") c.sigma_odom_yaw = parse_f64(v);
  else if (key == "assoc_cap") c.assoc_cap = parse_i64(v);
  else if (key == "injective") c.injective = parse_bool(v);
  else if (key == "max_iters") c.max_iters = parse_int(v);
  else if (key == "tol") c.tol = parse_f64(v);
  else if (key == "gn_max_iters") c.gn_max_iters = parse_int(v);
  else if (key == "gn_tol") c.gn_tol = parse_f64(v);
  else return false;
  return true;
}

void format_data(std::ostringstream& o, const DataConfig& c) {
  o << "data.num_classes = " << c.num_classes << '\n'
    << "data.instances_per_class = " << c.instances_per_class << '\n'
    << "data.num_views = " << c.num_views << '\n'
    << "data.resolution = " << c.resolution << '\n'
    << "data.max_shift = " << c.max_shift << '\n'
    << "data.noise_rate = " << format_double(c.noise_rate) << '\n'
    << "data.camera_distance_factor = " << format_double(c.camera_distance_factor) << '\n'
    << "data.camera_elevation_deg = " << format_double(c.camera_elevation_deg) << '\n'
    << "data.test_instances_per_class = " << c.test_instances_per_class << '\n';
}

void format_train(std::ostringstream& o, const TrainConfig& c) {
  o << "train.dim_c = " << c.dims.c << '\n'
    << "train.dim_i = " << c.dims.i << '\n'
    << "train.dim_v = " << c.dims.v << '\n'
    << "train.dim_t = " << c.dims.t << '\n'
    << "train.resolution = " << c.resolution << '\n'
    << "train.conv_channels = " << format_int_list(c.conv_channels) << '\n'
    << "train.dense_hidden = " << c.dense_hidden << '\n'
    << "train.prior_hidden = " << c.prior_hidden << '\n'
    << "train.dropout_rate = " << format_double(c.dropout_rate) << '\n'
    << "train.n_samples = " << c.n_samples << '\n'
    << "train.delta_c = " << format_double(c.delta_c) << '\n'
    << "train.delta_i = " << format_double(c.delta_i) << '\n'
    << "train.delta_v = " << format_double(c.delta_v) << '\n'
    << "train.delta_t = " << format_double(c.delta_t) << '\n'
    << "train.lambda_rg = " << format_double(c.lambda_rg) << '\n'
    << "train.lr = " << format_double(c.lr) << '\n'
    << "train.beta1 = " << format_double(c.beta1) << '\n'
    << "train.beta2 = " << format_double(c.beta2) << '\n'
    << "train.adam_eps = " << format_double(c.adam_eps) << '\n'
    << "train.epochs = " << c.epochs << '\n'
    << "train.batch_size = " << c.batch_size << '\n'
    << "train.prob_eps = " << format_double(c.prob_eps) << '\n'
    << "train.seed = " << c.seed << '\n';
}

void format_slam(std::ostringstream& o, const SlamConfig& c) {
  o << "slam.num_landmarks = " << c.num_landmarks << '\n'
    << "slam.num_keyframes = " << c.num_keyframes << '\n'
    << "slam.loop_radius = " << format_double(c.loop_radius) << '\n'
    << "slam.sensor_range = " << format_double(c.sensor_range) << '\n'
    << "slam.sigma_p = " << format_double(c.sigma_p) << '\n'
    << "slam.sigma_f = " << format_double(c.sigma_f) << '\n'
    << "slam.sigma_odom_pos = " << format_double(c.sigma_odom_pos) << '\n'
    << "slam.sigma_odom_yaw = " << format_double(c.sigma_odom_yaw) << '\n'
    << "slam.assoc_cap = " << c.assoc_cap << '\n'
    << "slam.injective = " << (c.injective ? "true" : "false") << '\n'
    << "slam.max_iters = " << c.max_iters << '\n'
    << "slam.tol = " << format_double(c.tol) << '\n'
    << "slam.gn_max_iters = " << c.gn_max_iters << '\n'
    << "slam.gn_tol = " << format_double(c.gn_tol) << '\n';
}

// Walks `section.key = value` lines, skipping blanks and full-line comments,
// rejecting malformed lines and duplicate keys, and handing each pair to the
// consumer (which returns false for keys it does not know).
void for_each_kv(const std::string& text,
                 const std::function<bool(const std::string&, const std::string&)>& consume) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty() || key.find('.') == std::string::npos)
      throw std::invalid_argument("line " + std::to_string(lineno) + ": key must be 'section.name'");
    if (!seen.insert(key).second)
      throw std::invalid_argument("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      if (!consume(key, value))
        throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

bool apply_run_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const size_t dot = key.find('.');
  const std::string section = key.substr(0, dot);
  const std::string name = key.substr(dot + 1);
  if (section == "run") {
    if (name == "out_dir") cfg.out_dir = value;
    else if (name == "seed") cfg.seed = parse_u64(value);
    else return false;
    return true;
  }
  if (section == "data") return apply_data_key(cfg.data, name, value);
  if (section == "train") return apply_train_key(cfg.train, name, value);
  if (section == "slam") return apply_slam_key(cfg.slam, name, value);
  return false;
}

// --- files -------------------------------------------------------------------

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Offset-tracked binary writer/reader so corruption errors can name where.
struct BinWriter {
  std::ofstream f;
  explicit BinWriter(const std::string& path) : f(path, std::ios::binary) {
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
  }
  void bytes(const void* p, size_t n) { f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void i64(int64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close(const std::string& path) {
    f.flush();
    if (!f) throw std::runtime_error("write failed: " + path);
  }
};

struct BinReader {
  std::ifstream f;
  std::string path;
  uint64_t off = 0;
  explicit BinReader(const std::string& p) : f(p, std::ios::binary), path(p) {
    if (!f) throw std::runtime_error("cannot open for reading: " + p);
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(path + ": " + what + " at offset " + std::to_string(off));
  }
  void bytes(void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n) fail("truncated file");
    off += n;
  }
  uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
  uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
  int64_t i64() { int64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  std::string str(uint32_t max_len) {
    const uint32_t n = u32();
    if (n > max_len) fail("corrupt string length " + std::to_string(n));
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void expect_eof() {
    char c;
    f.read(&c, 1);
    if (f.gcount() != 0) fail("trailing bytes");
  }
};

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

// --- run configuration --------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  for_each_kv(text, [&cfg](const std::string& k, const std::string& v) {
    return apply_run_key(cfg, k, v);
  });
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  try {
    return parse_run_config(read_text_file(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

std::string format_run_config(const RunConfig& cfg) {
  std::ostringstream o;
  o << "run.out_dir = " << cfg.out_dir << '\n' << "run.seed = " << cfg.seed << '\n';
  format_data(o, cfg.data);
  format_train(o, cfg.train);
  format_slam(o, cfg.slam);
  return o.str();
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  write_text_file(path, format_run_config(cfg));
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string k = trim(key);
  if (k.find('.') == std::string::npos)
    throw std::invalid_argument("override key must be 'section.name': '" + key + "'");
  if (!apply_run_key(cfg, k, trim(value)))
    throw std::invalid_argument("unknown key '" + k + "'");
}

// --- checkpoints ---------------------------------------------------------------

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  BinWriter w(path);
  w.bytes("VSEM", 4);
  w.u32(kCheckpointVersion);

  std::ostringstream cfg;
  format_train(cfg, ckpt.config);
  cfg << "vocab.classes = " << ckpt.vocab.classes << '\n'
      << "vocab.instances = " << ckpt.vocab.instances << '\n'
      << "vocab.views = " << ckpt.vocab.views << '\n'
      << "vocab.translations = " << ckpt.vocab.translations << '\n'
      << "params.step = " << ckpt.params.step << '\n';
  w.str(cfg.str());

  w.u64(ckpt.history.size());
  for (const LossReport& h : ckpt.history) {
    w.f64(h.total);
    w.f64(h.kl);
    w.f64(h.rc);
    w.f64(h.rg);
  }

  w.u64(ckpt.params.entries.size());
  for (const auto& [name, entry] : ckpt.params.entries) {  // std::map: sorted, deterministic
    w.str(name);
    w.str(entry.group);
    w.u32(static_cast<uint32_t>(entry.value.shape.size()));
    for (int d : entry.value.shape) w.i64(d);
    for (double v : entry.value.data) w.f64(v);
  }
  w.close(path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "VSEM", 4) != 0) {
    r.off = 0;
    r.fail("bad magic (expected 'VSEM')");
  }
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.off = 4;
    r.fail("unsupported version " + std::to_string(version));
  }

  ModelCheckpoint ckpt;
  const std::string cfg_text = r.str(1u << 20);
  long step = 0;
  try {
    for_each_kv(cfg_text, [&](const std::string& key, const std::string& value) {
      const size_t dot = key.find('.');
      const std::string section = key.substr(0, dot);
      const std::string name = key.substr(dot + 1);
      if (section == "train") return apply_train_key(ckpt.config, name, value);
      if (section == "vocab") {
        if (name == "classes") ckpt.vocab.classes = parse_int(value);
        else if (name == "instances") ckpt.vocab.instances = parse_int(value);
        else if (name == "views") ckpt.vocab.views = parse_int(value);
        else if (name == "translations") ckpt.vocab.translations = parse_int(value);
        else return false;
        return true;
      }
      if (key == "params.step") {
        step = static_cast<long>(parse_i64(value));
        return true;
      }
      return false;
    });
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": corrupt config block: " + e.what());
  }

  const uint64_t n_hist = r.u64();
  if (n_hist > (1u << 24)) r.fail("corrupt history count " + std::to_string(n_hist));
  ckpt.history.resize(n_hist);
  for (LossReport& h : ckpt.history) {
    h.total = r.f64();
    h.kl = r.f64();
    h.rc = r.f64();
    h.rg = r.f64();
  }

  const uint64_t n_tensors = r.u64();
  if (n_tensors > (1u << 20)) r.fail("corrupt tensor count " + std::to_string(n_tensors));
  for (uint64_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str(1u << 16);
    const std::string group = r.str(1u << 16);
    const uint32_t rank = r.u32();
    if (rank > 8) r.fail("corrupt rank " + std::to_string(rank) + " for tensor '" + name + "'");
    std::vector<int> shape(rank);
    long numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const int64_t dim = r.i64();
      if (dim < 1 || dim > (1 << 30) || numel > (1L << 33) / dim)
        r.fail("corrupt shape for tensor '" + name + "'");
      shape[d] = static_cast<int>(dim);
      numel *= dim;
    }
    Tensor t(shape);
    for (long j = 0; j < numel; ++j) t.data[static_cast<size_t>(j)] = r.f64();
    ckpt.params.add(name, std::move(t), group);
  }
  ckpt.params.step = step;
  r.expect_eof();
  return ckpt;
}

// --- voxel grids and datasets ---------------------------------------------------

void save_voxel_grid(const std::string& path, const VoxelGrid& grid) {
  if (grid.resolution < 4) throw std::invalid_argument("save_voxel_grid: empty grid");
  BinWriter w(path);
  w.bytes("VXG1", 4);
  w.u32(static_cast<uint32_t>(grid.resolution));
  w.u32(0);  // flags
  w.u32(0);  // reserved
  const size_t n = grid.occupancy.size();
  std::vector<uint8_t> packed((n + 7) / 8, 0);
  for (size_t i = 0; i < n; ++i)
    if (grid.occupancy[i]) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  w.bytes(packed.data(), packed.size());
  w.close(path);
}

VoxelGrid load_voxel_grid(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "VXG1", 4) != 0) {
    r.off = 0;
    r.fail("bad magic (expected 'VXG1')");
  }
  const uint32_t res = r.u32();
  if (res < 4 || res > 1024) r.fail("bad resolution " + std::to_string(res));
  const uint32_t flags = r.u32();
  if (flags != 0) r.fail("unknown flags " + std::to_string(flags));
  (void)r.u32();  // reserved
  VoxelGrid g(static_cast<int>(res));
  const size_t n = g.occupancy.size();
  std::vector<uint8_t> packed((n + 7) / 8);
  r.bytes(packed.data(), packed.size());
  for (size_t i = 0; i < n; ++i) g.occupancy[i] = (packed[i / 8] >> (i % 8)) & 1u;
  for (size_t i = n; i < packed.size() * 8; ++i)
    if ((packed[i / 8] >> (i % 8)) & 1u) r.fail("nonzero padding bits");
  r.expect_eof();
  return g;
}

namespace {

std::string grid_filename(size_t index, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu_%s.vxg", index, kind);
  return buf;
}

std::string format_index_list(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_index_list(const std::string& s, int limit) {
  std::vector<int> out;
  for (const std::string& tok : split_ws(s)) {
    const int v = parse_int(tok);
    if (v < 0 || v >= limit) bad_value("index (out of range)", tok);
    out.push_back(v);
  }
  return out;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  m << "# voxsem dataset manifest\n";
  format_data(m, dataset.config);
  m << "vocab.translations = " << dataset.num_translations() << '\n';
  m << "dataset.samples = " << dataset.samples.size() << '\n';
  m << "dataset.train = " << format_index_list(dataset.train_idx) << '\n';
  m << "dataset.test = " << format_index_list(dataset.test_idx) << '\n';
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    const std::string full_file = grid_filename(i, "full");
    const std::string view_file = grid_filename(i, "view");
    m << "sample." << i << " = " << s.label.class_id << ' ' << s.label.instance_id << ' '
      << s.label.viewpoint_id << ' ' << s.label.translation_id << ' ' << (s.noisy ? 1 : 0) << ' '
      << full_file << ' ' << view_file << '\n';
    const std::filesystem::path base(dir);
    save_voxel_grid((base / full_file).string(), s.full);
    save_voxel_grid((base / view_file).string(), s.view);
  }
  write_text_file((std::filesystem::path(dir) / "manifest.txt").string(), m.str());
}

Dataset load_dataset(const std::string& dir) {
  const std::filesystem::path base(dir);
  const std::string text = read_text_file((base / "manifest.txt").string());
  Dataset ds;
  long n_samples = -1;
  std::vector<std::array<std::string, 2>> files;  // full, view per sample
  try {
    for_each_kv(text, [&](const std::string& key, const std::string& value) {
      const size_t dot = key.find('.');
      const std::string section = key.substr(0, dot);
      const std::string name = key.substr(dot + 1);
      if (section == "data") return apply_data_key(ds.config, name, value);
      if (key == "vocab.translations") {
        if (parse_int(value) != ds.num_translations())
          throw std::invalid_argument("translation count does not match data.max_shift");
        return true;
      }
      if (key == "dataset.samples") {
        n_samples = parse_i64(value);
        if (n_samples < 0 || n_samples > (1 << 24)) bad_value("sample count", value);
        ds.samples.resize(static_cast<size_t>(n_samples));
        files.resize(static_cast<size_t>(n_samples));
        return true;
      }
      if (key == "dataset.train" || key == "dataset.test") {
        if (n_samples < 0) throw std::invalid_argument("dataset.samples must come first");
        auto idx = parse_index_list(value, static_cast<int>(n_samples));
        (key == "dataset.train" ? ds.train_idx : ds.test_idx) = std::move(idx);
        return true;
      }
      if (section == "sample") {
        if (n_samples < 0) throw std::invalid_argument("dataset.samples must come first");
        const long i = parse_i64(name);
        if (i < 0 || i >= n_samples) bad_value("sample index", name);
        const auto tok = split_ws(value);
        if (tok.size() != 7) throw std::invalid_argument("sample record needs 7 fields");
        Sample& s = ds.samples[static_cast<size_t>(i)];
        s.label.class_id = parse_int(tok[0]);
        s.label.instance_id = parse_int(tok[1]);
        s.label.viewpoint_id = parse_int(tok[2]);
        s.label.translation_id = parse_int(tok[3]);
        s.noisy = parse_bool(tok[4]);
        files[static_cast<size_t>(i)] = {tok[5], tok[6]};
        return true;
      }
      return false;
    });
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error((base / "manifest.txt").string() + ": " + e.what());
  }
  if (n_samples < 0)
    throw std::runtime_error((base / "manifest.txt").string() + ": missing dataset.samples");
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    if (files[i][0].empty())
      throw std::runtime_error((base / "manifest.txt").string() + ": missing record for sample " +
                               std::to_string(i));
    ds.samples[i].full = load_voxel_grid((base / files[i][0]).string());
    ds.samples[i].view = load_voxel_grid((base / files[i][1]).string());
    if (ds.samples[i].full.resolution != ds.config.resolution ||
        ds.samples[i].view.resolution != ds.config.resolution)
      throw std::runtime_error("sample " + std::to_string(i) + ": resolution does not match config");
    const LabelTuple& l = ds.samples[i].label;
    if (l.class_id < 0 || l.class_id >= ds.config.num_classes || l.instance_id < 0 ||
        l.instance_id >= ds.config.instances_per_class || l.viewpoint_id < 0 ||
        l.viewpoint_id >= ds.config.num_views || l.translation_id < 0 ||
        l.translation_id >= ds.num_translations())
      throw std::runtime_error("sample " + std::to_string(i) + ": label outside vocabulary");
  }
  return ds;
}

// --- metrics CSV -----------------------------------------------------------------

namespace {

std::string csv_matrix_rows(const std::vector<std::vector<double>>& m) {
  std::ostringstream o;
  for (size_t i = 0; i < m.size(); ++i) {
    o << i;
    for (double v : m[i]) o << ',' << format_double(v);
    o << '\n';
  }
  return o.str();
}

std::string csv_class_header(const char* col, size_t n) {
  std::ostringstream o;
  o << "class";
  for (size_t j = 0; j < n; ++j) o << ',' << col << '_' << j;
  o << '\n';
  return o.str();
}

}  // namespace

void export_metrics(const std::string& dir, const MetricsReport& report) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);

  std::ostringstream conf;
  conf << csv_class_header("pred", report.confusion.empty() ? 0 : report.confusion[0].size());
  for (size_t i = 0; i < report.confusion.size(); ++i) {
    conf << i;
    for (long v : report.confusion[i]) conf << ',' << v;
    conf << '\n';
  }
  write_text_file((base / "confusion.csv").string(), conf.str());

  write_text_file(
      (base / "distances_euclid.csv").string(),
      csv_class_header("class", report.dist_euclid.size()) + csv_matrix_rows(report.dist_euclid));
  write_text_file(
      (base / "distances_cosine.csv").string(),
      csv_class_header("class", report.dist_cosine.size()) + csv_matrix_rows(report.dist_cosine));

  std::ostringstream pr;
  pr << "rank,recall,precision\n";
  for (size_t i = 0; i < report.pr_curve.size(); ++i)
    pr << (i + 1) << ',' << format_double(report.pr_curve[i].first) << ','
       << format_double(report.pr_curve[i].second) << '\n';
  write_text_file((base / "pr_curve.csv").string(), pr.str());

  std::ostringstream sum;
  sum << "metric,value\n";
  sum << "accuracy," << format_double(report.accuracy) << '\n';
  sum << "auc," << format_double(report.auc) << '\n';
  sum << "map," << format_double(report.map) << '\n';
  sum << "mean_retrieval_iou," << format_double(report.mean_retrieval_iou) << '\n';
  sum << "mean_intra," << format_double(report.mean_intra) << '\n';
  sum << "mean_inter," << format_double(report.mean_inter) << '\n';
  for (size_t c = 0; c < report.per_class_accuracy.size(); ++c)
    sum << "per_class_accuracy_" << c << ',' << format_double(report.per_class_accuracy[c]) << '\n';
  write_text_file((base / "summary.csv").string(), sum.str());
}

void export_em_result(const std::string& dir, const World& world, const EMResult& result) {
  if (result.poses.size() != world.true_poses.size())
    throw std::invalid_argument("export_em_result: result does not match world");
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);

  const std::vector<Pose> odo = integrate_odometry(world.true_poses[0], world.odometry);
  std::ostringstream tr;
  tr << "t,true_x,true_y,true_z,true_yaw,odom_x,odom_y,odom_z,odom_yaw,em_x,em_y,em_z,em_yaw\n";
  for (size_t t = 0; t < world.true_poses.size(); ++t) {
    tr << t;
    for (const Pose* p : {&world.true_poses[t], &odo[t], &result.poses[t]})
      tr << ',' << format_double(p->position[0]) << ',' << format_double(p->position[1]) << ','
         << format_double(p->position[2]) << ',' << format_double(p->yaw);
    tr << '\n';
  }
  write_text_file((base / "trajectory.csv").string(), tr.str());

  std::ostringstream lm;
  lm << "landmark,x,y,z,class_id,instance_id\n";
  for (size_t j = 0; j < result.landmarks.size(); ++j) {
    const Landmark& L = result.landmarks[j];
    lm << j << ',' << format_double(L.position[0]) << ',' << format_double(L.position[1]) << ','
       << format_double(L.position[2]) << ',' << L.class_id << ',' << L.instance_id << '\n';
  }
  write_text_file((base / "landmarks.csv").string(), lm.str());

  std::ostringstream nll;
  nll << "iteration,expected_nll\n";
  for (size_t i = 0; i < result.nll_history.size(); ++i)
    nll << (i + 1) << ',' << format_double(result.nll_history[i]) << '\n';
  write_text_file((base / "nll.csv").string(), nll.str());

  std::ostringstream sum;
  sum << "metric,value\n";
  sum << "iterations," << result.iterations << '\n';
  sum << "final_nll,"
      << format_double(result.nll_history.empty() ? 0.0 : result.nll_history.back()) << '\n';
  sum << "pose_rmse," << format_double(result.pose_rmse) << '\n';
  sum << "odometry_rmse," << format_double(result.odometry_rmse) << '\n';
  sum << "landmark_rmse," << format_double(result.landmark_rmse) << '\n';
  sum << "label_accuracy," << format_double(result.label_accuracy) << '\n';
  write_text_file((base / "em_summary.csv").string(), sum.str());
}

void save_weights_csv(const std::string& path, const WeightMatrix& weights) {
  std::ostringstream o;
  o << "t,detection,landmark,weight\n";
  for (size_t t = 0; t < weights.w.size(); ++t)
    for (size_t k = 0; k < weights.w[t].size(); ++k)
      for (size_t j = 0; j < weights.w[t][k].size(); ++j)
        o << t << ',' << k << ',' << j << ',' << format_double(weights.w[t][k][j]) << '\n';
  write_text_file(path, o.str());
}

// --- SLAM structured text -----------------------------------------------------

void save_world(const std::string& path, const World& world) {
  std::ostringstream o;
  o << "# voxsem world\n";
  format_slam(o, world.config);
  o << "world.keyframes = " << world.true_poses.size() << '\n';
  o << "world.landmarks = " << world.true_landmarks.size() << '\n';
  for (size_t t = 0; t < world.true_poses.size(); ++t) {
    const Pose& p = world.true_poses[t];
    o << "pose." << t << " = " << format_double(p.position[0]) << ' '
      << format_double(p.position[1]) << ' ' << format_double(p.position[2]) << ' '
      << format_double(p.yaw) << '\n';
  }
  for (size_t j = 0; j < world.true_landmarks.size(); ++j) {
    const Landmark& L = world.true_landmarks[j];
    o << "landmark." << j << " = " << format_double(L.position[0]) << ' '
      << format_double(L.position[1]) << ' ' << format_double(L.position[2]) << ' ' << L.class_id
      << ' ' << L.instance_id << '\n';
  }
  for (size_t t = 0; t < world.odometry.size(); ++t) {
    const OdometryMeasurement& m = world.odometry[t];
    o << "odom." << t << " = " << format_double(m.dpos[0]) << ' ' << format_double(m.dpos[1])
      << ' ' << format_double(m.dpos[2]) << ' ' << format_double(m.dyaw) << '\n';
  }
  for (size_t t = 0; t < world.detections.size(); ++t) {
    for (size_t k = 0; k < world.detections[t].size(); ++k) {
      const Detection& d = world.detections[t][k];
      o << "det." << t << '.' << k << " = " << format_double(d.s_p[0]) << ' '
        << format_double(d.s_p[1]) << ' ' << format_double(d.s_p[2]) << ' ' << d.true_landmark
        << ' ' << d.feature.mu.size();
      for (double v : d.feature.mu) o << ' ' << format_double(v);
      for (double v : d.feature.sigma) o << ' ' << format_double(v);
      o << '\n';
    }
  }
  write_text_file(path, o.str());
}

World load_world(const std::string& path) {
  const std::string text = read_text_file(path);
  World world;
  long T = -1, M = -1;
  try {
    for_each_kv(text, [&](const std::string& key, const std::string& value) {
      const size_t dot = key.find('.');
      const std::string section = key.substr(0, dot);
      const std::string rest = key.substr(dot + 1);
      if (section == "slam") return apply_slam_key(world.config, rest, value);
      if (key == "world.keyframes") {
        T = parse_i64(value);
        if (T < 1 || T > (1 << 20)) bad_value("keyframe count", value);
        world.true_poses.resize(static_cast<size_t>(T));
        world.odometry.resize(static_cast<size_t>(T - 1));
        world.detections.resize(static_cast<size_t>(T));
        return true;
      }
      if (key == "world.landmarks") {
        M = parse_i64(value);
        if (M < 0 || M > (1 << 20)) bad_value("landmark count", value);
        world.true_landmarks.resize(static_cast<size_t>(M));
        return true;
      }
      if (section == "pose" || section == "landmark" || section == "odom") {
        if (T < 0 || M < 0) throw std::invalid_argument("counts must come before records");
        const auto tok = split_ws(value);
        if (section == "pose") {
          const long t = parse_i64(rest);
          if (t < 0 || t >= T) bad_value("pose index", rest);
          if (tok.size() != 4) throw std::invalid_argument("pose record needs 4 fields");
          Pose& p = world.true_poses[static_cast<size_t>(t)];
          for (int a = 0; a < 3; ++a) p.position[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
          p.yaw = parse_f64(tok[3]);
        } else if (section == "landmark") {
          const long j = parse_i64(rest);
          if (j < 0 || j >= M) bad_value("landmark index", rest);
          if (tok.size() != 5) throw std::invalid_argument("landmark record needs 5 fields");
          Landmark& L = world.true_landmarks[static_cast<size_t>(j)];
          for (int a = 0; a < 3; ++a) L.position[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
          L.class_id = parse_int(tok[3]);
          L.instance_id = parse_int(tok[4]);
        } else {
          const long t = parse_i64(rest);
          if (t < 0 || t >= T - 1) bad_value("odometry index", rest);
          if (tok.size() != 4) throw std::invalid_argument("odometry record needs 4 fields");
          OdometryMeasurement& mm = world.odometry[static_cast<size_t>(t)];
          for (int a = 0; a < 3; ++a) mm.dpos[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
          mm.dyaw = parse_f64(tok[3]);
        }
        return true;
      }
      if (section == "det") {
        if (T < 0) throw std::invalid_argument("counts must come before records");
        const size_t dot2 = rest.find('.');
        if (dot2 == std::string::npos) throw std::invalid_argument("detection key needs det.t.k");
        const long t = parse_i64(rest.substr(0, dot2));
        const long k = parse_i64(rest.substr(dot2 + 1));
        if (t < 0 || t >= T) bad_value("detection frame", rest);
        if (k < 0 || k > (1 << 16)) bad_value("detection index", rest);
        auto& frame = world.detections[static_cast<size_t>(t)];
        if (static_cast<size_t>(k) >= frame.size()) frame.resize(static_cast<size_t>(k) + 1);
        Detection& d = frame[static_cast<size_t>(k)];
        const auto tok = split_ws(value);
        if (tok.size() < 5) throw std::invalid_argument("detection record too short");
        for (int a = 0; a < 3; ++a) d.s_p[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
        d.true_landmark = parse_int(tok[3]);
        const long n = parse_i64(tok[4]);
        if (n < 1 || tok.size() != 5 + 2 * static_cast<size_t>(n))
          throw std::invalid_argument("detection record has wrong field count");
        d.feature.mu.resize(static_cast<size_t>(n));
        d.feature.sigma.resize(static_cast<size_t>(n));
        for (long a = 0; a < n; ++a) {
          d.feature.mu[static_cast<size_t>(a)] = parse_f64(tok[5 + static_cast<size_t>(a)]);
          d.feature.sigma[static_cast<size_t>(a)] = parse_f64(tok[5 + static_cast<size_t>(n + a)]);
        }
        return true;
      }
      return false;
    });
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (T < 0 || M < 0) throw std::runtime_error(path + ": missing world.keyframes/world.landmarks");
  for (size_t t = 0; t < world.detections.size(); ++t)
    for (size_t k = 0; k < world.detections[t].size(); ++k)
      if (world.detections[t][k].feature.mu.empty())
        throw std::runtime_error(path + ": missing record det." + std::to_string(t) + "." +
                                 std::to_string(k));
  return world;
}

void save_em_result(const std::string& path, const EMResult& result) {
  std::ostringstream o;
  o << "# voxsem em result\n";
  o << "em.keyframes = " << result.poses.size() << '\n';
  o << "em.landmarks = " << result.landmarks.size() << '\n';
  o << "em.iterations = " << result.iterations << '\n';
  o << "em.pose_rmse = " << format_double(result.pose_rmse) << '\n';
  o << "em.odometry_rmse = " << format_double(result.odometry_rmse) << '\n';
  o << "em.landmark_rmse = " << format_double(result.landmark_rmse) << '\n';
  o << "em.label_accuracy = " << format_double(result.label_accuracy) << '\n';
  std::string detc;
  for (size_t t = 0; t < result.weights.w.size(); ++t)
    detc += (t ? " " : "") + std::to_string(result.weights.w[t].size());
  o << "em.detections = " << detc << '\n';
  std::string nll;
  for (size_t i = 0; i < result.nll_history.size(); ++i)
    nll += (i ? " " : "") + format_double(result.nll_history[i]);
  o << "em.nll = " << nll << '\n';
  for (size_t t = 0; t < result.poses.size(); ++t) {
    const Pose& p = result.poses[t];
    o << "pose." << t << " = " << format_double(p.position[0]) << ' '
      << format_double(p.position[1]) << ' ' << format_double(p.position[2]) << ' '
      << format_double(p.yaw) << '\n';
  }
  for (size_t j = 0; j < result.landmarks.size(); ++j) {
    const Landmark& L = result.landmarks[j];
    o << "landmark." << j << " = " << format_double(L.position[0]) << ' '
      << format_double(L.position[1]) << ' ' << format_double(L.position[2]) << ' ' << L.class_id
      << ' ' << L.instance_id << '\n';
  }
  for (size_t t = 0; t < result.weights.w.size(); ++t) {
    for (size_t k = 0; k < result.weights.w[t].size(); ++k) {
      o << "w." << t << '.' << k << " =";
      for (double v : result.weights.w[t][k]) o << ' ' << format_double(v);
      o << '\n';
    }
  }
  write_text_file(path, o.str());
}

EMResult load_em_result(const std::string& path) {
  const std::string text = read_text_file(path);
  EMResult res;
  long T = -1, M = -1;
  try {
    for_each_kv(text, [&](const std::string& key, const std::string& value) {
      const size_t dot = key.find('.');
      const std::string section = key.substr(0, dot);
      const std::string rest = key.substr(dot + 1);
      if (key == "em.keyframes") {
        T = parse_i64(value);
        if (T < 1 || T > (1 << 20)) bad_value("keyframe count", value);
        res.poses.resize(static_cast<size_t>(T));
        res.weights.w.resize(static_cast<size_t>(T));
        return true;
      }
      if (key == "em.landmarks") {
        M = parse_i64(value);
        if (M < 0 || M > (1 << 20)) bad_value("landmark count", value);
        res.landmarks.resize(static_cast<size_t>(M));
        return true;
      }
      if (key == "em.iterations") { res.iterations = parse_int(value); return true; }
      if (key == "em.pose_rmse") { res.pose_rmse = parse_f64(value); return true; }
      if (key == "em.odometry_rmse") { res.odometry_rmse = parse_f64(value); return true; }
      if (key == "em.landmark_rmse") { res.landmark_rmse = parse_f64(value); return true; }
      if (key == "em.label_accuracy") { res.label_accuracy = parse_f64(value); return true; }
      if (key == "em.detections") {
        if (T < 0 || M < 0) throw std::invalid_argument("counts must come before records");
        const auto tok = split_ws(value);
        if (tok.size() != static_cast<size_t>(T))
          throw std::invalid_argument("em.detections needs one count per keyframe");
        for (size_t t = 0; t < tok.size(); ++t) {
          const long k = parse_i64(tok[t]);
          if (k < 0 || k > (1 << 16)) bad_value("detection count", tok[t]);
          res.weights.w[t].assign(static_cast<size_t>(k),
                                  std::vector<double>(static_cast<size_t>(M), 0.0));
        }
        return true;
      }
      if (key == "em.nll") {
        for (const std::string& tok : split_ws(value)) res.nll_history.push_back(parse_f64(tok));
        return true;
      }
      if (section == "pose") {
        if (T < 0) throw std::invalid_argument("counts must come before records");
        const long t = parse_i64(rest);
        if (t < 0 || t >= T) bad_value("pose index", rest);
        const auto tok = split_ws(value);
        if (tok.size() != 4) throw std::invalid_argument("pose record needs 4 fields");
        Pose& p = res.poses[static_cast<size_t>(t)];
        for (int a = 0; a < 3; ++a) p.position[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
        p.yaw = parse_f64(tok[3]);
        return true;
      }
      if (section == "landmark") {
        if (M < 0) throw std::invalid_argument("counts must come before records");
        const long j = parse_i64(rest);
        if (j < 0 || j >= M) bad_value("landmark index", rest);
        const auto tok = split_ws(value);
        if (tok.size() != 5) throw std::invalid_argument("landmark record needs 5 fields");
        Landmark& L = res.landmarks[static_cast<size_t>(j)];
        for (int a = 0; a < 3; ++a) L.position[static_cast<size_t>(a)] = parse_f64(tok[static_cast<size_t>(a)]);
        L.class_id = parse_int(tok[3]);
        L.instance_id = parse_int(tok[4]);
        return true;
      }
      if (section == "w") {
        const size_t dot2 = rest.find('.');
        if (dot2 == std::string::npos) throw std::invalid_argument("weight key needs w.t.k");
        const long t = parse_i64(rest.substr(0, dot2));
        const long k = parse_i64(rest.substr(dot2 + 1));
        if (t < 0 || t >= T) bad_value("weight frame", rest);
        if (k < 0 || static_cast<size_t>(k) >= res.weights.w[static_cast<size_t>(t)].size())
          bad_value("weight detection index", rest);
        const auto tok = split_ws(value);
        if (tok.size() != static_cast<size_t>(M))
          throw std::invalid_argument("weight record needs one value per landmark");
        for (size_t j = 0; j < tok.size(); ++j)
          res.weights.w[static_cast<size_t>(t)][static_cast<size_t>(k)][j] = parse_f64(tok[j]);
        return true;
      }
      return false;
    });
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (T < 0 || M < 0) throw std::runtime_error(path + ": missing em.keyframes/em.landmarks");
  return res;
}

}  // namespace voxsem
