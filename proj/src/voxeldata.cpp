#include "voxsem/voxeldata.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

Tensor VoxelGrid::to_tensor() const {
  const int d = resolution;
  Tensor t({1, d, d, d});
  for (long i = 0; i < t.size(); ++i) t[i] = occupancy[static_cast<size_t>(i)];
  return t;
}

double voxel_iou(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.resolution != b.resolution) throw std::invalid_argument("iou: resolution mismatch");
  long inter = 0, uni = 0;
  for (size_t i = 0; i < a.occupancy.size(); ++i) {
    inter += a.occupancy[i] & b.occupancy[i];
    uni += a.occupancy[i] | b.occupancy[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::array<int, 3>> translation_offsets(int max_shift) {
  std::vector<std::array<int, 3>> out;
  const int w = 2 * max_shift + 1;
  out.reserve(static_cast<size_t>(w) * w * w);
  for (int dz = -max_shift; dz <= max_shift; ++dz)
    for (int dy = -max_shift; dy <= max_shift; ++dy)
      for (int dx = -max_shift; dx <= max_shift; ++dx) out.push_back({dx, dy, dz});
  return out;
}

namespace {

// Occupies every voxel whose center lies inside the closed box [lo, hi].
void fill_box(VoxelGrid& g, double lox, double loy, double loz, double hix, double hiy,
              double hiz) {
  const int d = g.resolution;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) {
        const double cx = x + 0.5, cy = y + 0.5, cz = z + 0.5;
        if (cx >= lox && cx <= hix && cy >= loy && cy <= hiy && cz >= loz && cz <= hiz)
          g.set(x, y, z, 1);
      }
}

}  // namespace

// Instance variation works in whole-voxel steps. Continuous jitter alone can
// quantize two instances onto the same voxel set; a bound moved by exactly one
// voxel always crosses a voxel-center plane, so instances with different delta
// patterns are guaranteed to disagree somewhere. The continuous wobble is
// drawn per class (not per instance) and only varies shapes across dataset
// seeds. Each of the three instance bits drives its own feature, and bit 0
// doubles as the low bit of a wider step so instance ids beyond 7 stay
// distinct too.
VoxelGrid generate_shape(int class_id, int instance_id, int resolution, uint64_t seed) {
  if (class_id < 0 || class_id >= kNumShapeClasses)
    throw std::invalid_argument("generate_shape: class id out of vocabulary");
  if (instance_id < 0) throw std::invalid_argument("generate_shape: negative instance id");
  if (resolution < 8)
    throw std::invalid_argument("generate_shape: resolution too small to render the class");

  VoxelGrid g(resolution);
  const double D = resolution;
  const double c = D / 2.0;
  Rng crng(mix_seed(seed, static_cast<uint64_t>(class_id), 0xBA5EULL));
  auto wob = [&crng] { return 1.0 + 0.05 * crng.uniform(-1.0, 1.0); };
  const double d0 = (instance_id & 1) + 2.0 * (instance_id >> 3);
  const double d1 = (instance_id >> 1) & 1;
  const double d2 = (instance_id >> 2) & 1;

  switch (class_id) {
    case 0: {  // box
      const double hx = 0.26 * D * wob() + d0;
      const double hy = 0.26 * D * wob() + d1;
      const double hz = 0.26 * D * wob() + d2;
      fill_box(g, c - hx, c - hy, c - hz, c + hx, c + hy, c + hz);
      break;
    }
    case 1: {  // tube: hollow cylinder along z
      const double ro = 0.34 * D * wob() + d0;
      const double wall = std::max(1.4, 0.175 * D * wob()) + d1;
      const double ri = std::max(ro - wall, 0.0);
      const double hz = 0.27 * D * wob() + d2;
      for (int z = 0; z < resolution; ++z)
        for (int y = 0; y < resolution; ++y)
          for (int x = 0; x < resolution; ++x) {
            const double dx = x + 0.5 - c, dy = y + 0.5 - c, dz = z + 0.5 - c;
            const double r2 = dx * dx + dy * dy;
            if (r2 >= ri * ri && r2 <= ro * ro && std::fabs(dz) <= hz) g.set(x, y, z, 1);
          }
      break;
    }
    case 2: {  // pyramid: square frustum, width falling linearly with height
      const double bw = 0.32 * D * wob() + d0;
      const double tw = 0.06 * D * wob() + d1;
      const double z0 = c - 0.30 * D * wob() + d2;
      const double h = std::min(0.55 * D * wob(), D - 1.2 - z0);
      for (int z = 0; z < resolution; ++z) {
        const double zc = z + 0.5;
        if (zc < z0 || zc > z0 + h) continue;
        const double w = bw + (tw - bw) * (zc - z0) / h;
        if (w <= 0.0) continue;
        fill_box(g, c - w, c - w, zc, c + w, c + w, zc);  // exactly this z layer
      }
      break;
    }
    case 3: {  // L-bracket: upright wall meeting a floor slab at one corner
      const double hy = 0.26 * D * wob() + d0;
      const double sx = 0.30 * D * wob();
      const double wall_t = std::max(1.3, 0.16 * D * wob());
      const double sz = 0.30 * D * wob();
      const double wall_h = 0.60 * D * wob() + d1;
      const double base_t = std::max(1.3, 0.16 * D * wob());
      const double reach = 0.62 * D * wob() + d2 + 2.0 * (instance_id >> 3);
      fill_box(g, c - sx, c - hy, c - sz, c - sx + wall_t, c + hy, c - sz + wall_h);
      fill_box(g, c - sx, c - hy, c - sz, c - sx + reach, c + hy, c - sz + base_t);
      break;
    }
    case 4: {  // table: top slab on four corner legs
      const double half = 0.28 * D * wob() + d0;
      const double top_z = c + 0.14 * D * wob();
      const double top_t = std::max(1.5, 0.14 * D * wob()) + d1;
      // Legs give back what the top takes so the feet stay above the floor
      // at small resolutions; otherwise floor clipping could erase the
      // leg-length step entirely.
      const double leg_len = 0.30 * D * wob() + d2 - d1;
      const double leg_w = std::max(1.0, 0.07 * D * wob());
      fill_box(g, c - half, c - half, top_z - top_t, c + half, c + half, top_z);
      const double in = leg_w / 2.0 + 0.6;  // keep legs inside the top's footprint
      for (double px : {c - half + in, c + half - in})
        for (double py : {c - half + in, c + half - in})
          fill_box(g, px - leg_w / 2.0, py - leg_w / 2.0, top_z - top_t - leg_len,
                   px + leg_w / 2.0, py + leg_w / 2.0, top_z);
      break;
    }
    case 5: {  // chair: seat, backrest, four legs
      const double half = 0.24 * D * wob() + d0;
      const double seat_z = c - 0.02 * D * wob();
      const double seat_t = std::max(1.0, 0.10 * D * wob());
      const double back_t = std::max(1.0, 0.10 * D * wob());
      const double back_h = 0.34 * D * wob() + d1;
      const double leg_len = 0.26 * D * wob() + d2;
      const double leg_w = std::max(1.0, 0.07 * D * wob());
      fill_box(g, c - half, c - half, seat_z - seat_t, c + half, c + half, seat_z);
      fill_box(g, c + half - back_t, c - half, seat_z, c + half, c + half, seat_z + back_h);
      const double in = leg_w / 2.0 + 0.6;
      for (double px : {c - half + in, c + half - in})
        for (double py : {c - half + in, c + half - in})
          fill_box(g, px - leg_w / 2.0, py - leg_w / 2.0, seat_z - seat_t - leg_len,
                   px + leg_w / 2.0, py + leg_w / 2.0, seat_z);
      break;
    }
    default:
      break;
  }
  if (g.count() == 0) throw std::runtime_error("generate_shape: produced an empty grid");
  return g;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Entry parameter of the ray o + t*d into the closed unit cell at (x,y,z);
// +inf when the ray misses the cell.
double cell_entry(const double* o, const double* d, int x, int y, int z) {
  const double lo[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
  double tmin = -kInf, tmax = kInf;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > lo[a] + 1.0) return kInf;
      continue;
    }
    double t1 = (lo[a] - o[a]) / d[a];
    double t2 = (lo[a] + 1.0 - o[a]) / d[a];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  return (tmin <= tmax && tmax >= 0.0) ? tmin : kInf;
}

}  // namespace

VoxelGrid render_single_view(const VoxelGrid& full, int viewpoint_id, int V,
                             double camera_distance_factor, double elevation_deg) {
  if (full.count() == 0) throw std::invalid_argument("render_single_view: empty input grid");
  if (V < 1 || viewpoint_id < 0 || viewpoint_id >= V)
    throw std::invalid_argument("render_single_view: viewpoint out of range");
  const int d = full.resolution;
  const double c = d / 2.0;
  const double theta = 2.0 * M_PI * viewpoint_id / V;
  const double elev = elevation_deg * M_PI / 180.0;
  const double rho = camera_distance_factor * c;
  const double cam[3] = {c + rho * std::cos(elev) * std::cos(theta),
                         c + rho * std::cos(elev) * std::sin(theta), c + rho * std::sin(elev)};

  VoxelGrid out(d);
  for (int tz = 0; tz < d; ++tz)
    for (int ty = 0; ty < d; ++ty)
      for (int tx = 0; tx < d; ++tx) {
        if (!full.at(tx, ty, tz)) continue;
        const double dir[3] = {tx + 0.5 - cam[0], ty + 0.5 - cam[1], tz + 0.5 - cam[2]};
        const double t_tar = cell_entry(cam, dir, tx, ty, tz);

        // Amanatides-Woo walk from the grid entry point, abandoning the ray
        // once every remaining cell must enter after the target does.
        double tmin = -kInf, tmax = kInf;
        for (int a = 0; a < 3; ++a) {
          if (dir[a] == 0.0) {
            if (cam[a] < 0.0 || cam[a] > d) tmin = kInf;
            continue;
          }
          double t1 = (0.0 - cam[a]) / dir[a], t2 = (d - cam[a]) / dir[a];
          if (t1 > t2) std::swap(t1, t2);
          tmin = std::max(tmin, t1);
          tmax = std::min(tmax, t2);
        }
        bool visible = true;
        if (tmin <= tmax) {
          const double t0 = std::max(tmin, 0.0);
          double px = cam[0] + t0 * dir[0], py = cam[1] + t0 * dir[1], pz = cam[2] + t0 * dir[2];
          int cx = std::min(d - 1, std::max(0, static_cast<int>(std::floor(px))));
          int cy = std::min(d - 1, std::max(0, static_cast<int>(std::floor(py))));
          int cz = std::min(d - 1, std::max(0, static_cast<int>(std::floor(pz))));
          int step[3], cell[3] = {cx, cy, cz};
          double tMax[3], tDelta[3];
          for (int a = 0; a < 3; ++a) {
            if (dir[a] > 0.0) {
              step[a] = 1;
              tDelta[a] = 1.0 / dir[a];
              tMax[a] = (cell[a] + 1.0 - cam[a]) / dir[a];
            } else if (dir[a] < 0.0) {
              step[a] = -1;
              tDelta[a] = -1.0 / dir[a];
              tMax[a] = (cell[a] - cam[a]) / dir[a];
            } else {
              step[a] = 0;
              tDelta[a] = kInf;
              tMax[a] = kInf;
            }
          }
          for (int guard = 0; guard < 4 * d; ++guard) {
            if (full.at(cell[0], cell[1], cell[2]) &&
                !(cell[0] == tx && cell[1] == ty && cell[2] == tz)) {
              if (cell_entry(cam, dir, cell[0], cell[1], cell[2]) < t_tar) {
                visible = false;
                break;
              }
            }
            int a = 0;
            if (tMax[1] < tMax[a]) a = 1;
            if (tMax[2] < tMax[a]) a = 2;
            if (tMax[a] > t_tar) break;  // later cells enter strictly after the target
            cell[a] += step[a];
            if (cell[a] < 0 || cell[a] >= d) break;
            tMax[a] += tDelta[a];
          }
        }
        if (visible) out.set(tx, ty, tz, 1);
      }
  return out;
}

VoxelGrid translate(const VoxelGrid& g, int dx, int dy, int dz) {
  VoxelGrid out(g.resolution);
  const int d = g.resolution;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) {
        if (!g.at(x, y, z)) continue;
        const int nx = x + dx, ny = y + dy, nz = z + dz;
        if (out.in_bounds(nx, ny, nz)) out.set(nx, ny, nz, 1);
      }
  return out;
}

VoxelGrid add_noise(const VoxelGrid& g, double flip_rate, uint64_t seed) {
  if (flip_rate < 0.0 || flip_rate > 0.1)
    throw std::invalid_argument("add_noise: flip rate must be in [0, 0.1]");
  VoxelGrid out = g;
  Rng rng(seed);
  for (auto& v : out.occupancy)
    if (rng.bernoulli(flip_rate)) v = static_cast<uint8_t>(1 - v);
  return out;
}

Dataset build_dataset(const DataConfig& cfg, uint64_t seed) {
  if (cfg.num_classes < 1 || cfg.num_classes > kNumShapeClasses)
    throw std::invalid_argument("build_dataset: class vocabulary out of range");
  if (cfg.instances_per_class < 1 || cfg.num_views < 1)
    throw std::invalid_argument("build_dataset: empty vocabulary");
  if (cfg.test_instances_per_class >= cfg.instances_per_class)
    throw std::invalid_argument("build_dataset: no training instances left");

  Dataset ds;
  ds.config = cfg;
  const auto offsets = translation_offsets(cfg.max_shift);
  long sample_index = 0;
  for (int c = 0; c < cfg.num_classes; ++c)
    for (int i = 0; i < cfg.instances_per_class; ++i) {
      const VoxelGrid full0 = generate_shape(c, i, cfg.resolution, seed);
      const bool is_test = i >= cfg.instances_per_class - cfg.test_instances_per_class;
      for (int v = 0; v < cfg.num_views; ++v) {
        const VoxelGrid view0 = render_single_view(full0, v, cfg.num_views,
                                                   cfg.camera_distance_factor,
                                                   cfg.camera_elevation_deg);
        for (int copy = 0; copy < 2; ++copy) {
          Rng rng(mix_seed(seed, static_cast<uint64_t>(sample_index), 0xDA7AULL));
          const int tid = static_cast<int>(rng.below(offsets.size()));
          Sample s;
          s.label = LabelTuple{c, i, v, tid};
          const auto& off = offsets[static_cast<size_t>(tid)];
          s.full = translate(full0, off[0], off[1], off[2]);
          s.view = translate(view0, off[0], off[1], off[2]);
          s.noisy = copy == 1;
          if (s.noisy)
            s.view = add_noise(s.view, cfg.noise_rate,
                               mix_seed(seed, static_cast<uint64_t>(sample_index), 0x0153ULL));
          (is_test ? ds.test_idx : ds.train_idx).push_back(static_cast<int>(ds.samples.size()));
          ds.samples.push_back(std::move(s));
          ++sample_index;
        }
      }
    }
  return ds;
}

TriMesh load_off(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_off: cannot open " + path);
  std::string token;
  if (!(in >> token) || token != "OFF") throw std::runtime_error("load_off: missing OFF header");
  long nv = 0, nf = 0, ne = 0;
  if (!(in >> nv >> nf >> ne)) throw std::runtime_error("load_off: malformed count line");
  TriMesh mesh;
  mesh.vertices.reserve(static_cast<size_t>(nv));
  for (long i = 0; i < nv; ++i) {
    std::array<double, 3> v{};
    if (!(in >> v[0] >> v[1] >> v[2])) throw std::runtime_error("load_off: truncated vertices");
    mesh.vertices.push_back(v);
  }
  for (long i = 0; i < nf; ++i) {
    int n = 0;
    if (!(in >> n) || n < 3) throw std::runtime_error("load_off: malformed face");
    std::vector<int> poly(static_cast<size_t>(n));
    for (int& id : poly) {
      if (!(in >> id) || id < 0 || id >= nv) throw std::runtime_error("load_off: bad face index");
    }
    for (int k = 1; k + 1 < n; ++k) mesh.faces.push_back({poly[0], poly[k], poly[k + 1]});
  }
  return mesh;
}

namespace {

// Triangle/axis-aligned-box separating-axis test, box centered at `c` with
// half size `h`. Degenerate triangles fall back to the surviving axes.
bool tri_box_overlap(const double c[3], double h, const std::array<double, 3>& a,
                     const std::array<double, 3>& b, const std::array<double, 3>& d) {
  double v0[3], v1[3], v2[3];
  for (int i = 0; i < 3; ++i) {
    v0[i] = a[i] - c[i];
    v1[i] = b[i] - c[i];
    v2[i] = d[i] - c[i];
  }
  // box axes
  for (int i = 0; i < 3; ++i) {
    const double lo = std::min({v0[i], v1[i], v2[i]});
    const double hi = std::max({v0[i], v1[i], v2[i]});
    if (lo > h || hi < -h) return false;
  }
  double e0[3], e1[3], e2[3];
  for (int i = 0; i < 3; ++i) {
    e0[i] = v1[i] - v0[i];
    e1[i] = v2[i] - v1[i];
    e2[i] = v0[i] - v2[i];
  }
  auto axis_test = [&](double ax, double ay, double az) {
    const double len = std::fabs(ax) + std::fabs(ay) + std::fabs(az);
    if (len < 1e-12) return true;  // degenerate axis carries no separation
    const double p0 = ax * v0[0] + ay * v0[1] + az * v0[2];
    const double p1 = ax * v1[0] + ay * v1[1] + az * v1[2];
    const double p2 = ax * v2[0] + ay * v2[1] + az * v2[2];
    const double r = h * (std::fabs(ax) + std::fabs(ay) + std::fabs(az));
    return !(std::min({p0, p1, p2}) > r || std::max({p0, p1, p2}) < -r);
  };
  const double* edges[3] = {e0, e1, e2};
  for (const double* e : edges) {
    if (!axis_test(0.0, -e[2], e[1])) return false;
    if (!axis_test(e[2], 0.0, -e[0])) return false;
    if (!axis_test(-e[1], e[0], 0.0)) return false;
  }
  // triangle normal
  const double nx = e0[1] * e2[2] - e0[2] * e2[1];
  const double ny = e0[2] * e2[0] - e0[0] * e2[2];
  const double nz = e0[0] * e2[1] - e0[1] * e2[0];
  return axis_test(-nx, -ny, -nz);
}

}  // namespace

VoxelGrid mesh_voxelize(const TriMesh& mesh, int resolution) {
  if (mesh.faces.empty()) throw std::invalid_argument("mesh_voxelize: empty mesh");
  double lo[3] = {kInf, kInf, kInf}, hi[3] = {-kInf, -kInf, -kInf};
  for (const auto& v : mesh.vertices)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
  if (!(extent > 0.0)) throw std::invalid_argument("mesh_voxelize: mesh has no extent");
  const double scale = resolution / extent;
  double shift[3];
  for (int a = 0; a < 3; ++a)
    shift[a] = (resolution - (hi[a] - lo[a]) * scale) / 2.0 - lo[a] * scale;

  auto map = [&](const std::array<double, 3>& v) {
    return std::array<double, 3>{v[0] * scale + shift[0], v[1] * scale + shift[1],
                                 v[2] * scale + shift[2]};
  };

  VoxelGrid g(resolution);
  const int d = resolution;
  for (const auto& f : mesh.faces) {
    const auto a = map(mesh.vertices[static_cast<size_t>(f[0])]);
    const auto b = map(mesh.vertices[static_cast<size_t>(f[1])]);
    const auto cc = map(mesh.vertices[static_cast<size_t>(f[2])]);
    int cl[3], ch[3];
    for (int ax = 0; ax < 3; ++ax) {
      const double flo = std::min({a[ax], b[ax], cc[ax]});
      const double fhi = std::max({a[ax], b[ax], cc[ax]});
      cl[ax] = std::max(0, static_cast<int>(std::floor(flo)) - 1);
      ch[ax] = std::min(d - 1, static_cast<int>(std::floor(fhi)) + 1);
    }
    for (int z = cl[2]; z <= ch[2]; ++z)
      for (int y = cl[1]; y <= ch[1]; ++y)
        for (int x = cl[0]; x <= ch[0]; ++x) {
          if (g.at(x, y, z)) continue;
          const double center[3] = {x + 0.5, y + 0.5, z + 0.5};
          if (tri_box_overlap(center, 0.5, a, b, cc)) g.set(x, y, z, 1);
        }
  }

  // Flood the exterior from the boundary; whatever is neither surface nor
  // exterior is enclosed interior.
  std::vector<uint8_t> outside(g.occupancy.size(), 0);
  std::deque<std::array<int, 3>> queue;
  auto push_if_open = [&](int x, int y, int z) {
    if (!g.in_bounds(x, y, z)) return;
    const size_t i = static_cast<size_t>(g.idx(x, y, z));
    if (outside[i] || g.occupancy[i]) return;
    outside[i] = 1;
    queue.push_back({x, y, z});
  };
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x)
        if (x == 0 || y == 0 || z == 0 || x == d - 1 || y == d - 1 || z == d - 1)
          push_if_open(x, y, z);
  while (!queue.empty()) {
    const auto [x, y, z] = queue.front();
    queue.pop_front();
    push_if_open(x + 1, y, z);
    push_if_open(x - 1, y, z);
    push_if_open(x, y + 1, z);
    push_if_open(x, y - 1, z);
    push_if_open(x, y, z + 1);
    push_if_open(x, y, z - 1);
  }
  for (size_t i = 0; i < g.occupancy.size(); ++i)
    if (!outside[i]) g.occupancy[i] = 1;
  return g;
}

}  // namespace voxsem
