#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <set>
#include <vector>

#include "voxsem/rng.hpp"
#include "voxsem/voxeldata.hpp"

using namespace voxsem;

namespace {

// Independent visibility oracle: no ray walk at all. A voxel is visible iff
// no other occupied voxel's box is entered strictly earlier along the ray
// from the camera to the voxel's center.
double entry_param(const std::array<double, 3>& o, const std::array<double, 3>& dir, int bx,
                   int by, int bz) {
  const double lo[3] = {static_cast<double>(bx), static_cast<double>(by),
                        static_cast<double>(bz)};
  double tn = -std::numeric_limits<double>::infinity();
  double tf = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > lo[a] + 1.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    double t1 = (lo[a] - o[a]) / dir[a];
    double t2 = (lo[a] + 1.0 - o[a]) / dir[a];
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > tn) tn = t1;
    if (t2 < tf) tf = t2;
  }
  if (tn > tf || tf < 0.0) return std::numeric_limits<double>::infinity();
  return tn;
}

VoxelGrid oracle_view(const VoxelGrid& full, int v, int V, double factor, double elev_deg) {
  const int d = full.resolution;
  const double c = d / 2.0;
  const double th = 2.0 * M_PI * v / V;
  const double el = elev_deg * M_PI / 180.0;
  const double rho = factor * c;
  const std::array<double, 3> cam = {c + rho * std::cos(el) * std::cos(th),
                                     c + rho * std::cos(el) * std::sin(th),
                                     c + rho * std::sin(el)};
  std::vector<std::array<int, 3>> occ;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x)
        if (full.at(x, y, z)) occ.push_back({x, y, z});
  VoxelGrid out(d);
  for (const auto& t : occ) {
    const std::array<double, 3> dir = {t[0] + 0.5 - cam[0], t[1] + 0.5 - cam[1],
                                       t[2] + 0.5 - cam[2]};
    const double t_tar = entry_param(cam, dir, t[0], t[1], t[2]);
    bool vis = true;
    for (const auto& o : occ) {
      if (o == t) continue;
      if (entry_param(cam, dir, o[0], o[1], o[2]) < t_tar) {
        vis = false;
        break;
      }
    }
    if (vis) out.set(t[0], t[1], t[2], 1);
  }
  return out;
}

int component_count_6conn(const VoxelGrid& g) {
  const int d = g.resolution;
  std::vector<uint8_t> seen(g.occupancy.size(), 0);
  int comps = 0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) {
        if (!g.at(x, y, z) || seen[static_cast<size_t>(g.idx(x, y, z))]) continue;
        ++comps;
        std::deque<std::array<int, 3>> q{{x, y, z}};
        seen[static_cast<size_t>(g.idx(x, y, z))] = 1;
        while (!q.empty()) {
          auto [cx, cy, cz] = q.front();
          q.pop_front();
          const int nb[6][3] = {{cx + 1, cy, cz}, {cx - 1, cy, cz}, {cx, cy + 1, cz},
                                {cx, cy - 1, cz}, {cx, cy, cz + 1}, {cx, cy, cz - 1}};
          for (const auto& n : nb) {
            if (!g.in_bounds(n[0], n[1], n[2]) || !g.at(n[0], n[1], n[2])) continue;
            uint8_t& s = seen[static_cast<size_t>(g.idx(n[0], n[1], n[2]))];
            if (!s) {
              s = 1;
              q.push_back({n[0], n[1], n[2]});
            }
          }
        }
      }
  return comps;
}

bool subset_of(const VoxelGrid& a, const VoxelGrid& b) {
  for (size_t i = 0; i < a.occupancy.size(); ++i)
    if (a.occupancy[i] && !b.occupancy[i]) return false;
  return true;
}

VoxelGrid solid_cube(int d, int lo, int hi) {
  VoxelGrid g(d);
  for (int z = lo; z <= hi; ++z)
    for (int y = lo; y <= hi; ++y)
      for (int x = lo; x <= hi; ++x) g.set(x, y, z, 1);
  return g;
}

}  // namespace

TEST_CASE("box class is exactly an axis-aligned cuboid") {
  for (int inst : {0, 3}) {
    VoxelGrid g = generate_shape(0, inst, 16, 5);
    int lo[3] = {16, 16, 16}, hi[3] = {-1, -1, -1};
    for (int z = 0; z < 16; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          if (g.at(x, y, z)) {
            lo[0] = std::min(lo[0], x); hi[0] = std::max(hi[0], x);
            lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
            lo[2] = std::min(lo[2], z); hi[2] = std::max(hi[2], z);
          }
    const long bbox = static_cast<long>(hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) *
                      (hi[2] - lo[2] + 1);
    CHECK(g.count() == bbox);
  }
}

TEST_CASE("generator is deterministic and distinct across instances") {
  for (int c = 0; c < kNumShapeClasses; ++c) {
    VoxelGrid a = generate_shape(c, 1, 16, 9);
    VoxelGrid b = generate_shape(c, 1, 16, 9);
    CHECK(a == b);
  }
  // Same-class instances stay similar but never identical.
  for (int c = 0; c < kNumShapeClasses; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) {
        const double jac = voxel_iou(generate_shape(c, i, 16, 9), generate_shape(c, j, 16, 9));
        CHECK(jac > 0.3);
        CHECK(jac < 1.0);
      }
}

TEST_CASE("every class yields one 6-connected component containing the center in its bbox") {
  for (uint64_t seed : {9ULL, 40ULL, 77ULL})
    for (int c = 0; c < kNumShapeClasses; ++c)
      for (int i = 0; i < 4; ++i) {
        VoxelGrid g = generate_shape(c, i, 16, seed);
        CHECK(component_count_6conn(g) == 1);
        int lo[3] = {16, 16, 16}, hi[3] = {-1, -1, -1};
        for (int z = 0; z < 16; ++z)
          for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
              if (g.at(x, y, z)) {
                lo[0] = std::min(lo[0], x); hi[0] = std::max(hi[0], x);
                lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                lo[2] = std::min(lo[2], z); hi[2] = std::max(hi[2], z);
              }
        CHECK(lo[0] <= 8); CHECK(hi[0] >= 7);
        CHECK(lo[1] <= 8); CHECK(hi[1] >= 7);
        CHECK(lo[2] <= 8); CHECK(hi[2] >= 7);
      }
}

TEST_CASE("generator rejects bad vocabularies and tiny grids") {
  CHECK_THROWS(generate_shape(-1, 0, 16, 1));
  CHECK_THROWS(generate_shape(kNumShapeClasses, 0, 16, 1));
  CHECK_THROWS(generate_shape(0, 0, 6, 1));
}

TEST_CASE("a single center voxel is visible from every viewpoint") {
  VoxelGrid g(16);
  g.set(8, 8, 8, 1);
  for (int v = 0; v < 12; ++v) {
    VoxelGrid view = render_single_view(g, v, 12);
    CHECK(view.count() == 1);
    CHECK(view.at(8, 8, 8) == 1);
  }
}

TEST_CASE("solid cube views live on the surface shell and are never empty") {
  VoxelGrid cube = solid_cube(16, 4, 11);
  VoxelGrid shell(16);
  for (int z = 4; z <= 11; ++z)
    for (int y = 4; y <= 11; ++y)
      for (int x = 4; x <= 11; ++x)
        if (x == 4 || x == 11 || y == 4 || y == 11 || z == 4 || z == 11) shell.set(x, y, z, 1);
  for (int v = 0; v < 12; ++v) {
    VoxelGrid view = render_single_view(cube, v, 12);
    CHECK(view.count() > 0);
    CHECK(subset_of(view, shell));
    CHECK(subset_of(view, cube));
  }
}

TEST_CASE("renderer matches the brute-force visibility oracle") {
  SUBCASE("solid cube, face-on camera") {
    VoxelGrid cube = solid_cube(16, 5, 10);
    // Non-commensurate distance keeps boundary-tie geometry out of the test.
    VoxelGrid got = render_single_view(cube, 0, 12, 2.53, 0.0);
    VoxelGrid want = oracle_view(cube, 0, 12, 2.53, 0.0);
    CHECK(got == want);
  }
  SUBCASE("every class at the default camera") {
    for (int c = 0; c < kNumShapeClasses; ++c) {
      VoxelGrid g = generate_shape(c, 0, 16, 13);
      for (int v : {0, 3, 7}) {
        VoxelGrid got = render_single_view(g, v, 12);
        VoxelGrid want = oracle_view(g, v, 12, 2.5, 30.0);
        CHECK(got == want);
      }
    }
  }
}

TEST_CASE("renderer rejects empty grids and bad viewpoints") {
  VoxelGrid empty(8);
  CHECK_THROWS(render_single_view(empty, 0, 12));
  VoxelGrid g(8);
  g.set(4, 4, 4, 1);
  CHECK_THROWS(render_single_view(g, 12, 12));
}

TEST_CASE("translate identity, inverse, and boundary clipping") {
  VoxelGrid g = generate_shape(3, 0, 16, 21);
  CHECK(translate(g, 0, 0, 0) == g);
  VoxelGrid inner = generate_shape(0, 0, 16, 21);
  CHECK(translate(translate(inner, 2, -1, 1), -2, 1, -1) == inner);

  VoxelGrid edge(8);
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) edge.set(x, y, z, 1);
  VoxelGrid shifted = translate(edge, -1, 0, 0);  // one yz-slab of 9 voxels clipped away
  CHECK(shifted.count() == edge.count() - 9);
}

TEST_CASE("noise flips obey the rate, the seed, and the zero case") {
  VoxelGrid g = generate_shape(4, 2, 16, 31);
  CHECK(add_noise(g, 0.0, 123) == g);
  CHECK(add_noise(g, 0.05, 99) == add_noise(g, 0.05, 99));
  VoxelGrid n = add_noise(g, 0.05, 99);
  long flipped = 0;
  for (size_t i = 0; i < g.occupancy.size(); ++i) flipped += g.occupancy[i] != n.occupancy[i];
  const double mean = 0.05 * 4096.0;
  const double sd = std::sqrt(4096.0 * 0.05 * 0.95);
  CHECK(flipped > mean - 4.0 * sd);
  CHECK(flipped < mean + 4.0 * sd);
  CHECK_THROWS(add_noise(g, 0.2, 1));
}

TEST_CASE("dataset counting, split hygiene, and per-sample translation consistency") {
  DataConfig cfg;
  cfg.num_classes = 2;
  cfg.instances_per_class = 2;
  cfg.num_views = 12;
  cfg.test_instances_per_class = 1;
  Dataset ds = build_dataset(cfg, 77);
  CHECK(ds.samples.size() == 2 * 2 * 12 * 2);
  CHECK(ds.train_idx.size() + ds.test_idx.size() == ds.samples.size());

  std::set<std::pair<int, int>> train_inst, test_inst;
  for (int i : ds.train_idx)
    train_inst.insert({ds.samples[static_cast<size_t>(i)].label.class_id,
                       ds.samples[static_cast<size_t>(i)].label.instance_id});
  for (int i : ds.test_idx)
    test_inst.insert({ds.samples[static_cast<size_t>(i)].label.class_id,
                      ds.samples[static_cast<size_t>(i)].label.instance_id});
  for (const auto& ti : test_inst) CHECK(train_inst.count(ti) == 0);

  const auto offsets = translation_offsets(cfg.max_shift);
  std::map<std::pair<int, int>, std::set<int>> views_per_copy;
  for (const Sample& s : ds.samples) {
    CHECK(s.label.class_id < cfg.num_classes);
    CHECK(s.label.instance_id < cfg.instances_per_class);
    CHECK(s.label.viewpoint_id < cfg.num_views);
    CHECK(s.label.translation_id < static_cast<int>(offsets.size()));
    // Full and view carry the same shift: recompute both from scratch.
    const auto& off = offsets[static_cast<size_t>(s.label.translation_id)];
    VoxelGrid full0 = generate_shape(s.label.class_id, s.label.instance_id, cfg.resolution, 77);
    VoxelGrid view0 = render_single_view(full0, s.label.viewpoint_id, cfg.num_views,
                                         cfg.camera_distance_factor, cfg.camera_elevation_deg);
    CHECK(s.full == translate(full0, off[0], off[1], off[2]));
    if (!s.noisy) {
      CHECK(s.view == translate(view0, off[0], off[1], off[2]));
      CHECK(subset_of(s.view, s.full));
    }
    views_per_copy[{s.label.class_id, s.label.instance_id}].insert(s.label.viewpoint_id);
  }
  for (const auto& [key, views] : views_per_copy) CHECK(views.size() == 12);

  Dataset again = build_dataset(cfg, 77);
  REQUIRE(again.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(again.samples[i].full == ds.samples[i].full);
    CHECK(again.samples[i].view == ds.samples[i].view);
  }
}

TEST_CASE("unit cube mesh scaled to the grid voxelizes fully solid") {
  TriMesh cube;
  for (int z = 0; z <= 1; ++z)
    for (int y = 0; y <= 1; ++y)
      for (int x = 0; x <= 1; ++x)
        cube.vertices.push_back({static_cast<double>(x), static_cast<double>(y),
                                 static_cast<double>(z)});
  auto quad = [&cube](int a, int b, int c, int d) {
    cube.faces.push_back({a, b, c});
    cube.faces.push_back({a, c, d});
  };
  quad(0, 1, 3, 2);  // z = 0
  quad(4, 6, 7, 5);  // z = 1
  quad(0, 4, 5, 1);  // y = 0
  quad(2, 3, 7, 6);  // y = 1
  quad(0, 2, 6, 4);  // x = 0
  quad(1, 5, 7, 3);  // x = 1
  VoxelGrid g = mesh_voxelize(cube, 8);
  CHECK(g.count() == 512);
  // Point-in-mesh oracle: every voxel center lies inside the scaled cube.
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) CHECK(g.at(x, y, z) == 1);
  CHECK(mesh_voxelize(cube, 8) == g);
}

TEST_CASE("a single degenerate triangle occupies only the voxels it touches") {
  TriMesh m;
  m.vertices.push_back({0.0, 0.0, 0.0});
  m.vertices.push_back({1.0, 0.0, 0.0});
  m.vertices.push_back({2.0, 0.0, 0.0});  // collinear: zero area
  m.faces.push_back({0, 1, 2});
  VoxelGrid g = mesh_voxelize(m, 8);
  // The segment scales to span x across the grid at the y/z midline; it
  // touches the two voxel layers adjacent to the midplane at most.
  CHECK(g.count() > 0);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (g.at(x, y, z)) {
          CHECK((y == 3 || y == 4));
          CHECK((z == 3 || z == 4));
        }
  CHECK_THROWS(mesh_voxelize(TriMesh{}, 8));
}

TEST_CASE("OFF round trip through a temporary file") {
  const char* path = "test_cube.off";
  {
    std::ofstream out(path);
    out << "OFF\n8 6 0\n";
    for (int z = 0; z <= 1; ++z)
      for (int y = 0; y <= 1; ++y)
        for (int x = 0; x <= 1; ++x) out << x << " " << y << " " << z << "\n";
    out << "4 0 1 3 2\n4 4 6 7 5\n4 0 4 5 1\n4 2 3 7 6\n4 0 2 6 4\n4 1 5 7 3\n";
  }
  TriMesh m = load_off(path);
  CHECK(m.vertices.size() == 8);
  CHECK(m.faces.size() == 12);  // two triangles per quad
  VoxelGrid g = mesh_voxelize(m, 8);
  CHECK(g.count() == 512);
  std::remove(path);
  CHECK_THROWS(load_off("missing_file.off"));
}
