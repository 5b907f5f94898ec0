#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxsem/tensor.hpp"

namespace voxsem {

// Binary occupancy cube. Cell (x,y,z) spans [x,x+1)x[y,y+1)x[z,z+1) in grid
// coordinates, so voxel centers sit at half-integers and the grid occupies
// [0,D]^3 with its center at D/2.
struct VoxelGrid {
  int resolution = 0;
  std::vector<uint8_t> occupancy;  // D^3 cells, x fastest then y then z

  VoxelGrid() = default;
  explicit VoxelGrid(int d) : resolution(d) {
    if (d < 4) throw std::invalid_argument("voxel grid: resolution must be >= 4");
    occupancy.assign(static_cast<size_t>(d) * d * d, 0);
  }

  long idx(int x, int y, int z) const {
    return (static_cast<long>(z) * resolution + y) * resolution + x;
  }
  uint8_t at(int x, int y, int z) const { return occupancy[static_cast<size_t>(idx(x, y, z))]; }
  void set(int x, int y, int z, uint8_t v) {
    occupancy[static_cast<size_t>(idx(x, y, z))] = v;
  }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && x < resolution && y >= 0 && y < resolution && z >= 0 && z < resolution;
  }
  long count() const {
    long n = 0;
    for (uint8_t v : occupancy) n += v;
    return n;
  }
  bool operator==(const VoxelGrid& o) const {
    return resolution == o.resolution && occupancy == o.occupancy;
  }

  // {1, D, D, D} input tensor for the networks.
  Tensor to_tensor() const;
};

double voxel_iou(const VoxelGrid& a, const VoxelGrid& b);

struct LabelTuple {
  int class_id = 0;
  int instance_id = 0;
  int viewpoint_id = 0;
  int translation_id = 0;
};

struct Sample {
  LabelTuple label;
  VoxelGrid full;  // reconstruction target
  VoxelGrid view;  // encoder input
  bool noisy = false;
};

struct DataConfig {
  int num_classes = 4;
  int instances_per_class = 8;
  int num_views = 12;
  int resolution = 16;
  int max_shift = 2;  // translation vocabulary: all integer offsets with |d| <= max_shift
  double noise_rate = 0.05;
  double camera_distance_factor = 2.5;  // times grid half-width
  double camera_elevation_deg = 30.0;
  int test_instances_per_class = 2;  // highest instance ids are held out
};

struct Dataset {
  DataConfig config;
  std::vector<Sample> samples;
  std::vector<int> train_idx;
  std::vector<int> test_idx;

  int num_translations() const {
    const int w = 2 * config.max_shift + 1;
    return w * w * w;
  }
};

// Offsets in translation-vocabulary order: index decomposes as x fastest.
std::vector<std::array<int, 3>> translation_offsets(int max_shift);

// Procedural labeled shapes. Classes 0..5: box, tube, pyramid, L-bracket,
// table-like, chair-like. Deterministic per (class, instance, resolution, seed).
constexpr int kNumShapeClasses = 6;
VoxelGrid generate_shape(int class_id, int instance_id, int resolution, uint64_t seed);

// Perspective single view: camera on a circle of V azimuth bins at the given
// elevation, looking at the grid center from distance factor * (D/2). A voxel
// is kept iff no other occupied voxel intersects the camera ray strictly
// before it does.
VoxelGrid render_single_view(const VoxelGrid& full, int viewpoint_id, int V,
                             double camera_distance_factor = 2.5, double elevation_deg = 30.0);

VoxelGrid translate(const VoxelGrid& g, int dx, int dy, int dz);

VoxelGrid add_noise(const VoxelGrid& g, double flip_rate, uint64_t seed);

Dataset build_dataset(const DataConfig& cfg, uint64_t seed);

// Mesh ingestion (OFF polygon files), for users with real CAD data.
struct TriMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;
};

TriMesh load_off(const std::string& path);

// Surface voxelization (triangle/box intersection) plus interior flood fill.
// The mesh is uniformly scaled and centered so its bounding box fills the grid.
VoxelGrid mesh_voxelize(const TriMesh& mesh, int resolution);

}  // namespace voxsem
