#pragma once

#include <string>

#include "voxsem/inference.hpp"
#include "voxsem/slam.hpp"
#include "voxsem/vae.hpp"
#include "voxsem/voxeldata.hpp"

// Persistence and interchange: run configuration, model checkpoints, dataset
// directories, metrics CSV, and SLAM world/result files. Tensors and grids
// travel in little-endian binary; everything meant for human or test eyes is
// text, with doubles printed at 17 significant digits so they parse back
// bit-identically.

namespace voxsem {

// Every tunable in one place. The text form is flat `section.key = value`
// lines (sections: run, data, train, slam); `#` starts a full-line comment.
// Unknown and duplicate keys are rejected with the offending line number;
// missing keys keep the defaults below.
struct RunConfig {
  DataConfig data;
  TrainConfig train;
  SlamConfig slam;
  std::string out_dir = "out";
  uint64_t seed = 1;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
// Full echo of every key in a fixed order; parse(format(c)) reproduces c.
std::string format_run_config(const RunConfig& cfg);
void save_run_config(const std::string& path, const RunConfig& cfg);

// Applies one `--set section.key=value`-style override in place.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// Shortest text that reads back as exactly the same double (%.17g).
std::string format_double(double v);

// --- model checkpoints -----------------------------------------------------
// Binary layout: magic "VSEM", u32 version, a length-prefixed flat-text
// config block (train.* / vocab.* / params.step), the per-epoch loss history,
// then named tensors (name, group, rank, dims, raw doubles). Parameter values
// only -- optimizer moments are not part of a checkpoint.
void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt);
// Throws std::runtime_error naming the byte offset on bad magic, unsupported
// version, or truncation.
ModelCheckpoint load_checkpoint(const std::string& path);

// --- voxel grids and datasets ----------------------------------------------
// Grid file: 16-byte header (magic "VXG1", u32 resolution, u32 flags = 0,
// u32 reserved) followed by bit-packed occupancy, x fastest, LSB first.
// Padding bits in the final byte must be zero.
void save_voxel_grid(const std::string& path, const VoxelGrid& grid);
VoxelGrid load_voxel_grid(const std::string& path);

// Dataset directory: manifest.txt (config, vocabulary sizes, split indices,
// per-sample records) plus one grid file per stored volume.
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

// --- metrics and SLAM artifacts ----------------------------------------------
// Writes confusion.csv, distances_euclid.csv, distances_cosine.csv,
// pr_curve.csv, summary.csv into dir. One header line each, deterministic
// ordering; re-export of the same report is byte-identical.
void export_metrics(const std::string& dir, const MetricsReport& report);

// Writes trajectory.csv (t, true pose, odometry-only pose, EM pose),
// landmarks.csv, nll.csv, em_summary.csv into dir.
void export_em_result(const std::string& dir, const World& world, const EMResult& result);

// Flat (t, detection, landmark, weight) listing.
void save_weights_csv(const std::string& path, const WeightMatrix& weights);

// Structured-text world file: slam config, true poses and landmarks, odometry,
// and per-detection (position, true landmark, feature mean/std). Detection
// volumes are not persisted -- attach_volumes regenerates them from a seed.
void save_world(const std::string& path, const World& world);
World load_world(const std::string& path);

// Structured-text EM result: estimated poses and landmarks, association
// weights, NLL history, and the ground-truth diagnostics.
void save_em_result(const std::string& path, const EMResult& result);
EMResult load_em_result(const std::string& path);

}  // namespace voxsem
