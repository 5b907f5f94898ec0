#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxsem/inference.hpp"
#include "voxsem/vae.hpp"
#include "voxsem/voxeldata.hpp"

namespace voxsem {

// Robot pose: position in meters plus heading about the z axis.
struct Pose {
  std::array<double, 3> position{0.0, 0.0, 0.0};
  double yaw = 0.0;  // kept in [-pi, pi)
};

double wrap_angle(double a);  // into [-pi, pi)

// Rotate a world-frame offset into the robot frame (and back).
std::array<double, 3> world_to_robot(const Pose& x, const std::array<double, 3>& world_point);
std::array<double, 3> robot_to_world(const Pose& x, const std::array<double, 3>& robot_point);

struct Landmark {
  std::array<double, 3> position{0.0, 0.0, 0.0};
  int class_id = 0;
  int instance_id = 0;
};

// One semantic observation: where the landmark appeared in the robot frame
// and what its view encoded to. The volumes are retained only when the
// uncancelled weight path needs them.
struct Detection {
  std::array<double, 3> s_p{0.0, 0.0, 0.0};
  EncodedFeature feature;
  VoxelGrid view;          // resolution 0 when not kept
  VoxelGrid full;          // resolution 0 when not kept
  int true_landmark = -1;  // ground truth, evaluation only
};

struct OdometryMeasurement {
  std::array<double, 3> dpos{0.0, 0.0, 0.0};  // in the previous pose's frame
  double dyaw = 0.0;
};

struct SlamConfig {
  int num_landmarks = 5;
  int num_keyframes = 20;
  double loop_radius = 5.0;
  double sensor_range = 6.0;
  double sigma_p = 0.1;        // detection position noise and likelihood scale
  double sigma_f = 0.5;        // feature noise about the label's prior mean
  double sigma_odom_pos = 0.08;
  double sigma_odom_yaw = 0.03;
  long assoc_cap = 100000;     // enumeration refuses instances above this
  bool injective = false;      // at most one detection per landmark when set
  int max_iters = 30;
  double tol = 1e-6;           // stop when the expected NLL moves less
  int gn_max_iters = 50;
  double gn_tol = 1e-8;        // Gauss-Newton step-norm stop

  void validate() const;
};

// Label vocabulary geometry pulled out of a checkpoint: one prior mean row
// per (class, instance) pair, class-major.
struct SemanticMap {
  std::vector<std::vector<double>> pair_means;
  int classes = 0;
  int instances = 0;

  int rows() const { return classes * instances; }
  int row_of(int class_id, int instance_id) const { return class_id * instances + instance_id; }
};

SemanticMap semantic_map(const ModelCheckpoint& ckpt);

struct World {
  SlamConfig config;
  std::vector<Pose> true_poses;
  std::vector<Landmark> true_landmarks;
  std::vector<OdometryMeasurement> odometry;        // one per step, T-1 total
  std::vector<std::vector<Detection>> detections;   // per keyframe
};

// Deterministic loop-trajectory world: noisy odometry along a circle and
// range-limited detections of randomly placed, randomly labeled landmarks.
// Features are drawn about the true label's prior mean with std sigma_f.
World simulate_world(const SlamConfig& cfg, const SemanticMap& map, uint64_t seed);

// Synthesizes (full, view) volumes for every detection from its true
// landmark's label, for the uncancelled weight path.
void attach_volumes(World& world, const ModelCheckpoint& ckpt, uint64_t seed);

// Poses recovered by integrating the odometry measurements from pose 0.
std::vector<Pose> integrate_odometry(const Pose& start,
                                     const std::vector<OdometryMeasurement>& odometry);

// All assignments of K detections to M landmarks, one beta value per
// detection; only one-to-one assignments when injective. K = 0 yields the
// single empty assignment. Refuses instances larger than cap.
std::vector<std::vector<int>> enumerate_associations(int K, int M, bool injective,
                                                     long cap = 100000);

// w[t][i][j]: posterior probability that detection i of keyframe t came from
// landmark j. Rows sum to one.
struct WeightMatrix {
  std::vector<std::vector<std::vector<double>>> w;
};

// Association weights with the per-detection likelihood already reduced to
// position density times prior density of the feature mean.
WeightMatrix weights_reduced(const std::vector<std::vector<Detection>>& detections,
                             const std::vector<Pose>& poses,
                             const std::vector<Landmark>& landmarks, const SemanticMap& map,
                             const SlamConfig& cfg);

// Same weights computed from the full uncancelled likelihood product — the
// expectation and view/translation factors and the posterior entropy and
// spread all included. Needs the detection volumes; kappa_seed fixes the MC
// draws so the result is deterministic.
WeightMatrix weights_full(const std::vector<std::vector<Detection>>& detections,
                          const std::vector<Pose>& poses,
                          const std::vector<Landmark>& landmarks, const SemanticMap& map,
                          const ModelCheckpoint& ckpt, const SlamConfig& cfg,
                          uint64_t kappa_seed);

struct GeometryResult {
  std::vector<Pose> poses;
  std::vector<std::array<double, 3>> landmark_positions;
  std::vector<double> cost_history;  // monotone non-increasing
};

// Weighted nonlinear least squares over poses and landmark positions:
// odometry factors plus weight-scaled detection factors, first pose held
// fixed. Damped Gauss-Newton until the step norm drops below gn_tol.
GeometryResult maximize_geometry(const WeightMatrix& weights,
                                 const std::vector<std::vector<Detection>>& detections,
                                 const std::vector<Pose>& initial_poses,
                                 const std::vector<std::array<double, 3>>& initial_landmarks,
                                 const std::vector<OdometryMeasurement>& odometry,
                                 const SlamConfig& cfg);

// Per-landmark label row maximizing the weight-averaged feature density.
// Ties go to the lowest row index.
std::vector<int> maximize_labels(const WeightMatrix& weights,
                                 const std::vector<std::vector<Detection>>& detections,
                                 const SemanticMap& map);

struct EMResult {
  std::vector<Pose> poses;
  std::vector<Landmark> landmarks;
  WeightMatrix weights;
  std::vector<double> nll_history;  // expected NLL after each iteration
  int iterations = 0;

  // Diagnostics against ground truth.
  double pose_rmse = 0.0;
  double odometry_rmse = 0.0;  // odometry-only baseline over the same poses
  double landmark_rmse = 0.0;
  double label_accuracy = 0.0;
};

// Alternates association weights, geometry, and labels from an
// odometry-plus-clustering initialization until the expected NLL stalls.
EMResult em_run(const World& world, const SemanticMap& map, const SlamConfig& cfg);

}  // namespace voxsem
