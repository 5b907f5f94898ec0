#include "voxsem/slam.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

namespace {

constexpr double kPi = std::numbers::pi_v<double>;
constexpr double kLog2Pi = 1.8378770664093454836;

double sq_dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

// log N(s_p; R^T (l - p), sigma^2 I) in three dimensions.
double log_position_likelihood(const std::array<double, 3>& s_p, const Pose& x,
                               const std::array<double, 3>& lp, double sigma_p) {
  const auto pred = world_to_robot(x, lp);
  double sqe = 0.0;
  for (int k = 0; k < 3; ++k) sqe += (s_p[k] - pred[k]) * (s_p[k] - pred[k]);
  return -1.5 * std::log(2.0 * kPi * sigma_p * sigma_p) - sqe / (2.0 * sigma_p * sigma_p);
}

void check_weight_inputs(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<Pose>& poses, const std::vector<Landmark>& landmarks,
                         const SemanticMap& map, const SlamConfig& cfg) {
  if (poses.size() != detections.size())
    throw std::invalid_argument("weights: one pose per keyframe required");
  if (landmarks.empty()) throw std::invalid_argument("weights: no landmarks");
  if (!(cfg.sigma_p > 0.0)) throw std::invalid_argument("weights: sigma_p must be positive");
  if (map.rows() <= 0 || map.pair_means.size() != static_cast<size_t>(map.rows()))
    throw std::invalid_argument("weights: malformed semantic map");
  for (const auto& l : landmarks) {
    if (l.class_id < 0 || l.class_id >= map.classes || l.instance_id < 0 ||
        l.instance_id >= map.instances)
      throw std::invalid_argument("weights: landmark label outside the vocabulary");
  }
}

// Shared tail of both weight paths: per-keyframe association enumeration over
// a [detection][landmark] log-likelihood table, marginalized per (i, j) with
// max-subtracted sums, then explicit row normalization.
WeightMatrix weights_from_tables(const std::vector<std::vector<std::vector<double>>>& loglik,
                                 int M, const SlamConfig& cfg) {
  WeightMatrix wm;
  wm.w.resize(loglik.size());
  for (size_t t = 0; t < loglik.size(); ++t) {
    const int K = static_cast<int>(loglik[t].size());
    if (K == 0) continue;
    const auto assocs = enumerate_associations(K, M, cfg.injective, cfg.assoc_cap);
    if (assocs.empty())
      throw std::invalid_argument("weights: no admissible association (injective with K > M)");
    std::vector<double> logp(assocs.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t d = 0; d < assocs.size(); ++d) {
      double s = 0.0;
      for (int k = 0; k < K; ++k) s += loglik[t][static_cast<size_t>(k)][static_cast<size_t>(assocs[d][static_cast<size_t>(k)])];
      logp[d] = s;
      mx = std::max(mx, s);
    }
    double denom = 0.0;
    for (double s : logp) denom += std::exp(s - mx);
    wm.w[t].assign(static_cast<size_t>(K), std::vector<double>(static_cast<size_t>(M), 0.0));
    for (int i = 0; i < K; ++i) {
      for (size_t d = 0; d < assocs.size(); ++d)
        wm.w[t][static_cast<size_t>(i)][static_cast<size_t>(assocs[d][static_cast<size_t>(i)])] +=
            std::exp(logp[d] - mx);
      double row = 0.0;
      for (double v : wm.w[t][static_cast<size_t>(i)]) row += v;
      (void)denom;  // the row sum equals the denominator up to roundoff
      for (double& v : wm.w[t][static_cast<size_t>(i)]) v /= row;
    }
  }
  return wm;
}

// Deterministic farthest-point k-means over same-length vectors.
std::vector<std::vector<double>> kmeans(const std::vector<std::vector<double>>& points, int M,
                                        std::vector<int>* assignment_out) {
  if (points.empty()) throw std::invalid_argument("kmeans: no points");
  const auto sq = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
  };
  std::vector<std::vector<double>> centers{points[0]};
  while (static_cast<int>(centers.size()) < M) {
    size_t far = 0;
    double best = -1.0;
    for (size_t p = 0; p < points.size(); ++p) {
      double dmin = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) dmin = std::min(dmin, sq(points[p], c));
      if (dmin > best) {
        best = dmin;
        far = p;
      }
    }
    centers.push_back(points[far]);
  }
  std::vector<int> assign(points.size(), 0);
  for (int it = 0; it < 25; ++it) {
    for (size_t p = 0; p < points.size(); ++p) {
      double dmin = std::numeric_limits<double>::infinity();
      for (size_t c = 0; c < centers.size(); ++c) {
        const double d = sq(points[p], centers[c]);
        if (d < dmin) {
          dmin = d;
          assign[p] = static_cast<int>(c);
        }
      }
    }
    for (size_t c = 0; c < centers.size(); ++c) {
      std::vector<double> mean(points[0].size(), 0.0);
      long n = 0;
      for (size_t p = 0; p < points.size(); ++p) {
        if (assign[p] != static_cast<int>(c)) continue;
        for (size_t k = 0; k < mean.size(); ++k) mean[k] += points[p][k];
        ++n;
      }
      if (n > 0)
        for (size_t k = 0; k < mean.size(); ++k) centers[c][k] = mean[k] / static_cast<double>(n);
    }
  }
  if (assignment_out) *assignment_out = assign;
  return centers;
}

}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a < 0.0) a += 2.0 * kPi;
  return a - kPi;
}

std::array<double, 3> world_to_robot(const Pose& x, const std::array<double, 3>& world_point) {
  const double c = std::cos(x.yaw), s = std::sin(x.yaw);
  const double dx = world_point[0] - x.position[0];
  const double dy = world_point[1] - x.position[1];
  const double dz = world_point[2] - x.position[2];
  return {c * dx + s * dy, -s * dx + c * dy, dz};
}

std::array<double, 3> robot_to_world(const Pose& x, const std::array<double, 3>& robot_point) {
  const double c = std::cos(x.yaw), s = std::sin(x.yaw);
  return {x.position[0] + c * robot_point[0] - s * robot_point[1],
          x.position[1] + s * robot_point[0] + c * robot_point[1],
          x.position[2] + robot_point[2]};
}

void SlamConfig::validate() const {
  if (num_landmarks < 1) throw std::invalid_argument("slam config: need at least one landmark");
  if (num_keyframes < 2) throw std::invalid_argument("slam config: need at least two keyframes");
  if (!(loop_radius > 0.0)) throw std::invalid_argument("slam config: loop radius must be positive");
  if (sensor_range < 0.0) throw std::invalid_argument("slam config: negative sensor range");
  if (sigma_p < 0.0 || sigma_f < 0.0 || sigma_odom_pos < 0.0 || sigma_odom_yaw < 0.0)
    throw std::invalid_argument("slam config: negative noise scale");
  if (assoc_cap < 1) throw std::invalid_argument("slam config: association cap must be positive");
  if (max_iters < 1 || gn_max_iters < 1)
    throw std::invalid_argument("slam config: iteration limits must be positive");
  if (!(tol > 0.0) || !(gn_tol > 0.0))
    throw std::invalid_argument("slam config: tolerances must be positive");
}

SemanticMap semantic_map(const ModelCheckpoint& ckpt) {
  SemanticMap m;
  m.pair_means = prior_pair_means(ckpt);
  m.classes = ckpt.vocab.classes;
  m.instances = ckpt.vocab.instances;
  return m;
}

World simulate_world(const SlamConfig& cfg, const SemanticMap& map, uint64_t seed) {
  cfg.validate();
  if (map.rows() <= 0 || map.pair_means.size() != static_cast<size_t>(map.rows()))
    throw std::invalid_argument("simulate_world: malformed semantic map");

  World w;
  w.config = cfg;
  const int T = cfg.num_keyframes;
  const int M = cfg.num_landmarks;

  // Loop trajectory: evenly spaced keyframes on a circle, heading tangential.
  for (int t = 0; t < T; ++t) {
    const double phi = 2.0 * kPi * t / T;
    Pose x;
    x.position = {cfg.loop_radius * std::cos(phi), cfg.loop_radius * std::sin(phi), 0.0};
    x.yaw = wrap_angle(phi + kPi / 2.0);
    w.true_poses.push_back(x);
  }

  Rng lrng(mix_seed(seed, 0x1A9D));
  for (int j = 0; j < M; ++j) {
    Landmark l;
    l.position = {lrng.uniform(-0.6 * cfg.loop_radius, 0.6 * cfg.loop_radius),
                  lrng.uniform(-0.6 * cfg.loop_radius, 0.6 * cfg.loop_radius),
                  lrng.uniform(0.0, 1.5)};
    int row = static_cast<int>(lrng.uniform() * map.rows());
    row = std::min(row, map.rows() - 1);
    l.class_id = row / map.instances;
    l.instance_id = row % map.instances;
    w.true_landmarks.push_back(l);
  }

  Rng orng(mix_seed(seed, 0x0D01));
  for (int t = 1; t < T; ++t) {
    const Pose& a = w.true_poses[static_cast<size_t>(t - 1)];
    const Pose& b = w.true_poses[static_cast<size_t>(t)];
    const auto d = world_to_robot(a, b.position);
    OdometryMeasurement u;
    for (int k = 0; k < 3; ++k) u.dpos[k] = d[k] + cfg.sigma_odom_pos * orng.normal();
    u.dyaw = wrap_angle(b.yaw - a.yaw + cfg.sigma_odom_yaw * orng.normal());
    w.odometry.push_back(u);
  }

  w.detections.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    Rng drng(mix_seed(seed, 0xDE7, static_cast<uint64_t>(t)));
    const Pose& x = w.true_poses[static_cast<size_t>(t)];
    for (int j = 0; j < M; ++j) {
      const Landmark& l = w.true_landmarks[static_cast<size_t>(j)];
      if (std::sqrt(sq_dist3(l.position, x.position)) > cfg.sensor_range) continue;
      Detection det;
      const auto r = world_to_robot(x, l.position);
      for (int k = 0; k < 3; ++k) det.s_p[k] = r[k] + cfg.sigma_p * drng.normal();
      const auto& mu = map.pair_means[static_cast<size_t>(map.row_of(l.class_id, l.instance_id))];
      det.feature.mu.resize(mu.size());
      det.feature.sigma.assign(mu.size(), 1.0);
      for (size_t n = 0; n < mu.size(); ++n)
        det.feature.mu[n] = mu[n] + cfg.sigma_f * drng.normal();
      det.true_landmark = j;
      w.detections[static_cast<size_t>(t)].push_back(std::move(det));
    }
  }
  return w;
}

void attach_volumes(World& world, const ModelCheckpoint& ckpt, uint64_t seed) {
  for (size_t t = 0; t < world.detections.size(); ++t) {
    for (size_t k = 0; k < world.detections[t].size(); ++k) {
      Detection& det = world.detections[t][k];
      if (det.true_landmark < 0 ||
          det.true_landmark >= static_cast<int>(world.true_landmarks.size()))
        throw std::invalid_argument("attach_volumes: detection lacks a source landmark");
      const Landmark& l = world.true_landmarks[static_cast<size_t>(det.true_landmark)];
      if (l.class_id >= kNumShapeClasses)
        throw std::invalid_argument("attach_volumes: label has no procedural shape");
      det.full = generate_shape(l.class_id, l.instance_id, ckpt.config.resolution,
                                mix_seed(seed, 0x5A9E, static_cast<uint64_t>(det.true_landmark)));
      Rng rng(mix_seed(seed, t, k));
      int vp = static_cast<int>(rng.uniform() * ckpt.vocab.views);
      vp = std::min(vp, ckpt.vocab.views - 1);
      det.view = render_single_view(det.full, vp, ckpt.vocab.views);
    }
  }
}

std::vector<Pose> integrate_odometry(const Pose& start,
                                     const std::vector<OdometryMeasurement>& odometry) {
  std::vector<Pose> poses{start};
  for (const auto& u : odometry) {
    const Pose& prev = poses.back();
    Pose next;
    next.position = robot_to_world(prev, u.dpos);
    next.yaw = wrap_angle(prev.yaw + u.dyaw);
    poses.push_back(next);
  }
  return poses;
}

std::vector<std::vector<int>> enumerate_associations(int K, int M, bool injective, long cap) {
  if (K < 0) throw std::invalid_argument("enumerate_associations: negative detection count");
  if (K == 0) return {{}};
  if (M < 1) throw std::invalid_argument("enumerate_associations: no landmarks");
  if (injective && K > M) return {};

  long count = 1;
  for (int k = 0; k < K; ++k) {
    count *= injective ? (M - k) : M;
    if (count > cap)
      throw std::invalid_argument(
          "enumerate_associations: the association set exceeds the cap; reduce the number of "
          "detections per keyframe or landmarks");
  }

  std::vector<std::vector<int>> out;
  out.reserve(static_cast<size_t>(count));
  std::vector<int> beta(static_cast<size_t>(K), 0);
  std::vector<char> used(static_cast<size_t>(M), 0);
  const auto recurse = [&](auto&& self, int k) -> void {
    if (k == K) {
      out.push_back(beta);
      return;
    }
    for (int j = 0; j < M; ++j) {
      if (injective && used[static_cast<size_t>(j)]) continue;
      beta[static_cast<size_t>(k)] = j;
      used[static_cast<size_t>(j)] = 1;
      self(self, k + 1);
      used[static_cast<size_t>(j)] = 0;
    }
  };
  recurse(recurse, 0);
  return out;
}

WeightMatrix weights_reduced(const std::vector<std::vector<Detection>>& detections,
                             const std::vector<Pose>& poses,
                             const std::vector<Landmark>& landmarks, const SemanticMap& map,
                             const SlamConfig& cfg) {
  check_weight_inputs(detections, poses, landmarks, map, cfg);
  const int M = static_cast<int>(landmarks.size());
  std::vector<std::vector<std::vector<double>>> loglik(detections.size());
  for (size_t t = 0; t < detections.size(); ++t) {
    loglik[t].resize(detections[t].size());
    for (size_t k = 0; k < detections[t].size(); ++k) {
      const Detection& det = detections[t][k];
      loglik[t][k].resize(static_cast<size_t>(M));
      for (int j = 0; j < M; ++j) {
        const Landmark& l = landmarks[static_cast<size_t>(j)];
        const auto& row = map.pair_means[static_cast<size_t>(map.row_of(l.class_id, l.instance_id))];
        loglik[t][k][static_cast<size_t>(j)] =
            log_position_likelihood(det.s_p, poses[t], l.position, cfg.sigma_p) +
            gaussian_logpdf(det.feature.mu, row);
      }
    }
  }
  return weights_from_tables(loglik, M, cfg);
}

WeightMatrix weights_full(const std::vector<std::vector<Detection>>& detections,
                          const std::vector<Pose>& poses,
                          const std::vector<Landmark>& landmarks, const SemanticMap& map,
                          const ModelCheckpoint& ckpt, const SlamConfig& cfg,
                          uint64_t kappa_seed) {
  check_weight_inputs(detections, poses, landmarks, map, cfg);
  const int M = static_cast<int>(landmarks.size());
  std::vector<std::vector<std::vector<double>>> loglik(detections.size());
  for (size_t t = 0; t < detections.size(); ++t) {
    loglik[t].resize(detections[t].size());
    for (size_t k = 0; k < detections[t].size(); ++k) {
      const Detection& det = detections[t][k];
      if (det.view.resolution != ckpt.config.resolution ||
          det.full.resolution != ckpt.config.resolution)
        throw std::invalid_argument(
            "weights_full: detections carry no volumes (run attach_volumes first)");

      // Expectation and view/translation factors depend on the detection
      // alone, so any label selects them; the class factor is rebuilt from
      // the detection's own feature so both weight paths score the same
      // semantic evidence.
      const KappaTerms kt = kappa_terms(ckpt, det.view, det.full, LabelTuple{0, 0, 0, 0}, 2,
                                        mix_seed(kappa_seed, t, k));
      double spread = 0.0;
      for (double s : det.feature.sigma) spread += s * s;
      const double det_const = kt.log_kappa_e + kt.log_kappa_kl_vt +
                               entropy_gaussian(det.feature.sigma) - 0.5 * spread;

      loglik[t][k].resize(static_cast<size_t>(M));
      for (int j = 0; j < M; ++j) {
        const Landmark& l = landmarks[static_cast<size_t>(j)];
        const auto& row = map.pair_means[static_cast<size_t>(map.row_of(l.class_id, l.instance_id))];
        loglik[t][k][static_cast<size_t>(j)] =
            log_position_likelihood(det.s_p, poses[t], l.position, cfg.sigma_p) + det_const +
            gaussian_logpdf(det.feature.mu, row);
      }
    }
  }
  return weights_from_tables(loglik, M, cfg);
}

GeometryResult maximize_geometry(const WeightMatrix& weights,
                                 const std::vector<std::vector<Detection>>& detections,
                                 const std::vector<Pose>& initial_poses,
                                 const std::vector<std::array<double, 3>>& initial_landmarks,
                                 const std::vector<OdometryMeasurement>& odometry,
                                 const SlamConfig& cfg) {
  const int T = static_cast<int>(initial_poses.size());
  const int M = static_cast<int>(initial_landmarks.size());
  if (T < 2) throw std::invalid_argument("maximize_geometry: need at least two poses");
  if (odometry.size() != static_cast<size_t>(T - 1))
    throw std::invalid_argument("maximize_geometry: odometry/pose count mismatch");
  if (weights.w.size() != detections.size() || detections.size() != static_cast<size_t>(T))
    throw std::invalid_argument("maximize_geometry: weights/detections/pose count mismatch");
  if (!(cfg.sigma_p > 0.0) || !(cfg.sigma_odom_pos > 0.0) || !(cfg.sigma_odom_yaw > 0.0))
    throw std::invalid_argument("maximize_geometry: noise scales must be positive");

  // State layout: poses 1..T-1 as (x, y, z, yaw), then landmarks as (x, y, z).
  // Pose 0 is the gauge and never moves.
  const int n = 4 * (T - 1) + 3 * M;
  const auto pose_off = [](int t) { return 4 * (t - 1); };
  const auto lm_off = [T](int j) { return 4 * (T - 1) + 3 * j; };

  Eigen::VectorXd state(n);
  for (int t = 1; t < T; ++t) {
    const Pose& x = initial_poses[static_cast<size_t>(t)];
    state.segment<3>(pose_off(t)) = Eigen::Vector3d(x.position[0], x.position[1], x.position[2]);
    state(pose_off(t) + 3) = x.yaw;
  }
  for (int j = 0; j < M; ++j)
    state.segment<3>(lm_off(j)) = Eigen::Vector3d(
        initial_landmarks[static_cast<size_t>(j)][0], initial_landmarks[static_cast<size_t>(j)][1],
        initial_landmarks[static_cast<size_t>(j)][2]);

  const auto pose_at = [&](const Eigen::VectorXd& s, int t) -> Pose {
    if (t == 0) return initial_poses[0];
    Pose x;
    x.position = {s(pose_off(t)), s(pose_off(t) + 1), s(pose_off(t) + 2)};
    x.yaw = wrap_angle(s(pose_off(t) + 3));
    return x;
  };
  const auto landmark_at = [&](const Eigen::VectorXd& s, int j) -> std::array<double, 3> {
    return {s(lm_off(j)), s(lm_off(j) + 1), s(lm_off(j) + 2)};
  };

  const double inv_sp = 1.0 / cfg.sigma_p;
  const double inv_sop = 1.0 / cfg.sigma_odom_pos;
  const double inv_soy = 1.0 / cfg.sigma_odom_yaw;

  const auto cost_of = [&](const Eigen::VectorXd& s) -> double {
    double c = 0.0;
    for (int t = 1; t < T; ++t) {
      const Pose a = pose_at(s, t - 1);
      const Pose b = pose_at(s, t);
      const auto d = world_to_robot(Pose{a.position, a.yaw}, b.position);
      for (int k = 0; k < 3; ++k) {
        const double e = (d[k] - odometry[static_cast<size_t>(t - 1)].dpos[k]) * inv_sop;
        c += 0.5 * e * e;
      }
      const double ey =
          wrap_angle(b.yaw - a.yaw - odometry[static_cast<size_t>(t - 1)].dyaw) * inv_soy;
      c += 0.5 * ey * ey;
    }
    for (int t = 0; t < T; ++t) {
      for (size_t k = 0; k < detections[static_cast<size_t>(t)].size(); ++k) {
        for (int j = 0; j < M; ++j) {
          const double w = weights.w[static_cast<size_t>(t)][k][static_cast<size_t>(j)];
          if (w <= 1e-12) continue;
          const Pose x = pose_at(s, t);
          const auto pred = world_to_robot(x, landmark_at(s, j));
          for (int a = 0; a < 3; ++a) {
            const double e = (pred[a] - detections[static_cast<size_t>(t)][k].s_p[a]) * inv_sp;
            c += 0.5 * w * e * e;
          }
        }
      }
    }
    return c;
  };

  // One Gauss-Newton accumulation of H = J^T J and g = J^T r at the state.
  const auto accumulate = [&](const Eigen::VectorXd& s, Eigen::MatrixXd& H, Eigen::VectorXd& g) {
    H.setZero();
    g.setZero();
    const auto rot_t = [](double yaw) {
      Eigen::Matrix3d R;
      const double c = std::cos(yaw), sn = std::sin(yaw);
      R << c, sn, 0.0, -sn, c, 0.0, 0.0, 0.0, 1.0;
      return R;  // world -> robot
    };
    const auto drot_t = [](double yaw) {
      Eigen::Matrix3d R;
      const double c = std::cos(yaw), sn = std::sin(yaw);
      R << -sn, c, 0.0, -c, -sn, 0.0, 0.0, 0.0, 0.0;
      return R;
    };
    // Adds one residual block: r (already scaled) with jacobian blocks over
    // the listed state segments.
    struct Block {
      int offset;     // -1 for the fixed pose 0
      Eigen::MatrixXd jac;
    };
    const auto add_factor = [&](const Eigen::VectorXd& r, const std::vector<Block>& blocks) {
      for (const auto& a : blocks) {
        if (a.offset < 0) continue;
        g.segment(a.offset, a.jac.cols()) += a.jac.transpose() * r;
        for (const auto& b : blocks) {
          if (b.offset < 0) continue;
          H.block(a.offset, b.offset, a.jac.cols(), b.jac.cols()) += a.jac.transpose() * b.jac;
        }
      }
    };

    for (int t = 1; t < T; ++t) {
      const Pose a = pose_at(s, t - 1);
      const Pose b = pose_at(s, t);
      const Eigen::Matrix3d Rt = rot_t(a.yaw);
      const Eigen::Matrix3d dRt = drot_t(a.yaw);
      const Eigen::Vector3d dp(b.position[0] - a.position[0], b.position[1] - a.position[1],
                               b.position[2] - a.position[2]);
      Eigen::Vector3d e = Rt * dp;
      for (int k = 0; k < 3; ++k) e(k) -= odometry[static_cast<size_t>(t - 1)].dpos[k];
      e *= inv_sop;

      // Position part: jacobians wrt previous pose (pos, yaw) and this pose.
      Eigen::MatrixXd Jprev(3, 4), Jcur(3, 4);
      Jprev.leftCols<3>() = -Rt * inv_sop;
      Jprev.col(3) = dRt * dp * inv_sop;
      Jcur.leftCols<3>() = Rt * inv_sop;
      Jcur.col(3).setZero();
      add_factor(e, {{t - 1 == 0 ? -1 : pose_off(t - 1), Jprev}, {pose_off(t), Jcur}});

      // Yaw part.
      Eigen::VectorXd ey(1);
      ey(0) = wrap_angle(b.yaw - a.yaw - odometry[static_cast<size_t>(t - 1)].dyaw) * inv_soy;
      Eigen::MatrixXd Jyp(1, 4), Jyc(1, 4);
      Jyp.setZero();
      Jyp(0, 3) = -inv_soy;
      Jyc.setZero();
      Jyc(0, 3) = inv_soy;
      add_factor(ey, {{t - 1 == 0 ? -1 : pose_off(t - 1), Jyp}, {pose_off(t), Jyc}});
    }

    for (int t = 0; t < T; ++t) {
      const Pose x = pose_at(s, t);
      const Eigen::Matrix3d Rt = rot_t(x.yaw);
      const Eigen::Matrix3d dRt = drot_t(x.yaw);
      for (size_t k = 0; k < detections[static_cast<size_t>(t)].size(); ++k) {
        for (int j = 0; j < M; ++j) {
          const double w = weights.w[static_cast<size_t>(t)][k][static_cast<size_t>(j)];
          if (w <= 1e-12) continue;
          const double scale = std::sqrt(w) * inv_sp;
          const auto lp = landmark_at(s, j);
          const Eigen::Vector3d off(lp[0] - x.position[0], lp[1] - x.position[1],
                                    lp[2] - x.position[2]);
          Eigen::Vector3d e = Rt * off;
          for (int a = 0; a < 3; ++a) e(a) -= detections[static_cast<size_t>(t)][k].s_p[a];
          e *= scale;

          Eigen::MatrixXd Jl = (Rt * scale).eval();
          if (t == 0) {
            add_factor(e, {{lm_off(j), Jl}});
          } else {
            Eigen::MatrixXd Jx(3, 4);
            Jx.leftCols<3>() = -Rt * scale;
            Jx.col(3) = dRt * off * scale;
            add_factor(e, {{pose_off(t), Jx}, {lm_off(j), Jl}});
          }
        }
      }
    }
  };

  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd g(n);
  double cost = cost_of(state);
  if (!std::isfinite(cost))
    throw std::invalid_argument("maximize_geometry: non-finite measurements or initial state");
  GeometryResult res;
  res.cost_history.push_back(cost);

  for (int iter = 0; iter < cfg.gn_max_iters; ++iter) {
    accumulate(state, H, g);
    bool accepted = false;
    Eigen::VectorXd next;
    double next_cost = cost;
    double step_norm = 0.0;
    for (double lambda = 0.0; lambda <= 1e12; lambda = lambda == 0.0 ? 1e-8 : lambda * 100.0) {
      Eigen::MatrixXd Hd = H;
      if (lambda > 0.0) Hd.diagonal().array() += lambda;
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(Hd);
      if (ldlt.info() != Eigen::Success) continue;
      const Eigen::VectorXd delta = ldlt.solve(-g);
      if (!delta.allFinite()) continue;
      Eigen::VectorXd cand = state + delta;
      for (int t = 1; t < T; ++t) cand(pose_off(t) + 3) = wrap_angle(cand(pose_off(t) + 3));
      const double c2 = cost_of(cand);
      if (std::isfinite(c2) && c2 <= cost + 1e-12) {
        next = std::move(cand);
        next_cost = c2;
        step_norm = delta.norm();
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (iter == 0 && !H.allFinite())
        throw std::runtime_error("maximize_geometry: normal equations stayed singular");
      break;  // no damping level improves the cost; we are at a minimum
    }
    state = next;
    cost = next_cost;
    res.cost_history.push_back(cost);
    if (step_norm < cfg.gn_tol) break;
  }

  res.poses.resize(static_cast<size_t>(T));
  res.poses[0] = initial_poses[0];
  for (int t = 1; t < T; ++t) res.poses[static_cast<size_t>(t)] = pose_at(state, t);
  res.landmark_positions.resize(static_cast<size_t>(M));
  for (int j = 0; j < M; ++j) res.landmark_positions[static_cast<size_t>(j)] = landmark_at(state, j);
  return res;
}

std::vector<int> maximize_labels(const WeightMatrix& weights,
                                 const std::vector<std::vector<Detection>>& detections,
                                 const SemanticMap& map) {
  if (weights.w.size() != detections.size())
    throw std::invalid_argument("maximize_labels: weights/detections mismatch");
  int M = 0;
  for (const auto& frame : weights.w)
    for (const auto& row : frame) M = std::max(M, static_cast<int>(row.size()));
  std::vector<int> labels(static_cast<size_t>(M), 0);
  for (int j = 0; j < M; ++j) {
    std::vector<double> score(static_cast<size_t>(map.rows()), 0.0);
    for (size_t t = 0; t < detections.size(); ++t) {
      for (size_t k = 0; k < detections[t].size(); ++k) {
        const double w = weights.w[t][k][static_cast<size_t>(j)];
        if (w <= 0.0) continue;
        for (int r = 0; r < map.rows(); ++r)
          score[static_cast<size_t>(r)] +=
              w * gaussian_logpdf(detections[t][k].feature.mu,
                                  map.pair_means[static_cast<size_t>(r)]);
      }
    }
    int best = 0;
    for (int r = 1; r < map.rows(); ++r)
      if (score[static_cast<size_t>(r)] > score[static_cast<size_t>(best)]) best = r;
    labels[static_cast<size_t>(j)] = best;
  }
  return labels;
}

namespace {

// Variational free energy of the current state: expected complete-data NLL
// under the association weights, minus the association entropy, plus the
// odometry NLL. Non-increasing across EM iterations. The uniform association
// prior contributes only a constant and is dropped.
double expected_nll(const WeightMatrix& weights,
                    const std::vector<std::vector<Detection>>& detections,
                    const std::vector<Pose>& poses, const std::vector<Landmark>& landmarks,
                    const SemanticMap& map, const std::vector<OdometryMeasurement>& odometry,
                    const SlamConfig& cfg) {
  double f = 0.0;
  for (size_t t = 0; t < detections.size(); ++t) {
    for (size_t k = 0; k < detections[t].size(); ++k) {
      for (size_t j = 0; j < landmarks.size(); ++j) {
        const double w = weights.w[t][k][j];
        if (w <= 0.0) continue;
        const Landmark& l = landmarks[j];
        const double ll =
            log_position_likelihood(detections[t][k].s_p, poses[t], l.position, cfg.sigma_p) +
            gaussian_logpdf(detections[t][k].feature.mu,
                            map.pair_means[static_cast<size_t>(map.row_of(l.class_id, l.instance_id))]);
        f += w * (-ll) + w * std::log(w);
      }
    }
  }
  for (size_t t = 0; t + 1 < poses.size(); ++t) {
    const auto d = world_to_robot(poses[t], poses[t + 1].position);
    for (int k = 0; k < 3; ++k) {
      const double e = d[k] - odometry[t].dpos[k];
      f += 0.5 * kLog2Pi + std::log(cfg.sigma_odom_pos) +
           e * e / (2.0 * cfg.sigma_odom_pos * cfg.sigma_odom_pos);
    }
    const double ey = wrap_angle(poses[t + 1].yaw - poses[t].yaw - odometry[t].dyaw);
    f += 0.5 * kLog2Pi + std::log(cfg.sigma_odom_yaw) +
         ey * ey / (2.0 * cfg.sigma_odom_yaw * cfg.sigma_odom_yaw);
  }
  return f;
}

}  // namespace

EMResult em_run(const World& world, const SemanticMap& map, const SlamConfig& cfg) {
  cfg.validate();
  const int T = static_cast<int>(world.true_poses.size());
  if (T < 2 || world.odometry.size() != static_cast<size_t>(T - 1))
    throw std::invalid_argument("em_run: malformed world");
  long n_det = 0;
  for (const auto& frame : world.detections) n_det += static_cast<long>(frame.size());
  if (n_det == 0) throw std::invalid_argument("em_run: world has no detections");

  EMResult res;

  // Initialization: odometry for the trajectory (anchored at the known first
  // pose), clustered world-frame detections for the landmarks, cluster-wise
  // label votes for the semantics.
  std::vector<Pose> poses = integrate_odometry(world.true_poses[0], world.odometry);
  // Landmarks: cluster detections in a joint [world position | scaled feature]
  // space. Position-only clustering merges landmarks that sit close together;
  // the feature block separates those whenever their labels differ. Half
  // weight keeps per-detection feature noise from shattering one landmark's
  // cluster while leaving well-separated prior rows dominant.
  constexpr double kFeatureWeight = 0.5;
  std::vector<std::vector<double>> points;
  std::vector<std::pair<size_t, size_t>> point_src;
  for (size_t t = 0; t < world.detections.size(); ++t) {
    for (size_t k = 0; k < world.detections[t].size(); ++k) {
      const auto wp = robot_to_world(poses[t], world.detections[t][k].s_p);
      std::vector<double> pt(wp.begin(), wp.end());
      for (double f : world.detections[t][k].feature.mu) pt.push_back(kFeatureWeight * f);
      points.push_back(std::move(pt));
      point_src.emplace_back(t, k);
    }
  }
  std::vector<int> assign;
  const auto centers = kmeans(points, cfg.num_landmarks, &assign);

  WeightMatrix cluster_w;
  cluster_w.w.resize(world.detections.size());
  for (size_t t = 0; t < world.detections.size(); ++t)
    cluster_w.w[t].assign(world.detections[t].size(),
                          std::vector<double>(static_cast<size_t>(cfg.num_landmarks), 0.0));
  for (size_t p = 0; p < points.size(); ++p)
    cluster_w.w[point_src[p].first][point_src[p].second][static_cast<size_t>(assign[p])] = 1.0;
  const auto init_rows = maximize_labels(cluster_w, world.detections, map);

  std::vector<Landmark> landmarks(static_cast<size_t>(cfg.num_landmarks));
  for (int j = 0; j < cfg.num_landmarks; ++j) {
    const auto& c = centers[static_cast<size_t>(j)];
    landmarks[static_cast<size_t>(j)].position = {c[0], c[1], c[2]};
    landmarks[static_cast<size_t>(j)].class_id = init_rows[static_cast<size_t>(j)] / map.instances;
    landmarks[static_cast<size_t>(j)].instance_id = init_rows[static_cast<size_t>(j)] % map.instances;
  }

  WeightMatrix weights;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    weights = weights_reduced(world.detections, poses, landmarks, map, cfg);

    std::vector<std::array<double, 3>> lps(landmarks.size());
    for (size_t j = 0; j < landmarks.size(); ++j) lps[j] = landmarks[j].position;
    const GeometryResult geo =
        maximize_geometry(weights, world.detections, poses, lps, world.odometry, cfg);
    poses = geo.poses;
    for (size_t j = 0; j < landmarks.size(); ++j) landmarks[j].position = geo.landmark_positions[j];

    const auto rows = maximize_labels(weights, world.detections, map);
    for (size_t j = 0; j < landmarks.size(); ++j) {
      landmarks[j].class_id = rows[j] / map.instances;
      landmarks[j].instance_id = rows[j] % map.instances;
    }

    res.nll_history.push_back(
        expected_nll(weights, world.detections, poses, landmarks, map, world.odometry, cfg));
    res.iterations = iter;
    if (res.nll_history.size() >= 2) {
      const double prev = res.nll_history[res.nll_history.size() - 2];
      if (std::abs(prev - res.nll_history.back()) < cfg.tol) break;
    }
  }

  res.poses = poses;
  res.landmarks = landmarks;
  res.weights = weights;

  // Diagnostics against ground truth.
  const auto odo_poses = integrate_odometry(world.true_poses[0], world.odometry);
  double se = 0.0, se_odo = 0.0;
  for (int t = 0; t < T; ++t) {
    se += sq_dist3(poses[static_cast<size_t>(t)].position,
                   world.true_poses[static_cast<size_t>(t)].position);
    se_odo += sq_dist3(odo_poses[static_cast<size_t>(t)].position,
                       world.true_poses[static_cast<size_t>(t)].position);
  }
  res.pose_rmse = std::sqrt(se / T);
  res.odometry_rmse = std::sqrt(se_odo / T);

  // Greedy nearest matching of estimated landmarks to true landmarks.
  std::vector<char> used_est(landmarks.size(), 0), used_true(world.true_landmarks.size(), 0);
  double lm_se = 0.0;
  long matched = 0, labels_right = 0;
  const size_t pairs = std::min(landmarks.size(), world.true_landmarks.size());
  for (size_t round = 0; round < pairs; ++round) {
    double best = std::numeric_limits<double>::infinity();
    size_t be = 0, bt = 0;
    for (size_t e = 0; e < landmarks.size(); ++e) {
      if (used_est[e]) continue;
      for (size_t tr = 0; tr < world.true_landmarks.size(); ++tr) {
        if (used_true[tr]) continue;
        const double d = sq_dist3(landmarks[e].position, world.true_landmarks[tr].position);
        if (d < best) {
          best = d;
          be = e;
          bt = tr;
        }
      }
    }
    used_est[be] = used_true[bt] = 1;
    lm_se += best;
    ++matched;
    if (landmarks[be].class_id == world.true_landmarks[bt].class_id &&
        landmarks[be].instance_id == world.true_landmarks[bt].instance_id)
      ++labels_right;
  }
  res.landmark_rmse = matched > 0 ? std::sqrt(lm_se / static_cast<double>(matched)) : 0.0;
  res.label_accuracy = matched > 0 ? static_cast<double>(labels_right) / static_cast<double>(matched)
                                   : 0.0;
  return res;
}

}  // namespace voxsem
