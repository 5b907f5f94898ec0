#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "voxsem/vae.hpp"
#include "voxsem/voxeldata.hpp"

namespace voxsem {

// Posterior feature over the class+instance blocks, the part of the code the
// classifier and retrieval ranking work in.
struct EncodedFeature {
  std::vector<double> mu;     // (class, instance) blocks concatenated
  std::vector<double> sigma;
  PosteriorBlocks post;       // full posterior retained for the kappa terms
};

// Likelihood factors of a (view, full, label) triple. Everything is kept in
// log space: the expectation factor alone is exp(-hundreds) at 16^3 and would
// underflow immediately.
struct KappaTerms {
  double log_kappa_e = 0.0;        // E_z[log p(full | z)], MC with fixed seed
  double log_kappa_kl_vt = 0.0;    // log sum_v exp(-KL_v) + log sum_t exp(-KL_t)
  double log_kappa_kl_c = 0.0;     // -KL over the class+instance blocks
  double log_kappa_kl_c_factored = 0.0;  // density * entropy / spread form
  double entropy = 0.0;            // H of the class+instance posterior

  double log_total() const { return log_kappa_e + log_kappa_kl_vt + log_kappa_kl_c; }
};

enum class ClassifyMode { kClassAndInstance, kClassOnly };

struct ClassifyResult {
  int class_id = -1;
  int instance_id = -1;            // -1 in class-only mode
  std::vector<double> class_scores;  // per class: best log-density over its table
};

struct MetricsReport {
  std::vector<std::vector<long>> confusion;  // [true class][predicted class]
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<double>> dist_euclid;  // over class prior means
  std::vector<std::vector<double>> dist_cosine;  // 1 - cosine similarity
  std::vector<std::pair<double, double>> pr_curve;  // (recall, precision) per rank
  double auc = 0.0;  // area under the ROC of the pooled retrieval ranking
  double map = 0.0;  // mean average precision over queries
  double mean_retrieval_iou = 0.0;
  double mean_intra = 0.0;  // pairwise (mu^c, mu^i) distance, same class
  double mean_inter = 0.0;  // pairwise (mu^c, mu^i) distance, across classes
};

// log N(x; mu, I) = -(d/2) log(2 pi) - ||x - mu||^2 / 2.
double gaussian_logpdf(const std::vector<double>& x, const std::vector<double>& mu);
// Differential entropy of a diagonal Gaussian with the given stds.
double entropy_gaussian(const std::vector<double>& sigma);
// The identity behind the classifier: -KL(q || N(mu_p, I)) computed from the
// density of the posterior mean under the prior, the posterior entropy, and
// the posterior spread. Equals -kl closed form to floating-point accuracy.
double log_kappa_factored(const std::vector<double>& mu_s, const std::vector<double>& sigma_s,
                          const std::vector<double>& mu_p);

EncodedFeature encode_feature(const ModelCheckpoint& ckpt, const VoxelGrid& view);

KappaTerms kappa_terms(const ModelCheckpoint& ckpt, const VoxelGrid& view,
                       const VoxelGrid& full, const LabelTuple& label, int n_draws = 0,
                       uint64_t seed = 0);

// Prior mean table: one row per (class, instance) pair, the concatenated
// (mu^c, mu^i) vector. Row index = class * instances + instance.
std::vector<std::vector<double>> prior_pair_means(const ModelCheckpoint& ckpt);

// Pure scoring step of the classifier, split out so the tie rule and the
// zero-distance case are testable without a trained network.
ClassifyResult classify_feature(const std::vector<double>& feature_mu,
                                const std::vector<std::vector<double>>& pair_means,
                                int classes, int instances, ClassifyMode mode, int dim_c);

ClassifyResult mle_classify(const ModelCheckpoint& ckpt, const VoxelGrid& view,
                            ClassifyMode mode = ClassifyMode::kClassAndInstance);

// Decode the posterior means of a view and threshold at 0.5.
VoxelGrid retrieve(const ModelCheckpoint& ckpt, const VoxelGrid& view);

// Average precision of a relevance-ranked list ("sum of precision at each
// relevant rank / number of relevant").
double average_precision(const std::vector<int>& relevance);
// Trapezoid area under the ROC of a (score, relevance) pool; ties handled by
// grouping equal scores.
double roc_auc(std::vector<std::pair<double, int>> scored);

MetricsReport evaluate(const ModelCheckpoint& ckpt, const Dataset& dataset);

}  // namespace voxsem
