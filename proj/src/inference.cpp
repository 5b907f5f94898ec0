#include "voxsem/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

std::vector<double> slice_vec(const std::vector<double>& v, int begin, int len) {
  return std::vector<double>(v.begin() + begin, v.begin() + begin + len);
}

// KL(N(mu_s, diag sigma_s^2) || N(mu_p, I)) over equal-length vectors.
double kl_diag(const std::vector<double>& mu_s, const std::vector<double>& sigma_s,
               const std::vector<double>& mu_p) {
  double kl = 0.0;
  for (size_t j = 0; j < mu_s.size(); ++j) {
    const double d = mu_s[j] - mu_p[j];
    kl += -std::log(sigma_s[j]) + 0.5 * (sigma_s[j] * sigma_s[j] + d * d) - 0.5;
  }
  return kl;
}

double logsumexp(const std::vector<double>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

double bernoulli_loglik(const PredictedShape& pred, const VoxelGrid& target) {
  double ll = 0.0;
  for (size_t j = 0; j < pred.probs.size(); ++j) {
    const double p = pred.probs[j];
    ll += target.occupancy[j] ? std::log(p) : std::log(1.0 - p);
  }
  return ll;
}

}  // namespace

double gaussian_logpdf(const std::vector<double>& x, const std::vector<double>& mu) {
  if (x.empty() || x.size() != mu.size())
    throw std::invalid_argument("gaussian_logpdf: x and mu must be nonempty and equal-length");
  double sq = 0.0;
  for (size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - mu[j];
    sq += d * d;
  }
  return -0.5 * static_cast<double>(x.size()) * kLog2Pi - 0.5 * sq;
}

double entropy_gaussian(const std::vector<double>& sigma) {
  if (sigma.empty()) throw std::invalid_argument("entropy_gaussian: empty sigma");
  double h = 0.0;
  for (double s : sigma) {
    if (!(s > 0.0)) throw std::invalid_argument("entropy_gaussian: sigma must be positive");
    h += 0.5 * (kLog2Pi + 1.0) + std::log(s);
  }
  return h;
}

double log_kappa_factored(const std::vector<double>& mu_s, const std::vector<double>& sigma_s,
                          const std::vector<double>& mu_p) {
  if (mu_s.size() != sigma_s.size())
    throw std::invalid_argument("log_kappa_factored: mu_s/sigma_s size mismatch");
  double spread = 0.0;
  for (double s : sigma_s) spread += s * s;
  return gaussian_logpdf(mu_s, mu_p) + entropy_gaussian(sigma_s) - 0.5 * spread;
}

EncodedFeature encode_feature(const ModelCheckpoint& ckpt, const VoxelGrid& view) {
  EncodedFeature f;
  f.post = encode(ckpt.params, ckpt.config, view);
  const int ci = ckpt.config.dims.c + ckpt.config.dims.i;  // blocks are adjacent, c first
  f.mu = slice_vec(f.post.mu, 0, ci);
  f.sigma = slice_vec(f.post.sigma, 0, ci);
  return f;
}

KappaTerms kappa_terms(const ModelCheckpoint& ckpt, const VoxelGrid& view,
                       const VoxelGrid& full, const LabelTuple& label, int n_draws,
                       uint64_t seed) {
  const TrainConfig& cfg = ckpt.config;
  if (full.resolution != cfg.resolution)
    throw std::invalid_argument("kappa_terms: full resolution does not match the model");
  const PosteriorBlocks post = encode(ckpt.params, cfg, view);
  const auto sizes = cfg.dims.sizes();
  const auto offs = cfg.dims.offsets();

  KappaTerms out;

  // Expectation factor: MC average of the decoder log-likelihood of the full
  // shape under posterior draws. Deterministic for a given seed.
  const int n = n_draws > 0 ? n_draws : std::max(1, cfg.n_samples);
  const auto draws = reparameterize(post, n, mix_seed(seed, 0xE57));
  double ll = 0.0;
  for (const auto& z : draws) ll += bernoulli_loglik(decode(ckpt.params, cfg, z), full);
  out.log_kappa_e = ll / n;

  // Viewpoint and translation factors marginalize their labels: log of the
  // sum over the block's vocabulary of exp(-KL against that label's prior).
  const auto block_lse = [&](int block, int vocab_size, auto relabel) {
    const auto mu_s = slice_vec(post.mu, offs[block], sizes[block]);
    const auto sig_s = slice_vec(post.sigma, offs[block], sizes[block]);
    std::vector<double> neg_kls;
    neg_kls.reserve(vocab_size);
    for (int l = 0; l < vocab_size; ++l) {
      LabelTuple lt = label;
      relabel(lt, l);
      const PriorBlocks prior = prior_lookup(ckpt.params, cfg, ckpt.vocab, lt);
      neg_kls.push_back(-kl_diag(mu_s, sig_s, slice_vec(prior.mu, offs[block], sizes[block])));
    }
    return logsumexp(neg_kls);
  };
  out.log_kappa_kl_vt =
      block_lse(2, ckpt.vocab.views, [](LabelTuple& lt, int l) { lt.viewpoint_id = l; }) +
      block_lse(3, ckpt.vocab.translations, [](LabelTuple& lt, int l) { lt.translation_id = l; });

  // Class factor over the concatenated class+instance blocks, in both the
  // direct -KL form and the factored density/entropy/spread form.
  const int ci = sizes[0] + sizes[1];
  const auto mu_ci = slice_vec(post.mu, 0, ci);
  const auto sig_ci = slice_vec(post.sigma, 0, ci);
  const PriorBlocks prior = prior_lookup(ckpt.params, cfg, ckpt.vocab, label);
  const auto prior_ci = slice_vec(prior.mu, 0, ci);
  out.log_kappa_kl_c = -kl_diag(mu_ci, sig_ci, prior_ci);
  out.log_kappa_kl_c_factored = log_kappa_factored(mu_ci, sig_ci, prior_ci);
  out.entropy = entropy_gaussian(sig_ci);
  return out;
}

std::vector<std::vector<double>> prior_pair_means(const ModelCheckpoint& ckpt) {
  const auto sizes = ckpt.config.dims.sizes();
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(ckpt.vocab.classes) * ckpt.vocab.instances);
  for (int k = 0; k < ckpt.vocab.classes; ++k) {
    for (int i = 0; i < ckpt.vocab.instances; ++i) {
      const PriorBlocks p = prior_lookup(ckpt.params, ckpt.config, ckpt.vocab,
                                         LabelTuple{k, i, 0, 0});
      rows.push_back(slice_vec(p.mu, 0, sizes[0] + sizes[1]));
    }
  }
  return rows;
}

ClassifyResult classify_feature(const std::vector<double>& feature_mu,
                                const std::vector<std::vector<double>>& pair_means,
                                int classes, int instances, ClassifyMode mode, int dim_c) {
  if (classes <= 0 || instances <= 0)
    throw std::invalid_argument("classify_feature: empty label vocabulary");
  if (pair_means.size() != static_cast<size_t>(classes) * instances)
    throw std::invalid_argument("classify_feature: pair table size mismatch");
  if (dim_c <= 0 || static_cast<size_t>(dim_c) > feature_mu.size())
    throw std::invalid_argument("classify_feature: bad class-block width");

  ClassifyResult r;
  r.class_scores.assign(classes, -std::numeric_limits<double>::infinity());
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < instances; ++i) {
      const auto& row = pair_means[static_cast<size_t>(k) * instances + i];
      double s;
      if (mode == ClassifyMode::kClassAndInstance) {
        if (row.size() != feature_mu.size())
          throw std::invalid_argument("classify_feature: feature/prior dim mismatch");
        s = gaussian_logpdf(feature_mu, row);
      } else {
        // Class-only: score the class block alone; instance rows of one class
        // then tie and the first one wins, so evaluate just i == 0.
        if (i > 0) continue;
        s = gaussian_logpdf(slice_vec(feature_mu, 0, dim_c), slice_vec(row, 0, dim_c));
      }
      r.class_scores[k] = std::max(r.class_scores[k], s);
      // Strict > keeps the earliest maximizer: ties go to the lowest class
      // index (and lowest instance index within it).
      if (s > best) {
        best = s;
        r.class_id = k;
        r.instance_id = mode == ClassifyMode::kClassAndInstance ? i : -1;
      }
    }
  }
  return r;
}

ClassifyResult mle_classify(const ModelCheckpoint& ckpt, const VoxelGrid& view,
                            ClassifyMode mode) {
  const EncodedFeature f = encode_feature(ckpt, view);
  return classify_feature(f.mu, prior_pair_means(ckpt), ckpt.vocab.classes,
                          ckpt.vocab.instances, mode, ckpt.config.dims.c);
}

VoxelGrid retrieve(const ModelCheckpoint& ckpt, const VoxelGrid& view) {
  const PosteriorBlocks post = encode(ckpt.params, ckpt.config, view);
  const PredictedShape pred = decode(ckpt.params, ckpt.config, post.mu);
  VoxelGrid g(pred.resolution);
  for (size_t j = 0; j < pred.probs.size(); ++j)
    // Strictly above 0.5: a zero-logit voxel (no evidence) stays empty.
    g.occupancy[j] = pred.probs[j] > 0.5 ? 1 : 0;
  return g;
}

double average_precision(const std::vector<int>& relevance) {
  long total = 0;
  for (int r : relevance) total += r != 0;
  if (total == 0) return 0.0;
  double sum = 0.0;
  long hits = 0;
  for (size_t rank = 0; rank < relevance.size(); ++rank) {
    if (relevance[rank] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return sum / static_cast<double>(total);
}

double roc_auc(std::vector<std::pair<double, int>> scored) {
  long pos = 0, neg = 0;
  for (const auto& [s, r] : scored) (r != 0 ? pos : neg)++;
  if (pos == 0 || neg == 0) return 0.0;
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  // Walk groups of tied scores so the trapezoid area matches the pairwise
  // (Mann-Whitney) count with ties worth one half.
  double area = 0.0;
  long tp = 0;
  size_t i = 0;
  while (i < scored.size()) {
    size_t j = i;
    long dtp = 0, dfp = 0;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second != 0 ? dtp : dfp)++;
      ++j;
    }
    const double tpr0 = static_cast<double>(tp) / pos;
    const double tpr1 = static_cast<double>(tp + dtp) / pos;
    area += static_cast<double>(dfp) / neg * 0.5 * (tpr0 + tpr1);
    tp += dtp;
    i = j;
  }
  return area;
}

MetricsReport evaluate(const ModelCheckpoint& ckpt, const Dataset& dataset) {
  if (dataset.train_idx.empty() || dataset.test_idx.empty())
    throw std::invalid_argument("evaluate: dataset needs nonempty train and test splits");
  const int C = ckpt.vocab.classes;
  const auto pair_means = prior_pair_means(ckpt);

  MetricsReport rep;

  // Classification of every test view against the label priors.
  rep.confusion.assign(C, std::vector<long>(C, 0));
  std::vector<EncodedFeature> queries;
  queries.reserve(dataset.test_idx.size());
  long correct = 0;
  for (int qi : dataset.test_idx) {
    const Sample& s = dataset.samples[static_cast<size_t>(qi)];
    queries.push_back(encode_feature(ckpt, s.view));
    const ClassifyResult r =
        classify_feature(queries.back().mu, pair_means, C, ckpt.vocab.instances,
                         ClassifyMode::kClassAndInstance, ckpt.config.dims.c);
    rep.confusion[static_cast<size_t>(s.label.class_id)][static_cast<size_t>(r.class_id)]++;
    correct += r.class_id == s.label.class_id;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.test_idx.size());
  rep.per_class_accuracy.assign(C, 0.0);
  for (int k = 0; k < C; ++k) {
    long row = 0;
    for (long v : rep.confusion[static_cast<size_t>(k)]) row += v;
    if (row > 0)
      rep.per_class_accuracy[static_cast<size_t>(k)] =
          static_cast<double>(rep.confusion[static_cast<size_t>(k)][static_cast<size_t>(k)]) / row;
  }

  // Distances between the learned class prior means.
  std::vector<std::vector<double>> class_means(C);
  for (int k = 0; k < C; ++k)
    class_means[static_cast<size_t>(k)] =
        slice_vec(prior_lookup(ckpt.params, ckpt.config, ckpt.vocab, LabelTuple{k, 0, 0, 0}).mu,
                  0, ckpt.config.dims.c);
  rep.dist_euclid.assign(C, std::vector<double>(C, 0.0));
  rep.dist_cosine.assign(C, std::vector<double>(C, 0.0));
  for (int a = 0; a < C; ++a) {
    for (int b = a + 1; b < C; ++b) {
      const auto& u = class_means[static_cast<size_t>(a)];
      const auto& v = class_means[static_cast<size_t>(b)];
      double sq = 0.0, dot = 0.0, nu = 0.0, nv = 0.0;
      for (size_t j = 0; j < u.size(); ++j) {
        sq += (u[j] - v[j]) * (u[j] - v[j]);
        dot += u[j] * v[j];
        nu += u[j] * u[j];
        nv += v[j] * v[j];
      }
      const double e = std::sqrt(sq);
      const double denom = std::sqrt(nu) * std::sqrt(nv);
      const double cosd = denom > 0.0 ? 1.0 - dot / denom : 1.0;
      rep.dist_euclid[a][b] = rep.dist_euclid[b][a] = e;
      rep.dist_cosine[a][b] = rep.dist_cosine[b][a] = cosd;
    }
  }

  // Retrieval: test views query the training gallery, ranked by the density
  // of the query feature mean under a unit Gaussian at each gallery feature.
  std::vector<EncodedFeature> gallery;
  std::vector<int> gallery_class;
  gallery.reserve(dataset.train_idx.size());
  for (int gi : dataset.train_idx) {
    const Sample& s = dataset.samples[static_cast<size_t>(gi)];
    gallery.push_back(encode_feature(ckpt, s.view));
    gallery_class.push_back(s.label.class_id);
  }
  std::vector<std::pair<double, int>> pooled;
  pooled.reserve(queries.size() * gallery.size());
  double ap_sum = 0.0, iou_sum = 0.0;
  for (size_t q = 0; q < queries.size(); ++q) {
    const Sample& s = dataset.samples[static_cast<size_t>(dataset.test_idx[q])];
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(gallery.size());
    for (size_t g = 0; g < gallery.size(); ++g) {
      const double score = gaussian_logpdf(queries[q].mu, gallery[g].mu);
      ranked.emplace_back(score, gallery_class[g] == s.label.class_id ? 1 : 0);
      pooled.emplace_back(score, ranked.back().second);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> rel(ranked.size());
    for (size_t j = 0; j < ranked.size(); ++j) rel[j] = ranked[j].second;
    ap_sum += average_precision(rel);

    const PredictedShape pred = decode(ckpt.params, ckpt.config, queries[q].post.mu);
    VoxelGrid guess(pred.resolution);
    for (size_t j = 0; j < pred.probs.size(); ++j) guess.occupancy[j] = pred.probs[j] > 0.5;
    iou_sum += voxel_iou(guess, s.full);
  }
  rep.map = ap_sum / static_cast<double>(queries.size());
  rep.mean_retrieval_iou = iou_sum / static_cast<double>(queries.size());

  // Pooled precision-recall curve and the ROC area of the same ranking.
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  long total_pos = 0;
  for (const auto& [sc, r] : pooled) total_pos += r;
  rep.pr_curve.reserve(pooled.size());
  long hits = 0;
  for (size_t rank = 0; rank < pooled.size(); ++rank) {
    hits += pooled[rank].second;
    rep.pr_curve.emplace_back(static_cast<double>(hits) / std::max<long>(1, total_pos),
                              static_cast<double>(hits) / static_cast<double>(rank + 1));
  }
  rep.auc = roc_auc(std::move(pooled));

  // Prior geometry: pairwise distances between the (class, instance) rows.
  double intra = 0.0, inter = 0.0;
  long n_intra = 0, n_inter = 0;
  for (size_t a = 0; a < pair_means.size(); ++a) {
    for (size_t b = a + 1; b < pair_means.size(); ++b) {
      double sq = 0.0;
      for (size_t j = 0; j < pair_means[a].size(); ++j)
        sq += (pair_means[a][j] - pair_means[b][j]) * (pair_means[a][j] - pair_means[b][j]);
      const bool same = a / ckpt.vocab.instances == b / ckpt.vocab.instances;
      (same ? intra : inter) += std::sqrt(sq);
      (same ? n_intra : n_inter)++;
    }
  }
  rep.mean_intra = n_intra > 0 ? intra / n_intra : 0.0;
  rep.mean_inter = n_inter > 0 ? inter / n_inter : 0.0;
  return rep;
}

}  // namespace voxsem
