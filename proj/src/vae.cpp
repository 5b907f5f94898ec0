#include "voxsem/vae.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

int Vocab::onehot_width(int block) const {
  switch (block) {
    case 0: return classes;
    case 1: return classes + instances;  // instance prior conditions on class
    case 2: return views;
    case 3: return translations;
    default: throw std::invalid_argument("vocab: block index out of range");
  }
}

int Vocab::combos(int block) const {
  switch (block) {
    case 0: return classes;
    case 1: return classes * instances;
    case 2: return views;
    case 3: return translations;
    default: throw std::invalid_argument("vocab: block index out of range");
  }
}

double TrainConfig::delta(int block) const {
  switch (block) {
    case 0: return delta_c;
    case 1: return delta_i;
    case 2: return delta_v;
    case 3: return delta_t;
    default: throw std::invalid_argument("config: block index out of range");
  }
}

void TrainConfig::validate() const {
  if (dims.c < 1 || dims.i < 1 || dims.v < 1 || dims.t < 1)
    throw std::invalid_argument("config: every latent block needs at least one dimension");
  if (n_samples < 1) throw std::invalid_argument("config: n_samples must be >= 1");
  for (int b = 0; b < kNumBlocks; ++b)
    if (delta(b) <= 0.0) throw std::invalid_argument("config: separation thresholds must be > 0");
  if (prob_eps <= 0.0 || prob_eps >= 0.1)
    throw std::invalid_argument("config: probability clamp must lie in (0, 0.1)");
  if (conv_channels.empty()) throw std::invalid_argument("config: need at least one conv layer");
  if (batch_size < 1 || epochs < 0)
    throw std::invalid_argument("config: batch size/epochs out of range");
}

namespace {

// Spatial sizes along the encoder's halving chain, front = input resolution.
std::vector<int> conv_dims(const TrainConfig& cfg) {
  std::vector<int> dims{cfg.resolution};
  for (size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    const int d = dims.back();
    if (d < 4 || d % 2 != 0)
      throw std::invalid_argument("config: resolution not halvable " +
                                  std::to_string(cfg.conv_channels.size()) + " times");
    dims.push_back(d / 2);
  }
  return dims;
}

const char* kBlockTag[kNumBlocks] = {"c", "i", "v", "t"};

}  // namespace

std::vector<LayerSpec> encoder_stack(const TrainConfig& cfg) {
  const std::vector<int> dims = conv_dims(cfg);
  std::vector<LayerSpec> ls;
  int ch = 1;
  for (size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    Conv3Geom g{ch, cfg.conv_channels[l], 4, 2, 1, dims[l]};
    ls.push_back(LayerSpec::conv3("enc_c" + std::to_string(l), g));
    ls.push_back(LayerSpec::elu());
    ch = cfg.conv_channels[l];
  }
  const int fd = dims.back();
  const int flat = ch * fd * fd * fd;
  const int head = 2 * cfg.dims.total();  // means, then raw log-stds
  if (cfg.dense_hidden > 0) {
    ls.push_back(LayerSpec::dense("enc_h", flat, cfg.dense_hidden));
    ls.push_back(LayerSpec::elu());
    if (cfg.dropout_rate > 0.0) ls.push_back(LayerSpec::dropout(cfg.dropout_rate));
    ls.push_back(LayerSpec::dense("enc_out", cfg.dense_hidden, head));
  } else {
    ls.push_back(LayerSpec::dense("enc_out", flat, head));
  }
  return ls;
}

std::vector<LayerSpec> decoder_stack(const TrainConfig& cfg) {
  const std::vector<int> dims = conv_dims(cfg);
  const int n = static_cast<int>(cfg.conv_channels.size());
  const int fd = dims.back();
  const int flat = cfg.conv_channels.back() * fd * fd * fd;
  std::vector<LayerSpec> ls;
  if (cfg.dense_hidden > 0) {
    ls.push_back(LayerSpec::dense("dec_h", cfg.dims.total(), cfg.dense_hidden));
    ls.push_back(LayerSpec::elu());
    ls.push_back(LayerSpec::dense("dec_flat", cfg.dense_hidden, flat));
  } else {
    ls.push_back(LayerSpec::dense("dec_flat", cfg.dims.total(), flat));
  }
  ls.push_back(LayerSpec::elu());
  for (int l = n - 1; l >= 0; --l) {
    const int oc = l > 0 ? cfg.conv_channels[static_cast<size_t>(l - 1)] : 1;
    Conv3Geom g{cfg.conv_channels[static_cast<size_t>(l)], oc, 4, 2, 1, dims[static_cast<size_t>(l + 1)]};
    ls.push_back(LayerSpec::tconv3("dec_c" + std::to_string(l), g));
    if (l > 0) ls.push_back(LayerSpec::elu());
  }
  ls.push_back(LayerSpec::sigmoid());
  return ls;
}

std::vector<LayerSpec> prior_stack(const TrainConfig& cfg, const Vocab& vocab, int block) {
  const std::string tag = kBlockTag[block];
  std::vector<LayerSpec> ls;
  ls.push_back(LayerSpec::dense("pri_" + tag + "0", vocab.onehot_width(block), cfg.prior_hidden));
  ls.push_back(LayerSpec::elu());
  ls.push_back(LayerSpec::dense("pri_" + tag + "1", cfg.prior_hidden, cfg.dims.sizes()[static_cast<size_t>(block)]));
  return ls;
}

void init_model(ParamStore& params, const TrainConfig& cfg, const Vocab& vocab) {
  cfg.validate();
  init_stack_params(params, encoder_stack(cfg), "enc", mix_seed(cfg.seed, 0xE2C0DE));
  init_stack_params(params, decoder_stack(cfg), "dec", mix_seed(cfg.seed, 0xDEC0DE));
  for (int b = 0; b < kNumBlocks; ++b) {
    init_stack_params(params, prior_stack(cfg, vocab, b), "prior",
                      mix_seed(cfg.seed, 0x9210, static_cast<uint64_t>(b)));
    // Untrained prior means should sit near the origin (close to a standard
    // normal prior); plain glorot on the output layer starts them at norm ~1.
    Tensor& head = params.at(std::string("pri_") + kBlockTag[b] + "1.W");
    for (double& w : head.data) w *= 0.25;
  }
}

EncoderNodes build_encoder(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                           Tape::NodeId view, Mode mode, uint64_t seed) {
  const int z = cfg.dims.total();
  const Tape::NodeId head = forward_stack(tape, params, encoder_stack(cfg), view, mode, seed);
  const Tape::NodeId mu = tape.slice(head, 0, z);
  // Raw log-stds are clamped before exp so a wild early step cannot blow up
  // sigma (and with it the KL) irrecoverably.
  const Tape::NodeId logsig = tape.clamp(tape.slice(head, z, z), -6.0, 6.0);
  return {mu, tape.exp(logsig)};
}

Tape::NodeId build_decoder(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                           Tape::NodeId z, Mode mode, uint64_t seed) {
  const Tape::NodeId out = forward_stack(tape, params, decoder_stack(cfg), z, mode, seed);
  // Squash sigmoid outputs into [eps, 1-eps] with an affine map rather than a
  // hard clamp. A hard clamp zeroes the gradient at the boundary, and with
  // stretched targets the (majority) empty voxels drag every logit past it
  // early in training, leaving occupied voxels permanently dead. The affine
  // map keeps the same output range while mispredicted voxels retain
  // near-full gradient at the depth where correctly-empty ones settle.
  return tape.affine(out, 1.0 - 2.0 * cfg.prob_eps, cfg.prob_eps);
}

Tape::NodeId build_prior_block(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                               const Vocab& vocab, int block, const LabelTuple& label) {
  if (label.class_id < 0 || label.class_id >= vocab.classes ||
      label.instance_id < 0 || label.instance_id >= vocab.instances ||
      label.viewpoint_id < 0 || label.viewpoint_id >= vocab.views ||
      label.translation_id < 0 || label.translation_id >= vocab.translations)
    throw std::invalid_argument("prior: label outside vocabulary");
  Tensor in({vocab.onehot_width(block)});
  switch (block) {
    case 0: in[label.class_id] = 1.0; break;
    case 1:
      in[label.class_id] = 1.0;
      in[vocab.classes + label.instance_id] = 1.0;
      break;
    case 2: in[label.viewpoint_id] = 1.0; break;
    case 3: in[label.translation_id] = 1.0; break;
    default: break;
  }
  return forward_stack(tape, params, prior_stack(cfg, vocab, block), tape.input(std::move(in)),
                       Mode::kEval, 0);
}

Tape::NodeId build_batch_loss(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                              const Vocab& vocab, const std::vector<const Sample*>& batch,
                              uint64_t step_seed, Mode mode, Tape::NodeId* kl_out,
                              Tape::NodeId* rc_out, Tape::NodeId* rg_out) {
  if (batch.empty()) throw std::invalid_argument("train: empty batch");
  const auto offs = cfg.dims.offsets();
  const auto sizes = cfg.dims.sizes();
  const int z = cfg.dims.total();

  std::vector<Tape::NodeId> sample_losses, kl_nodes, rc_nodes;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    if (s.view.resolution != cfg.resolution)
      throw std::invalid_argument("train: sample resolution does not match config");
    const Tape::NodeId view = tape.input(s.view.to_tensor());
    const EncoderNodes enc =
        build_encoder(tape, params, cfg, view, mode, mix_seed(step_seed, i, 0xD0));

    std::vector<Tape::NodeId> kls;
    for (int b = 0; b < kNumBlocks; ++b) {
      const Tape::NodeId mu_b = tape.slice(enc.mu, offs[static_cast<size_t>(b)], sizes[static_cast<size_t>(b)]);
      const Tape::NodeId sig_b = tape.slice(enc.sigma, offs[static_cast<size_t>(b)], sizes[static_cast<size_t>(b)]);
      const Tape::NodeId pri_b = build_prior_block(tape, params, cfg, vocab, b, s.label);
      kls.push_back(tape.kl_unit_prior(mu_b, sig_b, pri_b));
    }
    const Tape::NodeId kl = tape.weighted_sum(kls, {1.0, 1.0, 1.0, 1.0});

    std::vector<Tape::NodeId> rcs;
    for (int n = 0; n < cfg.n_samples; ++n) {
      Tensor eta({z});
      Rng rng(mix_seed(step_seed, i, static_cast<uint64_t>(n), 0xE7A));
      for (long j = 0; j < z; ++j) eta[j] = rng.normal();
      const Tape::NodeId zs = tape.reparam(enc.mu, enc.sigma, std::move(eta));
      const Tape::NodeId probs =
          build_decoder(tape, params, cfg, zs, mode, mix_seed(step_seed, i, 0xDD));
      rcs.push_back(tape.recon_stretched(probs, s.full.to_tensor()));
    }
    const Tape::NodeId rc =
        tape.weighted_sum(rcs, std::vector<double>(rcs.size(), 1.0 / cfg.n_samples));

    sample_losses.push_back(tape.add(kl, rc));
    kl_nodes.push_back(kl);
    rc_nodes.push_back(rc);
  }

  // Separation regularizer over every prior mean of each block. When the
  // weight is zero the whole sub-graph (hundreds of prior forwards) is
  // skipped.
  Tape::NodeId rg = -1;
  if (cfg.lambda_rg != 0.0) {
    std::vector<Tape::NodeId> rgs;
    for (int b = 0; b < kNumBlocks; ++b) {
      std::vector<Tape::NodeId> means;
      for (int k = 0; k < vocab.combos(b); ++k) {
        LabelTuple label{0, 0, 0, 0};
        switch (b) {
          case 0: label.class_id = k; break;
          case 1: label.class_id = k / vocab.instances; label.instance_id = k % vocab.instances; break;
          case 2: label.viewpoint_id = k; break;
          case 3: label.translation_id = k; break;
          default: break;
        }
        means.push_back(build_prior_block(tape, params, cfg, vocab, b, label));
      }
      rgs.push_back(tape.pairwise_hinge(means, cfg.delta(b)));
    }
    rg = tape.weighted_sum(rgs, {1.0, 1.0, 1.0, 1.0});
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<Tape::NodeId> terms = sample_losses;
  std::vector<double> coeffs(sample_losses.size(), inv_b);
  if (rg >= 0) {
    terms.push_back(rg);
    coeffs.push_back(cfg.lambda_rg);
  }
  const Tape::NodeId total = tape.weighted_sum(terms, coeffs);

  if (kl_out) *kl_out = tape.weighted_sum(kl_nodes, std::vector<double>(kl_nodes.size(), inv_b));
  if (rc_out) *rc_out = tape.weighted_sum(rc_nodes, std::vector<double>(rc_nodes.size(), inv_b));
  if (rg_out) *rg_out = rg >= 0 ? rg : tape.input(Tensor::scalar(0.0));
  return total;
}

PosteriorBlocks encode(const ParamStore& params, const TrainConfig& cfg, const VoxelGrid& view,
                       Mode mode, uint64_t seed) {
  if (view.resolution != cfg.resolution)
    throw std::invalid_argument("encode: view resolution does not match config");
  Tape tape;
  const EncoderNodes enc =
      build_encoder(tape, params, cfg, tape.input(view.to_tensor()), mode, seed);
  PosteriorBlocks post;
  post.dims = cfg.dims;
  post.mu = tape.value(enc.mu).data;
  post.sigma = tape.value(enc.sigma).data;
  return post;
}

PriorBlocks prior_lookup(const ParamStore& params, const TrainConfig& cfg, const Vocab& vocab,
                         const LabelTuple& label) {
  Tape tape;
  PriorBlocks prior;
  prior.dims = cfg.dims;
  for (int b = 0; b < kNumBlocks; ++b) {
    const Tape::NodeId m = build_prior_block(tape, params, cfg, vocab, b, label);
    const Tensor& v = tape.value(m);
    prior.mu.insert(prior.mu.end(), v.data.begin(), v.data.end());
  }
  return prior;
}

std::vector<std::vector<double>> reparameterize(const PosteriorBlocks& post, int n,
                                                uint64_t seed) {
  if (n < 1) throw std::invalid_argument("reparameterize: need at least one draw");
  if (post.mu.size() != post.sigma.size())
    throw std::invalid_argument("reparameterize: mu/sigma length mismatch");
  std::vector<std::vector<double>> zs(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(k), 0xE7A));
    std::vector<double>& zk = zs[static_cast<size_t>(k)];
    zk.resize(post.mu.size());
    for (size_t j = 0; j < post.mu.size(); ++j)
      zk[j] = post.mu[j] + post.sigma[j] * rng.normal();
  }
  return zs;
}

PredictedShape decode(const ParamStore& params, const TrainConfig& cfg,
                      const std::vector<double>& z, Mode mode, uint64_t seed) {
  if (static_cast<int>(z.size()) != cfg.dims.total())
    throw std::invalid_argument("decode: latent dimension mismatch");
  Tape tape;
  Tensor zin({cfg.dims.total()});
  zin.data = z;
  const Tape::NodeId probs = build_decoder(tape, params, cfg, tape.input(std::move(zin)), mode, seed);
  PredictedShape pred;
  pred.resolution = cfg.resolution;
  pred.probs = tape.value(probs).data;
  return pred;
}

double kl_term(const PosteriorBlocks& post, const PriorBlocks& prior) {
  if (post.mu.size() != prior.mu.size() || post.mu.size() != post.sigma.size())
    throw std::invalid_argument("kl_term: block dimension mismatch");
  double kl = 0.0;
  for (size_t j = 0; j < post.mu.size(); ++j) {
    const double s = post.sigma[j];
    const double d = post.mu[j] - prior.mu[j];
    kl += -std::log(s) + (s * s + d * d) / 2.0 - 0.5;
  }
  return kl;
}

double recon_loss_lrc(const PredictedShape& pred, const VoxelGrid& target) {
  if (pred.resolution != target.resolution ||
      pred.probs.size() != target.occupancy.size())
    throw std::invalid_argument("recon_loss: shape mismatch");
  double loss = 0.0;
  for (size_t j = 0; j < pred.probs.size(); ++j) {
    const double p = pred.probs[j];
    loss += target.occupancy[j] ? -2.0 * std::log(p) + std::log(1.0 - p)
                                : std::log(p) - 2.0 * std::log(1.0 - p);
  }
  return loss;
}

double prior_reg_lrg(const std::vector<std::vector<double>>& means, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("prior_reg: threshold must be > 0");
  double loss = 0.0;
  for (size_t i = 0; i < means.size(); ++i)
    for (size_t j = i + 1; j < means.size(); ++j) {
      if (means[i].size() != means[j].size())
        throw std::invalid_argument("prior_reg: mean dimension mismatch");
      double d2 = 0.0;
      for (size_t k = 0; k < means[i].size(); ++k) {
        const double d = means[i][k] - means[j][k];
        d2 += d * d;
      }
      const double dist = std::sqrt(d2);
      if (dist < delta) loss += (dist - delta) * (dist - delta);
    }
  return loss;
}

LossReport train_step(ParamStore& params, const std::vector<const Sample*>& batch,
                      const TrainConfig& cfg, const Vocab& vocab, uint64_t step_seed) {
  Tape tape;
  Tape::NodeId kl = 0, rc = 0, rg = 0;
  const Tape::NodeId total =
      build_batch_loss(tape, params, cfg, vocab, batch, step_seed, Mode::kTrain, &kl, &rc, &rg);
  LossReport report;
  report.total = tape.value(total)[0];
  report.kl = tape.value(kl)[0];
  report.rc = tape.value(rc)[0];
  report.rg = tape.value(rg)[0];
  tape.backward(total);
  adam_step(params, tape.grads(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  return report;
}

ModelCheckpoint train(const Dataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.config.resolution != cfg.resolution)
    throw std::invalid_argument("train: dataset resolution does not match config");
  if (dataset.train_idx.empty()) throw std::invalid_argument("train: empty training split");

  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.vocab.classes = dataset.config.num_classes;
  ckpt.vocab.instances = dataset.config.instances_per_class;
  ckpt.vocab.views = dataset.config.num_views;
  ckpt.vocab.translations = dataset.num_translations();
  init_model(ckpt.params, cfg, ckpt.vocab);

  std::vector<int> order = dataset.train_idx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0xE90C, static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(static_cast<long>(i))]);

    LossReport epoch_report;
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      batch.reserve(stop - start);
      for (size_t k = start; k < stop; ++k)
        batch.push_back(&dataset.samples[static_cast<size_t>(order[k])]);
      const LossReport r = train_step(
          ckpt.params, batch, cfg, ckpt.vocab,
          mix_seed(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(steps), 0x57E9));
      epoch_report.total += r.total;
      epoch_report.kl += r.kl;
      epoch_report.rc += r.rc;
      epoch_report.rg += r.rg;
      ++steps;
    }
    epoch_report.total /= steps;
    epoch_report.kl /= steps;
    epoch_report.rc /= steps;
    epoch_report.rg /= steps;
    ckpt.history.push_back(epoch_report);
  }
  return ckpt;
}

}  // namespace voxsem
