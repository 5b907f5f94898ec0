#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxsem/layers.hpp"
#include "voxsem/params.hpp"
#include "voxsem/tape.hpp"
#include "voxsem/voxeldata.hpp"

namespace voxsem {

// Latent block order is fixed everywhere: class, instance, viewpoint,
// translation.
inline constexpr int kNumBlocks = 4;

struct BlockDims {
  int c = 8, i = 8, v = 4, t = 4;

  int total() const { return c + i + v + t; }
  std::array<int, kNumBlocks> sizes() const { return {c, i, v, t}; }
  std::array<int, kNumBlocks> offsets() const { return {0, c, c + i, c + i + v}; }
};

// Vocabulary sizes the label-conditional prior networks are built around.
// The instance network conditions on the class, so its one-hot input is the
// class and instance vectors concatenated.
struct Vocab {
  int classes = 4;
  int instances = 8;  // per class
  int views = 12;
  int translations = 125;

  int onehot_width(int block) const;
  int combos(int block) const;  // number of distinct prior means for a block
};

struct PosteriorBlocks {
  BlockDims dims;
  std::vector<double> mu;     // concatenated over blocks
  std::vector<double> sigma;  // elementwise positive
};

struct PriorBlocks {
  BlockDims dims;
  std::vector<double> mu;  // concatenated over blocks; covariance is identity
};

struct PredictedShape {
  int resolution = 0;
  std::vector<double> probs;  // per voxel, clamped inside (0, 1)
};

struct TrainConfig {
  BlockDims dims;
  int resolution = 16;
  std::vector<int> conv_channels = {8, 16, 32};  // encoder; decoder mirrors
  int dense_hidden = 128;                        // 0 = single dense head
  int prior_hidden = 16;
  double dropout_rate = 0.1;  // encoder hidden layer only, train mode only
  int n_samples = 1;          // reparameterization draws per step
  double delta_c = 4.0, delta_i = 4.0, delta_v = 2.0, delta_t = 2.0;
  double lambda_rg = 1.0;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int epochs = 30;
  int batch_size = 16;
  double prob_eps = 1e-6;  // decoder probability clamp
  uint64_t seed = 1;

  double delta(int block) const;
  void validate() const;
};

struct LossReport {
  double total = 0.0, kl = 0.0, rc = 0.0, rg = 0.0;
};

struct ModelCheckpoint {
  ParamStore params;
  TrainConfig config;
  Vocab vocab;
  std::vector<LossReport> history;  // one entry per epoch
};

// Layer stacks derived from the config. The encoder ends in a dense head of
// width 2 * dims.total(): means first, then raw log-stds.
std::vector<LayerSpec> encoder_stack(const TrainConfig& cfg);
std::vector<LayerSpec> decoder_stack(const TrainConfig& cfg);
std::vector<LayerSpec> prior_stack(const TrainConfig& cfg, const Vocab& vocab, int block);

// Registers all encoder/decoder/prior parameters, glorot-initialized from
// cfg.seed.
void init_model(ParamStore& params, const TrainConfig& cfg, const Vocab& vocab);

// --- Tape-level builders (shared by training, gradient checks, eval) ---

struct EncoderNodes {
  Tape::NodeId mu;
  Tape::NodeId sigma;
};

EncoderNodes build_encoder(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                           Tape::NodeId view, Mode mode, uint64_t seed);
// Returns clamped per-voxel probabilities.
Tape::NodeId build_decoder(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                           Tape::NodeId z, Mode mode, uint64_t seed);
// Prior mean of one block for one label.
Tape::NodeId build_prior_block(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                               const Vocab& vocab, int block, const LabelTuple& label);
// Mean/batch composite loss: (1/B) sum_i (KL_i + Lrc_i) + lambda * Lrg.
// Component node ids are reported through the optional out-parameters.
Tape::NodeId build_batch_loss(Tape& tape, const ParamStore& params, const TrainConfig& cfg,
                              const Vocab& vocab, const std::vector<const Sample*>& batch,
                              uint64_t step_seed, Mode mode, Tape::NodeId* kl_out = nullptr,
                              Tape::NodeId* rc_out = nullptr, Tape::NodeId* rg_out = nullptr);

// --- Plain (tape-free) operations ---

PosteriorBlocks encode(const ParamStore& params, const TrainConfig& cfg, const VoxelGrid& view,
                       Mode mode = Mode::kEval, uint64_t seed = 0);
PriorBlocks prior_lookup(const ParamStore& params, const TrainConfig& cfg, const Vocab& vocab,
                         const LabelTuple& label);
std::vector<std::vector<double>> reparameterize(const PosteriorBlocks& post, int n,
                                                uint64_t seed);
PredictedShape decode(const ParamStore& params, const TrainConfig& cfg,
                      const std::vector<double>& z, Mode mode = Mode::kEval, uint64_t seed = 0);
double kl_term(const PosteriorBlocks& post, const PriorBlocks& prior);
double recon_loss_lrc(const PredictedShape& pred, const VoxelGrid& target);
double prior_reg_lrg(const std::vector<std::vector<double>>& means, double delta);

// One joint Adam update of encoder, decoder, and prior parameters.
LossReport train_step(ParamStore& params, const std::vector<const Sample*>& batch,
                      const TrainConfig& cfg, const Vocab& vocab, uint64_t step_seed);
ModelCheckpoint train(const Dataset& dataset, const TrainConfig& cfg);

}  // namespace voxsem
