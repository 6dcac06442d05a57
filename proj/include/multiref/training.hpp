#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "multiref/dataset.hpp"
#include "multiref/model.hpp"
#include "multiref/serialize.hpp"

namespace multiref {

struct TrainConfig {
    int K = 3;
    int stage1_epochs = 20;
    int stage2_epochs = 10;
    int batch_size = 8;
    real lr = 2e-4;
    std::vector<int> decay_epochs = {24, 28};
    real decay_factor = 0.1;
    enum class DecayMode { Step, Linear };
    DecayMode decay_mode = DecayMode::Step;
    int samples_per_video = 4;  // virtual samples per video per epoch
    std::uint64_t seed = 0;

    // loss weights (inherited defaults of the cited single-reference model)
    real w_perceptual = 10.0;
    real w_equiv_value = 10.0;
    real w_equiv_jacobian = 10.0;
    real w_gan = 1.0;
    real w_feature_matching = 10.0;
    std::vector<real> perceptual_scales = {1.0, 0.5, 0.25};
    real sigma_affine = 0.05;
    std::string perceptual_extractor = "identity";  // identity | tinyconv

    int checkpoint_every = 1;
    real adam_beta1 = 0.9;
    real adam_beta2 = 0.999;
    real adam_eps = 1e-8;

    ModelConfig model;

    int total_epochs() const { return stage1_epochs + stage2_epochs; }
    void validate() const;

    static TrainConfig desk();
    static TrainConfig paper();
};

/// Pure function of the epoch index. Step mode divides by (1/factor)^n so the
/// paper's decimal values come out bit-exact; linear mode ramps between the
/// same anchor points.
real lr_at_epoch(const TrainConfig& cfg, int epoch);

struct Sample {
    const VideoSequence* video = nullptr;
    std::vector<int> ref_frames;
    int driving_frame = 0;
};

struct Batch {
    Tensor references;  // (B,K,3,H,W)
    Tensor driving;     // (B,3,H,W)
    std::vector<Sample> meta;

    int batch_size() const { return references.dim(0); }
    int K() const { return references.dim(1); }
    /// K-major layout (K*B,3,H,W): block k holds reference k of every sample.
    Tensor references_k_major() const;
};

/// Uniform iid reference/driving frame sampling; videos shorter than K+1
/// frames are skipped with a warning, an empty pool is fatal.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed);
    Batch next();
    const std::vector<const VideoSequence*>& usable_videos() const { return videos_; }

private:
    const TrainConfig cfg_;
    std::vector<const VideoSequence*> videos_;
    Rng rng_;
};

/// One-shot reproducible batch (the sampler advanced once from `seed`).
Batch sample_training_batch(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed);

/// Differentiable extractor for the training reconstruction loss.
class PerceptualExtractor {
public:
    explicit PerceptualExtractor(const std::string& kind, std::uint64_t seed = 0x9e3779b9);
    std::vector<Var> features(const Var& images) const;
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
    Var w1_, b1_, w2_, b2_;
};

/// Multi-scale reconstruction term; exactly zero when generated == driving.
Var perceptual_reconstruction_loss(const Var& generated, const Var& driving,
                                   const std::vector<real>& scales,
                                   const PerceptualExtractor& extractor);

struct EquivarianceTerms {
    Var value;
    Var jacobian;
};

/// Random-affine keypoint equivariance. Transforms are sampled from `rng`;
/// `include_flips` mirrors x with probability 1/2 (used by tests).
EquivarianceTerms equivariance_losses(const ReenactModel& model, const Var& driving,
                                      const BatchKeypoints& kp_driving, real sigma_affine,
                                      Rng& rng, bool include_flips = false);

struct LossBreakdown {
    std::map<std::string, real> terms;  // perceptual, equiv_value, equiv_jacobian, gen_gan, feature_matching
    real total = 0.0;
    real disc = 0.0;
    bool stage2 = false;

    std::string to_json_line(int epoch, int step, real lr) const;
};

class Adam {
public:
    Adam() = default;
    Adam(real beta1, real beta2, real eps);
    /// Applies and clears accumulated gradients; parameters without
    /// gradients are untouched.
    void step(const nn::ParamMap& params, real lr);
    std::int64_t step_count() const { return t_; }

    void export_state(std::vector<std::pair<std::string, Tensor>>* out,
                      const std::string& prefix) const;
    void import_state(const std::vector<std::pair<std::string, Tensor>>& tensors,
                      const std::string& prefix, std::int64_t step_count);

private:
    real b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> state_;  // name -> (m, v)
};

/// Two-stage trainer: stage 1 reconstruction + equivariance, stage 2 adds
/// LSGAN adversarial and feature-matching terms. Owns the discriminator;
/// requires exclusive access to the model.
class Trainer {
public:
    Trainer(ReenactModel& model, const TrainConfig& cfg);

    LossBreakdown step(const Batch& batch, int epoch);
    /// Full loop: per-epoch checkpoints named ckpt_epoch_%04d.ckpt plus a
    /// JSONL log (epoch, step, loss terms, lr) under out_dir.
    std::filesystem::path fit(const Dataset& data, const std::filesystem::path& out_dir,
                              std::ostream* progress = nullptr);

    void save_checkpoint(const std::filesystem::path& path, int completed_epochs) const;
    void resume(const std::filesystem::path& path);
    int start_epoch() const { return start_epoch_; }

    const nn::ParamMap& generator_params() const { return gen_params_; }
    const nn::ParamMap& discriminator_params() const { return disc_params_; }
    const Discriminator& discriminator() const { return disc_; }

private:
    ReenactModel& model_;
    TrainConfig cfg_;
    Discriminator disc_;
    nn::ParamMap gen_params_;
    nn::ParamMap disc_params_;
    Adam adam_g_;
    Adam adam_d_;
    PerceptualExtractor perceptual_;
    Rng transform_rng_;
    int start_epoch_ = 0;
};

// --- checkpoint archive -------------------------------------------------------

/// Writes config manifest + all generator tensors (+ extras). Round-trips
/// bit-exactly.
void checkpoint_save(const std::filesystem::path& path, const ReenactModel& model,
                     const nlohmann::json& extra_manifest = nlohmann::json::object(),
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});

struct CheckpointFile {
    nlohmann::json manifest;
    ModelConfig config;
    Blob blob;
};

CheckpointFile checkpoint_read(const std::filesystem::path& path);
std::unique_ptr<ReenactModel> model_from_checkpoint(const CheckpointFile& ckpt);
std::unique_ptr<ReenactModel> load_model(const std::filesystem::path& path);

/// Overwrites parameters by name from the blob; missing/mis-shaped -> config_error.
void assign_parameters(const nn::ParamMap& params, const Blob& blob);

}  // namespace multiref
