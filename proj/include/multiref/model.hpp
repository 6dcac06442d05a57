#pragma once

#include <optional>
#include <string>
#include <vector>

#include "multiref/nn.hpp"

namespace multiref {

enum class FusionMode { Patch, Element };

std::string fusion_mode_name(FusionMode m);
FusionMode fusion_mode_from_name(const std::string& s);

/// All architecture sizes. `desk()` keeps CI in minutes; `paper_parity()`
/// mirrors the 256px training geometry.
struct ModelConfig {
    int resolution = 64;
    int image_channels = 3;
    int num_keypoints = 10;

    // generator encoder/decoder
    int enc_base_channels = 8;
    int enc_down_blocks = 2;
    int enc_max_channels = 32;
    int dec_res_blocks = 2;

    // keypoint detector
    int kp_downscale = 2;  // detector runs at resolution / kp_downscale
    int kp_base_channels = 16;
    int kp_blocks = 3;
    int kp_max_channels = 64;
    double kp_temperature = 0.1;

    // dense motion estimator (runs at feature resolution)
    int dm_base_channels = 16;
    int dm_blocks = 3;
    int dm_max_channels = 128;
    double dm_kp_variance = 0.01;

    // fusion unit
    int fusion_kernel = 7;
    FusionMode fusion_mode = FusionMode::Patch;

    // discriminator (training only)
    int disc_base_channels = 16;
    int disc_blocks = 2;
    int disc_max_channels = 128;

    std::uint64_t init_seed = 0x5eed0001ULL;

    int feature_channels() const;
    int feature_resolution() const { return resolution >> enc_down_blocks; }

    void validate() const;

    static ModelConfig desk();
    static ModelConfig paper_parity();
    /// Tiny geometry for finite-difference checks (resolution 16, C = 8).
    static ModelConfig reduced();
};

// --- spec-facing value types -------------------------------------------------

/// (K_p, 2) positions in [-1,1]^2, (K_p, 2, 2) local affine parameters.
struct Keypoints {
    Tensor positions;
    Tensor jacobians;
};

/// flow: (H',W',2) sampling coordinates in [-1,1]; occlusion: (1,H',W') in [0,1].
struct Motion {
    Tensor flow;
    Tensor occlusion;
};

/// Feature map (C,H',W') with the reference it was warped from.
struct WarpedFeature {
    Tensor data;
    int reference_index = -1;
};

// --- batched keypoints used on the training path ------------------------------

struct BatchKeypoints {
    Var positions;  // (N,K,2)
    Var jacobians;  // (N,K,2,2)
};

struct DenseMotionOut {
    Var flow;       // (N,h,w,2)
    Var occlusion;  // (N,1,h,w)
    Var mask;       // (N,K+1,h,w) softmax weights over sparse motions
};

class KeypointDetector {
public:
    KeypointDetector() = default;
    KeypointDetector(const ModelConfig& cfg, Rng& rng);

    BatchKeypoints forward(const Var& images) const;  // images (N,3,H,W)
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    nn::Hourglass hourglass_;
    nn::Conv2d heat_head_;
    nn::Conv2d jacobian_head_;
    int downscale_ = 2;
    double temperature_ = 0.1;
    int num_kp_ = 0;
};

class DenseMotionNet {
public:
    DenseMotionNet() = default;
    DenseMotionNet(const ModelConfig& cfg, Rng& rng);

    /// ref_small: reference image resized to the motion grid (N,3,h,w).
    DenseMotionOut forward(const Var& ref_small, const BatchKeypoints& kp_ref,
                           const BatchKeypoints& kp_drv) const;
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    nn::Hourglass hourglass_;
    nn::Conv2d mask_head_;
    nn::Conv2d occlusion_head_;
    double kp_variance_ = 0.01;
    int num_kp_ = 0;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(const ModelConfig& cfg, Rng& rng);
    Var forward(const Var& images) const;
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    nn::SameBlock first_;
    std::vector<nn::DownBlock> downs_;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(const ModelConfig& cfg, Rng& rng);
    Var forward(const Var& feature) const;
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    std::vector<nn::ResBlock> res_;
    std::vector<nn::UpBlock> ups_;
    nn::Conv2d final_conv_;
};

class FusionUnit {
public:
    FusionUnit() = default;
    FusionUnit(const ModelConfig& cfg, Rng& rng);

    /// Shared-weight per-reference logits, stacked to (K,N,M,h,w).
    Var mask_logits(const std::vector<Var>& warped, FusionMode mode) const;
    /// Softmax across the K axis (bit-exact under reference permutation).
    static Var normalize(const Var& logits);
    /// Convex combination; validates the K-sum-to-1 contract (tol 1e-4).
    static Var fuse(const Var& masks, const std::vector<Var>& warped);

    Var forward(const std::vector<Var>& warped, FusionMode mode) const;
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    nn::Conv2d patch_head_;    // C -> 1
    nn::Conv2d element_head_;  // C -> C
};

class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const ModelConfig& cfg, Rng& rng);

    /// Returns intermediate feature maps; back() is the logit map.
    std::vector<Var> forward(const Var& images) const;
    void collect(nn::ParamMap& m, const std::string& prefix) const;

private:
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::InstanceNorm2d> norms_;  // norms_[i] pairs with convs_[i+1]
    nn::Conv2d logit_head_;
};

/// Intermediates of one batched training forward pass.
struct TrainForward {
    Var generated;               // (N,3,H,W)
    BatchKeypoints kp_driving;
    std::vector<Var> occlusions;
    Var masks;                   // (K,N,M,h,w)
};

/// The K-reference reenactment model: encoder, keypoint detector, dense
/// motion estimator, warping, fusion unit and decoder. Instances are
/// immutable after construction/load apart from training updates.
class ReenactModel {
public:
    explicit ReenactModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // --- single-sample operations (no tape, deterministic) ---
    Keypoints detect_keypoints(const Tensor& image) const;
    Tensor encode(const Tensor& image) const;
    Motion estimate_motion(const Keypoints& kp_ref, const Keypoints& kp_drv,
                           const Tensor& ref_image) const;
    WarpedFeature warp_feature(const Tensor& feature, const Motion& motion,
                               int reference_index = -1) const;
    Tensor decode(const Tensor& fused) const;
    Tensor reenact(const std::vector<Tensor>& refs, const Tensor& driving, FusionMode mode) const;
    Tensor reenact(const std::vector<Tensor>& refs, const Tensor& driving) const {
        return reenact(refs, driving, cfg_.fusion_mode);
    }

    /// Per-reference mask maps for the last fusion stage of a pipeline run.
    struct ReenactTrace {
        Tensor output;
        std::vector<Tensor> warped;      // per reference (C,h,w), occlusion applied
        std::vector<Tensor> decoded;     // decode of each warped feature
        Tensor masks;                    // (K,M,h,w)
    };
    ReenactTrace reenact_traced(const std::vector<Tensor>& refs, const Tensor& driving,
                                FusionMode mode) const;

    std::vector<Tensor> encode_batch(const std::vector<Tensor>& images) const;

    // --- batched training path (records the tape) ---
    BatchKeypoints detect_keypoints_v(const Var& images) const;
    Var encode_v(const Var& images) const;
    DenseMotionOut estimate_motion_v(const Var& ref_images, const BatchKeypoints& kp_ref,
                                     const BatchKeypoints& kp_drv) const;
    Var warp_v(const Var& features, const DenseMotionOut& motion) const;
    Var decode_v(const Var& fused) const;
    TrainForward forward_train(const Var& refs_flat, int K, const Var& driving,
                               FusionMode mode) const;

    const FusionUnit& fusion() const { return fusion_; }
    nn::ParamMap parameters() const;

    void validate_image(const Tensor& image) const;

private:
    ModelConfig cfg_;
    KeypointDetector kp_;
    DenseMotionNet dm_;
    Encoder enc_;
    Decoder dec_;
    FusionUnit fusion_;
};

/// First-order sparse motions: entry 0 is the identity map, entry k+1 sends
/// driving-frame coordinates to reference-frame coordinates around keypoint k.
/// grid (h,w,2) constant; returns K+1 tensors of shape (N,h,w,2).
std::vector<Var> sparse_motions(const Var& grid, const BatchKeypoints& kp_ref,
                                const BatchKeypoints& kp_drv);

/// Gaussian heatmaps around keypoints: (N,K,h,w).
Var keypoint_gaussians(const Var& positions, const Var& grid, real variance);

}  // namespace multiref
