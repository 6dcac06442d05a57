#include "multiref/model.hpp"

#include <cmath>

#include "multiref/kernels.hpp"

namespace multiref {

std::string fusion_mode_name(FusionMode m) {
    return m == FusionMode::Patch ? "patch" : "element";
}

FusionMode fusion_mode_from_name(const std::string& s) {
    if (s == "patch") return FusionMode::Patch;
    if (s == "element") return FusionMode::Element;
    throw config_error("unknown fusion mode: " + s);
}

int ModelConfig::feature_channels() const {
    const int c = enc_base_channels << enc_down_blocks;
    return c < enc_max_channels ? c : enc_max_channels;
}

void ModelConfig::validate() const {
    if (resolution < 8) throw config_error("resolution too small");
    if (resolution % (1 << enc_down_blocks)) throw config_error("resolution not divisible by encoder stride");
    if (resolution % kp_downscale) throw config_error("resolution not divisible by keypoint downscale");
    if (num_keypoints < 1) throw config_error("num_keypoints must be >= 1");
    if (enc_base_channels < 1 || kp_base_channels < 1 || dm_base_channels < 1)
        throw config_error("channel counts must be positive");
    if (fusion_kernel < 1 || fusion_kernel % 2 == 0)
        throw config_error("fusion kernel must be odd and positive");
    const int fr = feature_resolution();
    if (fr < 2) throw config_error("feature resolution too small");
    if ((resolution / kp_downscale) >> kp_blocks < 1)
        throw config_error("keypoint hourglass too deep for resolution");
    if (fr >> dm_blocks < 1) throw config_error("dense-motion hourglass too deep for resolution");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_parity() {
    ModelConfig c;
    c.resolution = 256;
    c.num_keypoints = 10;
    c.enc_base_channels = 64;
    c.enc_down_blocks = 2;
    c.enc_max_channels = 256;
    c.dec_res_blocks = 6;
    c.kp_downscale = 4;
    c.kp_base_channels = 32;
    c.kp_blocks = 5;
    c.kp_max_channels = 1024;
    c.dm_base_channels = 64;
    c.dm_blocks = 5;
    c.dm_max_channels = 1024;
    c.disc_base_channels = 32;
    c.disc_blocks = 4;
    c.disc_max_channels = 512;
    return c;
}

ModelConfig ModelConfig::reduced() {
    ModelConfig c;
    c.resolution = 16;
    c.num_keypoints = 4;
    c.enc_base_channels = 2;
    c.enc_down_blocks = 2;
    c.enc_max_channels = 8;
    c.dec_res_blocks = 1;
    c.kp_downscale = 2;
    c.kp_base_channels = 4;
    c.kp_blocks = 2;
    c.kp_max_channels = 16;
    c.dm_base_channels = 8;
    c.dm_blocks = 1;
    c.dm_max_channels = 32;
    c.disc_base_channels = 4;
    c.disc_blocks = 1;
    c.disc_max_channels = 16;
    return c;
}

// --- keypoint detector ---------------------------------------------------

KeypointDetector::KeypointDetector(const ModelConfig& cfg, Rng& rng)
    : hourglass_(cfg.image_channels, cfg.kp_base_channels, cfg.kp_blocks, cfg.kp_max_channels, rng),
      heat_head_(hourglass_.out_channels, cfg.num_keypoints, 7, 1, 3, rng),
      jacobian_head_(hourglass_.out_channels, 4 * cfg.num_keypoints, 7, 1, 3, rng),
      downscale_(cfg.kp_downscale),
      temperature_(cfg.kp_temperature),
      num_kp_(cfg.num_keypoints) {
    // start from identity local affine transforms
    jacobian_head_.init_constant(0.0, {1.0, 0.0, 0.0, 1.0});
}

BatchKeypoints KeypointDetector::forward(const Var& images) const {
    const Var small = nn::antialias_downsample(images, downscale_);
    const Var fm = hourglass_.forward(small);
    const int N = fm->value.dim(0);
    const int h = fm->value.dim(2), w = fm->value.dim(3);

    Var heat = scale(heat_head_.forward(fm), 1.0 / temperature_);
    heat = reshape(heat, {N, num_kp_, h * w});
    Var prob = reshape(softmax(heat, 2), {N, num_kp_, h, w});

    const Var grid = constant(kernels::identity_grid(h, w).reshaped({1, 1, h, w, 2}));
    Var weighted = mul(reshape(prob, {N, num_kp_, h, w, 1}), grid);
    Var pos = sum_axis(sum_axis(weighted, 3, false), 2, false);  // (N,K,2)

    Var jmap = jacobian_head_.forward(fm);                       // (N,4K,h,w)
    Var jw = mul(reshape(jmap, {N, num_kp_, 4, h, w}), reshape(prob, {N, num_kp_, 1, h, w}));
    Var jac = reshape(sum_axis(sum_axis(jw, 4, false), 3, false), {N, num_kp_, 2, 2});

    return BatchKeypoints{pos, jac};
}

void KeypointDetector::collect(nn::ParamMap& m, const std::string& prefix) const {
    hourglass_.collect(m, prefix + ".hourglass");
    heat_head_.collect(m, prefix + ".heat");
    jacobian_head_.collect(m, prefix + ".jacobian");
}

// --- sparse motions / heatmaps --------------------------------------------

Var keypoint_gaussians(const Var& positions, const Var& grid, real variance) {
    const int N = positions->value.dim(0), K = positions->value.dim(1);
    const int h = grid->value.dim(0), w = grid->value.dim(1);
    Var gridr = reshape(grid, {1, 1, h, w, 2});
    Var posr = reshape(positions, {N, K, 1, 1, 2});
    Var diff = sub(gridr, posr);
    Var s = sum_axis(mul(diff, diff), 4, false);
    return exp_op(scale(s, -0.5 / variance));
}

std::vector<Var> sparse_motions(const Var& grid, const BatchKeypoints& kp_ref,
                                const BatchKeypoints& kp_drv) {
    const int N = kp_ref.positions->value.dim(0);
    const int K = kp_ref.positions->value.dim(1);
    const int h = grid->value.dim(0), w = grid->value.dim(1);

    std::vector<Var> motions;
    motions.reserve(static_cast<size_t>(K) + 1);

    // background: identity map
    Tensor ident({N, h, w, 2});
    const Tensor& g = grid->value;
    for (int n = 0; n < N; ++n)
        std::copy(g.data(), g.data() + g.numel(), ident.data() + static_cast<size_t>(n) * g.numel());
    motions.push_back(constant(std::move(ident)));

    Var gridr = reshape(grid, {1, h, w, 2});
    for (int k = 0; k < K; ++k) {
        Var kp_d = reshape(slice_axis(kp_drv.positions, 1, k, 1), {N, 1, 1, 2});
        Var kp_s = reshape(slice_axis(kp_ref.positions, 1, k, 1), {N, 1, 1, 2});
        Var jac_d = reshape(slice_axis(kp_drv.jacobians, 1, k, 1), {N, 2, 2});
        Var jac_s = reshape(slice_axis(kp_ref.jacobians, 1, k, 1), {N, 2, 2});
        Var M = matmul2x2(jac_s, inv2x2(jac_d));            // (N,2,2)
        Var diff = sub(gridr, kp_d);                        // (N,h,w,2)
        Var prod = mul(reshape(M, {N, 1, 1, 2, 2}), reshape(diff, {N, h, w, 1, 2}));
        Var applied = sum_axis(prod, 4, false);             // (N,h,w,2)
        motions.push_back(add(applied, kp_s));
    }
    return motions;
}

// --- dense motion -----------------------------------------------------------

DenseMotionNet::DenseMotionNet(const ModelConfig& cfg, Rng& rng)
    : hourglass_((cfg.num_keypoints + 1) * (cfg.image_channels + 1), cfg.dm_base_channels,
                 cfg.dm_blocks, cfg.dm_max_channels, rng),
      mask_head_(hourglass_.out_channels, cfg.num_keypoints + 1, 7, 1, 3, rng),
      occlusion_head_(hourglass_.out_channels, 1, 7, 1, 3, rng),
      kp_variance_(cfg.dm_kp_variance),
      num_kp_(cfg.num_keypoints) {}

DenseMotionOut DenseMotionNet::forward(const Var& ref_small, const BatchKeypoints& kp_ref,
                                       const BatchKeypoints& kp_drv) const {
    const int N = ref_small->value.dim(0);
    const int h = ref_small->value.dim(2), w = ref_small->value.dim(3);
    const Var grid = constant(kernels::identity_grid(h, w));

    Var heat_d = keypoint_gaussians(kp_drv.positions, grid, kp_variance_);
    Var heat_r = keypoint_gaussians(kp_ref.positions, grid, kp_variance_);
    Var heat = sub(heat_d, heat_r);                          // (N,K,h,w)
    Var heat_full = concat({constant(Tensor({N, 1, h, w})), heat}, 1);

    std::vector<Var> motions = sparse_motions(grid, kp_ref, kp_drv);
    std::vector<Var> net_in{heat_full};
    net_in.reserve(motions.size() + 1);
    for (const auto& m : motions) net_in.push_back(grid_sample(ref_small, m));
    Var hg = hourglass_.forward(concat(net_in, 1));

    Var mask = softmax(mask_head_.forward(hg), 1);           // (N,K+1,h,w)
    Var flow;
    for (int k = 0; k <= num_kp_; ++k) {
        Var mk = reshape(slice_axis(mask, 1, k, 1), {N, h, w, 1});
        Var term = mul(mk, motions[static_cast<size_t>(k)]);
        flow = flow ? add(flow, term) : term;
    }
    Var occ = sigmoid(occlusion_head_.forward(hg));
    return DenseMotionOut{flow, occ, mask};
}

void DenseMotionNet::collect(nn::ParamMap& m, const std::string& prefix) const {
    hourglass_.collect(m, prefix + ".hourglass");
    mask_head_.collect(m, prefix + ".mask");
    occlusion_head_.collect(m, prefix + ".occlusion");
}

// --- encoder / decoder -------------------------------------------------------

namespace {
int cap_ch(int v, int m) { return v < m ? v : m; }
}  // namespace

Encoder::Encoder(const ModelConfig& cfg, Rng& rng)
    : first_(cfg.image_channels, cfg.enc_base_channels, 7, rng) {
    for (int i = 0; i < cfg.enc_down_blocks; ++i) {
        const int ic = cap_ch(cfg.enc_base_channels << i, cfg.enc_max_channels);
        const int oc = cap_ch(cfg.enc_base_channels << (i + 1), cfg.enc_max_channels);
        downs_.emplace_back(ic, oc, rng);
    }
}

Var Encoder::forward(const Var& images) const {
    Var h = first_.forward(images);
    for (const auto& d : downs_) h = d.forward(h);
    return h;
}

void Encoder::collect(nn::ParamMap& m, const std::string& prefix) const {
    first_.collect(m, prefix + ".first");
    for (size_t i = 0; i < downs_.size(); ++i)
        downs_[i].collect(m, prefix + ".down" + std::to_string(i));
}

Decoder::Decoder(const ModelConfig& cfg, Rng& rng) {
    const int C = cfg.feature_channels();
    for (int i = 0; i < cfg.dec_res_blocks; ++i) res_.emplace_back(C, rng);
    for (int i = cfg.enc_down_blocks - 1; i >= 0; --i) {
        const int ic = cap_ch(cfg.enc_base_channels << (i + 1), cfg.enc_max_channels);
        const int oc = cap_ch(cfg.enc_base_channels << i, cfg.enc_max_channels);
        ups_.emplace_back(ic, oc, rng);
    }
    final_conv_ = nn::Conv2d(cfg.enc_base_channels, cfg.image_channels, 7, 1, 3, rng);
}

Var Decoder::forward(const Var& feature) const {
    Var h = feature;
    for (const auto& r : res_) h = r.forward(h);
    for (const auto& u : ups_) h = u.forward(h);
    return sigmoid(final_conv_.forward(h));
}

void Decoder::collect(nn::ParamMap& m, const std::string& prefix) const {
    for (size_t i = 0; i < res_.size(); ++i) res_[i].collect(m, prefix + ".res" + std::to_string(i));
    for (size_t i = 0; i < ups_.size(); ++i) ups_[i].collect(m, prefix + ".up" + std::to_string(i));
    final_conv_.collect(m, prefix + ".final");
}

// --- fusion unit ------------------------------------------------------------

FusionUnit::FusionUnit(const ModelConfig& cfg, Rng& rng) {
    const int C = cfg.feature_channels();
    const int k = cfg.fusion_kernel;
    patch_head_ = nn::Conv2d(C, 1, k, 1, k / 2, rng);
    element_head_ = nn::Conv2d(C, C, k, 1, k / 2, rng);
}

Var FusionUnit::mask_logits(const std::vector<Var>& warped, FusionMode mode) const {
    if (warped.empty()) throw std::invalid_argument("fusion: empty reference list");
    const auto& shape0 = warped[0]->value.shape();
    for (const auto& wv : warped)
        if (wv->value.shape() != shape0)
            throw std::invalid_argument("fusion: warped features must share one shape");
    const nn::Conv2d& head = (mode == FusionMode::Patch) ? patch_head_ : element_head_;
    std::vector<Var> logits;
    logits.reserve(warped.size());
    for (const auto& wv : warped) logits.push_back(head.forward(wv));
    return stack_axis0(logits);  // (K,N,M,h,w)
}

Var FusionUnit::normalize(const Var& logits) { return softmax(logits, 0, /*sorted=*/true); }

Var FusionUnit::fuse(const Var& masks, const std::vector<Var>& warped) {
    if (warped.empty()) throw std::invalid_argument("fuse: empty reference list");
    const Tensor& m = masks->value;
    if (m.ndim() != 5 || m.dim(0) != static_cast<int>(warped.size()))
        throw std::invalid_argument("fuse: mask K axis does not match reference count");
    // contract: softmax-normalized across K
    const size_t inner = m.numel() / static_cast<size_t>(m.dim(0));
    for (size_t i = 0; i < inner; ++i) {
        real s = 0.0;
        for (int k = 0; k < m.dim(0); ++k) s += m[static_cast<size_t>(k) * inner + i];
        if (std::fabs(s - 1.0) > 1e-4)
            throw contract_violation("fuse: masks are not normalized across references");
    }
    return fuse_weighted_sum(masks, stack_axis0(warped));
}

Var FusionUnit::forward(const std::vector<Var>& warped, FusionMode mode) const {
    return fuse(normalize(mask_logits(warped, mode)), warped);
}

void FusionUnit::collect(nn::ParamMap& m, const std::string& prefix) const {
    patch_head_.collect(m, prefix + ".patch");
    element_head_.collect(m, prefix + ".element");
}

// --- discriminator -----------------------------------------------------------

Discriminator::Discriminator(const ModelConfig& cfg, Rng& rng) {
    int ic = cfg.image_channels;
    for (int i = 0; i < cfg.disc_blocks; ++i) {
        const int oc = cap_ch(cfg.disc_base_channels << i, cfg.disc_max_channels);
        convs_.emplace_back(ic, oc, 4, 2, 1, rng);
        if (i > 0) norms_.emplace_back(oc);
        ic = oc;
    }
    logit_head_ = nn::Conv2d(ic, 1, 1, 1, 0, rng);
}

std::vector<Var> Discriminator::forward(const Var& images) const {
    std::vector<Var> feats;
    Var h = images;
    for (size_t i = 0; i < convs_.size(); ++i) {
        h = convs_[i].forward(h);
        if (i > 0) h = norms_[i - 1].forward(h);
        h = leaky_relu(h, 0.2);
        feats.push_back(h);
    }
    feats.push_back(logit_head_.forward(h));
    return feats;
}

void Discriminator::collect(nn::ParamMap& m, const std::string& prefix) const {
    for (size_t i = 0; i < convs_.size(); ++i)
        convs_[i].collect(m, prefix + ".conv" + std::to_string(i));
    for (size_t i = 0; i < norms_.size(); ++i)
        norms_[i].collect(m, prefix + ".norm" + std::to_string(i + 1));
    logit_head_.collect(m, prefix + ".logit");
}

// --- full model ---------------------------------------------------------------

ReenactModel::ReenactModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    kp_ = KeypointDetector(cfg_, rng);
    dm_ = DenseMotionNet(cfg_, rng);
    enc_ = Encoder(cfg_, rng);
    dec_ = Decoder(cfg_, rng);
    fusion_ = FusionUnit(cfg_, rng);
}

nn::ParamMap ReenactModel::parameters() const {
    nn::ParamMap m;
    kp_.collect(m, "kp");
    dm_.collect(m, "dm");
    enc_.collect(m, "enc");
    dec_.collect(m, "dec");
    fusion_.collect(m, "fusion");
    return m;
}

void ReenactModel::validate_image(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.image_channels ||
        image.dim(1) != cfg_.resolution || image.dim(2) != cfg_.resolution)
        throw config_error("image shape " + image.shape_str() + " does not match configured " +
                           std::to_string(cfg_.resolution) + "x" + std::to_string(cfg_.resolution));
    if (!image.all_finite()) throw std::invalid_argument("image contains non-finite values");
    if (image.min_value() < 0.0 || image.max_value() > 1.0)
        throw std::invalid_argument("image values must lie in [0,1]");
}

BatchKeypoints ReenactModel::detect_keypoints_v(const Var& images) const {
    return kp_.forward(images);
}

Var ReenactModel::encode_v(const Var& images) const { return enc_.forward(images); }

DenseMotionOut ReenactModel::estimate_motion_v(const Var& ref_images, const BatchKeypoints& kp_ref,
                                               const BatchKeypoints& kp_drv) const {
    const int factor = cfg_.resolution / cfg_.feature_resolution();
    Var small = nn::antialias_downsample(ref_images, factor);
    return dm_.forward(small, kp_ref, kp_drv);
}

Var ReenactModel::warp_v(const Var& features, const DenseMotionOut& motion) const {
    return mul(grid_sample(features, motion.flow), motion.occlusion);
}

Var ReenactModel::decode_v(const Var& fused) const { return dec_.forward(fused); }

Keypoints ReenactModel::detect_keypoints(const Tensor& image) const {
    validate_image(image);
    NoGradGuard ng;
    const int R = cfg_.resolution;
    BatchKeypoints out = kp_.forward(constant(image.reshaped({1, 3, R, R})));
    return Keypoints{out.positions->value.reshaped({cfg_.num_keypoints, 2}),
                     out.jacobians->value.reshaped({cfg_.num_keypoints, 2, 2})};
}

Tensor ReenactModel::encode(const Tensor& image) const {
    validate_image(image);
    NoGradGuard ng;
    const int R = cfg_.resolution;
    Var f = enc_.forward(constant(image.reshaped({1, 3, R, R})));
    const auto& s = f->value.shape();
    return f->value.reshaped({s[1], s[2], s[3]});
}

std::vector<Tensor> ReenactModel::encode_batch(const std::vector<Tensor>& images) const {
    if (images.empty()) throw std::invalid_argument("encode_batch: empty image list");
    for (const auto& im : images) validate_image(im);
    NoGradGuard ng;
    const int R = cfg_.resolution;
    const int N = static_cast<int>(images.size());
    Tensor batch({N, 3, R, R});
    for (int n = 0; n < N; ++n)
        std::copy(images[static_cast<size_t>(n)].data(),
                  images[static_cast<size_t>(n)].data() + images[static_cast<size_t>(n)].numel(),
                  batch.data() + static_cast<size_t>(n) * 3 * R * R);
    Var f = enc_.forward(constant(batch));
    const auto& s = f->value.shape();
    std::vector<Tensor> out;
    out.reserve(images.size());
    const size_t per = static_cast<size_t>(s[1]) * s[2] * s[3];
    for (int n = 0; n < N; ++n) {
        Tensor t({s[1], s[2], s[3]});
        std::copy(f->value.data() + static_cast<size_t>(n) * per,
                  f->value.data() + static_cast<size_t>(n + 1) * per, t.data());
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

BatchKeypoints to_batch_kp(const Keypoints& kp, int expected_k) {
    if (kp.positions.ndim() != 2 || kp.positions.dim(0) != expected_k || kp.positions.dim(1) != 2)
        throw config_error("keypoint set has wrong cardinality: " + kp.positions.shape_str());
    if (kp.jacobians.ndim() != 3 || kp.jacobians.dim(0) != expected_k)
        throw config_error("jacobian set has wrong cardinality");
    return BatchKeypoints{constant(kp.positions.reshaped({1, expected_k, 2})),
                          constant(kp.jacobians.reshaped({1, expected_k, 2, 2}))};
}

}  // namespace

Motion ReenactModel::estimate_motion(const Keypoints& kp_ref, const Keypoints& kp_drv,
                                     const Tensor& ref_image) const {
    validate_image(ref_image);
    NoGradGuard ng;
    const int R = cfg_.resolution;
    DenseMotionOut out = estimate_motion_v(constant(ref_image.reshaped({1, 3, R, R})),
                                           to_batch_kp(kp_ref, cfg_.num_keypoints),
                                           to_batch_kp(kp_drv, cfg_.num_keypoints));
    const int h = out.flow->value.dim(1), w = out.flow->value.dim(2);
    return Motion{out.flow->value.reshaped({h, w, 2}), out.occlusion->value.reshaped({1, h, w})};
}

WarpedFeature ReenactModel::warp_feature(const Tensor& feature, const Motion& motion,
                                         int reference_index) const {
    if (feature.ndim() != 3) throw config_error("warp_feature: feature must be (C,h,w)");
    const int C = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
    if (motion.flow.ndim() != 3 || motion.flow.dim(0) != h || motion.flow.dim(1) != w ||
        motion.flow.dim(2) != 2)
        throw config_error("warp_feature: flow dims do not match feature");
    if (motion.occlusion.ndim() != 3 || motion.occlusion.dim(1) != h ||
        motion.occlusion.dim(2) != w)
        throw config_error("warp_feature: occlusion dims do not match feature");
    NoGradGuard ng;
    Var warped = grid_sample(constant(feature.reshaped({1, C, h, w})),
                             constant(motion.flow.reshaped({1, h, w, 2})));
    Var out = mul(warped, constant(motion.occlusion.reshaped({1, 1, h, w})));
    return WarpedFeature{out->value.reshaped({C, h, w}), reference_index};
}

Tensor ReenactModel::decode(const Tensor& fused) const {
    const int C = cfg_.feature_channels(), fr = cfg_.feature_resolution();
    if (fused.ndim() != 3 || fused.dim(0) != C || fused.dim(1) != fr || fused.dim(2) != fr)
        throw config_error("decode: fused feature shape " + fused.shape_str() +
                           " does not match encoder output");
    NoGradGuard ng;
    Var img = dec_.forward(constant(fused.reshaped({1, C, fr, fr})));
    return img->value.reshaped({3, cfg_.resolution, cfg_.resolution});
}

TrainForward ReenactModel::forward_train(const Var& refs_flat, int K, const Var& driving,
                                         FusionMode mode) const {
    if (K < 1) throw std::invalid_argument("forward_train: K must be >= 1");
    const int NK = refs_flat->value.dim(0);
    if (NK % K) throw config_error("forward_train: batch not divisible by K");
    const int N = NK / K;

    BatchKeypoints kp_drv = kp_.forward(driving);
    Var feats_all = enc_.forward(refs_flat);
    BatchKeypoints kp_refs_all = kp_.forward(refs_flat);
    const int factor = cfg_.resolution / cfg_.feature_resolution();
    Var small_all = nn::antialias_downsample(refs_flat, factor);

    std::vector<Var> warped;
    std::vector<Var> occlusions;
    warped.reserve(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        Var feat_k = slice_axis(feats_all, 0, k * N, N);
        Var small_k = slice_axis(small_all, 0, k * N, N);
        BatchKeypoints kp_k{slice_axis(kp_refs_all.positions, 0, k * N, N),
                            slice_axis(kp_refs_all.jacobians, 0, k * N, N)};
        DenseMotionOut motion = dm_.forward(small_k, kp_k, kp_drv);
        warped.push_back(warp_v(feat_k, motion));
        occlusions.push_back(motion.occlusion);
    }

    Var masks = FusionUnit::normalize(fusion_.mask_logits(warped, mode));
    Var fused = FusionUnit::fuse(masks, warped);
    Var generated = dec_.forward(fused);
    return TrainForward{generated, kp_drv, occlusions, masks};
}

Tensor ReenactModel::reenact(const std::vector<Tensor>& refs, const Tensor& driving,
                             FusionMode mode) const {
    return reenact_traced(refs, driving, mode).output;
}

ReenactModel::ReenactTrace ReenactModel::reenact_traced(const std::vector<Tensor>& refs,
                                                        const Tensor& driving,
                                                        FusionMode mode) const {
    if (refs.empty()) throw std::invalid_argument("reenact: reference list is empty");
    validate_image(driving);
    for (const auto& r : refs) validate_image(r);
    NoGradGuard ng;
    const int R = cfg_.resolution;
    const int K = static_cast<int>(refs.size());

    Var drv = constant(driving.reshaped({1, 3, R, R}));
    BatchKeypoints kp_drv = kp_.forward(drv);

    std::vector<Var> warped;
    warped.reserve(refs.size());
    for (const auto& r : refs) {
        Var ref = constant(r.reshaped({1, 3, R, R}));
        Var feat = enc_.forward(ref);
        BatchKeypoints kp_ref = kp_.forward(ref);
        DenseMotionOut motion = estimate_motion_v(ref, kp_ref, kp_drv);
        warped.push_back(warp_v(feat, motion));
    }

    Var masks = FusionUnit::normalize(fusion_.mask_logits(warped, mode));
    Var fused = FusionUnit::fuse(masks, warped);
    Var out = dec_.forward(fused);

    ReenactTrace trace;
    trace.output = out->value.reshaped({3, R, R});
    const auto& ms = masks->value.shape();  // (K,1,M,h,w)
    trace.masks = masks->value.reshaped({K, ms[2], ms[3], ms[4]});
    for (int k = 0; k < K; ++k) {
        const auto& fs = warped[static_cast<size_t>(k)]->value.shape();
        trace.warped.push_back(
            warped[static_cast<size_t>(k)]->value.reshaped({fs[1], fs[2], fs[3]}));
        Var dec_k = dec_.forward(warped[static_cast<size_t>(k)]);
        trace.decoded.push_back(dec_k->value.reshaped({3, R, R}));
    }
    return trace;
}

}  // namespace multiref
