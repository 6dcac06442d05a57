#include "multiref/training.hpp"

#include "multiref/config_io.hpp"
#include "multiref/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace multiref {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (K < 1) throw config_error("train: K must be >= 1");
    if (stage1_epochs < 0 || stage2_epochs < 0 || total_epochs() < 1)
        throw config_error("train: epoch counts must be positive");
    if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (lr <= 0.0) throw config_error("train: lr must be positive");
    if (decay_factor <= 0.0 || decay_factor > 1.0)
        throw config_error("train: decay factor must lie in (0, 1]");
    int prev = -1;
    for (int e : decay_epochs) {
        if (e <= prev) throw config_error("train: decay epochs must be strictly increasing");
        if (e < 0 || e >= total_epochs())
            throw config_error("train: decay epoch " + std::to_string(e) +
                               " outside the stage-1 + stage-2 span");
        prev = e;
    }
    if (samples_per_video < 1) throw config_error("train: samples_per_video must be >= 1");
    if (perceptual_scales.empty()) throw config_error("train: need at least one perceptual scale");
    if (perceptual_extractor != "identity" && perceptual_extractor != "tinyconv")
        throw config_error("train: unknown perceptual extractor " + perceptual_extractor);
    model.validate();
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.K = 3;
    c.stage1_epochs = 100;
    c.stage2_epochs = 50;
    c.batch_size = 32;
    c.lr = 2e-4;
    c.decay_epochs = {60, 90};
    c.decay_factor = 0.1;
    c.model = ModelConfig::paper_parity();
    return c;
}

real lr_at_epoch(const TrainConfig& cfg, int epoch) {
    if (epoch < 0) throw std::invalid_argument("lr_at_epoch: negative epoch");
    if (cfg.decay_mode == TrainConfig::DecayMode::Step) {
        int n = 0;
        for (int e : cfg.decay_epochs)
            if (epoch >= e) ++n;
        // divide by (1/factor)^n: keeps decimal presets (2e-4 -> 2e-5 -> 2e-6) exact
        const real inv = 1.0 / cfg.decay_factor;
        real div = 1.0;
        for (int i = 0; i < n; ++i) div *= inv;
        return cfg.lr / div;
    }
    // linear ramp between anchors (e_i, lr0*f^i), flat outside
    const real inv = 1.0 / cfg.decay_factor;
    real lo_lr = cfg.lr;
    int lo_e = 0;
    real div = 1.0;
    for (int e : cfg.decay_epochs) {
        div *= inv;
        const real hi_lr = cfg.lr / div;
        if (epoch <= e) {
            if (e == lo_e) return hi_lr;
            const real t = static_cast<real>(epoch - lo_e) / static_cast<real>(e - lo_e);
            return lo_lr + (hi_lr - lo_lr) * t;
        }
        lo_lr = hi_lr;
        lo_e = e;
    }
    return lo_lr;
}

Tensor Batch::references_k_major() const {
    const int B = references.dim(0), Kn = references.dim(1);
    const int C = references.dim(2), H = references.dim(3), W = references.dim(4);
    Tensor out({Kn * B, C, H, W});
    const size_t plane = static_cast<size_t>(C) * H * W;
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < Kn; ++k) {
            const real* src = references.data() + (static_cast<size_t>(b) * Kn + k) * plane;
            real* dst = out.data() + (static_cast<size_t>(k) * B + b) * plane;
            std::copy(src, src + plane, dst);
        }
    return out;
}

BatchSampler::BatchSampler(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(seed) {
    for (const auto& v : data.sequences) {
        if (static_cast<int>(v.size()) >= cfg.K + 1) {
            videos_.push_back(&v);
        } else {
            std::cerr << "warning: skipping video " << v.pattern << "/" << v.name << " with "
                      << v.size() << " frames (need K+1=" << cfg.K + 1 << ")\n";
        }
    }
    if (videos_.empty()) throw io_error("training dataset has no usable videos");
}

Batch BatchSampler::next() {
    const int B = cfg_.batch_size, K = cfg_.K;
    const auto& first = *videos_.front();
    const int R = first.resolution();
    Batch batch;
    batch.references = Tensor({B, K, 3, R, R});
    batch.driving = Tensor({B, 3, R, R});
    batch.meta.resize(static_cast<size_t>(B));
    const size_t plane = 3 * static_cast<size_t>(R) * R;
    for (int b = 0; b < B; ++b) {
        const VideoSequence* v = videos_[static_cast<size_t>(rng_.uniform_int(
            static_cast<int>(videos_.size())))];
        const int T = static_cast<int>(v->size());
        Sample s;
        s.video = v;
        for (int k = 0; k < K; ++k) s.ref_frames.push_back(rng_.uniform_int(T));
        s.driving_frame = rng_.uniform_int(T);
        for (int k = 0; k < K; ++k) {
            const Tensor& f = v->frame(static_cast<size_t>(s.ref_frames[static_cast<size_t>(k)]));
            std::copy(f.data(), f.data() + plane,
                      batch.references.data() + (static_cast<size_t>(b) * K + k) * plane);
        }
        const Tensor& d = v->frame(static_cast<size_t>(s.driving_frame));
        std::copy(d.data(), d.data() + plane, batch.driving.data() + static_cast<size_t>(b) * plane);
        batch.meta[static_cast<size_t>(b)] = std::move(s);
    }
    return batch;
}

Batch sample_training_batch(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
    BatchSampler sampler(data, cfg, seed);
    return sampler.next();
}

// --- losses -------------------------------------------------------------------

PerceptualExtractor::PerceptualExtractor(const std::string& kind, std::uint64_t seed)
    : kind_(kind) {
    if (kind_ == "identity") return;
    if (kind_ != "tinyconv") throw config_error("unknown perceptual extractor: " + kind);
    Rng rng(seed);
    const real s1 = 1.0 / std::sqrt(27.0), s2 = 1.0 / std::sqrt(72.0);
    w1_ = constant(Tensor::rand_uniform({8, 3, 3, 3}, rng, -s1, s1));
    b1_ = constant(Tensor::rand_uniform({8}, rng, -s1, s1));
    w2_ = constant(Tensor::rand_uniform({16, 8, 3, 3}, rng, -s2, s2));
    b2_ = constant(Tensor::rand_uniform({16}, rng, -s2, s2));
}

std::vector<Var> PerceptualExtractor::features(const Var& images) const {
    if (kind_ == "identity") return {images};
    Var h1 = relu(conv2d(images, w1_, b1_, 1, 1));
    Var h2 = relu(conv2d(h1, w2_, b2_, 2, 1));
    return {h1, h2};
}

Var perceptual_reconstruction_loss(const Var& generated, const Var& driving,
                                   const std::vector<real>& scales,
                                   const PerceptualExtractor& extractor) {
    Var total;
    for (real s : scales) {
        if (s <= 0.0 || s > 1.0) throw config_error("perceptual scale must lie in (0,1]");
        const int factor = static_cast<int>(std::lround(1.0 / s));
        Var g = factor > 1 ? nn::antialias_downsample(generated, factor) : generated;
        Var d = factor > 1 ? nn::antialias_downsample(driving, factor) : driving;
        auto gf = extractor.features(g);
        auto df = extractor.features(d);
        for (size_t l = 0; l < gf.size(); ++l) {
            Var term = mean_all(abs_op(sub(gf[l], detach(df[l]))));
            total = total ? add(total, term) : term;
        }
    }
    return total;
}

EquivarianceTerms equivariance_losses(const ReenactModel& model, const Var& driving,
                                      const BatchKeypoints& kp_driving, real sigma_affine,
                                      Rng& rng, bool include_flips) {
    const int N = driving->value.dim(0);
    const int H = driving->value.dim(2), W = driving->value.dim(3);

    // random affine per sample: A = I + N(0, sigma), t = N(0, sigma)
    Tensor A({N, 2, 2}), t({N, 2});
    for (int n = 0; n < N; ++n) {
        const real flip = (include_flips && rng.uniform() < 0.5) ? -1.0 : 1.0;
        A.at(n, 0, 0) = flip * (1.0 + sigma_affine * rng.normal());
        A.at(n, 0, 1) = sigma_affine * rng.normal();
        A.at(n, 1, 0) = sigma_affine * rng.normal();
        A.at(n, 1, 1) = 1.0 + sigma_affine * rng.normal();
        t.at(n, 0) = sigma_affine * rng.normal();
        t.at(n, 1) = sigma_affine * rng.normal();
    }

    // transformed frame: sample driving at T(z) over the identity grid
    Tensor grid({N, H, W, 2});
    const Tensor base = kernels::identity_grid(H, W);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const real zx = base.at(i, j, 0), zy = base.at(i, j, 1);
                grid.at(n, i, j, 0) = A.at(n, 0, 0) * zx + A.at(n, 0, 1) * zy + t.at(n, 0);
                grid.at(n, i, j, 1) = A.at(n, 1, 0) * zx + A.at(n, 1, 1) * zy + t.at(n, 1);
            }
    Var transformed = grid_sample(detach(driving), constant(grid));
    BatchKeypoints kp_t = model.detect_keypoints_v(transformed);

    const int K = kp_t.positions->value.dim(1);
    // T(p) = A p + t applied to detected keypoints of the transformed frame
    Var Ar = constant(A.reshaped({N, 1, 2, 2}));
    Var prod = mul(Ar, reshape(kp_t.positions, {N, K, 1, 2}));
    Var warped_pos = add(sum_axis(prod, 3, false), constant(t.reshaped({N, 1, 2})));
    Var value_loss = mean_all(abs_op(sub(kp_driving.positions, warped_pos)));

    // || I - J_drv^{-1} (A J_t) ||_1
    Tensor A_tile({N, K, 2, 2});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) A_tile.at(n, k, i, j) = A.at(n, i, j);
    Var jac_t = matmul2x2(constant(A_tile), kp_t.jacobians);
    Var normed = matmul2x2(inv2x2(kp_driving.jacobians), jac_t);
    Tensor eye({N, K, 2, 2});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            eye.at(n, k, 0, 0) = 1.0;
            eye.at(n, k, 1, 1) = 1.0;
        }
    Var jac_loss = mean_all(abs_op(sub(constant(eye), normed)));
    return EquivarianceTerms{value_loss, jac_loss};
}

std::string LossBreakdown::to_json_line(int epoch, int step, real lr) const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["lr"] = lr;
    for (const auto& [k, v] : terms) j[k] = v;
    j["total"] = total;
    if (stage2) j["disc"] = disc;
    return j.dump();
}

// --- Adam ----------------------------------------------------------------------

Adam::Adam(real beta1, real beta2, real eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(const nn::ParamMap& params, real lr) {
    ++t_;
    const real bc1 = 1.0 - std::pow(b1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(b2_, static_cast<real>(t_));
    for (const auto& [name, p] : params.items) {
        if (!p->has_grad()) continue;
        auto it = state_.find(name);
        if (it == state_.end())
            it = state_.emplace(name, std::make_pair(Tensor(p->value.shape()),
                                                     Tensor(p->value.shape()))).first;
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        const Tensor& g = p->grad;
        for (size_t i = 0; i < g.numel(); ++i) {
            m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
            const real mh = m[i] / bc1;
            const real vh = v[i] / bc2;
            p->value[i] -= lr * mh / (std::sqrt(vh) + eps_);
        }
        p->clear_grad();
    }
}

void Adam::export_state(std::vector<std::pair<std::string, Tensor>>* out,
                        const std::string& prefix) const {
    for (const auto& [name, mv] : state_) {
        out->emplace_back(prefix + name + ".m", mv.first);
        out->emplace_back(prefix + name + ".v", mv.second);
    }
}

void Adam::import_state(const std::vector<std::pair<std::string, Tensor>>& tensors,
                        const std::string& prefix, std::int64_t step_count) {
    t_ = step_count;
    state_.clear();
    for (const auto& [name, t] : tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        std::string rest = name.substr(prefix.size());
        const bool is_m = rest.size() > 2 && rest.substr(rest.size() - 2) == ".m";
        const bool is_v = rest.size() > 2 && rest.substr(rest.size() - 2) == ".v";
        if (!is_m && !is_v) continue;
        rest = rest.substr(0, rest.size() - 2);
        auto& slot = state_[rest];
        if (is_m)
            slot.first = t;
        else
            slot.second = t;
    }
}

// --- trainer ---------------------------------------------------------------------

namespace {

void zero_grads(const nn::ParamMap& params) {
    for (const auto& [n, p] : params.items) p->clear_grad();
}

void check_finite(const LossBreakdown& b) {
    for (const auto& [k, v] : b.terms)
        if (!std::isfinite(v))
            throw std::runtime_error("training aborted: loss term '" + k +
                                     "' is not finite (breakdown: " +
                                     b.to_json_line(-1, -1, 0.0) + ")");
    if (!std::isfinite(b.total) || !std::isfinite(b.disc))
        throw std::runtime_error("training aborted: non-finite total loss");
}

}  // namespace

Trainer::Trainer(ReenactModel& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      adam_g_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      adam_d_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      perceptual_(cfg.perceptual_extractor),
      transform_rng_(cfg.seed ^ 0xE9A1B2C3ULL) {
    cfg_.validate();
    if (cfg_.model.resolution != model.config().resolution)
        throw config_error("trainer: config resolution does not match model");
    Rng disc_rng(model.config().init_seed ^ 0xd15c0000ULL);
    disc_ = Discriminator(model.config(), disc_rng);
    gen_params_ = model.parameters();
    disc_.collect(disc_params_, "disc");
}

LossBreakdown Trainer::step(const Batch& batch, int epoch) {
    const bool stage2 = epoch >= cfg_.stage1_epochs;
    const real lr = lr_at_epoch(cfg_, epoch);

    Var refs = constant(batch.references_k_major());
    Var driving = constant(batch.driving);
    TrainForward fw = model_.forward_train(refs, batch.K(), driving, cfg_.model.fusion_mode);

    LossBreakdown out;
    out.stage2 = stage2;

    Var perc = perceptual_reconstruction_loss(fw.generated, driving, cfg_.perceptual_scales,
                                              perceptual_);
    EquivarianceTerms eq = equivariance_losses(model_, driving, fw.kp_driving, cfg_.sigma_affine,
                                               transform_rng_);
    Var total = scale(perc, cfg_.w_perceptual);
    total = add(total, scale(eq.value, cfg_.w_equiv_value));
    if (cfg_.w_equiv_jacobian != 0.0) total = add(total, scale(eq.jacobian, cfg_.w_equiv_jacobian));

    out.terms["perceptual"] = perc->value[0];
    out.terms["equiv_value"] = eq.value->value[0];
    out.terms["equiv_jacobian"] = eq.jacobian->value[0];

    if (stage2) {
        auto fake_feats = disc_.forward(fw.generated);
        auto real_feats = disc_.forward(driving);
        Var fake_logits = fake_feats.back();
        Var one_minus = add_scalar(scale(fake_logits, -1.0), 1.0);
        Var gan = mean_all(mul(one_minus, one_minus));
        Var fm;
        for (size_t i = 0; i + 1 < fake_feats.size(); ++i) {
            Var term = mean_all(abs_op(sub(fake_feats[i], detach(real_feats[i]))));
            fm = fm ? add(fm, term) : term;
        }
        total = add(total, scale(gan, cfg_.w_gan));
        total = add(total, scale(fm, cfg_.w_feature_matching));
        out.terms["gen_gan"] = gan->value[0];
        out.terms["feature_matching"] = fm->value[0];
    }

    out.total = total->value[0];
    check_finite(out);

    zero_grads(gen_params_);
    zero_grads(disc_params_);
    backward(total);
    adam_g_.step(gen_params_, lr);

    if (stage2) {
        zero_grads(disc_params_);
        zero_grads(gen_params_);
        auto real_feats = disc_.forward(driving);
        auto fake_feats = disc_.forward(detach(fw.generated));
        Var rl = real_feats.back();
        Var fl = fake_feats.back();
        Var one_minus_r = add_scalar(scale(rl, -1.0), 1.0);
        Var d_loss = add(mean_all(mul(one_minus_r, one_minus_r)), mean_all(mul(fl, fl)));
        out.disc = d_loss->value[0];
        check_finite(out);
        backward(d_loss);
        adam_d_.step(disc_params_, lr);
    }
    return out;
}

std::filesystem::path Trainer::fit(const Dataset& data, const fs::path& out_dir,
                                   std::ostream* progress) {
    fs::create_directories(out_dir);
    BatchSampler sampler(data, cfg_, cfg_.seed);
    const int videos = static_cast<int>(sampler.usable_videos().size());
    const int steps_per_epoch = std::max(
        1, (videos * cfg_.samples_per_video + cfg_.batch_size - 1) / cfg_.batch_size);

    std::ofstream log(out_dir / "train_log.jsonl", start_epoch_ > 0 ? std::ios::app : std::ios::out);
    fs::path last;
    char buf[64];
    for (int epoch = start_epoch_; epoch < cfg_.total_epochs(); ++epoch) {
        const real lr = lr_at_epoch(cfg_, epoch);
        for (int s = 0; s < steps_per_epoch; ++s) {
            Batch batch = sampler.next();
            LossBreakdown b = step(batch, epoch);
            log << b.to_json_line(epoch, s, lr) << "\n";
        }
        log.flush();
        if ((epoch + 1) % cfg_.checkpoint_every == 0 || epoch + 1 == cfg_.total_epochs()) {
            std::snprintf(buf, sizeof(buf), "ckpt_epoch_%04d.ckpt", epoch + 1);
            last = out_dir / buf;
            save_checkpoint(last, epoch + 1);
        }
        if (progress)
            (*progress) << "epoch " << epoch + 1 << "/" << cfg_.total_epochs() << " lr " << lr
                        << std::endl;
    }
    return last;
}

void Trainer::save_checkpoint(const fs::path& path, int completed_epochs) const {
    nlohmann::json extra;
    extra["epoch"] = completed_epochs;
    extra["stage"] = completed_epochs > cfg_.stage1_epochs ? 2 : 1;
    extra["adam_g_steps"] = adam_g_.step_count();
    extra["adam_d_steps"] = adam_d_.step_count();
    std::vector<std::pair<std::string, Tensor>> extra_tensors;
    for (const auto& [n, p] : disc_params_.items) extra_tensors.emplace_back(n, p->value);
    adam_g_.export_state(&extra_tensors, "adam_g.");
    adam_d_.export_state(&extra_tensors, "adam_d.");
    checkpoint_save(path, model_, extra, extra_tensors);
}

void Trainer::resume(const fs::path& path) {
    CheckpointFile ckpt = checkpoint_read(path);
    const nlohmann::json current = model_config_to_json(cfg_.model);
    if (ckpt.manifest.at("model") != current)
        throw config_error("resume: checkpoint model config does not match trainer config");
    assign_parameters(gen_params_, ckpt.blob);
    for (const auto& [n, p] : disc_params_.items)
        if (ckpt.blob.contains(n))
            p->value = ckpt.blob.find(n);
    adam_g_.import_state(ckpt.blob.tensors, "adam_g.",
                         ckpt.manifest.value("adam_g_steps", std::int64_t{0}));
    adam_d_.import_state(ckpt.blob.tensors, "adam_d.",
                         ckpt.manifest.value("adam_d_steps", std::int64_t{0}));
    start_epoch_ = ckpt.manifest.value("epoch", 0);
}

// --- checkpoint archive --------------------------------------------------------

void checkpoint_save(const fs::path& path, const ReenactModel& model,
                     const nlohmann::json& extra_manifest,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
    Blob blob;
    blob.manifest = extra_manifest;
    blob.manifest["format"] = "multiref-checkpoint";
    blob.manifest["model"] = model_config_to_json(model.config());
    nn::ParamMap params = model.parameters();
    blob.tensors.reserve(params.size() + extra.size());
    for (const auto& [n, p] : params.items) blob.tensors.emplace_back(n, p->value);
    for (const auto& [n, t] : extra) blob.tensors.emplace_back(n, t);
    write_blob(path, blob);
}

CheckpointFile checkpoint_read(const fs::path& path) {
    CheckpointFile out;
    out.blob = read_blob(path);
    out.manifest = out.blob.manifest;
    if (!out.manifest.contains("model"))
        throw config_error("checkpoint has no model manifest: " + path.string());
    out.config = model_config_from_json(out.manifest.at("model"));
    return out;
}

std::unique_ptr<ReenactModel> model_from_checkpoint(const CheckpointFile& ckpt) {
    auto model = std::make_unique<ReenactModel>(ckpt.config);
    nn::ParamMap params = model->parameters();
    assign_parameters(params, ckpt.blob);
    return model;
}

std::unique_ptr<ReenactModel> load_model(const fs::path& path) {
    return model_from_checkpoint(checkpoint_read(path));
}

void assign_parameters(const nn::ParamMap& params, const Blob& blob) {
    for (const auto& [name, p] : params.items) {
        const Tensor& t = blob.find(name);
        if (!t.same_shape(p->value))
            throw config_error("checkpoint tensor " + name + " has shape " + t.shape_str() +
                               ", expected " + p->value.shape_str());
        p->value = t;
    }
}

}  // namespace multiref
