#include "multiref/fusion.hpp"

#include "multiref/image.hpp"
#include "multiref/serialize.hpp"

namespace multiref {

namespace {

std::vector<Var> to_batched_vars(const std::vector<WarpedFeature>& warped) {
    if (warped.empty()) throw std::invalid_argument("fusion: empty reference list");
    std::vector<Var> out;
    out.reserve(warped.size());
    const auto& shape0 = warped[0].data.shape();
    for (const auto& w : warped) {
        if (w.data.shape() != shape0)
            throw std::invalid_argument("fusion: warped features must share one shape");
        out.push_back(constant(w.data.reshaped({1, shape0[0], shape0[1], shape0[2]})));
    }
    return out;
}

}  // namespace

Tensor compute_mask_logits(const ReenactModel& model, const std::vector<WarpedFeature>& warped,
                           FusionMode mode) {
    NoGradGuard ng;
    std::vector<Var> vars = to_batched_vars(warped);
    Var logits = model.fusion().mask_logits(vars, mode);  // (K,1,M,h,w)
    const auto& s = logits->value.shape();
    return logits->value.reshaped({s[0], s[2], s[3], s[4]});
}

Tensor normalize_masks(const Tensor& logits) {
    if (logits.ndim() != 4) throw std::invalid_argument("normalize_masks: expected (K,M,h,w)");
    if (!logits.all_finite()) throw std::invalid_argument("normalize_masks: non-finite logits");
    NoGradGuard ng;
    const auto& s = logits.shape();
    Var l = constant(logits.reshaped({s[0], 1, s[1], s[2], s[3]}));
    Var m = FusionUnit::normalize(l);
    return m->value.reshaped(s);
}

Tensor fuse_features(const std::vector<WarpedFeature>& warped, const Tensor& masks) {
    if (masks.ndim() != 4) throw std::invalid_argument("fuse_features: expected (K,M,h,w) masks");
    NoGradGuard ng;
    std::vector<Var> vars = to_batched_vars(warped);
    const auto& s = masks.shape();
    Var m = constant(masks.reshaped({s[0], 1, s[1], s[2], s[3]}));
    Var fused = FusionUnit::fuse(m, vars);
    const auto& fs = fused->value.shape();
    return fused->value.reshaped({fs[1], fs[2], fs[3]});
}

namespace {

// paste src (3,h,w) into dst (3,H,W) at (row, col)
void paste(Tensor& dst, const Tensor& src, int row, int col) {
    const int H = dst.dim(1), W = dst.dim(2);
    const int h = src.dim(1), w = src.dim(2);
    (void)H;
    (void)W;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) dst.at(c, row + i, col + j) = src.at(c, i, j);
}

Tensor channel_mean_mask(const Tensor& masks, int k) {
    const int M = masks.dim(1), h = masks.dim(2), w = masks.dim(3);
    Tensor out({h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            real s = 0.0;
            for (int m = 0; m < M; ++m) s += masks.at(k, m, i, j);
            out.at(i, j) = s / static_cast<real>(M);
        }
    return out;
}

Tensor upsample_mask_nearest(const Tensor& mask, int R) {
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out({R, R});
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j) out.at(i, j) = mask.at(i * h / R, j * w / R);
    return out;
}

}  // namespace

MaskVisualization visualize_masks(const ReenactModel& model, const std::vector<Tensor>& refs,
                                  const Tensor& driving, FusionMode mode) {
    ReenactModel::ReenactTrace trace = model.reenact_traced(refs, driving, mode);
    const int K = static_cast<int>(refs.size());
    const int R = model.config().resolution;
    const int pad = 2;
    const int cols = K + 1;
    const int grid_w = cols * R + (cols + 1) * pad;
    const int grid_h = 3 * R + 4 * pad;

    Tensor grid({3, grid_h, grid_w}, 1.0);
    auto cell = [&](int r, int c) {
        return std::pair<int, int>{pad + r * (R + pad), pad + c * (R + pad)};
    };

    auto [r0, c0] = cell(0, 0);
    paste(grid, driving, r0, c0);
    for (int k = 0; k < K; ++k) {
        auto [ri, ci] = cell(0, k + 1);
        paste(grid, refs[static_cast<size_t>(k)], ri, ci);
    }
    for (int k = 0; k < K; ++k) {
        auto [ri, ci] = cell(1, k + 1);
        paste(grid, trace.decoded[static_cast<size_t>(k)], ri, ci);
    }
    for (int k = 0; k < K; ++k) {
        const Tensor m = upsample_mask_nearest(channel_mean_mask(trace.masks, k), R);
        Tensor masked = trace.decoded[static_cast<size_t>(k)];
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < R; ++j) masked.at(c, i, j) *= m.at(i, j);
        auto [ri, ci] = cell(2, k + 1);
        paste(grid, masked, ri, ci);
    }

    MaskVisualization vis;
    vis.grid = std::move(grid);
    vis.masks = trace.masks;
    return vis;
}

void write_mask_visualization(const MaskVisualization& vis, const std::filesystem::path& png_path,
                              const std::optional<std::filesystem::path>& npy_path) {
    write_png(png_path, vis.grid);
    if (npy_path) write_npy(*npy_path, vis.masks);
}

}  // namespace multiref
