#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "multiref/model.hpp"

namespace multiref {

// Single-sample views of the fusion unit (the batched path lives on
// FusionUnit / ReenactModel::forward_train).

/// Shared-weight per-reference logits, stacked to (K,M,h,w); M = 1 in patch
/// mode, M = C in element mode.
Tensor compute_mask_logits(const ReenactModel& model, const std::vector<WarpedFeature>& warped,
                           FusionMode mode);

/// Softmax across the K axis of (K,M,h,w) logits; at every (m,h,w) the K
/// weights sum to 1.
Tensor normalize_masks(const Tensor& logits);

/// Convex combination of the K warped features under (K,M,h,w) masks.
/// Masks whose K-sum strays from 1 by more than 1e-4 are rejected.
Tensor fuse_features(const std::vector<WarpedFeature>& warped, const Tensor& masks);

/// Table-style grid: header row driving|references, then per-reference
/// decoded warped features, then mask-weighted decodes. Masks are also
/// exportable as an .npy array.
struct MaskVisualization {
    Tensor grid;   // (3, grid_h, grid_w)
    Tensor masks;  // (K,M,h,w)
};

MaskVisualization visualize_masks(const ReenactModel& model, const std::vector<Tensor>& refs,
                                  const Tensor& driving, FusionMode mode);

void write_mask_visualization(const MaskVisualization& vis, const std::filesystem::path& png_path,
                              const std::optional<std::filesystem::path>& npy_path);

}  // namespace multiref
