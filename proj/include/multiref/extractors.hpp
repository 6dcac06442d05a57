#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "multiref/tensor.hpp"

namespace multiref {

/// Layer-activation extractor used by the binned metric. `extract` returns
/// raw activations per tapped layer; LPIPS channel weights default to units.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual std::vector<Tensor> extract(const Tensor& image) const = 0;
    virtual std::vector<std::vector<real>> lpips_weights() const;
    virtual int layer_count() const = 0;
};

/// Raw pixels as a single layer. With unit weights the binned metric reduces
/// to channel-normalized pixel-space L2 between bin means.
class IdentityExtractor : public FeatureExtractor {
public:
    std::string name() const override { return "identity"; }
    std::vector<Tensor> extract(const Tensor& image) const override;
    int layer_count() const override { return 1; }
};

/// Two fixed-seed random conv+relu stages; deterministic, needs no files.
class TinyConvExtractor : public FeatureExtractor {
public:
    explicit TinyConvExtractor(std::uint64_t seed = 0x7157c0de);
    std::string name() const override { return "tinyconv"; }
    std::vector<Tensor> extract(const Tensor& image) const override;
    int layer_count() const override { return 2; }

private:
    Tensor w1_, b1_, w2_, b2_;
};

/// AlexNet conv stack with the five standard LPIPS taps (relu1..relu5) and
/// learned linear channel weights, both loaded from a weight blob. The blob
/// path resolves from the explicit argument, else $MULTIREF_CACHE_DIR (or
/// ~/.cache/multiref) + /lpips_alexnet.blob.
class AlexNetExtractor : public FeatureExtractor {
public:
    explicit AlexNetExtractor(const std::filesystem::path& weights);
    std::string name() const override { return "alexnet"; }
    std::vector<Tensor> extract(const Tensor& image) const override;
    std::vector<std::vector<real>> lpips_weights() const override { return lin_; }
    int layer_count() const override { return 5; }

private:
    std::vector<Tensor> conv_w_, conv_b_;
    std::vector<std::vector<real>> lin_;
};

std::filesystem::path default_weights_path(const std::string& file_name);

/// Factory for CLI names: identity | tinyconv | alexnet.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name,
                                                 const std::optional<std::filesystem::path>& weights = {});

}  // namespace multiref
