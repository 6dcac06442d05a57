#pragma once

#include <string>
#include <utility>
#include <vector>

#include "multiref/autodiff.hpp"
#include "multiref/rng.hpp"

namespace multiref::nn {

/// Flat named-parameter registry used by the optimizer and checkpoints.
/// Collection order is the deterministic construction order of the nets.
struct ParamMap {
    std::vector<std::pair<std::string, Var>> items;

    void add(const std::string& name, const Var& v) { items.emplace_back(name, v); }
    Var find(const std::string& name) const;
    size_t size() const { return items.size(); }
};

struct Conv2d {
    Var weight;  // (Cout,Cin,k,k)
    Var bias;    // (Cout)
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);

    Var forward(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
    void collect(ParamMap& m, const std::string& prefix) const;

    /// Zero weights, bias tiled with `bias_pattern` (FOMM-style jacobian head init).
    void init_constant(real weight_value, const std::vector<real>& bias_pattern);
};

struct InstanceNorm2d {
    Var gamma;
    Var beta;

    InstanceNorm2d() = default;
    explicit InstanceNorm2d(int channels);

    Var forward(const Var& x) const { return instance_norm(x, gamma, beta); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// conv -> norm -> relu
struct SameBlock {
    Conv2d conv;
    InstanceNorm2d norm;

    SameBlock() = default;
    SameBlock(int in_ch, int out_ch, int kernel, Rng& rng);
    Var forward(const Var& x) const { return relu(norm.forward(conv.forward(x))); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// conv -> norm -> relu -> avgpool/2
struct DownBlock {
    Conv2d conv;
    InstanceNorm2d norm;

    DownBlock() = default;
    DownBlock(int in_ch, int out_ch, Rng& rng);
    Var forward(const Var& x) const { return avg_pool2(relu(norm.forward(conv.forward(x)))); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// upx2 -> conv -> norm -> relu
struct UpBlock {
    Conv2d conv;
    InstanceNorm2d norm;

    UpBlock() = default;
    UpBlock(int in_ch, int out_ch, Rng& rng);
    Var forward(const Var& x) const {
        return relu(norm.forward(conv.forward(upsample_nearest2(x))));
    }
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// Pre-activation residual block: x + conv(relu(norm(conv(relu(norm(x))))))
struct ResBlock {
    InstanceNorm2d norm1, norm2;
    Conv2d conv1, conv2;

    ResBlock() = default;
    ResBlock(int channels, Rng& rng);
    Var forward(const Var& x) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// U-shaped encoder/decoder with skip concatenation. Output channel count is
/// base_channels + in_channels.
struct Hourglass {
    std::vector<DownBlock> downs;
    std::vector<UpBlock> ups;
    int out_channels = 0;

    Hourglass() = default;
    Hourglass(int in_ch, int base_ch, int num_blocks, int max_ch, Rng& rng);
    Var forward(const Var& x) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

/// Gaussian blur + stride subsampling; `factor` is the integer downscale.
Var antialias_downsample(const Var& x, int factor);

/// New leaf parameter initialized like a torch conv (uniform +-1/sqrt(fan_in)).
Tensor conv_weight_init(int out_ch, int in_ch, int kernel, Rng& rng);
Tensor conv_bias_init(int in_ch, int kernel, int out_ch, Rng& rng);

}  // namespace multiref::nn
