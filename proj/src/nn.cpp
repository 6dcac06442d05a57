#include "multiref/nn.hpp"

#include <cmath>

#include "multiref/kernels.hpp"

namespace multiref::nn {

Var ParamMap::find(const std::string& name) const {
    for (const auto& [n, v] : items)
        if (n == name) return v;
    throw config_error("parameter not found: " + name);
}

Tensor conv_weight_init(int out_ch, int in_ch, int kernel, Rng& rng) {
    const real bound = 1.0 / std::sqrt(static_cast<real>(in_ch) * kernel * kernel);
    return Tensor::rand_uniform({out_ch, in_ch, kernel, kernel}, rng, -bound, bound);
}

Tensor conv_bias_init(int in_ch, int kernel, int out_ch, Rng& rng) {
    const real bound = 1.0 / std::sqrt(static_cast<real>(in_ch) * kernel * kernel);
    return Tensor::rand_uniform({out_ch}, rng, -bound, bound);
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng)
    : weight(variable(conv_weight_init(out_ch, in_ch, kernel, rng))),
      bias(variable(conv_bias_init(in_ch, kernel, out_ch, rng))),
      stride(stride_),
      pad(pad_) {}

void Conv2d::collect(ParamMap& m, const std::string& prefix) const {
    m.add(prefix + ".weight", weight);
    m.add(prefix + ".bias", bias);
}

void Conv2d::init_constant(real weight_value, const std::vector<real>& bias_pattern) {
    for (auto& v : weight->value.vec()) v = weight_value;
    auto& b = bias->value.vec();
    for (size_t i = 0; i < b.size(); ++i) b[i] = bias_pattern[i % bias_pattern.size()];
}

InstanceNorm2d::InstanceNorm2d(int channels)
    : gamma(variable(Tensor::full({channels}, 1.0))), beta(variable(Tensor::zeros({channels}))) {}

void InstanceNorm2d::collect(ParamMap& m, const std::string& prefix) const {
    m.add(prefix + ".gamma", gamma);
    m.add(prefix + ".beta", beta);
}

SameBlock::SameBlock(int in_ch, int out_ch, int kernel, Rng& rng)
    : conv(in_ch, out_ch, kernel, 1, kernel / 2, rng), norm(out_ch) {}

void SameBlock::collect(ParamMap& m, const std::string& prefix) const {
    conv.collect(m, prefix + ".conv");
    norm.collect(m, prefix + ".norm");
}

DownBlock::DownBlock(int in_ch, int out_ch, Rng& rng)
    : conv(in_ch, out_ch, 3, 1, 1, rng), norm(out_ch) {}

void DownBlock::collect(ParamMap& m, const std::string& prefix) const {
    conv.collect(m, prefix + ".conv");
    norm.collect(m, prefix + ".norm");
}

UpBlock::UpBlock(int in_ch, int out_ch, Rng& rng)
    : conv(in_ch, out_ch, 3, 1, 1, rng), norm(out_ch) {}

void UpBlock::collect(ParamMap& m, const std::string& prefix) const {
    conv.collect(m, prefix + ".conv");
    norm.collect(m, prefix + ".norm");
}

ResBlock::ResBlock(int channels, Rng& rng)
    : norm1(channels),
      norm2(channels),
      conv1(channels, channels, 3, 1, 1, rng),
      conv2(channels, channels, 3, 1, 1, rng) {}

Var ResBlock::forward(const Var& x) const {
    Var h = conv1.forward(relu(norm1.forward(x)));
    h = conv2.forward(relu(norm2.forward(h)));
    return add(x, h);
}

void ResBlock::collect(ParamMap& m, const std::string& prefix) const {
    norm1.collect(m, prefix + ".norm1");
    conv1.collect(m, prefix + ".conv1");
    norm2.collect(m, prefix + ".norm2");
    conv2.collect(m, prefix + ".conv2");
}

namespace {

int cap(int v, int max_ch) { return v < max_ch ? v : max_ch; }

}  // namespace

Hourglass::Hourglass(int in_ch, int base_ch, int num_blocks, int max_ch, Rng& rng) {
    downs.reserve(static_cast<size_t>(num_blocks));
    for (int i = 0; i < num_blocks; ++i) {
        const int ic = (i == 0) ? in_ch : cap(base_ch << i, max_ch);
        const int oc = cap(base_ch << (i + 1), max_ch);
        downs.emplace_back(ic, oc, rng);
    }
    ups.reserve(static_cast<size_t>(num_blocks));
    for (int i = num_blocks - 1; i >= 0; --i) {
        const int ic = ((i == num_blocks - 1) ? 1 : 2) * cap(base_ch << (i + 1), max_ch);
        const int oc = cap(base_ch << i, max_ch);
        ups.emplace_back(ic, oc, rng);
    }
    out_channels = base_ch + in_ch;
}

Var Hourglass::forward(const Var& x) const {
    std::vector<Var> outs{x};
    for (const auto& d : downs) outs.push_back(d.forward(outs.back()));
    Var out = outs.back();
    outs.pop_back();
    for (const auto& u : ups) {
        out = u.forward(out);
        Var skip = outs.back();
        outs.pop_back();
        out = concat({out, skip}, 1);
    }
    return out;
}

void Hourglass::collect(ParamMap& m, const std::string& prefix) const {
    for (size_t i = 0; i < downs.size(); ++i)
        downs[i].collect(m, prefix + ".down" + std::to_string(i));
    for (size_t i = 0; i < ups.size(); ++i) ups[i].collect(m, prefix + ".up" + std::to_string(i));
}

Var antialias_downsample(const Var& x, int factor) {
    if (factor < 1) throw config_error("antialias_downsample: factor must be >= 1");
    if (factor == 1) return x;
    const real sigma = (static_cast<real>(factor) - 1.0) / 2.0;
    const int k = 2 * static_cast<int>(std::lround(sigma * 4.0)) + 1;
    Tensor kern({1, 1, k, k});
    const int c = k / 2;
    real sum = 0.0;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const real d2 = static_cast<real>((i - c) * (i - c) + (j - c) * (j - c));
            const real v = std::exp(-d2 / (2.0 * sigma * sigma));
            kern.at(0, 0, i, j) = v;
            sum += v;
        }
    }
    kern.scale_(1.0 / sum);

    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    Var flat = reshape(x, {N * C, 1, H, W});
    Var blurred = conv2d(flat, constant(kern), nullptr, factor, k / 2);
    const int Ho = blurred->value.dim(2), Wo = blurred->value.dim(3);
    return reshape(blurred, {N, C, Ho, Wo});
}

}  // namespace multiref::nn
