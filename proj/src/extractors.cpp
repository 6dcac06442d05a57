#include "multiref/extractors.hpp"

#include <cstdlib>

#include "multiref/kernels.hpp"
#include "multiref/rng.hpp"
#include "multiref/serialize.hpp"

namespace multiref {

std::vector<std::vector<real>> FeatureExtractor::lpips_weights() const {
    // unit channel weights per layer; sized lazily by callers from features
    return {};
}

std::vector<Tensor> IdentityExtractor::extract(const Tensor& image) const {
    if (image.ndim() != 3) throw std::invalid_argument("extract: expected (C,H,W) image");
    return {image};
}

TinyConvExtractor::TinyConvExtractor(std::uint64_t seed) {
    Rng rng(seed);
    const real s1 = 1.0 / std::sqrt(3.0 * 9.0);
    const real s2 = 1.0 / std::sqrt(8.0 * 9.0);
    w1_ = Tensor::rand_uniform({8, 3, 3, 3}, rng, -s1, s1);
    b1_ = Tensor::rand_uniform({8}, rng, -s1, s1);
    w2_ = Tensor::rand_uniform({16, 8, 3, 3}, rng, -s2, s2);
    b2_ = Tensor::rand_uniform({16}, rng, -s2, s2);
}

namespace {

Tensor relu_plain(Tensor t) {
    for (size_t i = 0; i < t.numel(); ++i)
        if (t[i] < 0.0) t[i] = 0.0;
    return t;
}

Tensor as_batch(const Tensor& image) {
    if (image.ndim() != 3) throw std::invalid_argument("extract: expected (C,H,W) image");
    return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

Tensor squeeze_batch(const Tensor& t) {
    return t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
}

}  // namespace

std::vector<Tensor> TinyConvExtractor::extract(const Tensor& image) const {
    Tensor x = as_batch(image);
    Tensor h1 = relu_plain(kernels::conv2d_forward(x, w1_, &b1_, 2, 1));
    Tensor h2 = relu_plain(kernels::conv2d_forward(h1, w2_, &b2_, 2, 1));
    return {squeeze_batch(h1), squeeze_batch(h2)};
}

std::filesystem::path default_weights_path(const std::string& file_name) {
    if (const char* env = std::getenv("MULTIREF_CACHE_DIR"))
        return std::filesystem::path(env) / file_name;
    if (const char* home = std::getenv("HOME"))
        return std::filesystem::path(home) / ".cache" / "multiref" / file_name;
    return std::filesystem::path(file_name);
}

AlexNetExtractor::AlexNetExtractor(const std::filesystem::path& weights) {
    if (!std::filesystem::exists(weights))
        throw io_error("alexnet weights not found at " + weights.string() +
                       " (set MULTIREF_CACHE_DIR or pass an explicit path; "
                       "see tools/export_lpips_weights.py for the blob format)");
    const Blob blob = read_blob(weights);
    const char* names[5] = {"conv1", "conv2", "conv3", "conv4", "conv5"};
    for (const char* n : names) {
        conv_w_.push_back(blob.find(std::string(n) + ".weight"));
        conv_b_.push_back(blob.find(std::string(n) + ".bias"));
    }
    const int expected_out[5] = {64, 192, 384, 256, 256};
    for (int i = 0; i < 5; ++i)
        if (conv_w_[static_cast<size_t>(i)].dim(0) != expected_out[i])
            throw io_error("alexnet weights: unexpected channel count in conv" +
                           std::to_string(i + 1));
    for (int i = 0; i < 5; ++i) {
        const std::string key = "lpips.lin" + std::to_string(i + 1);
        if (blob.contains(key)) {
            const Tensor& t = blob.find(key);
            lin_.emplace_back(t.vec());
        } else {
            lin_.emplace_back(std::vector<real>(
                static_cast<size_t>(conv_w_[static_cast<size_t>(i)].dim(0)), 1.0));
        }
    }
}

std::vector<Tensor> AlexNetExtractor::extract(const Tensor& image) const {
    Tensor x = as_batch(image);
    // LPIPS input scaling: [0,1] -> [-1,1], then per-channel shift/scale
    const real shift[3] = {-0.030, -0.088, -0.188};
    const real scl[3] = {0.458, 0.448, 0.450};
    const int H = x.dim(2), W = x.dim(3);
    for (int c = 0; c < 3; ++c) {
        real* p = x.data() + static_cast<size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) p[i] = ((2.0 * p[i] - 1.0) - shift[c]) / scl[c];
    }

    std::vector<Tensor> taps;
    Tensor h = relu_plain(kernels::conv2d_forward(x, conv_w_[0], &conv_b_[0], 4, 2));
    taps.push_back(squeeze_batch(h));
    h = kernels::maxpool2d_forward(h, 3, 2);
    h = relu_plain(kernels::conv2d_forward(h, conv_w_[1], &conv_b_[1], 1, 2));
    taps.push_back(squeeze_batch(h));
    h = kernels::maxpool2d_forward(h, 3, 2);
    h = relu_plain(kernels::conv2d_forward(h, conv_w_[2], &conv_b_[2], 1, 1));
    taps.push_back(squeeze_batch(h));
    h = relu_plain(kernels::conv2d_forward(h, conv_w_[3], &conv_b_[3], 1, 1));
    taps.push_back(squeeze_batch(h));
    h = relu_plain(kernels::conv2d_forward(h, conv_w_[4], &conv_b_[4], 1, 1));
    taps.push_back(squeeze_batch(h));
    return taps;
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name,
                                                 const std::optional<std::filesystem::path>& weights) {
    if (name == "identity") return std::make_unique<IdentityExtractor>();
    if (name == "tinyconv") return std::make_unique<TinyConvExtractor>();
    if (name == "alexnet")
        return std::make_unique<AlexNetExtractor>(
            weights ? *weights : default_weights_path("lpips_alexnet.blob"));
    throw std::invalid_argument("unknown extractor: " + name);
}

}  // namespace multiref
