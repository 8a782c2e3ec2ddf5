// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/backbone.hpp"

#include <string>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

using namespace ad;

const char* to_string(Modality m) { return m == Modality::ir ? "ir" : "vis"; }

void ImagePair::validate() const {
    if (!ir.defined() || !vis.defined()) throw ContractError("image pair is missing a modality");
    if (ir.ndim() != 3 || ir.dim(0) != 1)
        throw ShapeError("infrared image must be 1 x H x W, got " + ad::to_string(ir.shape()));
    if (vis.ndim() != 3 || vis.dim(0) != 3)
        throw ShapeError("visible image must be 3 x H x W, got " + ad::to_string(vis.shape()));
    if (ir.dim(1) != vis.dim(1) || ir.dim(2) != vis.dim(2)) throw ShapeError("infrared and visible sizes differ");
    for (const auto* t : {&ir, &vis})
        for (const double v : t->data())
            if (!(v >= 0.0 && v <= 1.0)) throw ContractError("pixel value outside [0, 1]");
    if (labels && labels->size() != height() * width()) throw ShapeError("label map size does not match images");
}

Tensor luminance(const Tensor& rgb) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3) throw ShapeError("luminance expects 3 x H x W");
    Tensor y = scale(slice_channels(rgb, 0, 1), 0.299);
    y = add(y, scale(slice_channels(rgb, 1, 2), 0.587));
    return add(y, scale(slice_channels(rgb, 2, 3), 0.114));
}

BackboneConfig BackboneConfig::full() {
    BackboneConfig cfg;
    cfg.enc_channels = 128;
    cfg.decoder_schedule = {256, 128, 64, 32, 16, 1};
    return cfg;
}

void BackboneConfig::validate() const {
    if (enc_channels < 2 || enc_channels % 2 != 0) throw ConfigError("enc_channels must be even and >= 2");
    const auto& s = decoder_schedule;
    if (s.size() < 2 || s.back() != 1) throw ConfigError("decoder schedule must end in 1");
    if (s.front() != 2 * enc_channels) throw ConfigError("decoder schedule must start at 2 * enc_channels");
    for (std::size_t i = 1; i + 1 < s.size(); ++i)
        if (s[i] * 2 != s[i - 1]) throw ConfigError("decoder schedule must halve at every step but the last");
}

namespace {

Tensor repeat_kernel(std::size_t channels, const std::vector<double>& k3) {
    std::vector<double> values;
    values.reserve(channels * 9);
    for (std::size_t c = 0; c < channels; ++c) values.insert(values.end(), k3.begin(), k3.end());
    return Tensor::from({channels, 3, 3}, std::move(values));
}

}  // namespace

Tensor sobel_kernel_x(std::size_t channels) { return repeat_kernel(channels, {-1, 0, 1, -2, 0, 2, -1, 0, 1}); }
Tensor sobel_kernel_y(std::size_t channels) { return repeat_kernel(channels, {-1, -2, -1, 0, 0, 0, 1, 2, 1}); }

Grdb::Grdb(nn::ParamStore& store, const std::string& name, std::size_t channels)
    : sobel_x_(sobel_kernel_x(channels)), sobel_y_(sobel_kernel_y(channels)) {
    const std::size_t growth = channels / 2;
    dense1 = nn::make_conv(store, name + ".dense1", channels, growth, 3);
    dense2 = nn::make_conv(store, name + ".dense2", channels + growth, growth, 3);
    fuse = nn::make_conv(store, name + ".fuse", 2 * growth + channels, channels, 1);
}

Tensor Grdb::sobel_branch(const Tensor& x) const {
    return add(abs(depthwise_conv2d(x, sobel_x_, Padding::zeros)), abs(depthwise_conv2d(x, sobel_y_, Padding::zeros)));
}

Tensor Grdb::forward(const Tensor& x) const {
    const Tensor d1 = leaky_relu(dense1(x));
    const Tensor d2 = leaky_relu(dense2(concat_channels({x, d1})));
    return add(x, fuse(concat_channels({d1, d2, sobel_branch(x)})));
}

Encoder::Encoder(nn::ParamStore& store, const std::string& name, std::size_t in_channels, const BackboneConfig& cfg)
    : in_channels_(in_channels) {
    stem = nn::make_conv(store, name + ".stem", in_channels, cfg.enc_channels, 3);
    for (std::size_t i = 0; i < cfg.grdb_blocks; ++i)
        blocks.emplace_back(store, name + ".grdb" + std::to_string(i), cfg.enc_channels);
}

FeatureMap Encoder::forward(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != in_channels_)
        throw ShapeError("encoder expects " + std::to_string(in_channels_) + " x H x W, got " +
                         ad::to_string(image.shape()));
    Tensor x = leaky_relu(stem(image));
    for (const auto& b : blocks) x = b.forward(x);
    return {x};
}

Decoder::Decoder(nn::ParamStore& store, const std::string& name, const BackboneConfig& cfg) {
    const auto& s = cfg.decoder_schedule;
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
        layers.push_back(nn::make_conv(store, name + ".conv" + std::to_string(i), s[i], s[i + 1], 3));
}

Tensor Decoder::forward(const FeatureMap& f) const {
    if (f.values.ndim() != 3 || f.channels() != layers.front().weight.dim(1))
        throw ShapeError("decoder expects " + std::to_string(layers.front().weight.dim(1)) + " channels, got " +
                         ad::to_string(f.values.shape()));
    Tensor x = f.values;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) x = leaky_relu(layers[i](x));
    x = ad::tanh(layers.back()(x));
    return scale(add_scalar(x, 1.0), 0.5);
}

FusionBackbone::FusionBackbone(nn::ParamStore& store, const BackboneConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      enc_ir_(store, "backbone.enc_ir", 1, cfg),
      enc_vis_(store, "backbone.enc_vis", 3, cfg),
      decoder_(store, "backbone.decoder", cfg) {}

FeatureMap FusionBackbone::encode(Modality modality, const Tensor& image) const {
    return encoder(modality).forward(image);
}

FeatureMap reference_features(const FeatureMap& f_ir, const FeatureMap& f_vis) {
    if (f_ir.height() != f_vis.height() || f_ir.width() != f_vis.width())
        throw ShapeError("reference_features: spatial sizes differ");
    return {concat_channels({f_ir.values, f_vis.values})};
}

}  // namespace ctrlfuse
