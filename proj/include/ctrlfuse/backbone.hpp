// SPDX-License-Identifier: Apache-2.0
//
// Modality encoders (conv + gradient residual dense blocks), reference
// feature construction and the image decoder.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "ctrlfuse/nn.hpp"

namespace ctrlfuse {

using ad::Tensor;

enum class Modality { ir, vis };

const char* to_string(Modality m);

/// Registered infrared (1 x H x W) and visible (3 x H x W) images in [0, 1].
struct ImagePair {
    Tensor ir;
    Tensor vis;
    std::optional<std::vector<std::uint8_t>> labels;  // H*W class ids

    std::size_t height() const { return ir.dim(1); }
    std::size_t width() const { return ir.dim(2); }

    /// Throws ShapeError / ContractError when the pair breaks its invariants.
    void validate() const;
};

/// Y = 0.299 R + 0.587 G + 0.114 B, shape 1 x H x W.
Tensor luminance(const Tensor& rgb);

/// C x H x W activations at source resolution.
struct FeatureMap {
    Tensor values;

    std::size_t channels() const { return values.dim(0); }
    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }
};

struct BackboneConfig {
    std::size_t enc_channels = 16;
    std::size_t grdb_blocks = 1;
    std::vector<std::size_t> decoder_schedule{32, 16, 8, 4, 2, 1};
    std::uint64_t seed = 20240601;

    /// 128 channels per modality, decoder 256 -> 128 -> 64 -> 32 -> 16 -> 1.
    static BackboneConfig full();

    void validate() const;
};

/// Dense conv chain plus a fixed Sobel branch, fused by a 1x1 conv and added
/// back to the input: x + fuse(concat(d1, d2, |Sx * x| + |Sy * x|)).
class Grdb {
public:
    Grdb(nn::ParamStore& store, const std::string& name, std::size_t channels);

    Tensor forward(const Tensor& x) const;
    Tensor sobel_branch(const Tensor& x) const;

    nn::Conv2d dense1, dense2, fuse;

private:
    Tensor sobel_x_, sobel_y_;
};

class Encoder {
public:
    Encoder(nn::ParamStore& store, const std::string& name, std::size_t in_channels, const BackboneConfig& cfg);

    FeatureMap forward(const Tensor& image) const;

    std::size_t in_channels() const { return in_channels_; }
    nn::Conv2d stem;
    std::vector<Grdb> blocks;

private:
    std::size_t in_channels_;
};

class Decoder {
public:
    Decoder(nn::ParamStore& store, const std::string& name, const BackboneConfig& cfg);

    /// Single-channel image in [0, 1]: (tanh(last conv) + 1) / 2.
    Tensor forward(const FeatureMap& f) const;

    std::vector<nn::Conv2d> layers;
};

class FusionBackbone {
public:
    FusionBackbone(nn::ParamStore& store, const BackboneConfig& cfg);

    FeatureMap encode(Modality modality, const Tensor& image) const;
    Tensor decode(const FeatureMap& f) const { return decoder_.forward(f); }

    const BackboneConfig& config() const { return cfg_; }
    const Encoder& encoder(Modality m) const { return m == Modality::ir ? enc_ir_ : enc_vis_; }
    const Decoder& decoder() const { return decoder_; }

private:
    BackboneConfig cfg_;
    Encoder enc_ir_;
    Encoder enc_vis_;
    Decoder decoder_;
};

/// Channel concatenation (ir first, then vis).
FeatureMap reference_features(const FeatureMap& f_ir, const FeatureMap& f_vis);

/// Per-channel 3x3 Sobel responses (x, y) as C x 3 x 3 kernels.
Tensor sobel_kernel_x(std::size_t channels);
Tensor sobel_kernel_y(std::size_t channels);

}  // namespace ctrlfuse
