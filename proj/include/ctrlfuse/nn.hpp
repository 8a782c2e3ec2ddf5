// SPDX-License-Identifier: Apache-2.0
//
// Named parameters and the few layer shapes the model is built from.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctrlfuse/ops.hpp"
#include "ctrlfuse/tensor.hpp"

namespace ctrlfuse::nn {

using ad::Shape;
using ad::Tensor;

enum class Init {
    zeros,
    fan_in_uniform,         // U(-b, b), b = gain * sqrt(3 / fan_in), leaky-relu gain
    fan_in_uniform_linear,  // same with unit gain, for maps not followed by an activation
    unit_normal,
};

struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

/// Owns every weight of a model in registration order. Values are derived
/// from (seed, name) only, so two stores with the same seed agree on every
/// shared name whatever else they contain.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    Tensor add(const std::string& name, Shape shape, Init init, bool trainable = true, std::size_t fan_in = 0);

    const std::vector<ParamEntry>& entries() const { return entries_; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor get(const std::string& name) const;
    std::vector<Tensor> trainable() const;
    std::size_t trainable_count() const;
    void zero_grad() const;

    /// FNV-1a over the raw bytes of every frozen (or every trainable) tensor.
    std::uint64_t checksum(bool frozen) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<ParamEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

struct Conv2d {
    Tensor weight;  // Cout x Cin x k x k
    Tensor bias;    // Cout, may be undefined
    std::size_t stride = 1;
    std::size_t padding = 0;

    Tensor operator()(const Tensor& x) const { return ad::conv2d(x, weight, bias, stride, padding); }
};

Conv2d make_conv(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                 std::size_t stride = 1, bool with_bias = true, bool trainable = true);

struct Linear {
    Tensor weight;  // Din x Dout
    Tensor bias;    // Dout, may be undefined

    Tensor operator()(const Tensor& x) const;
};

Linear make_linear(ParamStore& store, const std::string& name, std::size_t din, std::size_t dout,
                   bool with_bias = true, bool trainable = true);

/// Projected scaled dot-product attention without residual path:
/// out = attention(x Wq, ctx Wk, ctx Wv) Wo + bo.
struct AttentionBlock {
    Linear q, k, v, o;
    std::size_t heads = 1;

    Tensor operator()(const Tensor& queries, const Tensor& context) const;
};

/// `dim` is the attention width; queries carry `query_dim` features and the
/// context `context_dim`.
AttentionBlock make_attention(ParamStore& store, const std::string& name, std::size_t query_dim,
                              std::size_t context_dim, std::size_t dim, std::size_t heads, bool trainable = true);

}  // namespace ctrlfuse::nn
