// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/nn.hpp"

#include <cmath>
#include <cstring>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse::nn {

Tensor ParamStore::add(const std::string& name, Shape shape, Init init, bool trainable, std::size_t fan_in) {
    if (contains(name)) throw ContractError("duplicate parameter name: " + name);
    const std::size_t n = ad::numel(shape);
    std::vector<double> values(n, 0.0);
    Rng rng(derive_seed(seed_, name));
    switch (init) {
        case Init::zeros:
            break;
        case Init::fan_in_uniform:
        case Init::fan_in_uniform_linear: {
            if (fan_in == 0) throw ContractError("fan_in_uniform init needs fan_in for " + name);
            const double gain =
                init == Init::fan_in_uniform ? std::sqrt(2.0 / (1.0 + ad::kLeakySlope * ad::kLeakySlope)) : 1.0;
            const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
            for (auto& v : values) v = rng.uniform(-bound, bound);
            break;
        }
        case Init::unit_normal:
            for (auto& v : values) v = rng.normal();
            break;
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values), trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

std::vector<Tensor> ParamStore::trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
        if (e.trainable) out.push_back(e.tensor);
    return out;
}

std::size_t ParamStore::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (e.trainable) n += e.tensor.numel();
    return n;
}

void ParamStore::zero_grad() const {
    for (const auto& e : entries_) e.tensor.node().grad.clear();
}

std::uint64_t ParamStore::checksum(bool frozen) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : entries_) {
        if (e.trainable == frozen) continue;
        for (const char c : e.name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        for (const double v : e.tensor.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof v);
            for (const unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ull;
            }
        }
    }
    return h;
}

Conv2d make_conv(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                 std::size_t stride, bool with_bias, bool trainable) {
    Conv2d conv;
    conv.weight = store.add(name + ".weight", {cout, cin, k, k}, Init::fan_in_uniform, trainable, cin * k * k);
    if (with_bias) conv.bias = store.add(name + ".bias", {cout}, Init::zeros, trainable);
    conv.stride = stride;
    conv.padding = k / 2;
    return conv;
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = ad::matmul(x, weight);
    return bias.defined() ? ad::add_row_bias(y, bias) : y;
}

Linear make_linear(ParamStore& store, const std::string& name, std::size_t din, std::size_t dout, bool with_bias,
                   bool trainable) {
    Linear lin;
    lin.weight = store.add(name + ".weight", {din, dout}, Init::fan_in_uniform_linear, trainable, din);
    if (with_bias) lin.bias = store.add(name + ".bias", {dout}, Init::zeros, trainable);
    return lin;
}

Tensor AttentionBlock::operator()(const Tensor& queries, const Tensor& context) const {
    return o(ad::attention(q(queries), k(context), v(context), heads));
}

AttentionBlock make_attention(ParamStore& store, const std::string& name, std::size_t query_dim,
                              std::size_t context_dim, std::size_t dim, std::size_t heads, bool trainable) {
    AttentionBlock a;
    // q/k/v carry no bias; a key bias cancels in the row softmax.
    a.q = make_linear(store, name + ".q", query_dim, dim, false, trainable);
    a.k = make_linear(store, name + ".k", context_dim, dim, false, trainable);
    a.v = make_linear(store, name + ".v", context_dim, dim, false, trainable);
    a.o = make_linear(store, name + ".o", dim, dim, true, trainable);
    a.heads = heads;
    return a;
}

}  // namespace ctrlfuse::nn
