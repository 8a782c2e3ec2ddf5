// SPDX-License-Identifier: Apache-2.0
//
// 8-bit PNG <-> C x H x W tensors in [0, 1] (C = 1 gray, C = 3 RGB) and
// base64 for the HTTP wire format. Quantisation is round-half-up:
// byte = floor(255 v + 0.5), v clamped to [0, 1] first.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlfuse/tensor.hpp"

namespace ctrlfuse::io {

using ad::Tensor;

std::uint8_t to_byte(double v);

/// Any PNG is converted to the requested channel count (1 or 3).
/// Throws FormatError on undecodable input.
Tensor decode_png(const std::vector<std::uint8_t>& bytes, std::size_t channels);
std::vector<std::uint8_t> encode_png(const Tensor& image);

Tensor read_png(const std::filesystem::path& path, std::size_t channels);
void write_png(const std::filesystem::path& path, const Tensor& image);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Strict padded base64; FormatError on any other input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace ctrlfuse::io
