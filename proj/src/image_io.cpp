// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <boost/beast/core/detail/base64.hpp>
#include <cmath>
#include <fstream>
#include <iterator>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse::io {

namespace b64 = boost::beast::detail::base64;

std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(255.0 * c + 0.5));
}

Tensor decode_png(const std::vector<std::uint8_t>& bytes, std::size_t channels) {
    if (channels != 1 && channels != 3) throw ContractError("PNG decode supports 1 or 3 channels");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw FormatError(std::string("invalid PNG: ") + img.message);
    img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("invalid PNG: " + msg);
    }
    const std::size_t h = img.height, w = img.width;
    std::vector<double> out(channels * h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t c = 0; c < channels; ++c) out[c * h * w + i] = pixels[i * channels + c] / 255.0;
    return Tensor::from({channels, h, w}, std::move(out));
}

std::vector<std::uint8_t> encode_png(const Tensor& image) {
    if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw ShapeError("PNG encode expects 1 x H x W or 3 x H x W, got " + ad::to_string(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> pixels(c * h * w);
    const auto src = image.data();
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < c; ++k) pixels[i * c + k] = to_byte(src[k * h * w + i]);

    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + img.message);
    out.resize(size);
    return out;
}

Tensor read_png(const std::filesystem::path& path, std::size_t channels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_png(bytes, channels);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
    const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
    const std::size_t padding = text.size() - read;
    if (padding > 2 || text.find_first_not_of('=', read) != std::string_view::npos)
        throw FormatError("invalid base64 character at offset " + std::to_string(read));
    out.resize(written);
    return out;
}

}  // namespace ctrlfuse::io
