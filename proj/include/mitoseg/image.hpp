#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "mitoseg/tensor.hpp"

namespace mitoseg {

// Interleaved row-major 8-bit image, 1 (mask) or 3 (RGB) channels.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    static ImageU8 make(int width, int height, int channels, std::uint8_t fill = 0) {
        ImageU8 im;
        im.width = width;
        im.height = height;
        im.channels = channels;
        im.pixels.assign(static_cast<std::size_t>(width) * height * channels, fill);
        return im;
    }

    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const { return width == 0 || height == 0; }
};

inline ImageU8 read_png(const std::string& path) {
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str()))
        throw DataError("cannot read PNG " + path + ": " + im.message);
    const bool gray = (im.format & PNG_FORMAT_FLAG_COLOR) == 0;
    im.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    ImageU8 out = ImageU8::make(static_cast<int>(im.width), static_cast<int>(im.height), gray ? 1 : 3);
    if (!png_image_finish_read(&im, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&im);
        throw DataError("cannot decode PNG " + path + ": " + im.message);
    }
    return out;
}

inline void write_png(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw DataError("write_png supports 1- or 3-channel images, got " + std::to_string(image.channels));
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    im.width = static_cast<png_uint_32>(image.width);
    im.height = static_cast<png_uint_32>(image.height);
    im.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const std::string tmp = path + ".tmp";
    if (!png_image_write_to_file(&im, tmp.c_str(), 0, image.pixels.data(), 0, nullptr))
        throw DataError("cannot write PNG " + tmp + ": " + im.message);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

// RGB image -> 1x3xHxW tensor scaled to [0,1]
inline Tensor image_to_tensor(const ImageU8& image) {
    if (image.channels != 3) throw DataError("image_to_tensor expects an RGB image");
    Tensor t = Tensor::zeros({1, 3, image.height, image.width});
    auto d = t.data();
    const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * image.width + x] =
                    static_cast<float>(image.at(y, x, c)) / 255.0f;
    return t;
}

// 8-bit mask (0/255, anything >127 counts as foreground) -> 1x1xHxW {0,1}
inline Tensor mask_to_tensor(const ImageU8& mask) {
    if (mask.channels != 1) throw DataError("mask_to_tensor expects a single-channel image");
    Tensor t = Tensor::zeros({1, 1, mask.height, mask.width});
    auto d = t.data();
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) d[i] = mask.pixels[i] > 127 ? 1.0f : 0.0f;
    return t;
}

// probability map [0,1] -> 8-bit grayscale
inline ImageU8 prob_map_to_image(const Tensor& prob) {
    require_shape(prob.ndim() == 4 && prob.dim(0) == 1 && prob.dim(1) == 1,
                  "prob_map_to_image expects a 1x1xHxW tensor, got " + shape_str(prob.shape()));
    ImageU8 im = ImageU8::make(prob.dim(3), prob.dim(2), 1);
    for (std::size_t i = 0; i < im.pixels.size(); ++i) {
        float v = prob.data()[i] * 255.0f + 0.5f;
        if (v < 0) v = 0;
        if (v > 255) v = 255;
        im.pixels[i] = static_cast<std::uint8_t>(v);
    }
    return im;
}

// Bilinear resize with half-pixel centers and border clamp; used for
// candidate crops and the rescale augmentation. Identity when sizes match.
inline ImageU8 resize_bilinear(const ImageU8& image, int out_w, int out_h) {
    if (out_w == image.width && out_h == image.height) return image;
    ImageU8 out = ImageU8::make(out_w, out_h, image.channels);
    const double sy = static_cast<double>(image.height) / out_h;
    const double sx = static_cast<double>(image.width) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(image.height - 1));
        const int y0 = std::min(static_cast<int>(fy), image.height - 1);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(image.width - 1));
            const int x0 = std::min(static_cast<int>(fx), image.width - 1);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < image.channels; ++c) {
                const double v = image.at(y0, x0, c) * (1 - wy) * (1 - wx) +
                                 image.at(y0, x1, c) * (1 - wy) * wx +
                                 image.at(y1, x0, c) * wy * (1 - wx) + image.at(y1, x1, c) * wy * wx;
                out.at(oy, ox, c) = static_cast<std::uint8_t>(std::min(std::max(v + 0.5, 0.0), 255.0));
            }
        }
    }
    return out;
}

inline ImageU8 resize_nearest(const ImageU8& image, int out_w, int out_h) {
    if (out_w == image.width && out_h == image.height) return image;
    ImageU8 out = ImageU8::make(out_w, out_h, image.channels);
    for (int oy = 0; oy < out_h; ++oy) {
        int sy = static_cast<int>((oy + 0.5) * image.height / out_h);
        sy = std::min(std::max(sy, 0), image.height - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            int sx = static_cast<int>((ox + 0.5) * image.width / out_w);
            sx = std::min(std::max(sx, 0), image.width - 1);
            for (int c = 0; c < image.channels; ++c) out.at(oy, ox, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

// Separable Gaussian blur; sigma <= 0 is a no-op.
inline ImageU8 gaussian_blur(const ImageU8& image, double sigma) {
    if (sigma <= 0.0) return image;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= sum;

    const int W = image.width, H = image.height, C = image.channels;
    std::vector<double> tmp(static_cast<std::size_t>(W) * H * C);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::min(std::max(x + i, 0), W - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] * image.at(y, xx, c);
                }
                tmp[(static_cast<std::size_t>(y) * W + x) * C + c] = acc;
            }
    ImageU8 out = ImageU8::make(W, H, C);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::min(std::max(y + i, 0), H - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           tmp[(static_cast<std::size_t>(yy) * W + x) * C + c];
                }
                out.at(y, x, c) = static_cast<std::uint8_t>(std::min(std::max(acc + 0.5, 0.0), 255.0));
            }
    return out;
}

// Axis-aligned box outline centered on (cx, cy), clipped at the borders.
inline void draw_box(ImageU8& image, double cx, double cy, int side, std::uint8_t r, std::uint8_t g,
                     std::uint8_t b, int thickness = 2) {
    if (image.channels != 3) throw DataError("draw_box expects an RGB image");
    const int x0 = static_cast<int>(std::lround(cx)) - side / 2;
    const int y0 = static_cast<int>(std::lround(cy)) - side / 2;
    const int x1 = x0 + side - 1;
    const int y1 = y0 + side - 1;
    auto put = [&](int y, int x) {
        if (y < 0 || y >= image.height || x < 0 || x >= image.width) return;
        image.at(y, x, 0) = r;
        image.at(y, x, 1) = g;
        image.at(y, x, 2) = b;
    };
    for (int t = 0; t < thickness; ++t) {
        for (int x = x0; x <= x1; ++x) {
            put(y0 + t, x);
            put(y1 - t, x);
        }
        for (int y = y0; y <= y1; ++y) {
            put(y, x0 + t);
            put(y, x1 - t);
        }
    }
}

}  // namespace mitoseg
