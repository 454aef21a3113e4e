#pragma once

// Image codecs (PNG/JPEG through OpenCV) and the PFM float map format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "crackseg/error.hpp"
#include "crackseg/mask.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

namespace fs = std::filesystem;

/// RGB image as H x W x 3 floats in [0, 1].
inline Tensor<float> read_rgb(const fs::path& path) {
    const cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw IngestionError(path.string() + ": cannot decode image");
    Tensor<float> t({static_cast<std::size_t>(img.rows), static_cast<std::size_t>(img.cols), 3});
    const double scale = img.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double bgr[3];
            if (img.depth() == CV_16U) {
                const auto px = img.at<cv::Vec3w>(r, c);
                for (int k = 0; k < 3; ++k) bgr[k] = px[k];
            } else {
                const auto px = img.at<cv::Vec3b>(r, c);
                for (int k = 0; k < 3; ++k) bgr[k] = px[k];
            }
            for (int k = 0; k < 3; ++k)
                t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), static_cast<std::size_t>(k)) =
                    static_cast<float>(bgr[2 - k] * scale);
        }
    return t;
}

inline void write_rgb_png(const fs::path& path, const Tensor<float>& rgb) {
    cv::Mat img(static_cast<int>(rgb.height()), static_cast<int>(rgb.width()), CV_8UC3);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            cv::Vec3b px;
            for (int k = 0; k < 3; ++k) {
                const float v = rgb.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), static_cast<std::size_t>(2 - k));
                px[k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
            img.at<cv::Vec3b>(r, c) = px;
        }
    if (!cv::imwrite(path.string(), img)) throw IngestionError(path.string() + ": cannot write PNG");
}

/// 8-bit single-channel PNG as raw bytes (row-major).
inline LabelMask read_gray8(const fs::path& path) {
    const cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw IngestionError(path.string() + ": cannot decode mask");
    if (img.type() != CV_8UC1)
        throw IngestionError(path.string() + ": mask must be 8-bit single-channel");
    LabelMask m(static_cast<std::size_t>(img.cols), static_cast<std::size_t>(img.rows));
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c)
            m.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = img.at<std::uint8_t>(r, c);
    return m;
}

/// Label mask whose every value must be a class index below `num_classes`.
inline LabelMask read_mask(const fs::path& path, std::size_t num_classes = 3) {
    LabelMask m = read_gray8(path);
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.classes[i] >= num_classes)
            throw IngestionError(path.string() + ": invalid class value " + std::to_string(m.classes[i]) +
                                 " at row " + std::to_string(i / m.width) + ", col " + std::to_string(i % m.width));
    return m;
}

inline void write_gray8(const fs::path& path, std::size_t width, std::size_t height,
                        const std::vector<std::uint8_t>& values) {
    if (values.size() != width * height) throw RejectedInput("write_gray8: size mismatch");
    cv::Mat img(static_cast<int>(height), static_cast<int>(width), CV_8UC1);
    std::copy(values.begin(), values.end(), img.data);
    if (!cv::imwrite(path.string(), img)) throw IngestionError(path.string() + ": cannot write PNG");
}

inline void write_mask(const fs::path& path, const LabelMask& m) { write_gray8(path, m.width, m.height, m.classes); }

struct FloatMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> values;  // row-major, top row first
};

/// Grayscale PFM ("Pf"), little-endian (negative scale), rows stored bottom to top.
inline void write_pfm(const fs::path& path, const FloatMap& map) {
    if (map.values.size() != map.width * map.height) throw RejectedInput("write_pfm: size mismatch");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IngestionError(path.string() + ": cannot open for writing");
    f << "Pf\n" << map.width << ' ' << map.height << "\n-1.0\n";
    std::string row(map.width * 4, '\0');
    for (std::size_t r = map.height; r-- > 0;) {
        for (std::size_t c = 0; c < map.width; ++c) {
            const auto bits = std::bit_cast<std::uint32_t>(map.values[r * map.width + c]);
            for (int i = 0; i < 4; ++i) row[c * 4 + static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xffu);
        }
        f.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IngestionError(path.string() + ": write failed");
}

inline FloatMap read_pfm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError(path.string() + ": cannot open PFM");
    std::string magic;
    double scale = 0;
    FloatMap m;
    f >> magic >> m.width >> m.height >> scale;
    if (!f || magic != "Pf") throw IngestionError(path.string() + ": not a grayscale PFM");
    f.get();  // single whitespace after the header
    const bool little = scale < 0;
    m.values.resize(m.width * m.height);
    std::vector<unsigned char> row(m.width * 4);
    for (std::size_t r = m.height; r-- > 0;) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw IngestionError(path.string() + ": truncated PFM");
        for (std::size_t c = 0; c < m.width; ++c) {
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i) {
                const int shift = little ? 8 * i : 8 * (3 - i);
                bits |= static_cast<std::uint32_t>(row[c * 4 + static_cast<std::size_t>(i)]) << shift;
            }
            m.values[r * m.width + c] = std::bit_cast<float>(bits);
        }
    }
    return m;
}

}  // namespace crackseg
