#pragma once

#include <string>
#include <vector>

#include "cseg/common.hpp"
#include "cseg/metrics.hpp"

namespace cseg::imgio {

// 8-bit interleaved RGB image, row-major.
struct ImageU8 {
    int h = 0, w = 0, channels = 0;
    std::vector<uint8_t> v;

    uint8_t& at(int y, int x, int c) {
        return v[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return v[(static_cast<size_t>(y) * w + x) * channels + c];
    }
};

// Every file read in the process goes through read_file_bytes, which logs
// (path, byte count). Tests use this to prove the training path never
// touches mask files.
struct AccessLog {
    static void reset();
    static long total_bytes();
    static const std::vector<std::pair<std::string, long>>& entries();
    // Bytes read from paths containing the given substring.
    static long bytes_matching(const std::string& substring);
    static void record(const std::string& path, long bytes);
};

std::vector<uint8_t> read_file_bytes(const std::string& path);

// Decodes PNG/JPEG to RGB (grayscale inputs are replicated to 3 channels).
ImageU8 read_image(const std::string& path);

// Decodes to a binary mask: pixels > 127 become 1.
metrics::Mask read_mask(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);
void write_mask_png(const std::string& path, const metrics::Mask& mask);

// Planar float CHW in [0,1] -> interleaved u8 (values clamped, rounded).
ImageU8 chw_to_u8(const std::vector<float>& chw, int channels, int h, int w);

}  // namespace cseg::imgio
