#include "cseg/image_io.hpp"

#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace cseg::imgio {

namespace {
std::vector<std::pair<std::string, long>>& log_entries() {
    static std::vector<std::pair<std::string, long>> entries;
    return entries;
}
}  // namespace

void AccessLog::reset() { log_entries().clear(); }

long AccessLog::total_bytes() {
    long n = 0;
    for (const auto& [path, bytes] : log_entries()) n += bytes;
    return n;
}

const std::vector<std::pair<std::string, long>>& AccessLog::entries() {
    return log_entries();
}

long AccessLog::bytes_matching(const std::string& substring) {
    long n = 0;
    for (const auto& [path, bytes] : log_entries())
        if (path.find(substring) != std::string::npos) n += bytes;
    return n;
}

void AccessLog::record(const std::string& path, long bytes) {
    log_entries().emplace_back(path, bytes);
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    CSEG_CHECK(f.good(), "cannot open file: ", path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    CSEG_CHECK(!f.bad(), "read error: ", path);
    AccessLog::record(path, static_cast<long>(bytes.size()));
    return bytes;
}

ImageU8 read_image(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1,
                const_cast<uint8_t*>(bytes.data()));
    cv::Mat img = cv::imdecode(raw, cv::IMREAD_COLOR);  // BGR, 3 channels
    CSEG_CHECK(!img.empty(), "cannot decode image: ", path);
    ImageU8 out;
    out.h = img.rows;
    out.w = img.cols;
    out.channels = 3;
    out.v.resize(static_cast<size_t>(out.h) * out.w * 3);
    for (int y = 0; y < out.h; ++y) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < out.w; ++x) {
            out.at(y, x, 0) = row[x][2];  // R
            out.at(y, x, 1) = row[x][1];  // G
            out.at(y, x, 2) = row[x][0];  // B
        }
    }
    return out;
}

metrics::Mask read_mask(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1,
                const_cast<uint8_t*>(bytes.data()));
    cv::Mat img = cv::imdecode(raw, cv::IMREAD_GRAYSCALE);
    CSEG_CHECK(!img.empty(), "cannot decode mask: ", path);
    metrics::Mask m(img.rows, img.cols);
    for (int y = 0; y < img.rows; ++y) {
        const uint8_t* row = img.ptr<uint8_t>(y);
        for (int x = 0; x < img.cols; ++x) m.at(y, x) = row[x] > 127 ? 1 : 0;
    }
    return m;
}

void write_png(const std::string& path, const ImageU8& img) {
    CSEG_CHECK(img.channels == 1 || img.channels == 3, "write_png: ", img.channels,
               " channels unsupported");
    cv::Mat mat;
    if (img.channels == 3) {
        mat.create(img.h, img.w, CV_8UC3);
        for (int y = 0; y < img.h; ++y) {
            cv::Vec3b* row = mat.ptr<cv::Vec3b>(y);
            for (int x = 0; x < img.w; ++x) {
                row[x][0] = img.at(y, x, 2);  // B
                row[x][1] = img.at(y, x, 1);
                row[x][2] = img.at(y, x, 0);
            }
        }
    } else {
        mat.create(img.h, img.w, CV_8UC1);
        for (int y = 0; y < img.h; ++y) {
            uint8_t* row = mat.ptr<uint8_t>(y);
            for (int x = 0; x < img.w; ++x) row[x] = img.at(y, x, 0);
        }
    }
    CSEG_CHECK(cv::imwrite(path, mat), "cannot write PNG: ", path);
}

void write_mask_png(const std::string& path, const metrics::Mask& mask) {
    ImageU8 img;
    img.h = mask.h;
    img.w = mask.w;
    img.channels = 1;
    img.v.resize(mask.v.size());
    for (size_t i = 0; i < mask.v.size(); ++i) img.v[i] = mask.v[i] ? 255 : 0;
    write_png(path, img);
}

ImageU8 chw_to_u8(const std::vector<float>& chw, int channels, int h, int w) {
    CSEG_CHECK(chw.size() == static_cast<size_t>(channels) * h * w,
               "chw_to_u8: size mismatch");
    ImageU8 out;
    out.h = h;
    out.w = w;
    out.channels = channels;
    out.v.resize(chw.size());
    const long plane = static_cast<long>(h) * w;
    for (int c = 0; c < channels; ++c)
        for (long i = 0; i < plane; ++i) {
            float v = chw[c * plane + i];
            v = std::min(1.0f, std::max(0.0f, v));
            out.v[i * channels + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
        }
    return out;
}

}  // namespace cseg::imgio
