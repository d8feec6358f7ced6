#include "xkd/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <fstream>

#include "xkd/common.hpp"

namespace xkd {

GrayImage load_gray_image(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (img.empty()) fail("cannot decode image: " + path);

    cv::Mat f;
    img.convertTo(f, CV_64F);
    // 16-bit sources get rescaled into the 8-bit range
    double scale = 1.0;
    if (img.depth() == CV_16U) scale = 255.0 / 65535.0;

    GrayImage out;
    out.height = f.rows;
    out.width = f.cols;
    out.pixels.resize(static_cast<size_t>(f.rows) * f.cols);
    const int ch = f.channels();
    for (int y = 0; y < f.rows; ++y) {
        const double* row = f.ptr<double>(y);
        for (int x = 0; x < f.cols; ++x) {
            double acc = 0.0;
            for (int c = 0; c < ch; ++c) acc += row[x * ch + c];
            out.at(y, x) = scale * acc / ch;  // channel-average luminance
        }
    }
    return out;
}

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int height, int width) {
    if (static_cast<size_t>(height) * width != pixels.size()) fail("write_pgm: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("write_pgm: cannot open " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) fail("write_pgm: write failed for " + path);
}

bool image_file_readable(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return static_cast<bool>(in);
}

}  // namespace xkd
