#pragma once

// Raster image access. Decoding goes through OpenCV imgcodecs (PNG/JPEG/PGM
// and friends); color inputs are reduced to grayscale by channel average.
// Writing is limited to binary PGM, which is all the synthetic generator
// needs and is byte-deterministic.

#include <cstdint>
#include <string>
#include <vector>

namespace xkd {

struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // row-major, [0,255]

    double at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
    double& at(int y, int x) { return pixels[static_cast<size_t>(y) * width + x]; }
};

GrayImage load_gray_image(const std::string& path);  // throws with the path on failure
void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int height, int width);
bool image_file_readable(const std::string& path);

}  // namespace xkd
