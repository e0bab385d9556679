#include "ckda/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace ckda {

namespace {
unsigned char to_byte(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}
}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw StateError("write_ppm expects an (H,W,3) tensor");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StateError("cannot open " + path + " for writing");
    out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (int64_t i = 0; i < image.numel(); ++i) out.put(static_cast<char>(to_byte(image[i])));
}

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) throw StateError("write_pgm expects an (H,W) tensor");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StateError("cannot open " + path + " for writing");
    out << "P5\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (int64_t i = 0; i < image.numel(); ++i) out.put(static_cast<char>(to_byte(image[i])));
}

}  // namespace ckda
