#pragma once

// Binary PGM (P5, maxval 255) reading and writing. Used for exported
// attention maps (round(255*value)) and for class-index label maps.

#include <cstdint>
#include <string>
#include <vector>

namespace pgnn {

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels; // row-major
};

void write_pgm(const std::string& path, const PgmImage& img);
PgmImage read_pgm(const std::string& path);

} // namespace pgnn
