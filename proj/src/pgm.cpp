#include "pgnn/pgm.hpp"

#include <fstream>
#include <stdexcept>

namespace pgnn {

namespace {

// Skips whitespace and '#' comment lines between header tokens.
int next_header_token(std::istream& in) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            return c;
        }
        c = in.get();
    }
    return EOF;
}

std::size_t read_header_number(std::istream& in, const std::string& path) {
    int c = next_header_token(in);
    if (c == EOF || !std::isdigit(c))
        throw std::runtime_error("read_pgm: malformed header in " + path);
    std::size_t v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + static_cast<std::size_t>(c - '0');
        c = in.get();
    }
    return v;
}

} // namespace

void write_pgm(const std::string& path, const PgmImage& img) {
    if (img.pixels.size() != img.width * img.height)
        throw std::invalid_argument("write_pgm: pixel count " +
                                    std::to_string(img.pixels.size()) +
                                    " does not match " +
                                    std::to_string(img.width) + "x" +
                                    std::to_string(img.height));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("write_pgm: write failed " + path);
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5')
        throw std::runtime_error("read_pgm: not a binary PGM (P5): " + path);
    PgmImage img;
    img.width = read_header_number(in, path);
    img.height = read_header_number(in, path);
    const std::size_t maxval = read_header_number(in, path);
    if (maxval != 255)
        throw std::runtime_error("read_pgm: unsupported maxval " +
                                 std::to_string(maxval) + " in " + path);
    // read_header_number consumed the single whitespace after maxval already
    img.pixels.resize(img.width * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw std::runtime_error("read_pgm: truncated pixel data in " + path);
    return img;
}

} // namespace pgnn
