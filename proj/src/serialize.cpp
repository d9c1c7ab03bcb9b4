#include "pgnn/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pgnn {

namespace {

constexpr char kMagic[5] = {'P', 'G', 'N', 'N', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("tensor read: truncated stream");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("tensor read: truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& in) {
    const std::uint64_t bits = get_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    if (!t.defined())
        throw std::invalid_argument("write_tensor: undefined tensor");
    const Shape& s = t.shape();
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
    if (!out) throw std::runtime_error("write_tensor: stream write failed");
}

Tensor read_tensor(std::istream& in) {
    const std::uint32_t rank = get_u32(in);
    if (rank > 8)
        throw std::runtime_error("tensor read: implausible rank " +
                                 std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = get_u32(in);
        if (shape[i] == 0)
            throw std::runtime_error("tensor read: zero dimension in header");
        n *= shape[i];
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(in);
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_tensor_file: cannot open " + path);
    write_tensor(out, t);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_tensor_file: cannot open " + path);
    return read_tensor(in);
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
    if (!t.defined())
        throw std::invalid_argument("checkpoint: undefined tensor for " + name);
    if (contains(name))
        throw std::invalid_argument("checkpoint: duplicate entry " + name);
    entries_.emplace_back(name, t);
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

Tensor Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t.detach();
    throw std::runtime_error("checkpoint: no entry named " + name);
}

void Checkpoint::save(const std::string& path) const {
    // Serialize tensor records into a scratch buffer first so manifest
    // offsets (relative to file start) are known up front.
    std::ostringstream blob;
    std::vector<std::uint64_t> rel_offsets;
    rel_offsets.reserve(entries_.size());
    for (const auto& [name, t] : entries_) {
        rel_offsets.push_back(static_cast<std::uint64_t>(blob.tellp()));
        write_tensor(blob, t);
    }
    std::uint64_t header = sizeof(kMagic) + 4;
    for (const auto& [name, t] : entries_) header += 4 + name.size() + 8;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint save: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const std::string& name = entries_[i].first;
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u64(out, header + rel_offsets[i]);
    }
    const std::string payload = blob.str();
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("checkpoint save: write failed " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(kMagic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    const std::uint32_t count = get_u32(in);
    std::vector<std::pair<std::string, std::uint64_t>> manifest;
    manifest.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(in);
        if (len > 4096)
            throw std::runtime_error("checkpoint load: corrupt name length");
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) throw std::runtime_error("checkpoint load: truncated manifest");
        const std::uint64_t offset = get_u64(in);
        manifest.emplace_back(std::move(name), offset);
    }
    Checkpoint ck;
    for (const auto& [name, offset] : manifest) {
        in.clear();
        in.seekg(static_cast<std::streamoff>(offset));
        if (!in)
            throw std::runtime_error("checkpoint load: bad offset for " + name);
        ck.add(name, read_tensor(in));
    }
    return ck;
}

} // namespace pgnn
