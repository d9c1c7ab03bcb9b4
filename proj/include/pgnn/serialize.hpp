#pragma once

// Binary tensor serialization and named-tensor checkpoints.
//
// Tensor wire format: u32 rank, u32 dims[rank], then size doubles, all
// little-endian. Checkpoints start with the magic "PGNN1" followed by a
// manifest of (name, byte offset) entries pointing at tensor records.

#include "pgnn/tensor.hpp"

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace pgnn {

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

class Checkpoint {
public:
    // Entries keep insertion order; names must be unique.
    void add(const std::string& name, const Tensor& t);
    bool contains(const std::string& name) const;
    // Returns a detached tensor; missing names throw.
    Tensor get(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& entries() const {
        return entries_;
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

} // namespace pgnn
