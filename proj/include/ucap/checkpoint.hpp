#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ucap/autodiff.hpp"
#include "ucap/io.hpp"
#include "ucap/optim.hpp"

namespace ucap {

// Checkpoint format, bit-exact round trip:
//   magic "UCAP1"
//   u64 entry count
//   per entry: u64 name length, name bytes (UTF-8), u64 rank,
//              u64 dims[rank], f64 data (row-major, little-endian)
inline constexpr char kCheckpointMagic[5] = {'U', 'C', 'A', 'P', '1'};

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
    atomic_write_file(path, [&](std::ostream& out) {
        write_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic));
        write_scalar<std::uint64_t>(out, params.size());
        for (const auto& [name, tensor] : params) {
            write_scalar<std::uint64_t>(out, name.size());
            write_bytes(out, name.data(), name.size());
            write_scalar<std::uint64_t>(out, tensor.rank());
            for (std::size_t d : tensor.shape()) write_scalar<std::uint64_t>(out, d);
            write_bytes(out, tensor.data().data(), tensor.numel() * sizeof(double));
        }
    }, /*binary=*/true);
}

struct CheckpointEntry {
    std::string name;
    Tensor tensor;
};

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[sizeof(kCheckpointMagic)];
    read_bytes(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic): " + path.string());
    const auto count = read_scalar<std::uint64_t>(in, "entry count");
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = read_scalar<std::uint64_t>(in, "name length");
        std::string name(name_len, '\0');
        read_bytes(in, name.data(), name_len, "name");
        const auto rank = read_scalar<std::uint64_t>(in, "rank");
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = read_scalar<std::uint64_t>(in, "dim");
            numel *= d;
        }
        std::vector<double> data(numel);
        read_bytes(in, data.data(), numel * sizeof(double), ("data of " + name).c_str());
        entries.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
    }
    return entries;
}

// Restores values into an existing parameter set; every parameter must be
// present in the file with a matching shape.
inline void load_into(const std::filesystem::path& path, ParamSet& params) {
    auto entries = load_checkpoint(path);
    for (const auto& [name, target] : params) {
        const CheckpointEntry* found = nullptr;
        for (const auto& e : entries)
            if (e.name == name) { found = &e; break; }
        if (!found)
            throw std::runtime_error("checkpoint " + path.string() + " is missing parameter " + name);
        if (found->tensor.shape() != target.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": file has " +
                                     shape_str(found->tensor.shape()) + ", model expects " +
                                     shape_str(target.shape()));
        Tensor t = target;
        std::copy(found->tensor.data().begin(), found->tensor.data().end(),
                  t.mutable_data().begin());
    }
}

}  // namespace ucap
