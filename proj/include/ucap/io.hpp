#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ucap {

// Little-endian binary helpers. The on-disk formats are defined as LE;
// this codebase targets LE platforms and memcpy's scalars directly.

template <typename T>
void write_scalar(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_scalar(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error(std::string("unexpected end of file reading ") + what);
    return value;
}

inline void write_bytes(std::ostream& out, const void* data, std::size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& in, void* data, std::size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in) throw std::runtime_error(std::string("unexpected end of file reading ") + what);
}

// Writes a file atomically: the payload goes to a sibling temp file which is
// renamed over the target only after a successful flush.
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::function<void(std::ostream&)>& writer,
                              bool binary = false) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        writer(out);
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace ucap
