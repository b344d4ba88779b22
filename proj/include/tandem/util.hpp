#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tandem {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << std::forward<Args>(args));
    return oss.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw std::runtime_error(cat(std::forward<Args>(args)...));
}

template <typename... Args>
void check(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

// FNV-1a, used for parameter-group freeze audits and checkpoint checksums.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; i++) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
bool all_finite(const T* p, size_t n) {
    for (size_t i = 0; i < n; i++) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "cannot open ", path);
    std::ostringstream oss;
    oss << f.rdbuf();
    return oss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "cannot write ", path);
    f.write(content.data(), std::streamsize(content.size()));
    check(f.good(), "write failed for ", path);
}

}  // namespace tandem
