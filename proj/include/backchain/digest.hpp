#pragma once

#include <cstdint>
#include <string>

#include "backchain/errors.hpp"

namespace backchain {

// FNV-1a 64-bit; content hashes for manifests and determinism checks.
class Fnv1a {
public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    uint64_t value() const { return hash_; }

    std::string hex() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        uint64_t h = hash_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<size_t>(i)] = digits[h & 0xf];
            h >>= 4;
        }
        return out;
    }

private:
    uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string digest_bytes(const void* data, size_t n);
std::string digest_string(const std::string& s);
std::string digest_file(const std::string& path);  // throws IoError

}  // namespace backchain
