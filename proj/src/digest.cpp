#include "backchain/digest.hpp"

#include <fstream>
#include <vector>

namespace backchain {

std::string digest_bytes(const void* data, size_t n) {
    Fnv1a h;
    h.update(data, n);
    return h.hex();
}

std::string digest_string(const std::string& s) { return digest_bytes(s.data(), s.size()); }

std::string digest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for digest: " + path);
    Fnv1a h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<size_t>(in.gcount()));
    }
    return h.hex();
}

}  // namespace backchain
