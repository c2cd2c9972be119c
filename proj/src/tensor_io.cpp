#include "mc3d/tensor_io.hpp"

#include <cstring>
#include <fstream>

namespace mc3d {

namespace {

constexpr char kMagic[4] = {'M', 'C', '3', 'D'};
constexpr uint8_t kVersion = 1;
// extents above this are treated as corruption rather than data
constexpr uint64_t kMaxExtent = uint64_t(1) << 32;

void write_u64_le(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    uint8_t head[4] = {kVersion, uint8_t(t.dtype()), uint8_t(t.ndim()), 0};
    os.write(reinterpret_cast<const char*>(head), 4);
    for (int64_t e : t.shape()) write_u64_le(os, uint64_t(e));
    // payload is stored in host order; the format is little-endian and so are
    // all supported targets
    os.write(reinterpret_cast<const char*>(t.raw()), std::streamsize(t.nbytes()));
    if (!os) throw FormatError("tensor write failed");
}

Tensor read_tensor(std::istream& is, const std::string& name) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic in tensor container: " + name);
    uint8_t head[4];
    is.read(reinterpret_cast<char*>(head), 4);
    if (!is) throw FormatError("truncated tensor header: " + name);
    if (head[0] != kVersion)
        throw FormatError("unsupported tensor container version " + std::to_string(head[0]) +
                          ": " + name);
    if (head[1] > 2) throw FormatError("unknown dtype tag in tensor container: " + name);
    Dtype dt = Dtype(head[1]);
    int ndim = head[2];
    if (ndim < 1) throw FormatError("tensor container with zero dimensions: " + name);

    std::vector<int64_t> shape(static_cast<std::size_t>(ndim));
    uint64_t count = 1;
    for (int i = 0; i < ndim; ++i) {
        uint64_t e = read_u64_le(is);
        if (!is) throw FormatError("truncated tensor header: " + name);
        if (e == 0 || e > kMaxExtent || count > kMaxExtent / e)
            throw FormatError("dimension overflow in tensor container: " + name);
        count *= e;
        shape[size_t(i)] = int64_t(e);
    }

    Tensor t(shape, dt);
    is.read(reinterpret_cast<char*>(t.raw()), std::streamsize(t.nbytes()));
    if (std::size_t(is.gcount()) != t.nbytes())
        throw FormatError("truncated tensor payload: " + name);
    return t;
}

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_tensor(os, t);
    if (!os) throw FormatError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    return read_tensor(is, path);
}

}  // namespace mc3d
