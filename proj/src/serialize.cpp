#include "multiref/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace multiref {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'B', 'L', 'O', 'B', '0', '1'};

template <class T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw io_error("blob: truncated file");
    return v;
}

}  // namespace

const Tensor& Blob::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw io_error("blob: tensor not found: " + name);
}

bool Blob::contains(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void write_blob(const std::filesystem::path& path, const Blob& blob) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot create " + path.string());
    os.write(kMagic, sizeof(kMagic));
    const std::string manifest = blob.manifest.dump();
    write_pod<std::uint64_t>(os, manifest.size());
    os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    write_pod<std::uint64_t>(os, blob.tensors.size());
    for (const auto& [name, t] : blob.tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
        for (int d = 0; d < t.ndim(); ++d) write_pod<std::int64_t>(os, t.dim(d));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(real)));
    }
    if (!os) throw io_error("failed writing " + path.string());
}

Blob read_blob(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw io_error("not a multiref blob: " + path.string());

    Blob blob;
    const auto mlen = read_pod<std::uint64_t>(is);
    std::string manifest(mlen, '\0');
    is.read(manifest.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw io_error("blob: truncated manifest");
    blob.manifest = nlohmann::json::parse(manifest);

    const auto count = read_pod<std::uint64_t>(is);
    blob.tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto nlen = read_pod<std::uint32_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const auto ndim = read_pod<std::uint32_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_pod<std::int64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(real)));
        if (!is) throw io_error("blob: truncated tensor " + name);
        blob.tensors.emplace_back(std::move(name), std::move(t));
    }
    return blob;
}

void write_npy(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot create " + path.string());
    std::string shape;
    for (int d = 0; d < t.ndim(); ++d) shape += std::to_string(t.dim(d)) + ",";
    if (t.ndim() > 1) shape.pop_back();
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + shape + "), }";
    const size_t total = 10 + header.size() + 1;
    const size_t padded = (total + 63) / 64 * 64;
    header.append(padded - total, ' ');
    header.push_back('\n');
    os.write("\x93NUMPY\x01\x00", 8);
    const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
    os.write(reinterpret_cast<const char*>(&hlen), 2);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(real)));
    if (!os) throw io_error("failed writing " + path.string());
}

}  // namespace multiref
