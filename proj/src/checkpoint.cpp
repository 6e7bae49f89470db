#include "lorp/checkpoint.hpp"

#include "lorp/util.hpp"

#include <bit>
#include <cstring>

namespace lorp {

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

uint32_t get_u32(const std::string& in, size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated archive");
    uint32_t v = uint32_t(uint8_t(in[pos])) | (uint32_t(uint8_t(in[pos + 1])) << 8) |
                 (uint32_t(uint8_t(in[pos + 2])) << 16) | (uint32_t(uint8_t(in[pos + 3])) << 24);
    pos += 4;
    return v;
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<uint32_t>(f)); }

float get_f32(const std::string& in, size_t& pos) {
    return std::bit_cast<float>(get_u32(in, pos));
}

}  // namespace

std::string encode_matrix_archive(const NamedMatrices& entries) {
    std::string out = kCheckpointMagic;
    put_u32(out, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, m] : entries) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(m.rows()));
        put_u32(out, static_cast<uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                put_f32(out, static_cast<float>(m(r, c)));
    }
    return out;
}

NamedMatrices decode_matrix_archive(const std::string& bytes) {
    const std::string magic = kCheckpointMagic;
    if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0)
        throw std::runtime_error("checkpoint: bad magic, not a LORPCKPT1 archive");
    size_t pos = magic.size();
    uint32_t count = get_u32(bytes, pos);
    NamedMatrices out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = get_u32(bytes, pos);
        if (pos + name_len > bytes.size()) throw std::runtime_error("checkpoint: truncated name");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        uint32_t rows = get_u32(bytes, pos);
        uint32_t cols = get_u32(bytes, pos);
        Matrix m(rows, cols);
        for (uint32_t r = 0; r < rows; ++r)
            for (uint32_t c = 0; c < cols; ++c) m(r, c) = get_f32(bytes, pos);
        if (!out.emplace(std::move(name), std::move(m)).second)
            throw std::runtime_error("checkpoint: duplicate entry name");
    }
    return out;
}

void save_matrix_archive(const std::filesystem::path& path, const NamedMatrices& entries) {
    write_file(path, encode_matrix_archive(entries));
    std::string manifest;
    for (const auto& [name, m] : entries)
        manifest += name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    write_file(path.string() + ".manifest", manifest);
}

NamedMatrices load_matrix_archive(const std::filesystem::path& path) {
    return decode_matrix_archive(read_file(path));
}

}  // namespace lorp
