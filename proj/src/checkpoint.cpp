#include "safectrl/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace safectrl {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'T', 'L'};
constexpr int kMaxRank = 8;

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(buf, v);
}

struct Reader {
    std::string bytes;
    size_t pos = 0;
    std::string path;

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw IoError(path + ": truncated checkpoint");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(bytes[pos]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kCheckpointVersion);
    put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw ContractError("save_checkpoint: name too long: " + name);
        if (t.rank() > kMaxRank) throw ContractError("save_checkpoint: rank too high: " + name);
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        buf.push_back(static_cast<char>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put_u32(buf, static_cast<std::uint32_t>(t.dim(i)));
        for (float v : t.data()) put_f32(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError(path + ": write failed");
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open");
    Reader r;
    r.path = path;
    r.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

    if (r.str(4) != std::string(kMagic, 4)) throw IoError(path + ": bad magic, not a checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = r.u32();

    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u16());
        const int rank = r.u8();
        if (rank > kMaxRank) throw IoError(path + ": implausible tensor rank for " + name);
        Shape shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32();
            if (dim == 0 || dim > (1u << 24)) throw IoError(path + ": implausible dim for " + name);
            shape[static_cast<size_t>(d)] = static_cast<int>(dim);
        }
        const int n = shape_numel(shape);
        std::vector<float> data(static_cast<size_t>(n));
        for (float& v : data) v = r.f32();
        out.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    if (r.pos != r.bytes.size()) throw IoError(path + ": trailing bytes after last tensor");
    return out;
}

const Tensor& checkpoint_get(const NamedTensors& tensors, const std::string& name) {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw IoError("checkpoint is missing tensor '" + name + "'");
}

}  // namespace safectrl
