#include "pmae/checkpoint.hpp"

#include <limits>

#include "pmae/binary_io.hpp"

namespace pmae {

namespace {
constexpr uint32_t kVersion = 1;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    BinWriter w(path);
    w.magic("PMAE");
    w.u32(kVersion);
    if (tensors.size() > std::numeric_limits<uint32_t>::max()) {
        throw IoError("too many tensors for checkpoint: " + path);
    }
    w.u32(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > std::numeric_limits<uint16_t>::max()) {
            throw IoError("tensor name too long: " + name);
        }
        w.u16(static_cast<uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        if (t.rank() > 255) throw IoError("tensor rank too large: " + name);
        w.u8(static_cast<uint8_t>(t.rank()));
        for (size_t e : t.shape()) w.u64(e);
        w.u8(static_cast<uint8_t>(t.dtype()));
        if (t.dtype() == DType::F32) {
            for (double v : t.data()) w.f32(static_cast<float>(v));
        } else {
            for (double v : t.data()) w.f64(v);
        }
    }
    w.close();
}

NamedTensors load_checkpoint(const std::string& path) {
    BinReader r(path);
    r.expect_magic("PMAE");
    const uint32_t version = r.u32();
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path);
    }
    const uint32_t count = r.u32();
    NamedTensors out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        if (name_len) r.bytes(name.data(), name_len);
        const uint8_t rank = r.u8();
        Shape shape(rank);
        for (uint8_t d = 0; d < rank; ++d) shape[d] = r.u64();
        const uint8_t tag = r.u8();
        if (tag > 1) throw IoError("unknown dtype tag in " + path);
        const DType dt = static_cast<DType>(tag);
        std::vector<double> data(shape_numel(shape));
        if (dt == DType::F32) {
            for (double& v : data) v = static_cast<double>(r.f32());
        } else {
            for (double& v : data) v = r.f64();
        }
        Tensor t = Tensor::from_data(std::move(shape), std::move(data));
        t.set_dtype(dt);
        out.emplace_back(std::move(name), std::move(t));
    }
    if (!r.at_eof()) throw IoError("trailing bytes in checkpoint: " + path);
    return out;
}

const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw IoError("tensor not found in checkpoint: " + name);
}

} // namespace pmae
