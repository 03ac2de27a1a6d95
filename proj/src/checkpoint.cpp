#include <cstring>
#include <fstream>

#include "bussam/model.hpp"

namespace bussam {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("checkpoint '" + path + "': truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_str(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& in, const std::string& path) {
    std::uint32_t len = read_u32(in, path);
    if (len > (1u << 20)) throw DataError("checkpoint '" + path + "': implausible string length");
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw DataError("checkpoint '" + path + "': truncated");
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore<float>& store) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    write_u32(out, kCheckpointVersion);

    TrainConfig tc;
    tc.model = cfg;
    auto kv = config_to_kv(tc);
    write_u32(out, static_cast<std::uint32_t>(kv.size()));
    for (const auto& [k, v] : kv) {
        write_str(out, k);
        write_str(out, v);
    }

    write_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, entry] : store) {
        write_str(out, name);
        const Shape& shape = entry.tensor.shape();
        write_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) write_u32(out, static_cast<std::uint32_t>(d));
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(entry.tensor.data().data()),
                  static_cast<std::streamsize>(entry.tensor.data().size() * 4));
        const char flag = entry.trainable ? 1 : 0;
        out.write(&flag, 1);
    }
    if (!out) throw DataError("write failed for checkpoint '" + path + "'");
}

BussamModel<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[sizeof(kCheckpointMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw DataError("checkpoint '" + path + "': bad magic");
    const std::uint32_t version = read_u32(in, path);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint '" + path + "': unsupported version " +
                        std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");

    std::map<std::string, std::string> kv;
    const std::uint32_t nkv = read_u32(in, path);
    for (std::uint32_t i = 0; i < nkv; ++i) {
        std::string k = read_str(in, path);
        kv[k] = read_str(in, path);
    }
    ModelConfig cfg = model_config_from_kv(kv);

    BussamModel<float> model = build_model<float>(cfg, /*seed=*/0);
    const std::uint32_t nparams = read_u32(in, path);
    if (nparams != model.store.size())
        throw DataError("checkpoint '" + path + "': parameter count " + std::to_string(nparams) +
                        " does not match model (" + std::to_string(model.store.size()) + ")");
    for (std::uint32_t i = 0; i < nparams; ++i) {
        const std::string name = read_str(in, path);
        if (!model.store.contains(name))
            throw DataError("checkpoint '" + path + "': unexpected parameter '" + name + "'");
        Tensor<float>& t = model.store.get(name);
        const std::uint32_t rank = read_u32(in, path);
        if (rank != static_cast<std::uint32_t>(t.rank()))
            throw DataError("checkpoint '" + path + "': rank mismatch for '" + name + "'");
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = read_u32(in, path);
            if (dim != static_cast<std::uint32_t>(t.dim(static_cast<int>(d))))
                throw DataError("checkpoint '" + path + "': shape mismatch for '" + name + "'");
        }
        in.read(reinterpret_cast<char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size() * 4));
        char flag;
        in.read(&flag, 1);
        if (!in) throw DataError("checkpoint '" + path + "': truncated");
        if ((flag != 0) != model.store.is_trainable(name))
            throw DataError("checkpoint '" + path + "': trainable flag mismatch for '" + name + "'");
    }
    return model;
}

}  // namespace bussam
