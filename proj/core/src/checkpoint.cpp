#include "factlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace factlab {

namespace {

constexpr char kMagic[5] = {'F', 'L', 'A', 'B', '1'};

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_unsigned_v<T>);
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");

    const auto& cfg = model.config();
    nlohmann::json record = {
        {"n_layers", cfg.n_layers},   {"d_model", cfg.d_model},
        {"n_heads", cfg.n_heads},     {"d_ffn", cfg.d_ffn},
        {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
        {"seed", cfg.seed},
    };
    const std::string cfg_bytes = record.dump();

    os.write(kMagic, sizeof(kMagic));
    write_le<uint32_t>(os, static_cast<uint32_t>(cfg_bytes.size()));
    os.write(cfg_bytes.data(), static_cast<std::streamsize>(cfg_bytes.size()));

    const auto& entries = model.params().entries;
    write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    uint64_t offset = 0;
    for (const auto& e : entries) {
        write_le<uint16_t>(os, static_cast<uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_le<uint64_t>(os, offset);
        write_le<uint64_t>(os, static_cast<uint64_t>(e.tensor.numel()));
        offset += static_cast<uint64_t>(e.tensor.numel()) * sizeof(float);
    }
    for (const auto& e : entries) {
        static_assert(sizeof(float) == 4);
        for (float v : e.tensor.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            write_le<uint32_t>(os, bits);
        }
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

TransformerModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");

    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");

    const auto cfg_len = read_le<uint32_t>(is);
    std::string cfg_bytes(cfg_len, '\0');
    is.read(cfg_bytes.data(), cfg_len);
    if (!is) throw std::runtime_error("checkpoint: truncated config record");
    const auto record = nlohmann::json::parse(cfg_bytes);

    ModelConfig cfg;
    cfg.n_layers = record.at("n_layers").get<int64_t>();
    cfg.d_model = record.at("d_model").get<int64_t>();
    cfg.n_heads = record.at("n_heads").get<int64_t>();
    cfg.d_ffn = record.at("d_ffn").get<int64_t>();
    cfg.vocab_size = record.at("vocab_size").get<int64_t>();
    cfg.max_seq_len = record.at("max_seq_len").get<int64_t>();
    cfg.seed = record.at("seed").get<uint64_t>();
    cfg.validate();

    ParamStore store(cfg); // shapes come from the architecture; data is overwritten below

    const auto n_groups = read_le<uint32_t>(is);
    if (n_groups != store.entries.size())
        throw std::runtime_error("checkpoint: group count does not match architecture");
    struct Dir {
        std::string name;
        uint64_t offset, count;
    };
    std::vector<Dir> dir(n_groups);
    for (auto& d : dir) {
        const auto name_len = read_le<uint16_t>(is);
        d.name.resize(name_len);
        is.read(d.name.data(), name_len);
        d.offset = read_le<uint64_t>(is);
        d.count = read_le<uint64_t>(is);
    }
    if (!is) throw std::runtime_error("checkpoint: truncated directory");

    uint64_t expect_offset = 0;
    for (size_t i = 0; i < dir.size(); ++i) {
        auto& e = store.entries[i];
        if (dir[i].name != e.name || dir[i].count != static_cast<uint64_t>(e.tensor.numel()) ||
            dir[i].offset != expect_offset)
            throw std::runtime_error("checkpoint: directory entry '" + dir[i].name +
                                     "' does not match architecture layout");
        expect_offset += dir[i].count * sizeof(float);
        for (auto& v : e.tensor.data) {
            const uint32_t bits = read_le<uint32_t>(is);
            std::memcpy(&v, &bits, sizeof(v));
        }
    }
    return TransformerModel(cfg, std::move(store));
}

} // namespace factlab
