// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

constexpr char kMagic[4] = {'C', 'F', 'C', 'K'};

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}

    template <typename T>
    T get(const char* what) {
        T v;
        bytes(&v, sizeof(T), what);
        return v;
    }
    void bytes(void* dst, std::size_t n, const char* what) {
        if (buf.size() - pos < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
    std::size_t remaining() const { return buf.size() - pos; }

private:
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
};

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(ckpt.version);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name);
        if (t.dims.size() > 0xFF) throw FormatError("too many dims for " + t.name);
        std::size_t n = 1;
        for (auto d : t.dims) n *= d;
        if (n != t.values.size()) throw FormatError("dims do not match payload for " + t.name);
        w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) w.put<std::uint32_t>(d);
        w.bytes(t.values.data(), t.values.size() * sizeof(float));
    }
    const std::string meta = ckpt.meta.dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
    w.bytes(meta.data(), meta.size());
    return std::move(w.out);
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
    Checkpoint ckpt;
    ckpt.version = r.get<std::uint32_t>("version");
    if (ckpt.version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(ckpt.version));
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        t.name.resize(r.get<std::uint16_t>("name length"));
        r.bytes(t.name.data(), t.name.size(), "name");
        t.dims.resize(r.get<std::uint8_t>("ndim"));
        std::size_t n = 1;
        for (auto& d : t.dims) {
            d = r.get<std::uint32_t>("dims");
            n *= d;
        }
        if (n > r.remaining() / sizeof(float)) throw FormatError("checkpoint truncated in payload of " + t.name);
        t.values.resize(n);
        r.bytes(t.values.data(), n * sizeof(float), "payload");
        ckpt.tensors.push_back(std::move(t));
    }
    std::string meta(r.get<std::uint32_t>("meta length"), '\0');
    r.bytes(meta.data(), meta.size(), "meta");
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint meta");
    try {
        ckpt.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint meta is not valid JSON: ") + e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize(ckpt);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {{"enc_channels", cfg.backbone.enc_channels},
            {"grdb_blocks", cfg.backbone.grdb_blocks},
            {"decoder_schedule", cfg.backbone.decoder_schedule},
            {"seed", cfg.backbone.seed},
            {"n_queries", cfg.n_queries},
            {"heads", cfg.heads},
            {"embed_dim", cfg.embed_dim},
            {"ablation", to_string(cfg.ablation)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.backbone.enc_channels = j.at("enc_channels").get<std::size_t>();
        c.backbone.grdb_blocks = j.at("grdb_blocks").get<std::size_t>();
        c.backbone.decoder_schedule = j.at("decoder_schedule").get<std::vector<std::size_t>>();
        c.backbone.seed = j.at("seed").get<std::uint64_t>();
        c.n_queries = j.at("n_queries").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.ablation = parse_ablation(j.at("ablation").get<std::string>());
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config in checkpoint: ") + e.what());
    }
}

Checkpoint make_checkpoint(const CtrlFuseModel& model, const nlohmann::json& extra) {
    Checkpoint ckpt;
    for (const auto& e : model.params().entries()) {
        if (!e.trainable) continue;
        CheckpointTensor t;
        t.name = e.name;
        for (auto d : e.tensor.shape()) t.dims.push_back(static_cast<std::uint32_t>(d));
        t.values.reserve(e.tensor.numel());
        for (double v : e.tensor.data()) t.values.push_back(static_cast<float>(v));
        ckpt.tensors.push_back(std::move(t));
    }
    ckpt.meta = extra.is_object() ? extra : nlohmann::json::object();
    ckpt.meta["model"] = to_json(model.config());
    return ckpt;
}

std::unique_ptr<CtrlFuseModel> restore_model(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("model")) throw FormatError("checkpoint has no model config");
    auto model = std::make_unique<CtrlFuseModel>(model_config_from_json(ckpt.meta["model"]));
    std::size_t expected = 0;
    for (const auto& e : model->params().entries()) {
        if (!e.trainable) continue;
        ++expected;
        const CheckpointTensor* t = ckpt.find(e.name);
        if (t == nullptr) throw FormatError("checkpoint is missing tensor " + e.name);
        const auto& shape = e.tensor.shape();
        if (t->dims.size() != shape.size() || !std::equal(shape.begin(), shape.end(), t->dims.begin()))
            throw FormatError("shape mismatch for tensor " + e.name);
    }
    if (expected != ckpt.tensors.size()) throw FormatError("checkpoint holds tensors the model does not have");
    for (const auto& e : model->params().entries()) {
        if (!e.trainable) continue;
        const CheckpointTensor* t = ckpt.find(e.name);
        Tensor w = e.tensor;
        auto dst = w.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(t->values[i]);
    }
    return model;
}

}  // namespace ctrlfuse
