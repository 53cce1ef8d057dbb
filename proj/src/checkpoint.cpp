#include <cstring>
#include <fstream>
#include <set>

#include "starformer/run_config.hpp"
#include "starformer/trainer.hpp"

namespace starformer {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'R', 'F'};
constexpr std::uint32_t kFormatVersion = 1;

// Little-endian on-disk layout; this implementation targets little-endian
// hosts and writes native byte order.
void put_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::string& out, std::uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
public:
    Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    void raw(void* into, std::size_t n) {
        if (cursor_ + n > bytes_.size()) {
            throw FormatError("checkpoint " + path_ + ": truncated file");
        }
        std::memcpy(into, bytes_.data() + cursor_, n);
        cursor_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str(std::size_t n) {
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    bool exhausted() const { return cursor_ == bytes_.size(); }

private:
    std::string bytes_;
    std::string path_;
    std::size_t cursor_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                const std::vector<double>& values) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) put_u64(out, static_cast<std::uint64_t>(e));
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

} // namespace

std::uint64_t model_config_digest(const ModelConfig& cfg) {
    const ModelConfig r = cfg.resolved();
    // dropout is a training-time knob and does not change the weight layout,
    // so it stays out of the digest
    const std::string canon = "L=" + std::to_string(r.num_layers) +
                              "|F=" + std::to_string(r.model_dim) +
                              "|H=" + std::to_string(r.num_heads) +
                              "|ff=" + std::to_string(r.ff_dim) +
                              "|hh=" + std::to_string(r.head_hidden) +
                              "|C=" + std::to_string(r.num_classes) +
                              "|D=" + std::to_string(r.input_dim) +
                              "|N=" + std::to_string(r.max_len) + "|act=" + to_string(r.activation) +
                              "|bin=" + (r.binary_head ? "1" : "0");
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : canon) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

void save_checkpoint(const TrainerState& state, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof kMagic);
    put_u32(out, kFormatVersion);
    put_u64(out, model_config_digest(state.model));

    const std::string config = to_json(state.model).dump();
    put_u32(out, static_cast<std::uint32_t>(config.size()));
    out.append(config);

    std::uint32_t count = 0;
    state.params.for_each([&count](const std::string&, const Tensor&) { ++count; });
    const bool has_norm = !state.norm_mean.empty();
    put_u32(out, count + (has_norm ? 2 : 0));
    state.params.for_each([&out](const std::string& name, const Tensor& t) {
        put_tensor(out, name, t.shape(), t.values());
    });
    if (has_norm) {
        const Shape s{static_cast<std::int64_t>(state.norm_mean.size())};
        put_tensor(out, "norm.mean", s, state.norm_mean);
        put_tensor(out, "norm.std", s, state.norm_std);
    }

    // stage into a temporary so a failed write never leaves a partial file
    const std::string staging = path + ".tmp";
    {
        std::ofstream f(staging, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("checkpoint: cannot write " + staging);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f.good()) throw FormatError("checkpoint: write failed for " + staging);
    }
    if (std::rename(staging.c_str(), path.c_str()) != 0) {
        throw FormatError("checkpoint: cannot move " + staging + " to " + path);
    }
}

namespace {

TrainerState load_impl(const std::string& path, const ModelConfig* expect) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("checkpoint: cannot open " + path);
    Reader r(std::string(std::istreambuf_iterator<char>(f), {}), path);

    char magic[4];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw FormatError("checkpoint " + path + ": bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw FormatError("checkpoint " + path + ": unsupported format version " +
                          std::to_string(version));
    }
    const std::uint64_t digest = r.u64();
    const std::string config_json = r.str(r.u32());

    ModelConfig stored;
    try {
        stored = model_config_from_json(nlohmann::json::parse(config_json));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path + ": bad embedded config: " + e.what());
    }
    if (model_config_digest(stored) != digest) {
        throw FormatError("checkpoint " + path + ": config digest mismatch");
    }
    // with an expected config, the per-tensor comparison below turns a digest
    // mismatch into an error naming the first offending tensor
    const ModelConfig target = expect ? expect->resolved() : stored.resolved();
    TrainerState state = TrainerState::init(target, 0);

    std::uint32_t count = r.u32();
    std::vector<std::pair<std::string, Tensor>> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(static_cast<std::int64_t>(r.u64()));
        }
        std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
        r.raw(values.data(), values.size() * sizeof(double));
        loaded.emplace_back(name, Tensor(shape, std::move(values)));
    }
    if (!r.exhausted()) throw FormatError("checkpoint " + path + ": trailing bytes");

    std::set<std::string> consumed;
    auto find = [&loaded](const std::string& name) -> Tensor* {
        for (auto& [n, t] : loaded) {
            if (n == name) return &t;
        }
        return nullptr;
    };
    state.params.for_each([&](const std::string& name, Tensor& t) {
        Tensor* src = find(name);
        if (!src) {
            throw ConfigError("checkpoint " + path + ": tensor '" + name + "' is missing");
        }
        if (src->shape() != t.shape()) {
            throw ConfigError("checkpoint " + path + ": tensor '" + name + "' has shape " +
                              shape_str(src->shape()) + ", expected " + shape_str(t.shape()));
        }
        t = src->detach().set_requires_grad(true);
        consumed.insert(name);
    });
    for (const auto& [name, tensor] : loaded) {
        (void)tensor;
        if (!consumed.count(name) && name != "norm.mean" && name != "norm.std") {
            throw ConfigError("checkpoint " + path + ": unexpected tensor '" + name + "'");
        }
    }
    if (Tensor* mean = find("norm.mean")) {
        Tensor* dev = find("norm.std");
        if (!dev || dev->shape() != mean->shape()) {
            throw FormatError("checkpoint " + path + ": inconsistent normalization tensors");
        }
        state.norm_mean = mean->values();
        state.norm_std = dev->values();
    }
    return state;
}

} // namespace

TrainerState load_checkpoint(const std::string& path) { return load_impl(path, nullptr); }

TrainerState load_checkpoint(const std::string& path, const ModelConfig& expect) {
    return load_impl(path, &expect);
}

} // namespace starformer
