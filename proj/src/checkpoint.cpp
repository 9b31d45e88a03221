#include "chorus/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include "chorus/error.hpp"

namespace chorus::model {

namespace {

constexpr char kMagic[8] = {'C', 'H', 'O', 'R', 'U', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* data, std::size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T value) {
    write_bytes(out, &value, sizeof(T));
}

void read_bytes(std::istream& in, void* data, std::size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw Error::parse(std::string("checkpoint: truncated while reading ") + what);
    }
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
    T value{};
    read_bytes(in, &value, sizeof(T), what);
    return value;
}

std::string read_string(std::istream& in, const char* what) {
    const auto len = read_pod<std::uint32_t>(in, what);
    if (len > (1u << 20)) {
        throw Error::parse(std::string("checkpoint: implausible string length for ") + what);
    }
    std::string s(len, '\0');
    if (len > 0) {
        read_bytes(in, s.data(), len, what);
    }
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ToyModel& model,
                     const text::Tokenizer& tokenizer) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error::validation("checkpoint: cannot open " + path + " for writing");
    }

    write_bytes(out, kMagic, sizeof(kMagic));
    write_pod(out, kVersion);

    const std::string meta = nlohmann::json{{"config", model.config().to_json()},
                                            {"tokenizer", tokenizer.to_json()}}
                                 .dump();
    write_pod(out, static_cast<std::uint64_t>(meta.size()));
    write_bytes(out, meta.data(), meta.size());

    const auto params = model.parameters();
    write_pod(out, static_cast<std::uint64_t>(params.size()));
    for (const Tensor* t : params) {
        write_pod(out, static_cast<std::uint32_t>(t->name.size()));
        write_bytes(out, t->name.data(), t->name.size());
        write_pod(out, static_cast<std::uint32_t>(t->shape.size()));
        for (const std::size_t d : t->shape) {
            write_pod(out, static_cast<std::uint64_t>(d));
        }
        write_bytes(out, t->v.data(), t->v.size() * sizeof(double));
    }
    if (!out) {
        throw Error::validation("checkpoint: write to " + path + " failed");
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error::validation("checkpoint: cannot open " + path);
    }

    char magic[sizeof(kMagic)];
    read_bytes(in, magic, sizeof(magic), "magic");
    if (!std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
        throw Error::parse("checkpoint: bad magic in " + path);
    }
    const auto version = read_pod<std::uint32_t>(in, "version");
    if (version != kVersion) {
        throw Error::parse("checkpoint: unsupported version " + std::to_string(version));
    }

    const auto meta_len = read_pod<std::uint64_t>(in, "meta length");
    if (meta_len > (1ull << 24)) {
        throw Error::parse("checkpoint: implausible metadata size");
    }
    std::string meta(static_cast<std::size_t>(meta_len), '\0');
    read_bytes(in, meta.data(), meta.size(), "metadata");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw Error::parse(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
    }

    ToyLMConfig config = ToyLMConfig::from_json(j.at("config"));
    text::Tokenizer tokenizer = text::Tokenizer::from_json(j.at("tokenizer"));
    ToyModel model(config, 0);

    const auto count = read_pod<std::uint64_t>(in, "tensor count");
    auto params = model.parameters();
    if (count != params.size()) {
        throw Error::parse("checkpoint: expected " + std::to_string(params.size()) +
                           " tensors, file has " + std::to_string(count));
    }
    for (Tensor* t : params) {
        const std::string name = read_string(in, "tensor name");
        if (name != t->name) {
            throw Error::parse("checkpoint: tensor order mismatch, expected " + t->name +
                               " but found " + name);
        }
        const auto rank = read_pod<std::uint32_t>(in, "tensor rank");
        if (rank != t->shape.size()) {
            throw Error::parse("checkpoint: rank mismatch for " + name);
        }
        for (const std::size_t d : t->shape) {
            const auto got = read_pod<std::uint64_t>(in, "tensor dim");
            if (got != d) {
                throw Error::parse("checkpoint: shape mismatch for " + name);
            }
        }
        read_bytes(in, t->v.data(), t->v.size() * sizeof(double), "tensor data");
    }
    return LoadedCheckpoint{config, std::move(tokenizer), std::move(model)};
}

}  // namespace chorus::model
