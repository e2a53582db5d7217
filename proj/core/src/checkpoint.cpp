#include "hybridforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace hybridforge {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'Y', 'B', 'F'};
constexpr std::size_t kMaxRank = 8;

class Writer {
public:
    template <class U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf.insert(buf.end(), p, p + sizeof(U));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void str32(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> buf;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    template <class U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, b_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string str32(const char* what) { return str(get<std::uint32_t>(what), what); }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return b_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (n > remaining()) throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

std::uint64_t fnv_bytes(std::span<const std::uint8_t> b) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::uint8_t c : b) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + ".attn"; }

// Skeleton with the right parameter names and shapes for `spec`.
template <class T>
Model<T> skeleton(const ModelConfig& c, const HybridSpec& spec) {
    Model<T> m = model_init<T>(c, 0);
    for (std::size_t i = 0; i < spec.size(); ++i) {
        if (spec.kinds[i].is_linear()) {
            m.layers[i].attn = init_linear_block<T>(spec.kinds[i].variant, c, output_init_std(c), SeededRng(0),
                                                    layer_prefix(i));
        }
    }
    return m;
}

template <class T>
void fill_param(Parameter<T>& p, const Container& c) {
    const TensorRecord* r = c.find(p.name);
    if (!r) throw FormatError("missing tensor '" + p.name + "'", 0);
    if (r->shape != p.value.shape()) {
        throw FormatError("tensor '" + p.name + "' has shape " + shape_string(r->shape) + ", expected " +
                          shape_string(p.value.shape()), 0);
    }
    p.value = c.get<T>(p.name);
    p.zero_grad();
}

} // namespace

template <class T>
void Container::add(const std::string& name, const Tensor<T>& t) {
    TensorRecord r;
    r.name = name;
    r.dtype = dtype_of<T>();
    r.shape = t.shape();
    r.payload.resize(t.numel() * sizeof(T));
    if (!r.payload.empty()) std::memcpy(r.payload.data(), t.data(), r.payload.size());
    tensors.push_back(std::move(r));
}

const TensorRecord* Container::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

template <class T>
Tensor<T> Container::get(const std::string& name) const {
    const TensorRecord* r = find(name);
    if (!r) throw FormatError("missing tensor '" + name + "'", 0);
    if (r->dtype != dtype_of<T>()) throw FormatError("tensor '" + name + "' has an unexpected dtype", 0);
    Tensor<T> t(r->shape);
    if (!r->payload.empty()) std::memcpy(t.data(), r->payload.data(), r->payload.size());
    return t;
}

const std::string& Container::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("missing metadata key '" + key + "'", 0);
    return it->second;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint16_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        w.str32(t.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
        for (std::size_t d : t.shape) w.put<std::uint64_t>(d);
        w.bytes(t.payload.data(), t.payload.size());
    }
    w.put<std::uint8_t>(c.config ? 1 : 0);
    if (c.config) {
        const ModelConfig& m = *c.config;
        for (std::size_t v : {m.n_layers, m.d_model, m.n_heads, m.d_head, m.d_ff, m.vocab_size, m.max_seq}) {
            w.put<std::uint64_t>(v);
        }
        w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.size()));
        for (const auto& k : c.spec.kinds) {
            w.put<std::uint8_t>(static_cast<std::uint8_t>(k.code()));
            const std::string_view tag = k.is_linear() ? variant_tag(k.variant) : std::string_view{};
            w.put<std::uint8_t>(static_cast<std::uint8_t>(tag.size()));
            w.bytes(tag.data(), tag.size());
        }
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        w.str32(k);
        w.str32(v);
    }
    w.put<std::uint64_t>(fnv_bytes(w.buf));
    return std::move(w.buf);
}

Container decode_container(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("bad magic, not a HYBF file", 0);
    const std::size_t version_at = r.pos();
    const auto version = r.get<std::uint16_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported version " + std::to_string(version), version_at);
    }
    Container c;
    const auto n = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < n; ++i) {
        TensorRecord t;
        t.name = r.str32("tensor name");
        const std::size_t dtype_at = r.pos();
        const auto code = r.get<std::uint8_t>("dtype");
        if (code > static_cast<std::uint8_t>(DType::I64)) {
            throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
        }
        t.dtype = static_cast<DType>(code);
        const std::size_t rank_at = r.pos();
        const auto rank = r.get<std::uint8_t>("rank");
        if (rank > kMaxRank) throw FormatError("rank " + std::to_string(rank) + " too large", rank_at);
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const std::size_t dims_at = r.pos();
            const auto dim = r.get<std::uint64_t>("dims");
            if (dim != 0 && numel > r.remaining() / dim) throw FormatError("dimension exceeds file size", dims_at);
            t.shape.push_back(static_cast<std::size_t>(dim));
            numel *= static_cast<std::size_t>(dim);
        }
        auto payload = r.take(numel * dtype_size(t.dtype), "tensor payload");
        t.payload.assign(payload.begin(), payload.end());
        c.tensors.push_back(std::move(t));
    }
    const std::size_t flag_at = r.pos();
    const auto has_model = r.get<std::uint8_t>("footer flag");
    if (has_model > 1) throw FormatError("bad footer flag", flag_at);
    if (has_model) {
        ModelConfig m;
        for (std::size_t* f : {&m.n_layers, &m.d_model, &m.n_heads, &m.d_head, &m.d_ff, &m.vocab_size, &m.max_seq}) {
            *f = static_cast<std::size_t>(r.get<std::uint64_t>("model config"));
        }
        const auto layers = r.get<std::uint32_t>("layer count");
        for (std::uint32_t i = 0; i < layers; ++i) {
            const std::size_t kind_at = r.pos();
            const auto code = r.get<std::uint8_t>("attention kind");
            const std::string tag = r.str(r.get<std::uint8_t>("variant tag length"), "variant tag");
            if (code == 'F' && tag.empty()) {
                c.spec.kinds.push_back(AttentionKind::full());
            } else if (code == 'L') {
                try {
                    c.spec.kinds.push_back(AttentionKind::linear(parse_variant(tag)));
                } catch (const ConfigError&) {
                    throw FormatError("unknown variant tag '" + tag + "'", kind_at);
                }
            } else {
                throw FormatError("bad attention kind code", kind_at);
            }
        }
        c.config = m;
    }
    const auto n_meta = r.get<std::uint32_t>("metadata count");
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str32("metadata key");
        c.meta[std::move(k)] = r.str32("metadata value");
    }
    const std::size_t sum_at = r.pos();
    const auto stored = r.get<std::uint64_t>("checksum");
    if (stored != fnv_bytes(bytes.first(sum_at))) throw FormatError("checksum mismatch", sum_at);
    if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.pos());
    return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
    const auto bytes = encode_container(c);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Write-then-rename so an interrupted save never leaves a half file behind.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw InputError("cannot open " + tmp.string() + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw InputError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_container(bytes);
}

template <class T>
Container model_to_container(const Model<T>& model) {
    Container c;
    for (const Parameter<T>* p : model.parameters()) c.add(p->name, p->value);
    c.config = model.config;
    c.spec = model.spec();
    return c;
}

template <class T>
Model<T> model_from_container(const Container& c) {
    if (!c.config) throw FormatError("file holds no model footer", 0);
    const ModelConfig& cfg = *c.config;
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("stored model config is invalid: ") + e.what(), 0);
    }
    if (c.spec.size() != cfg.n_layers) throw FormatError("layer kinds do not match n_layers", 0);
    Model<T> m = skeleton<T>(cfg, c.spec);
    auto params = m.parameters();
    if (params.size() != c.tensors.size()) {
        throw FormatError("expected " + std::to_string(params.size()) + " tensors, file has " +
                          std::to_string(c.tensors.size()), 0);
    }
    for (Parameter<T>* p : params) fill_param(*p, c);
    return m;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    write_container(model_to_container(model), path);
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    return model_from_container<T>(read_container(path));
}

template <class T>
void save_linear_blocks(const LinearBlockSet<T>& blocks, const ModelConfig& config, const std::filesystem::path& path) {
    Container c;
    c.config = config;
    c.spec = HybridSpec::all_full(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (!blocks[i]) continue;
        c.spec.kinds[i] = AttentionKind::linear(blocks[i]->variant);
        for (const Parameter<T>* p : blocks[i]->parameters()) c.add(p->name, p->value);
    }
    c.meta["content"] = "linear_blocks";
    write_container(c, path);
}

template <class T>
LinearBlockSet<T> load_linear_blocks(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (!c.config || c.meta.count("content") == 0 || c.meta.at("content") != "linear_blocks") {
        throw FormatError(path.string() + " does not hold linear blocks", 0);
    }
    LinearBlockSet<T> out(c.spec.size());
    for (std::size_t i = 0; i < c.spec.size(); ++i) {
        if (!c.spec.kinds[i].is_linear()) continue;
        auto w = init_linear_block<T>(c.spec.kinds[i].variant, *c.config, output_init_std(*c.config), SeededRng(0),
                                      layer_prefix(i));
        for (Parameter<T>* p : w.parameters()) fill_param(*p, c);
        out[i] = std::move(w);
    }
    return out;
}

void add_split(Container& c, const std::string& name, const Split& split) {
    const std::size_t seq = split.empty() ? 0 : split.front().tokens.size();
    Tensor<std::int64_t> tokens({split.size(), seq});
    Tensor<std::int64_t> offsets({split.size() + 1});
    std::vector<std::int64_t> positions;
    for (std::size_t i = 0; i < split.size(); ++i) {
        const Example& e = split[i];
        if (e.tokens.size() != seq) throw InputError("split '" + name + "' mixes sequence lengths");
        for (std::size_t j = 0; j < seq; ++j) tokens.at(i, j) = e.tokens[j];
        offsets[i] = static_cast<std::int64_t>(positions.size());
        for (std::size_t p : e.answer_positions) positions.push_back(static_cast<std::int64_t>(p));
    }
    offsets[split.size()] = static_cast<std::int64_t>(positions.size());
    const std::size_t n_pos = positions.size();
    c.add("split." + name + ".tokens", tokens);
    c.add("split." + name + ".answer_offsets", offsets);
    c.add("split." + name + ".answer_positions", Tensor<std::int64_t>({n_pos}, std::move(positions)));
}

Split get_split(const Container& c, const std::string& name) {
    const auto tokens = c.get<std::int64_t>("split." + name + ".tokens");
    const auto offsets = c.get<std::int64_t>("split." + name + ".answer_offsets");
    const auto positions = c.get<std::int64_t>("split." + name + ".answer_positions");
    if (tokens.rank() != 2 || offsets.numel() != tokens.dim(0) + 1) {
        throw FormatError("split '" + name + "' tables disagree", 0);
    }
    const std::size_t seq = tokens.dim(1);
    Split out(tokens.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
        Example& e = out[i];
        for (std::size_t j = 0; j < seq; ++j) e.tokens.push_back(static_cast<std::int32_t>(tokens.at(i, j)));
        const auto lo = offsets[i], hi = offsets[i + 1];
        if (lo < 0 || hi < lo || static_cast<std::size_t>(hi) > positions.numel()) {
            throw FormatError("split '" + name + "' has bad answer offsets", 0);
        }
        for (auto k = lo; k < hi; ++k) {
            const auto p = positions[static_cast<std::size_t>(k)];
            if (p < 1 || static_cast<std::size_t>(p) >= seq) {
                throw FormatError("split '" + name + "' answer position out of range", 0);
            }
            e.answer_positions.push_back(static_cast<std::size_t>(p));
            e.answers.push_back(e.tokens[static_cast<std::size_t>(p)]);
        }
    }
    return out;
}

template void Container::add<float>(const std::string&, const Tensor<float>&);
template void Container::add<double>(const std::string&, const Tensor<double>&);
template void Container::add<std::int64_t>(const std::string&, const Tensor<std::int64_t>&);
template Tensor<float> Container::get<float>(const std::string&) const;
template Tensor<double> Container::get<double>(const std::string&) const;
template Tensor<std::int64_t> Container::get<std::int64_t>(const std::string&) const;

#define HF_INSTANTIATE(T)                                                                                          \
    template Container model_to_container<T>(const Model<T>&);                                                     \
    template Model<T> model_from_container<T>(const Container&);                                                   \
    template void save_checkpoint<T>(const Model<T>&, const std::filesystem::path&);                               \
    template Model<T> load_checkpoint<T>(const std::filesystem::path&);                                            \
    template void save_linear_blocks<T>(const LinearBlockSet<T>&, const ModelConfig&, const std::filesystem::path&); \
    template LinearBlockSet<T> load_linear_blocks<T>(const std::filesystem::path&);
HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge
