#include "rotaprune/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace rotaprune {

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'N', 'R', 'T'};

template <typename T>
void put_le(std::ostream& out, T v) {
    std::array<char, sizeof(T)> b;
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b.data(), b.size());
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
    std::array<unsigned char, sizeof(T)> b;
    if (!in.read(reinterpret_cast<char*>(b.data()), b.size())) throw IoError(path + ": truncated header");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
}

std::uint64_t bits_of(double x) {
    std::uint64_t u;
    std::memcpy(&u, &x, sizeof u);
    return u;
}

double double_of(std::uint64_t u) {
    double x;
    std::memcpy(&x, &u, sizeof x);
    return x;
}

Matrix vector_tensor(const std::vector<double>& v) { return Matrix::row_vector(v); }

std::vector<double> tensor_vector(const Matrix& m) { return m.storage(); }

std::string layer_key(std::size_t i, const char* what) { return "layers." + std::to_string(i) + "." + what; }

}  // namespace

const Matrix& Checkpoint::tensor(const std::string& name) const {
    for (const NamedTensor& t : tensors)
        if (t.name == name) return t.value;
    throw IoError("checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const NamedTensor& t : tensors)
        if (t.name == name) return true;
    return false;
}

void write_checkpoint(const std::filesystem::path& path, nlohmann::json meta, const std::vector<NamedTensor>& tensors) {
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const NamedTensor& t : tensors) {
        dir.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", offset}});
        offset += 8 * t.value.size();
    }
    meta["tensors"] = std::move(dir);
    const std::string text = meta.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const NamedTensor& t : tensors)
        for (double x : t.value.data()) put_le<std::uint64_t>(out, bits_of(x));
    if (!out) throw IoError(path.string() + ": write failed");
}

namespace {

void read_payload(std::istream& in, Checkpoint& ck, const std::string& p) {
    std::uint64_t expected = 0;
    for (const auto& entry : ck.meta.at("tensors")) {
        const std::size_t rows = entry.at("shape").at(0), cols = entry.at("shape").at(1);
        if (entry.at("offset").get<std::uint64_t>() != expected) throw IoError(p + ": tensor directory out of order");
        std::vector<double> data(rows * cols);
        for (double& x : data) {
            std::array<unsigned char, 8> b;
            if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw IoError(p + ": truncated payload");
            std::uint64_t u = 0;
            for (std::size_t i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
            x = double_of(u);
        }
        expected += 8 * data.size();
        ck.tensors.push_back({entry.at("name").get<std::string>(), Matrix(rows, cols, std::move(data))});
    }
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const std::string p = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(p + ": cannot open for reading");
    std::array<char, 4> magic;
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw IoError(p + ": not a checkpoint (bad magic)");
    const auto version = get_le<std::uint32_t>(in, p);
    if (version != kCheckpointVersion) throw IoError(p + ": unsupported checkpoint version " + std::to_string(version));
    const auto len = get_le<std::uint64_t>(in, p);
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(p + ": truncated metadata");

    Checkpoint ck;
    try {
        ck.meta = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(p + ": corrupt metadata: " + e.what());
    }
    try {
        read_payload(in, ck, p);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(p + ": malformed tensor directory: " + e.what());
    }
    return ck;
}


nlohmann::json spec_to_json(const ModelSpec& s) {
    return {{"hidden_dim", s.hidden_dim}, {"n_layers", s.n_layers},   {"n_heads", s.n_heads},
            {"head_dim", s.head_dim},     {"ffn_dim", s.ffn_dim},     {"vocab_size", s.vocab_size},
            {"rope", s.rope},             {"rope_base", s.rope_base}, {"norm_eps", s.norm_eps}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.hidden_dim = j.at("hidden_dim");
    s.n_layers = j.at("n_layers");
    s.n_heads = j.at("n_heads");
    s.head_dim = j.at("head_dim");
    s.ffn_dim = j.at("ffn_dim");
    s.vocab_size = j.at("vocab_size");
    s.rope = j.at("rope");
    s.rope_base = j.at("rope_base");
    s.norm_eps = j.at("norm_eps");
    s.validate();
    return s;
}

namespace {

std::vector<NamedTensor> model_tensors(const Model& m) {
    std::vector<NamedTensor> t;
    t.push_back({"embedding", m.embedding});
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerWeights& l = m.layers[i];
        for (Linear k : kAllLinears) t.push_back({layer_key(i, linear_name(k).data()), l.weight(k)});
        if (l.attn_norm) t.push_back({layer_key(i, "attn_norm"), vector_tensor(*l.attn_norm)});
        if (l.ffn_norm) t.push_back({layer_key(i, "ffn_norm"), vector_tensor(*l.ffn_norm)});
        if (i < m.entry.size() && !m.entry[i].empty()) t.push_back({layer_key(i, "entry"), m.entry[i]});
        if (i < m.exit.size() && !m.exit[i].empty()) t.push_back({layer_key(i, "exit"), m.exit[i]});
    }
    if (m.final_norm) t.push_back({"final_norm", vector_tensor(*m.final_norm)});
    t.push_back({"lm_head", m.lm_head});
    return t;
}

void write_model(const std::filesystem::path& path, const Model& m, const std::string& rotation,
                 const std::vector<Matrix>& r1, const std::vector<Matrix>& r2) {
    auto tensors = model_tensors(m);
    for (std::size_t i = 0; i < r1.size(); ++i) tensors.push_back({layer_key(i, "r1"), r1[i]});
    for (std::size_t i = 0; i < r2.size(); ++i) tensors.push_back({layer_key(i, "r2"), r2[i]});
    nlohmann::json meta = {{"kind", "model"}, {"spec", spec_to_json(m.spec)}, {"fused", m.fused()}, {"rotation", rotation}};
    write_checkpoint(path, std::move(meta), tensors);
}

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model) { write_model(path, model, "none", {}, {}); }

void save_rotated_model(const std::filesystem::path& path, const RotatedModel& r) {
    write_model(path, r.model, r.mode == RotationMode::Merged ? "merged" : "explicit", r.r1, r.r2);
}

StoredModel load_model(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "model") throw IoError(path.string() + ": not a model checkpoint");
    StoredModel s;
    Model& m = s.model;
    m.spec = spec_from_json(ck.meta.at("spec"));
    m.embedding = ck.tensor("embedding");
    const std::size_t n = m.spec.n_layers;
    m.entry.assign(n, Matrix());
    m.exit.assign(n, Matrix());
    for (std::size_t i = 0; i < n; ++i) {
        LayerWeights l;
        for (Linear k : kAllLinears) l.weight(k) = ck.tensor(layer_key(i, linear_name(k).data()));
        if (ck.has(layer_key(i, "attn_norm"))) l.attn_norm = tensor_vector(ck.tensor(layer_key(i, "attn_norm")));
        if (ck.has(layer_key(i, "ffn_norm"))) l.ffn_norm = tensor_vector(ck.tensor(layer_key(i, "ffn_norm")));
        if (ck.has(layer_key(i, "entry"))) m.entry[i] = ck.tensor(layer_key(i, "entry"));
        if (ck.has(layer_key(i, "exit"))) m.exit[i] = ck.tensor(layer_key(i, "exit"));
        if (ck.has(layer_key(i, "r1"))) s.r1.push_back(ck.tensor(layer_key(i, "r1")));
        if (ck.has(layer_key(i, "r2"))) s.r2.push_back(ck.tensor(layer_key(i, "r2")));
        m.layers.push_back(std::move(l));
    }
    if (ck.has("final_norm")) m.final_norm = tensor_vector(ck.tensor("final_norm"));
    m.lm_head = ck.tensor("lm_head");
    s.rotation = ck.meta.value("rotation", "none");
    return s;
}

RotatedModel to_rotated(const StoredModel& stored) {
    if (stored.rotation == "none") throw StateError("checkpoint holds an unrotated model");
    return {stored.model, stored.r1, stored.r2,
            stored.rotation == "merged" ? RotationMode::Merged : RotationMode::Explicit};
}

std::shared_ptr<const CalibStats> LayerStats::for_linear(Linear l) const {
    switch (hook_site(l)) {
        case HookSite::AttnIn: return attn_in;
        case HookSite::AttnOut: return attn_out;
        case HookSite::FfnIn: return ffn_in;
        case HookSite::FfnMid: return ffn_mid;
    }
    return attn_in;
}

namespace {

constexpr std::array<HookSite, 4> kSites = {HookSite::AttnIn, HookSite::AttnOut, HookSite::FfnIn, HookSite::FfnMid};

template <typename Stats>
auto& site_slot(Stats& s, HookSite site) {
    switch (site) {
        case HookSite::AttnIn: return s.attn_in;
        case HookSite::AttnOut: return s.attn_out;
        case HookSite::FfnIn: return s.ffn_in;
        case HookSite::FfnMid: return s.ffn_mid;
    }
    return s.attn_in;
}

}  // namespace

void save_stats(const std::filesystem::path& path, const std::vector<LayerStats>& stats) {
    std::vector<NamedTensor> tensors;
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < stats.size(); ++i) {
        nlohmann::json row = nlohmann::json::object();
        for (HookSite site : kSites) {
            const auto& s = site_slot(stats[i], site);
            if (!s) throw InvalidArgument("save_stats: layer " + std::to_string(i) + " is missing " + hook_site_name(site));
            tensors.push_back({layer_key(i, hook_site_name(site)), s->h});
            row[hook_site_name(site)] = s->samples;
        }
        samples.push_back(std::move(row));
    }
    write_checkpoint(path, {{"kind", "stats"}, {"layers", stats.size()}, {"samples", samples}}, tensors);
}

std::vector<LayerStats> load_stats(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "stats") throw IoError(path.string() + ": not a statistics checkpoint");
    const std::size_t n = ck.meta.at("layers");
    std::vector<LayerStats> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (HookSite site : kSites) {
            auto s = std::make_shared<CalibStats>();
            s->h = ck.tensor(layer_key(i, hook_site_name(site)));
            s->samples = ck.meta.at("samples").at(i).at(hook_site_name(site));
            s->seal();
            site_slot(out[i], site) = std::move(s);
        }
    }
    return out;
}

void save_rotations(const std::filesystem::path& path, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2,
                    const nlohmann::json& extra) {
    if (r1.size() != r2.size()) throw ShapeError("save_rotations: r1 and r2 lists differ in length");
    std::vector<NamedTensor> tensors;
    for (std::size_t i = 0; i < r1.size(); ++i) {
        tensors.push_back({layer_key(i, "r1"), r1[i]});
        tensors.push_back({layer_key(i, "r2"), r2[i]});
    }
    nlohmann::json meta = extra;
    meta["kind"] = "rotations";
    meta["layers"] = r1.size();
    write_checkpoint(path, std::move(meta), tensors);
}

Checkpoint load_rotations(const std::filesystem::path& path, std::vector<Matrix>& r1, std::vector<Matrix>& r2) {
    Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "rotations") throw IoError(path.string() + ": not a rotations checkpoint");
    const std::size_t n = ck.meta.at("layers");
    r1.clear();
    r2.clear();
    for (std::size_t i = 0; i < n; ++i) {
        r1.push_back(ck.tensor(layer_key(i, "r1")));
        r2.push_back(ck.tensor(layer_key(i, "r2")));
    }
    return ck;
}

}  // namespace rotaprune
