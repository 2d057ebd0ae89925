#include "rotaprune/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace rotaprune {

namespace {

struct BadValue {
    std::string why;
};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_uint(const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected a non-negative integer"};
    return out;
}

std::size_t to_count(const std::string& v) {
    const auto n = to_uint(v);
    if (n == 0) throw BadValue{"must be positive"};
    return static_cast<std::size_t>(n);
}

double to_real(const std::string& v) {
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(v, &used);
    } catch (const std::logic_error&) {
        throw BadValue{"expected a number"};
    }
    if (used != v.size() || !std::isfinite(d)) throw BadValue{"expected a finite number"};
    return d;
}

bool to_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw BadValue{"expected true or false"};
}

std::string one_of(const std::string& v, std::initializer_list<const char*> options) {
    for (const char* o : options)
        if (v == o) return v;
    std::string all;
    for (const char* o : options) all += (all.empty() ? "" : " | ") + std::string(o);
    throw BadValue{"expected " + all};
}

template <class F>
auto wrap(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const InvalidArgument& e) {
        throw BadValue{e.what()};
    }
}

struct Key {
    const char* name;
    std::function<void(PipelineConfig&, const std::string&, const std::filesystem::path&)> set;
    std::function<nlohmann::json(const PipelineConfig&)> get;
};

std::filesystem::path resolve(const std::string& v, const std::filesystem::path& base) {
    std::filesystem::path p(v);
    return p.is_relative() && !base.empty() && !v.empty() ? base / p : p;
}

const std::vector<Key>& schema() {
    using C = PipelineConfig;
    using P = std::filesystem::path;
    static const std::vector<Key> keys = {
        {"model.path", [](C& c, const std::string& v, const P& b) { c.model_path = resolve(v, b); },
         [](const C& c) { return nlohmann::json(c.model_path.string()); }},
        {"model.seed", [](C& c, const std::string& v, const P&) { c.model_seed = to_uint(v); },
         [](const C& c) { return nlohmann::json(c.model_seed); }},
        {"model.hidden_dim", [](C& c, const std::string& v, const P&) { c.model.hidden_dim = to_count(v); },
         [](const C& c) { return nlohmann::json(c.model.hidden_dim); }},
        {"model.n_layers", [](C& c, const std::string& v, const P&) { c.model.n_layers = to_count(v); },
         [](const C& c) { return nlohmann::json(c.model.n_layers); }},
        {"model.n_heads", [](C& c, const std::string& v, const P&) { c.model.n_heads = to_count(v); },
         [](const C& c) { return nlohmann::json(c.model.n_heads); }},
        {"model.ffn_dim", [](C& c, const std::string& v, const P&) { c.model.ffn_dim = to_count(v); },
         [](const C& c) { return nlohmann::json(c.model.ffn_dim); }},
        {"model.vocab_size", [](C& c, const std::string& v, const P&) { c.model.vocab_size = to_count(v); },
         [](const C& c) { return nlohmann::json(c.model.vocab_size); }},
        {"model.rope", [](C& c, const std::string& v, const P&) { c.model.rope = to_bool(v); },
         [](const C& c) { return nlohmann::json(c.model.rope); }},
        {"model.rope_base", [](C& c, const std::string& v, const P&) { c.model.rope_base = to_real(v); },
         [](const C& c) { return nlohmann::json(c.model.rope_base); }},
        {"model.norm_eps", [](C& c, const std::string& v, const P&) { c.model.norm_eps = to_real(v); },
         [](const C& c) { return nlohmann::json(c.model.norm_eps); }},

        {"calib.source",
         [](C& c, const std::string& v, const P&) { c.calib_source = one_of(v, {"synthetic", "text-file"}); },
         [](const C& c) { return nlohmann::json(c.calib_source); }},
        {"calib.file", [](C& c, const std::string& v, const P& b) { c.calib_file = resolve(v, b); },
         [](const C& c) { return nlohmann::json(c.calib_file.string()); }},
        {"calib.samples", [](C& c, const std::string& v, const P&) { c.calib_samples = to_count(v); },
         [](const C& c) { return nlohmann::json(c.calib_samples); }},
        {"calib.seq_len", [](C& c, const std::string& v, const P&) { c.calib_seq_len = to_count(v); },
         [](const C& c) { return nlohmann::json(c.calib_seq_len); }},
        {"calib.seed", [](C& c, const std::string& v, const P&) { c.calib_seed = to_uint(v); },
         [](const C& c) { return nlohmann::json(c.calib_seed); }},

        {"rotator.enabled", [](C& c, const std::string& v, const P&) { c.rotator_enabled = to_bool(v); },
         [](const C& c) { return nlohmann::json(c.rotator_enabled); }},
        {"rotator.steps", [](C& c, const std::string& v, const P&) { c.rotator_steps = to_uint(v); },
         [](const C& c) { return nlohmann::json(c.rotator_steps); }},
        {"rotator.lr",
         [](C& c, const std::string& v, const P&) {
             c.rotator_lr = to_real(v);
             if (c.rotator_lr <= 0) throw BadValue{"must be positive"};
         },
         [](const C& c) { return nlohmann::json(c.rotator_lr); }},
        {"rotator.block_count", [](C& c, const std::string& v, const P&) { c.rotator_block_count = to_count(v); },
         [](const C& c) { return nlohmann::json(c.rotator_block_count); }},
        {"rotator.seed", [](C& c, const std::string& v, const P&) { c.rotator_seed = to_uint(v); },
         [](const C& c) { return nlohmann::json(c.rotator_seed); }},
        {"rotator.metric",
         [](C& c, const std::string& v, const P&) {
             if (v == "auto") {
                 c.rotator_metric.reset();
             } else {
                 c.rotator_metric = wrap([&] { return parse_metric(v); });
             }
         },
         [](const C& c) {
             return nlohmann::json(c.rotator_metric ? std::string(metric_name(*c.rotator_metric)) : "auto");
         }},

        {"prune.method",
         [](C& c, const std::string& v, const P&) { c.prune_method = one_of(v, {"magnitude", "wanda", "sparsegpt"}); },
         [](const C& c) { return nlohmann::json(c.prune_method); }},
        {"prune.pattern",
         [](C& c, const std::string& v, const P&) { c.prune_pattern = wrap([&] { return SparsityPattern::parse(v); }); },
         [](const C& c) { return nlohmann::json(c.prune_pattern.to_string()); }},
        {"prune.group",
         [](C& c, const std::string& v, const P&) { c.prune_group = wrap([&] { return parse_compare_group(v); }); },
         [](const C& c) { return nlohmann::json(std::string(compare_group_name(c.prune_group))); }},
        {"prune.damp",
         [](C& c, const std::string& v, const P&) {
             c.prune_damp = to_real(v);
             if (c.prune_damp < 0) throw BadValue{"must be >= 0"};
         },
         [](const C& c) { return nlohmann::json(c.prune_damp); }},
        {"prune.block_size", [](C& c, const std::string& v, const P&) { c.prune_block_size = to_count(v); },
         [](const C& c) { return nlohmann::json(c.prune_block_size); }},

        {"eval.source",
         [](C& c, const std::string& v, const P&) { c.eval_source = one_of(v, {"synthetic", "text-file"}); },
         [](const C& c) { return nlohmann::json(c.eval_source); }},
        {"eval.file", [](C& c, const std::string& v, const P& b) { c.eval_file = resolve(v, b); },
         [](const C& c) { return nlohmann::json(c.eval_file.string()); }},
        {"eval.seq_len", [](C& c, const std::string& v, const P&) { c.eval_seq_len = to_count(v); },
         [](const C& c) { return nlohmann::json(c.eval_seq_len); }},
        {"eval.bytes", [](C& c, const std::string& v, const P&) { c.eval_bytes = to_count(v); },
         [](const C& c) { return nlohmann::json(c.eval_bytes); }},
        {"eval.seed", [](C& c, const std::string& v, const P&) { c.eval_seed = to_uint(v); },
         [](const C& c) { return nlohmann::json(c.eval_seed); }},
        {"eval.metrics",
         [](C& c, const std::string& v, const P&) {
             c.eval_metrics.clear();
             std::stringstream ss(v);
             std::string item;
             while (std::getline(ss, item, ',')) {
                 item = one_of(trim(item), {"perplexity", "deviation"});
                 if (std::find(c.eval_metrics.begin(), c.eval_metrics.end(), item) != c.eval_metrics.end()) {
                     throw BadValue{"metric '" + item + "' listed twice"};
                 }
                 c.eval_metrics.push_back(item);
             }
         },
         [](const C& c) {
             std::string s;
             for (const auto& m : c.eval_metrics) s += (s.empty() ? "" : ",") + m;
             return nlohmann::json(s);
         }},

        {"output.dir", [](C& c, const std::string& v, const P&) { c.output_dir = v; },
         [](const C& c) { return nlohmann::json(c.output_dir.string()); }},
        {"report.timing", [](C& c, const std::string& v, const P&) { c.report_timing = to_bool(v); },
         [](const C& c) { return nlohmann::json(c.report_timing); }},
    };
    return keys;
}

void check(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
}

void validate(PipelineConfig& c) {
    ModelSpec& m = c.model;
    check(m.hidden_dim % m.n_heads == 0, "model.hidden_dim " + std::to_string(m.hidden_dim) +
                                             " is not divisible by model.n_heads " + std::to_string(m.n_heads));
    m.head_dim = m.hidden_dim / m.n_heads;
    try {
        m.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    check(c.calib_source != "text-file" || !c.calib_file.empty(), "calib.source = text-file needs calib.file");
    check(c.eval_source != "text-file" || !c.eval_file.empty(), "eval.source = text-file needs eval.file");
    check(c.eval_seq_len >= 2, "eval.seq_len must be at least 2 (one prediction per window)");
    check(c.eval_bytes >= c.eval_seq_len, "eval.bytes must cover at least one eval.seq_len window");
    check(m.hidden_dim % c.rotator_block_count == 0,
          "rotator.block_count " + std::to_string(c.rotator_block_count) + " does not divide model.hidden_dim");
    if (c.prune_pattern.kind == SparsityPattern::Kind::NofM) {
        const std::size_t g = c.prune_pattern.m;
        check(m.hidden_dim % g == 0 && m.ffn_dim % g == 0,
              "prune.pattern " + c.prune_pattern.to_string() + " needs model.hidden_dim and model.ffn_dim divisible by " +
                  std::to_string(g));
    }
}

}  // namespace

Metric PipelineConfig::rotation_metric() const {
    if (rotator_metric) return *rotator_metric;
    if (prune_method == "magnitude") return Metric::Magnitude;
    if (prune_method == "wanda") return Metric::Wanda;
    return Metric::SparseGpt;
}

bool PipelineConfig::wants_metric(std::string_view name) const {
    return std::find(eval_metrics.begin(), eval_metrics.end(), name) != eval_metrics.end();
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const Key& k : schema()) j[k.name] = k.get(*this);
    return j;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const Key& k : schema()) out.emplace_back(k.name);
    return out;
}

PipelineConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
    PipelineConfig c;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto& keys = schema();
        const auto it = std::find_if(keys.begin(), keys.end(), [&](const Key& k) { return key == k.name; });
        if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
        try {
            it->set(c, value, base_dir);
        } catch (const BadValue& e) {
            throw ConfigError(where + key + " = '" + value + "': " + e.why);
        }
    }
    validate(c);
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config(buf.str(), path.parent_path());
}

}  // namespace rotaprune
