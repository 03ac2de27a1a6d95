#include "bussam/config.hpp"

#include <fstream>
#include <sstream>

namespace bussam {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename Num>
Num parse_num(const std::string& v, const std::string& key) {
    std::istringstream ss(v);
    Num out;
    ss >> out;
    if (ss.fail() || !ss.eof())
        throw ConfigError("config key '" + key + "': invalid number '" + v + "'");
    return out;
}

}  // namespace

TrainConfig parse_config_text(const std::string& text, const std::string& origin) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "lr") cfg.lr = parse_num<double>(val, key);
        else if (key == "weight_decay") cfg.weight_decay = parse_num<double>(val, key);
        else if (key == "batch") cfg.batch = parse_num<int>(val, key);
        else if (key == "epochs") cfg.epochs = parse_num<int>(val, key);
        else if (key == "warmup_steps") cfg.warmup_steps = parse_num<int>(val, key);
        else if (key == "seed") cfg.seed = parse_num<std::uint64_t>(val, key);
        else if (key == "input_size") cfg.model.input_size = parse_num<int>(val, key);
        else if (key == "embed_dim") cfg.model.embed_dim = parse_num<int>(val, key);
        else if (key == "patch") cfg.model.patch = parse_num<int>(val, key);
        else if (key == "vit_blocks") cfg.model.vit_blocks = parse_num<int>(val, key);
        else if (key == "heads") cfg.model.heads = parse_num<int>(val, key);
        else if (key == "adapter_ratio") cfg.model.adapter_ratio = parse_num<int>(val, key);
        else if (key == "cba_alpha") cfg.model.cba_alpha = parse_num<double>(val, key);
        else if (key == "cba_every") cfg.model.cba_every = parse_num<int>(val, key);
        else if (key == "loss_beta") cfg.model.loss_beta = parse_num<double>(val, key);
        else if (key == "use_cnn") cfg.model.use_cnn = parse_bool(val, key);
        else if (key == "use_pos_adapter") cfg.model.use_pos_adapter = parse_bool(val, key);
        else if (key == "use_cba") cfg.model.use_cba = parse_bool(val, key);
        else
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::map<std::string, std::string> config_to_kv(const TrainConfig& cfg) {
    std::map<std::string, std::string> kv;
    auto put = [&](const std::string& k, const std::string& v) { kv[k] = v; };
    put("input_size", std::to_string(cfg.model.input_size));
    put("embed_dim", std::to_string(cfg.model.embed_dim));
    put("patch", std::to_string(cfg.model.patch));
    put("vit_blocks", std::to_string(cfg.model.vit_blocks));
    put("heads", std::to_string(cfg.model.heads));
    put("adapter_ratio", std::to_string(cfg.model.adapter_ratio));
    {
        std::ostringstream ss;
        ss << cfg.model.cba_alpha;
        put("cba_alpha", ss.str());
    }
    put("cba_every", std::to_string(cfg.model.cba_every));
    {
        std::ostringstream ss;
        ss << cfg.model.loss_beta;
        put("loss_beta", ss.str());
    }
    put("use_cnn", cfg.model.use_cnn ? "true" : "false");
    put("use_pos_adapter", cfg.model.use_pos_adapter ? "true" : "false");
    put("use_cba", cfg.model.use_cba ? "true" : "false");
    return kv;
}

ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig m;
    auto get = [&](const char* k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw DataError(std::string("checkpoint config missing key '") + k + "'");
        return it->second;
    };
    m.input_size = parse_num<int>(get("input_size"), "input_size");
    m.embed_dim = parse_num<int>(get("embed_dim"), "embed_dim");
    m.patch = parse_num<int>(get("patch"), "patch");
    m.vit_blocks = parse_num<int>(get("vit_blocks"), "vit_blocks");
    m.heads = parse_num<int>(get("heads"), "heads");
    m.adapter_ratio = parse_num<int>(get("adapter_ratio"), "adapter_ratio");
    m.cba_alpha = parse_num<double>(get("cba_alpha"), "cba_alpha");
    m.cba_every = parse_num<int>(get("cba_every"), "cba_every");
    m.loss_beta = parse_num<double>(get("loss_beta"), "loss_beta");
    m.use_cnn = parse_bool(get("use_cnn"), "use_cnn");
    m.use_pos_adapter = parse_bool(get("use_pos_adapter"), "use_pos_adapter");
    m.use_cba = parse_bool(get("use_cba"), "use_cba");
    m.validate();
    return m;
}

}  // namespace bussam
