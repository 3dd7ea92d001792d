// checkpoint.cpp - binary checkpoints and engine config JSON.

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "tracer/engine.hpp"

namespace tracer {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'T', 'R', 'C', 'R'};
constexpr uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T> void put(std::ostream &os, T v) { os.write(reinterpret_cast<const char *>(&v), sizeof(T)); }

template <class T> T get(std::istream &is, const std::string &path) {
    T v{};
    if (!is.read(reinterpret_cast<char *>(&v), sizeof(T))) throw std::runtime_error(path + ": truncated checkpoint");
    return v;
}

void write_tensor(std::ostream &os, const Tensor &t) {
    put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) put<int64_t>(os, d);
    os.write(reinterpret_cast<const char *>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

Tensor read_tensor(std::istream &is, const Shape &expected, const std::string &path) {
    const auto rank = get<uint32_t>(is, path);
    if (rank > 8) throw std::runtime_error(path + ": corrupt tensor header");
    Shape shape(rank);
    for (auto &d : shape) d = get<int64_t>(is, path);
    if (shape != expected)
        throw std::runtime_error(path + ": tensor shape " + shape_str(shape) + " does not match " + shape_str(expected));
    std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
    if (!is.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
        throw std::runtime_error(path + ": truncated checkpoint");
    return Tensor::from_data(shape, std::move(data), true);
}

std::string norm_name(SmoothnessNorm n) { return n == SmoothnessNorm::per_voxel ? "per_voxel" : "raw_sum"; }
std::string units_name(SmoothnessUnits u) { return u == SmoothnessUnits::voxel ? "voxel" : "normalized"; }

SmoothnessNorm norm_from(const std::string &s) {
    if (s == "per_voxel") return SmoothnessNorm::per_voxel;
    if (s == "raw_sum") return SmoothnessNorm::raw_sum;
    throw std::invalid_argument("unknown smoothness norm '" + s + "'");
}

SmoothnessUnits units_from(const std::string &s) {
    if (s == "voxel") return SmoothnessUnits::voxel;
    if (s == "normalized") return SmoothnessUnits::normalized;
    throw std::invalid_argument("unknown smoothness units '" + s + "'");
}

template <class T> void read_key(const json &j, const char *key, T &dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

} // namespace

std::string config_to_json(const EngineConfig &cfg) {
    json j;
    j["steps"] = cfg.steps;
    j["n_int"] = cfg.n_int;
    j["channels"] = cfg.channels;
    j["half_res_flow"] = cfg.half_res_flow;
    j["leaky_slope"] = cfg.leaky_slope;
    j["learning_rate"] = cfg.learning_rate;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["weights"] = {{"lambda_smooth", cfg.weights.lambda_smooth},
                    {"lambda_pre", cfg.weights.lambda_pre},
                    {"lambda_ob", cfg.weights.lambda_ob}};
    j["smoothness"] = {{"norm", norm_name(cfg.smoothness.norm)}, {"units", units_name(cfg.smoothness.units)}};
    j["conditioning"] = cfg.conditioning.name();
    j["optimize_iterations"] = cfg.optimize_iterations;
    j["optimize_learning_rate"] = cfg.optimize_learning_rate;
    j["optimize_half_res"] = cfg.optimize_half_res;
    return j.dump(2);
}

EngineConfig config_from_json(const std::string &text, EngineConfig cfg) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("engine config: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("engine config: expected a JSON object");
    try {
        read_key(j, "steps", cfg.steps);
        read_key(j, "n_int", cfg.n_int);
        read_key(j, "channels", cfg.channels);
        read_key(j, "half_res_flow", cfg.half_res_flow);
        read_key(j, "leaky_slope", cfg.leaky_slope);
        read_key(j, "learning_rate", cfg.learning_rate);
        read_key(j, "epochs", cfg.epochs);
        read_key(j, "batch_size", cfg.batch_size);
        read_key(j, "seed", cfg.seed);
        if (j.contains("weights")) {
            const json &w = j.at("weights");
            read_key(w, "lambda_smooth", cfg.weights.lambda_smooth);
            read_key(w, "lambda_pre", cfg.weights.lambda_pre);
            read_key(w, "lambda_ob", cfg.weights.lambda_ob);
        }
        if (j.contains("smoothness")) {
            const json &s = j.at("smoothness");
            if (s.contains("norm")) cfg.smoothness.norm = norm_from(s.at("norm").get<std::string>());
            if (s.contains("units")) cfg.smoothness.units = units_from(s.at("units").get<std::string>());
        }
        if (j.contains("conditioning"))
            cfg.conditioning = Conditioning::from_name(j.at("conditioning").get<std::string>());
        read_key(j, "optimize_iterations", cfg.optimize_iterations);
        read_key(j, "optimize_learning_rate", cfg.optimize_learning_rate);
        read_key(j, "optimize_half_res", cfg.optimize_half_res);
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("engine config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

void save_checkpoint(const std::string &path, const NetworkParams &params, const EngineConfig &cfg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    os.write(kMagic, 4);
    put<uint8_t>(os, kVersion);
    const std::string text = config_to_json(cfg);
    put<uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto tensors = params.tensors();
    put<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    for (const auto &t : tensors) write_tensor(os, t);
    if (!os) throw std::runtime_error("error while writing checkpoint " + path);
}

NetworkParams load_checkpoint(const std::string &path, EngineConfig *cfg_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error(path + ": not a checkpoint (bad magic)");
    const auto version = get<uint8_t>(is, path);
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    const auto len = get<uint64_t>(is, path);
    if (len > (1u << 24)) throw std::runtime_error(path + ": corrupt config length");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error(path + ": truncated checkpoint");
    const EngineConfig cfg = config_from_json(text);

    // The config fixes the architecture; each stored tensor must match it.
    NetworkParams params = NetworkParams::init(cfg, 0);
    std::vector<Tensor *> slots;
    for (auto &c : params.clstm) {
        slots.push_back(&c.kernel);
        slots.push_back(&c.bias);
    }
    for (auto *group : {&params.down, &params.decoder}) {
        for (auto &c : *group) {
            slots.push_back(&c.kernel);
            slots.push_back(&c.bias);
        }
    }
    slots.push_back(&params.flow_head.kernel);
    slots.push_back(&params.flow_head.bias);
    const auto count = get<uint32_t>(is, path);
    if (count != slots.size())
        throw std::runtime_error(path + ": expected " + std::to_string(slots.size()) + " tensors, found " +
                                 std::to_string(count));
    for (Tensor *slot : slots) *slot = read_tensor(is, slot->shape(), path);
    if (cfg_out) *cfg_out = cfg;
    return params;
}

} // namespace tracer
