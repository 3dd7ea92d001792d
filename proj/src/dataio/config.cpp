// config.cpp - versioned JSON run configs (engine, phantom, dataset).

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tracer/dataio.hpp"

namespace tracer {

using nlohmann::json;

namespace {

json vec3(const Vec3 &v) { return json::array({v[0], v[1], v[2]}); }

json ellipsoid(const Ellipsoid &e) { return {{"center", vec3(e.center)}, {"radii", vec3(e.radii)}}; }

void read_ellipsoid(const json &j, const char *key, Ellipsoid &dst) {
    if (!j.contains(key)) return;
    const json &e = j.at(key);
    if (e.contains("center")) dst.center = e.at("center").get<Vec3>();
    if (e.contains("radii")) dst.radii = e.at("radii").get<Vec3>();
}

json tumor(const TumorSpec &t) { return {{"center", vec3(t.center)}, {"radius", t.radius}, {"side", t.side}}; }

TumorSpec read_tumor(const json &j) {
    TumorSpec t;
    t.center = j.at("center").get<Vec3>();
    t.radius = j.value("radius", t.radius);
    t.side = j.at("side").get<std::string>();
    return t;
}

template <class T> void read_key(const json &j, const char *key, T &dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

json phantom_json(const PhantomSpec &s) {
    json j;
    j["extents"] = {s.extents.d, s.extents.h, s.extents.w};
    j["spacing"] = {s.spacing.d, s.spacing.h, s.spacing.w};
    j["body"] = ellipsoid(s.body);
    j["left_lung"] = ellipsoid(s.left_lung);
    j["right_lung"] = ellipsoid(s.right_lung);
    j["heart"] = ellipsoid(s.heart);
    j["cord"] = {{"h", s.cord.h}, {"w", s.cord.w}, {"radius", s.cord.radius}};
    json tubes = json::array();
    for (const auto &t : s.tubes) {
        json c = json::array();
        for (const auto &p : t.control) c.push_back(vec3(p));
        tubes.push_back({{"name", t.name}, {"control", c}, {"radius", t.radius}});
    }
    j["tubes"] = tubes;
    json tumors = json::array();
    for (const auto &t : s.tumors) tumors.push_back(tumor(t));
    j["tumors"] = tumors;
    const auto &i = s.intensity;
    j["intensity"] = {{"background", i.background}, {"soft_tissue", i.soft_tissue}, {"lung", i.lung},
                      {"heart", i.heart},           {"vessel", i.vessel},           {"airway", i.airway},
                      {"cord", i.cord},             {"tumor", i.tumor}};
    j["noise_sigma"] = s.noise_sigma;
    j["seed"] = s.seed;
    return j;
}

PhantomSpec phantom_from(const json &j, PhantomSpec s) {
    if (j.contains("extents")) {
        const auto ex = j.at("extents").get<std::array<int64_t, 3>>();
        const Extents e{ex[0], ex[1], ex[2]};
        if (e.d <= 0 || e.h <= 0 || e.w <= 0) throw std::invalid_argument("phantom extents must be positive");
        if (!(e == s.extents)) {
            PhantomSpec fresh = PhantomSpec::standard(e);
            fresh.spacing = s.spacing;
            fresh.intensity = s.intensity;
            fresh.noise_sigma = s.noise_sigma;
            fresh.seed = s.seed;
            s = fresh;
        }
    }
    if (j.contains("spacing")) {
        const auto sp = j.at("spacing").get<std::array<double, 3>>();
        s.spacing = {sp[0], sp[1], sp[2]};
    }
    read_ellipsoid(j, "body", s.body);
    read_ellipsoid(j, "left_lung", s.left_lung);
    read_ellipsoid(j, "right_lung", s.right_lung);
    read_ellipsoid(j, "heart", s.heart);
    if (j.contains("cord")) {
        const json &c = j.at("cord");
        read_key(c, "h", s.cord.h);
        read_key(c, "w", s.cord.w);
        read_key(c, "radius", s.cord.radius);
    }
    if (j.contains("tubes")) {
        s.tubes.clear();
        for (const json &t : j.at("tubes")) {
            TubeSpec tube;
            tube.name = t.at("name").get<std::string>();
            for (const json &p : t.at("control")) tube.control.push_back(p.get<Vec3>());
            tube.radius = t.value("radius", tube.radius);
            s.tubes.push_back(tube);
        }
    }
    if (j.contains("tumors")) {
        s.tumors.clear();
        for (const json &t : j.at("tumors")) s.tumors.push_back(read_tumor(t));
    }
    if (j.contains("intensity")) {
        const json &i = j.at("intensity");
        auto &d = s.intensity;
        read_key(i, "background", d.background);
        read_key(i, "soft_tissue", d.soft_tissue);
        read_key(i, "lung", d.lung);
        read_key(i, "heart", d.heart);
        read_key(i, "vessel", d.vessel);
        read_key(i, "airway", d.airway);
        read_key(i, "cord", d.cord);
        read_key(i, "tumor", d.tumor);
    }
    read_key(j, "noise_sigma", s.noise_sigma);
    read_key(j, "seed", s.seed);
    s.validate();
    return s;
}

json parse(const std::string &text, const char *what) {
    try {
        return json::parse(text);
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string(what) + ": malformed JSON: " + e.what());
    }
}

} // namespace

std::string phantom_spec_to_json(const PhantomSpec &spec) { return phantom_json(spec).dump(2); }

PhantomSpec phantom_spec_from_json(const std::string &text, PhantomSpec base) {
    const json j = parse(text, "phantom spec");
    try {
        return phantom_from(j, std::move(base));
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("phantom spec: ") + e.what());
    }
}

std::string run_config_to_json(const RunConfig &cfg) {
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["engine"] = json::parse(config_to_json(cfg.engine));
    j["phantom"] = phantom_json(cfg.phantom);
    j["data"] = {{"pairs", cfg.data.pairs},
                 {"scenario", scenario_name(cfg.data.scenario)},
                 {"svf_magnitude", cfg.data.svf_magnitude}};
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string &text, RunConfig cfg) {
    const json j = parse(text, "config");
    try {
        if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
        if (!j.contains("schema_version")) throw std::invalid_argument("config: missing schema_version");
        const int version = j.at("schema_version").get<int>();
        if (version != kConfigSchemaVersion)
            throw std::invalid_argument("config: unsupported schema_version " + std::to_string(version));
        for (const auto &[key, value] : j.items())
            if (key != "schema_version" && key != "engine" && key != "phantom" && key != "data")
                throw std::invalid_argument("config: unknown section '" + key + "'");
        if (j.contains("engine")) cfg.engine = config_from_json(j.at("engine").dump(), cfg.engine);
        if (j.contains("phantom")) cfg.phantom = phantom_from(j.at("phantom"), cfg.phantom);
        if (j.contains("data")) {
            const json &d = j.at("data");
            read_key(d, "pairs", cfg.data.pairs);
            if (d.contains("scenario")) cfg.data.scenario = scenario_from_name(d.at("scenario").get<std::string>());
            read_key(d, "svf_magnitude", cfg.data.svf_magnitude);
            if (cfg.data.pairs < 1) throw std::invalid_argument("config: data.pairs must be >= 1");
            if (cfg.data.svf_magnitude < 0) throw std::invalid_argument("config: data.svf_magnitude must be >= 0");
        }
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path &path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str(), std::move(base));
}

} // namespace tracer
