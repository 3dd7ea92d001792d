// pipeline.cpp - dataset and registration directories, per-pair evaluation.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tracer/pipeline.hpp"

namespace tracer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json read_json(const fs::path &p) {
    std::ifstream in(p);
    if (!in) throw io_error("missing " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw io_error(p.string() + ": malformed JSON: " + e.what());
    }
}

void write_json(const fs::path &p, const json &j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw io_error("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

void check_header(const json &j, const char *magic, const fs::path &p) {
    if (j.value("magic", std::string()) != magic)
        throw io_error(p.string() + ": bad magic (expected " + std::string(magic) + ")");
    if (j.value("format_version", -1) != kPipelineFormatVersion)
        throw io_error(p.string() + ": unsupported format version");
}

std::vector<std::string> all_structures() {
    std::vector<std::string> v{structures::body};
    for (const auto &s : structures::organs()) v.push_back(s);
    for (const auto &s : structures::tubes()) v.push_back(s);
    v.push_back(structures::tumor);
    return v;
}

std::string step_name(const char *prefix, size_t t, const char *suffix = "") {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%02zu%s", prefix, t + 1, suffix);
    return buf;
}

template <class F> double guarded(F f) {
    try {
        return f();
    } catch (const metric_error &) {
        return kNaN;
    }
}

Registration from_forward(const SyntheticPair &pair, const ForwardResult &fr, const std::vector<Tensor> &velocities,
                          const char *method) {
    Registration reg;
    reg.pair = pair.pair.name;
    reg.method = method;
    reg.phi = fr.phi_final;
    reg.phi_inverse = fr.phi_hat_final;
    const auto &fixed = pair.pair.fixed.voxels;
    for (size_t t = 0; t < fr.steps.size(); ++t) {
        reg.velocities.push_back(velocities[t].detach());
        reg.warped_moving.push_back(fr.steps[t].warped_moving.detach());
        StepSummary s;
        const auto v = velocities[t].data();
        const int64_t nv = velocities[t].extents().voxels();
        for (int64_t i = 0; i < nv; ++i) {
            double m = 0;
            for (int c = 0; c < 3; ++c) m += static_cast<double>(v[c * nv + i]) * v[c * nv + i];
            s.mean_velocity += std::sqrt(m);
        }
        s.mean_velocity /= static_cast<double>(nv);
        const auto w = fr.steps[t].warped_moving.data();
        for (size_t i = 0; i < fixed.size(); ++i) {
            const double d = static_cast<double>(w[i]) - fixed[i];
            s.image_mse += d * d;
        }
        s.image_mse /= static_cast<double>(fixed.size());
        reg.steps.push_back(s);
    }
    return reg;
}

} // namespace

void write_pair(const fs::path &dir, const SyntheticPair &p) {
    fs::create_directories(dir);
    write_volume(dir / "moving", p.pair.moving);
    write_volume(dir / "fixed", p.pair.fixed);
    VolumeHeader mh;
    mh.units = "mask";
    for (const auto &[name, m] : p.moving_masks) {
        mh.structures = {name};
        write_volume(dir / ("moving_" + name), m, mh);
    }
    for (const auto &[name, m] : p.fixed_masks) {
        mh.structures = {name};
        write_volume(dir / ("fixed_" + name), m, mh);
    }
    if (p.dose) write_volume(dir / "dose", *p.dose, {"Gy", {}});
    if (p.svf) write_volume(dir / "svf", p.svf->to_volume(p.pair.moving.spacing), {"voxel", {}});
}

SyntheticPair read_pair(const fs::path &dir) {
    if (!fs::is_directory(dir)) throw io_error("pair directory " + dir.string() + " does not exist");
    SyntheticPair p;
    p.pair.name = dir.filename().string();
    p.pair.moving = read_volume(dir / "moving");
    p.pair.fixed = read_volume(dir / "fixed");
    for (const auto &s : all_structures()) {
        for (const char *side : {"moving_", "fixed_"}) {
            const fs::path f = dir / (side + s + ".json");
            if (!fs::exists(f)) continue;
            auto &dst = side[0] == 'm' ? p.moving_masks : p.fixed_masks;
            dst[s] = read_volume(f);
        }
    }
    const Extents e = p.pair.moving.extents;
    for (const auto *side : {&p.moving_masks, &p.fixed_masks})
        for (const auto &[name, m] : *side)
            if (!(m.extents == e))
                throw dimension_error(dir.string() + ": mask " + name + " extents " + m.extents.str() +
                                      " do not match the image " + e.str());
    auto tumour = [&](const std::map<std::string, Mask> &masks) {
        auto it = masks.find(structures::tumor);
        return it != masks.end() ? it->second : Mask(e, p.pair.moving.spacing);
    };
    p.pair.moving_mask = tumour(p.moving_masks);
    p.pair.fixed_mask = tumour(p.fixed_masks);
    if (fs::exists(dir / "dose.json")) p.dose = read_volume(dir / "dose");
    if (fs::exists(dir / "svf.json")) {
        const Volume v = read_volume(dir / "svf");
        if (v.channels != 3) throw io_error(dir.string() + ": svf must have 3 channels");
        p.svf = Tensor::from_volume(v);
    }
    p.pair.validate();
    return p;
}

std::vector<SyntheticPair> make_phantom_set(const RunConfig &cfg, uint64_t seed) {
    std::vector<SyntheticPair> out;
    for (int i = 0; i < cfg.data.pairs; ++i) {
        out.push_back(make_phantom_pair(cfg.phantom, cfg.data.scenario, cfg.data.svf_magnitude, seed, i));
        char name[32];
        std::snprintf(name, sizeof name, "pair_%03d", i);
        out.back().pair.name = name;
    }
    return out;
}

std::vector<std::string> write_dataset(const fs::path &dir, const std::vector<SyntheticPair> &pairs,
                                       const RunConfig &cfg, uint64_t seed) {
    std::vector<std::string> names;
    for (const auto &p : pairs) {
        write_pair(dir / p.pair.name, p);
        names.push_back(p.pair.name);
    }
    json j;
    j["magic"] = kDatasetMagic;
    j["format_version"] = kPipelineFormatVersion;
    j["seed"] = seed;
    j["pairs"] = names;
    j["config"] = json::parse(run_config_to_json(cfg));
    write_json(dir / "dataset.json", j);
    return names;
}

std::vector<std::string> dataset_pair_names(const fs::path &dir) {
    const fs::path p = dir / "dataset.json";
    const json j = read_json(p);
    check_header(j, kDatasetMagic, p);
    return j.at("pairs").get<std::vector<std::string>>();
}

std::vector<SyntheticPair> read_dataset(const fs::path &dir) {
    std::vector<SyntheticPair> out;
    for (const auto &name : dataset_pair_names(dir)) out.push_back(read_pair(dir / name));
    if (out.empty()) throw io_error(dir.string() + ": dataset has no pairs");
    for (const auto &p : out)
        if (!(p.pair.extents() == out.front().pair.extents()))
            throw dimension_error("dataset pairs have different extents: " + p.pair.extents().str() + " vs " +
                                  out.front().pair.extents().str());
    return out;
}

Registration register_with_network(const SyntheticPair &pair, const NetworkParams &params, const EngineConfig &cfg) {
    NoGradGuard ng;
    const ForwardResult fr = forward_register(pair.pair, params, cfg);
    return from_forward(pair, fr, fr.velocities, "network");
}

Registration register_with_optimizer(const SyntheticPair &pair, const EngineConfig &cfg) {
    const OptimizeResult r = optimize_pair(pair.pair, cfg);
    return from_forward(pair, r.result, r.velocities, "optimize_pair");
}

void write_registration(const fs::path &dir, const SyntheticPair &pair, const Registration &reg) {
    const fs::path d = dir / reg.pair;
    fs::create_directories(d);
    const Spacing s = pair.pair.moving.spacing;
    write_volume(d / "phi", reg.phi.to_volume(s), {"voxel", {}});
    write_volume(d / "phi_inverse", reg.phi_inverse.to_volume(s), {"voxel", {}});
    write_volume(d / "warped_moving", warp_image(pair.pair.moving, reg.phi));
    for (const auto &[name, m] : pair.moving_masks)
        write_volume(d / ("warped_" + name), warp_mask(m, reg.phi), {"mask", {name}});
    json steps = json::array();
    for (size_t t = 0; t < reg.velocities.size(); ++t) {
        write_volume(d / step_name("velocity_", t), reg.velocities[t].to_volume(s), {"voxel", {}});
        write_volume(d / step_name("step_", t, "_moving"), reg.warped_moving[t].to_volume(s));
        steps.push_back({{"step", t + 1},
                         {"mean_velocity", reg.steps[t].mean_velocity},
                         {"image_mse", reg.steps[t].image_mse}});
    }
    write_json(d / "steps.json", {{"method", reg.method}, {"steps", steps}});
}

Registration read_registration(const fs::path &dir, const std::string &pair) {
    const fs::path d = dir / pair;
    if (!fs::is_directory(d)) throw io_error("no registration output for pair " + pair + " in " + dir.string());
    Registration reg;
    reg.pair = pair;
    const Volume phi = read_volume(d / "phi");
    const Volume inv = read_volume(d / "phi_inverse");
    if (phi.channels != 3 || inv.channels != 3) throw io_error(d.string() + ": displacement fields need 3 channels");
    reg.phi = DeformationField::from_volume(phi);
    reg.phi_inverse = DeformationField::from_volume(inv);
    const json j = read_json(d / "steps.json");
    reg.method = j.value("method", std::string());
    for (const json &s : j.at("steps"))
        reg.steps.push_back({s.at("mean_velocity").get<double>(), s.at("image_mse").get<double>()});
    return reg;
}

void write_registration_index(const fs::path &dir, const std::string &method, const std::vector<std::string> &pairs) {
    write_json(dir / "registration.json", {{"magic", kRegistrationMagic},
                                           {"format_version", kPipelineFormatVersion},
                                           {"method", method},
                                           {"pairs", pairs}});
}

MetricsReport evaluate_pair(const SyntheticPair &pair, const Registration &reg, double vba_threshold) {
    const Extents e = pair.pair.extents();
    require_same_extents(e, reg.phi.extents(), "evaluate_pair");
    require_same_extents(e, reg.phi_inverse.extents(), "evaluate_pair");
    const Spacing s = pair.pair.moving.spacing;
    MetricsReport r;
    r.pair = pair.pair.name;

    auto structures_of = [&](const std::vector<std::string> &names, bool tube) {
        for (const auto &name : names) {
            const auto m = pair.moving_masks.find(name);
            const auto f = pair.fixed_masks.find(name);
            if (m == pair.moving_masks.end() || f == pair.fixed_masks.end()) continue;
            const Mask w = warp_mask(m->second, reg.phi);
            r.dsc[name] = guarded([&] { return dsc(w, f->second); });
            r.hd95[name] = guarded([&] { return hd95(w, f->second, s); });
            if (tube) r.mcd[name] = guarded([&] { return mcd(w, f->second, s); });
        }
    };
    structures_of(structures::organs(), false);
    structures_of(structures::tubes(), true);

    const Mask &ym = pair.pair.moving_mask;
    if (count_foreground(ym) > 0) {
        const Mask ydef = warp_mask(ym, reg.phi);
        r.delta_T_percent = delta_T(ym, ydef);
        r.tumor_mse = tumor_mse(pair.pair.moving, ym, warp_image(pair.pair.moving, reg.phi), ydef);
        r.m_lexs_percent = m_lexs(jacobian_det_volume(reg.phi_inverse, s), ym);
        if (pair.dose) r.delta_ptd = delta_ptd(*pair.dose, ym, warp_image(*pair.dose, reg.phi), ydef);
    }

    const bool has_lungs = r.dsc.count(structures::left_lung) && r.dsc.count(structures::right_lung) &&
                           std::isfinite(r.dsc[structures::left_lung]) &&
                           std::isfinite(r.dsc[structures::right_lung]);
    if (has_lungs) {
        const VbaDecision v = vba_filter(r, vba_threshold);
        r.excluded = v.excluded;
        r.exclusion_reason = v.reason;
    } else {
        r.excluded = true;
        r.exclusion_reason = "lung masks unavailable";
    }
    return r;
}

double obliteration_stretch(const SyntheticPair &pair, const Registration &reg) {
    if (count_foreground(pair.pair.fixed_mask) == 0) return kNaN;
    const Mask mapped = warp_mask(pair.pair.fixed_mask, reg.phi_inverse);
    const int64_t n = count_foreground(mapped);
    if (n == 0) return kNaN;
    const Volume jac = jacobian_det_volume(reg.phi_inverse, pair.pair.moving.spacing);
    double acc = 0;
    for (size_t i = 0; i < mapped.voxels.size(); ++i)
        if (mapped.voxels[i] >= 0.5f) acc += std::abs(static_cast<double>(jac.voxels[i]) - 1.0);
    return acc / static_cast<double>(n);
}

} // namespace tracer
