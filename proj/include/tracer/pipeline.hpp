// pipeline.hpp - on-disk phantom datasets, registration outputs and per-pair evaluation.
//
// Dataset directory:
//   dataset.json                 {"magic": "TRCD", "format_version": 1, "pairs": [...], ...}
//   <pair>/moving, <pair>/fixed  images
//   <pair>/moving_<structure>, <pair>/fixed_<structure>   masks (structure "tumor" included)
//   <pair>/dose, <pair>/svf      optional
// Registration directory:
//   registration.json            {"magic": "TRCG", "format_version": 1, "method": ..., "pairs": [...]}
//   <pair>/phi, <pair>/phi_inverse, <pair>/warped_moving, <pair>/warped_<structure>,
//   <pair>/velocity_<t>, <pair>/step_<t>_moving, <pair>/steps.json
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tracer/dataio.hpp"
#include "tracer/deformation.hpp"
#include "tracer/engine.hpp"
#include "tracer/metrics.hpp"
#include "tracer/phantom.hpp"

namespace tracer {

inline constexpr const char *kDatasetMagic = "TRCD";
inline constexpr const char *kRegistrationMagic = "TRCG";
inline constexpr int kPipelineFormatVersion = 1;

void write_pair(const std::filesystem::path &dir, const SyntheticPair &pair);
SyntheticPair read_pair(const std::filesystem::path &dir);

// Writes every pair plus dataset.json; returns the pair names in order.
std::vector<std::string> write_dataset(const std::filesystem::path &dir, const std::vector<SyntheticPair> &pairs,
                                       const RunConfig &cfg, uint64_t seed);
std::vector<std::string> dataset_pair_names(const std::filesystem::path &dir);
std::vector<SyntheticPair> read_dataset(const std::filesystem::path &dir);

// Phantom set of cfg.data.pairs pairs at cfg.phantom's anatomy.
std::vector<SyntheticPair> make_phantom_set(const RunConfig &cfg, uint64_t seed);

struct StepSummary {
    double mean_velocity = 0; // mean |v^t| in voxels
    double image_mse = 0;     // raw MSE of I_m^t against I_f
};

struct Registration {
    std::string pair;
    std::string method; // "network" or "optimize_pair"
    DeformationField phi;         // fixed grid -> moving image
    DeformationField phi_inverse; // moving grid -> fixed image
    std::vector<Tensor> velocities;
    std::vector<Tensor> warped_moving; // I_m^t per step
    std::vector<StepSummary> steps;
};

Registration register_with_network(const SyntheticPair &pair, const NetworkParams &params, const EngineConfig &cfg);
Registration register_with_optimizer(const SyntheticPair &pair, const EngineConfig &cfg);

void write_registration(const std::filesystem::path &dir, const SyntheticPair &pair, const Registration &reg);
Registration read_registration(const std::filesystem::path &dir, const std::string &pair);
void write_registration_index(const std::filesystem::path &dir, const std::string &method,
                              const std::vector<std::string> &pairs);

// Metrics of one registered pair: moving structures warped by phi against the
// fixed structures; tumour metrics on the moving tumour (NaN without one);
// M_lexs uses the Jacobian of phi_inverse, whose determinant is the local
// volume change of moving tissue; dose is warped with the image.
MetricsReport evaluate_pair(const SyntheticPair &pair, const Registration &reg, double vba_threshold = 0.8);

// Mean |det J - 1| of phi_inverse over the fixed tumour mapped onto the moving
// grid by phi_inverse. NaN without a fixed tumour.
double obliteration_stretch(const SyntheticPair &pair, const Registration &reg);

} // namespace tracer
