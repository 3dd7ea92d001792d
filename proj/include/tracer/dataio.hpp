// dataio.hpp - volume files, intensity import, preprocessing and run configs.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tracer/engine.hpp"
#include "tracer/phantom.hpp"
#include "tracer/volume.hpp"

namespace tracer {

class io_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// A volume on disk is a pair of files: <base>.json (header) and <base>.raw
// (little-endian float32 voxels, channel-major then d, h, w).
inline constexpr const char *kVolumeMagic = "TRCV";
inline constexpr int kVolumeFormatVersion = 1;

struct VolumeHeader {
    std::string units = "normalized"; // normalized | HU | Gy | voxel | jacobian
    std::vector<std::string> structures;
};

// `base` may carry a ".json" or ".raw" suffix; it is stripped.
void write_volume(const std::filesystem::path &base, const Volume &vol, const VolumeHeader &header = {});
Volume read_volume(const std::filesystem::path &base, VolumeHeader *header = nullptr);

// HU clipped to [-1000, 1000] and mapped linearly onto [0, 1].
Volume hu_to_unit(const Volume &hu);

// Trilinear resample of every channel onto `target` extents with voxel
// centres aligned (output o samples input (o + 0.5) n_in / n_out - 0.5).
// Spacing scales so the physical field of view is kept.
Volume resample(const Volume &vol, Extents target);
// Trilinear resample then binarise at 0.5.
Mask resample_mask(const Mask &mask, Extents target);

struct PreprocessOptions {
    Extents target{24, 32, 32};
    double margin_mm = 0;        // added on every side of the body bounding box
    float body_threshold = 0.2f; // intensities above this count as body
};

// Crop box in the original grid plus the resampling target; enough to map
// results back with restore().
struct CropResample {
    Extents original;
    Spacing original_spacing;
    std::array<int64_t, 3> lo{};
    Extents crop;
    Extents target;
};

struct Preprocessed {
    Volume image;
    std::map<std::string, Mask> masks;
    CropResample transform;
};

// Crop to the body bounding box grown by the margin (clipped to the grid),
// then resample to the target extents. Throws std::invalid_argument when no
// voxel exceeds the body threshold.
Preprocessed preprocess(const Volume &image, const std::map<std::string, Mask> &masks, const PreprocessOptions &opt);
// Inverse of preprocess: resample back to the crop and paste into a zero grid
// of the original extents. Masks are re-binarised.
Volume restore(const Volume &vol, const CropResample &t, bool is_mask);

// Phantom set used by the CLI and the acceptance checks.
struct DatasetConfig {
    int pairs = 10;
    TumorScenario scenario = TumorScenario::non_corresponding;
    double svf_magnitude = 2.0;
};

inline constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
    EngineConfig engine;
    PhantomSpec phantom = PhantomSpec::standard();
    DatasetConfig data;
};

std::string phantom_spec_to_json(const PhantomSpec &spec);
// Keys missing from the JSON keep the values of `base`; when "extents"
// changes, the anatomy is first rebuilt with PhantomSpec::standard.
PhantomSpec phantom_spec_from_json(const std::string &text, PhantomSpec base = PhantomSpec::standard());

// {"schema_version": 1, "engine": {...}, "phantom": {...}, "data": {...}}
std::string run_config_to_json(const RunConfig &cfg);
RunConfig run_config_from_json(const std::string &text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path &path, RunConfig base = {});

} // namespace tracer
