// io.cpp - volume header + raw payload files and HU import.

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tracer/dataio.hpp"

namespace tracer {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "volume IO assumes a little-endian host");

namespace {

fs::path strip(const fs::path &base) {
    const auto ext = base.extension();
    if (ext == ".json" || ext == ".raw") return fs::path(base).replace_extension();
    return base;
}

fs::path with_suffix(const fs::path &base, const char *suffix) {
    fs::path p = base;
    p += suffix;
    return p;
}

} // namespace

void write_volume(const fs::path &path, const Volume &vol, const VolumeHeader &header) {
    if (static_cast<int64_t>(vol.voxels.size()) != vol.channels * vol.extents.voxels())
        throw dimension_error("write_volume: voxel count does not match extents");
    const fs::path base = strip(path);
    if (base.has_parent_path()) fs::create_directories(base.parent_path());
    const fs::path raw = with_suffix(base, ".raw");

    json h;
    h["magic"] = kVolumeMagic;
    h["format_version"] = kVolumeFormatVersion;
    h["extents"] = {vol.extents.d, vol.extents.h, vol.extents.w};
    h["spacing"] = {vol.spacing.d, vol.spacing.h, vol.spacing.w};
    h["channels"] = vol.channels;
    h["units"] = header.units;
    h["structures"] = header.structures;
    h["data_file"] = raw.filename().string();
    h["byte_order"] = "little";
    h["dtype"] = "float32";

    std::ofstream js(with_suffix(base, ".json"));
    if (!js) throw io_error("cannot write " + with_suffix(base, ".json").string());
    js << h.dump(2) << "\n";
    std::ofstream rs(raw, std::ios::binary);
    if (!rs) throw io_error("cannot write " + raw.string());
    rs.write(reinterpret_cast<const char *>(vol.voxels.data()),
             static_cast<std::streamsize>(vol.voxels.size() * sizeof(float)));
    if (!rs) throw io_error("short write to " + raw.string());
}

Volume read_volume(const fs::path &path, VolumeHeader *header) {
    const fs::path base = strip(path);
    const fs::path jpath = with_suffix(base, ".json");
    std::ifstream js(jpath);
    if (!js) throw io_error("missing volume header " + jpath.string());
    json h;
    try {
        h = json::parse(js);
    } catch (const json::exception &ex) {
        throw io_error(jpath.string() + ": malformed header: " + ex.what());
    }
    Volume vol;
    try {
        if (h.value("magic", std::string()) != kVolumeMagic) throw io_error(jpath.string() + ": not a volume header (bad magic)");
        if (h.at("format_version").get<int>() != kVolumeFormatVersion)
            throw io_error(jpath.string() + ": unsupported format version " + h.at("format_version").dump());
        if (h.value("dtype", std::string("float32")) != "float32" || h.value("byte_order", std::string("little")) != "little")
            throw io_error(jpath.string() + ": only little-endian float32 payloads are supported");
        const auto ex = h.at("extents").get<std::array<int64_t, 3>>();
        const auto sp = h.at("spacing").get<std::array<double, 3>>();
        vol.extents = {ex[0], ex[1], ex[2]};
        vol.spacing = {sp[0], sp[1], sp[2]};
        vol.channels = h.value("channels", int64_t{1});
        if (ex[0] <= 0 || ex[1] <= 0 || ex[2] <= 0 || vol.channels <= 0)
            throw io_error(jpath.string() + ": non-positive extents or channels");
        if (header) {
            header->units = h.value("units", std::string("normalized"));
            header->structures = h.value("structures", std::vector<std::string>{});
        }
        const fs::path raw = base.parent_path() / h.value("data_file", with_suffix(base, ".raw").filename().string());
        std::ifstream rs(raw, std::ios::binary);
        if (!rs) throw io_error("missing volume payload " + raw.string());
        vol.voxels.resize(static_cast<size_t>(vol.channels * vol.extents.voxels()));
        const auto bytes = static_cast<std::streamsize>(vol.voxels.size() * sizeof(float));
        rs.read(reinterpret_cast<char *>(vol.voxels.data()), bytes);
        if (rs.gcount() != bytes || rs.peek() != std::char_traits<char>::eof())
            throw io_error(raw.string() + ": payload size does not match header extents");
    } catch (const json::exception &ex) {
        throw io_error(jpath.string() + ": malformed header: " + ex.what());
    }
    return vol;
}

Volume hu_to_unit(const Volume &hu) {
    Volume out = hu;
    for (auto &v : out.voxels) v = (std::clamp(v, -1000.0f, 1000.0f) + 1000.0f) / 2000.0f;
    return out;
}

} // namespace tracer
