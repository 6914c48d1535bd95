#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <zlib.h>

#include "idal/volume.hpp"

namespace idal {

// Single-file NIfTI-1 (.nii / .nii.gz). Reads the common scalar datatypes and
// converts to float; writes float32 with a 352-byte header block. Orientation
// fields pass through NiftiMeta without interpretation.

namespace nifti_detail {

inline std::uint16_t swap16(std::uint16_t v) { return static_cast<std::uint16_t>((v >> 8) | (v << 8)); }
inline std::uint32_t swap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0x0000ff00u) | ((v << 8) & 0x00ff0000u) | (v << 24);
}
inline std::uint64_t swap64(std::uint64_t v) {
    v = ((v >> 8) & 0x00ff00ff00ff00ffULL) | ((v & 0x00ff00ff00ff00ffULL) << 8);
    v = ((v >> 16) & 0x0000ffff0000ffffULL) | ((v & 0x0000ffff0000ffffULL) << 16);
    return (v >> 32) | (v << 32);
}

struct Cursor {
    const std::vector<unsigned char>& buf;
    bool swap = false;

    template <class T>
    T get(std::size_t off) const {
        T v{};
        std::memcpy(&v, buf.data() + off, sizeof(T));
        if (swap) {
            if constexpr (sizeof(T) == 2) {
                std::uint16_t raw;
                std::memcpy(&raw, &v, 2);
                raw = swap16(raw);
                std::memcpy(&v, &raw, 2);
            } else if constexpr (sizeof(T) == 4) {
                std::uint32_t raw;
                std::memcpy(&raw, &v, 4);
                raw = swap32(raw);
                std::memcpy(&v, &raw, 4);
            } else if constexpr (sizeof(T) == 8) {
                std::uint64_t raw;
                std::memcpy(&raw, &v, 8);
                raw = swap64(raw);
                std::memcpy(&v, &raw, 8);
            }
        }
        return v;
    }
};

template <class T>
void put(std::vector<unsigned char>& buf, std::size_t off, T v) {
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

inline std::vector<unsigned char> slurp(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError(msg("missing file: ", path));
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw IoError(msg("cannot open file: ", path));
    gzbuffer(f, 1 << 16);
    std::vector<unsigned char> out;
    std::vector<unsigned char> chunk(1 << 20);
    int n = 0;
    while ((n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0)
        out.insert(out.end(), chunk.begin(), chunk.begin() + n);
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw IoError(msg("read error (corrupt gzip stream?): ", path));
    return out;
}

template <class Raw>
void convert(const unsigned char* src, std::size_t n, bool swap, std::vector<float>& dst) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Raw v{};
        std::memcpy(&v, src + i * sizeof(Raw), sizeof(Raw));
        if (swap) {
            if constexpr (sizeof(Raw) == 2) {
                std::uint16_t raw;
                std::memcpy(&raw, &v, 2);
                raw = swap16(raw);
                std::memcpy(&v, &raw, 2);
            } else if constexpr (sizeof(Raw) == 4) {
                std::uint32_t raw;
                std::memcpy(&raw, &v, 4);
                raw = swap32(raw);
                std::memcpy(&v, &raw, 4);
            } else if constexpr (sizeof(Raw) == 8) {
                std::uint64_t raw;
                std::memcpy(&raw, &v, 8);
                raw = swap64(raw);
                std::memcpy(&v, &raw, 8);
            }
        }
        dst[i] = static_cast<float>(v);
    }
}

}  // namespace nifti_detail

inline Volume read_volume(const std::string& path) {
    using namespace nifti_detail;
    const auto buf = slurp(path);
    if (buf.size() < 348) throw HeaderError(msg("truncated NIfTI header (", buf.size(), " bytes): ", path));

    Cursor c{buf, false};
    std::int32_t sizeof_hdr = c.get<std::int32_t>(0);
    if (sizeof_hdr != 348) {
        c.swap = true;
        sizeof_hdr = c.get<std::int32_t>(0);
        if (sizeof_hdr != 348) throw HeaderError(msg("bad sizeof_hdr in NIfTI header: ", path));
    }
    const char m0 = static_cast<char>(buf[344]), m1 = static_cast<char>(buf[345]), m2 = static_cast<char>(buf[346]);
    if (m0 == 'n' && m1 == 'i' && m2 == '1')
        throw UnsupportedError(msg("two-file NIfTI (.hdr/.img) not supported: ", path));
    if (!(m0 == 'n' && m1 == '+' && m2 == '1')) throw HeaderError(msg("missing NIfTI-1 magic: ", path));

    std::array<std::int16_t, 8> dim{};
    for (std::size_t i = 0; i < 8; ++i) dim[i] = c.get<std::int16_t>(40 + 2 * i);
    if (dim[0] < 1 || dim[0] > 7) throw HeaderError(msg("invalid dim[0]=", dim[0], ": ", path));
    Dims3 dims{1, 1, 1};
    for (int a = 0; a < 3 && a < dim[0]; ++a) {
        if (dim[static_cast<std::size_t>(a) + 1] <= 0)
            throw HeaderError(msg("non-positive dim[", a + 1, "]: ", path));
        dims[static_cast<std::size_t>(a)] = dim[static_cast<std::size_t>(a) + 1];
    }
    // Trailing singleton dims collapse; true 4D+ data is out of scope.
    for (int a = 4; a <= dim[0]; ++a)
        if (dim[static_cast<std::size_t>(a)] > 1)
            throw UnsupportedError(msg("volume has ", dim[static_cast<std::size_t>(a)], " frames in dim ", a, ": ", path));

    Volume v;
    v.dims = dims;
    for (std::size_t a = 0; a < 3; ++a) {
        const float s = c.get<float>(76 + 4 * (a + 1));
        v.spacing[a] = s > 0.0f ? static_cast<double>(s) : 1.0;
    }

    v.meta.qfac = c.get<float>(76);
    if (v.meta.qfac == 0.0f) v.meta.qfac = 1.0f;
    v.meta.qform_code = c.get<std::int16_t>(252);
    v.meta.sform_code = c.get<std::int16_t>(254);
    v.meta.quatern_b = c.get<float>(256);
    v.meta.quatern_c = c.get<float>(260);
    v.meta.quatern_d = c.get<float>(264);
    v.meta.qoffset_x = c.get<float>(268);
    v.meta.qoffset_y = c.get<float>(272);
    v.meta.qoffset_z = c.get<float>(276);
    for (std::size_t i = 0; i < 4; ++i) {
        v.meta.srow_x[i] = c.get<float>(280 + 4 * i);
        v.meta.srow_y[i] = c.get<float>(296 + 4 * i);
        v.meta.srow_z[i] = c.get<float>(312 + 4 * i);
    }
    v.meta.xyzt_units = static_cast<std::int8_t>(buf[123]);
    {
        char d[81] = {0};
        std::memcpy(d, buf.data() + 148, 80);
        v.meta.descrip = d;
    }

    const std::int16_t datatype = c.get<std::int16_t>(70);
    const float vox_offset_f = c.get<float>(108);
    const std::size_t offset = vox_offset_f < 352.0f ? 352 : static_cast<std::size_t>(vox_offset_f);
    const std::size_t n = v.voxel_count();

    std::size_t elsize = 0;
    switch (datatype) {
        case 2: case 256: elsize = 1; break;   // uint8 / int8
        case 4: case 512: elsize = 2; break;   // int16 / uint16
        case 8: elsize = 4; break;             // int32
        case 16: elsize = 4; break;            // float32
        case 64: elsize = 8; break;            // float64
        default: throw UnsupportedError(msg("unsupported NIfTI datatype ", datatype, ": ", path));
    }
    if (buf.size() < offset + n * elsize)
        throw HeaderError(msg("truncated NIfTI data (need ", offset + n * elsize, " bytes, have ", buf.size(), "): ", path));

    const unsigned char* src = buf.data() + offset;
    switch (datatype) {
        case 2: convert<std::uint8_t>(src, n, c.swap, v.data); break;
        case 256: convert<std::int8_t>(src, n, c.swap, v.data); break;
        case 4: convert<std::int16_t>(src, n, c.swap, v.data); break;
        case 512: convert<std::uint16_t>(src, n, c.swap, v.data); break;
        case 8: convert<std::int32_t>(src, n, c.swap, v.data); break;
        case 16: convert<float>(src, n, c.swap, v.data); break;
        case 64: convert<double>(src, n, c.swap, v.data); break;
        default: break;
    }

    const float scl_slope = c.get<float>(112);
    const float scl_inter = c.get<float>(116);
    if (scl_slope != 0.0f && !(scl_slope == 1.0f && scl_inter == 0.0f))
        for (auto& x : v.data) x = x * scl_slope + scl_inter;

    v.validate();
    return v;
}

inline void write_volume(const Volume& v, const std::string& path) {
    using namespace nifti_detail;
    v.validate();

    std::vector<unsigned char> buf(352 + v.data.size() * 4, 0);
    put<std::int32_t>(buf, 0, 348);
    buf[38] = 'r';  // regular
    put<std::int16_t>(buf, 40, 3);
    for (std::size_t a = 0; a < 3; ++a) put<std::int16_t>(buf, 42 + 2 * a, static_cast<std::int16_t>(v.dims[a]));
    for (std::size_t a = 4; a < 8; ++a) put<std::int16_t>(buf, 40 + 2 * a, 1);
    put<std::int16_t>(buf, 70, 16);  // DT_FLOAT32
    put<std::int16_t>(buf, 72, 32);
    put<float>(buf, 76, v.meta.qfac);
    for (std::size_t a = 0; a < 3; ++a) put<float>(buf, 80 + 4 * a, static_cast<float>(v.spacing[a]));
    put<float>(buf, 108, 352.0f);
    put<float>(buf, 112, 1.0f);  // scl_slope
    put<float>(buf, 116, 0.0f);  // scl_inter
    buf[123] = static_cast<unsigned char>(v.meta.xyzt_units);
    {
        char d[80] = {0};
        std::snprintf(d, sizeof(d), "%s", v.meta.descrip.c_str());
        std::memcpy(buf.data() + 148, d, 80);
    }
    put<std::int16_t>(buf, 252, v.meta.qform_code);
    put<std::int16_t>(buf, 254, v.meta.sform_code);
    put<float>(buf, 256, v.meta.quatern_b);
    put<float>(buf, 260, v.meta.quatern_c);
    put<float>(buf, 264, v.meta.quatern_d);
    put<float>(buf, 268, v.meta.qoffset_x);
    put<float>(buf, 272, v.meta.qoffset_y);
    put<float>(buf, 276, v.meta.qoffset_z);
    for (std::size_t i = 0; i < 4; ++i) {
        put<float>(buf, 280 + 4 * i, v.meta.srow_x[i]);
        put<float>(buf, 296 + 4 * i, v.meta.srow_y[i]);
        put<float>(buf, 312 + 4 * i, v.meta.srow_z[i]);
    }
    buf[344] = 'n';
    buf[345] = '+';
    buf[346] = '1';
    std::memcpy(buf.data() + 352, v.data.data(), v.data.size() * 4);

    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }

    if (p.extension() == ".gz") {
        gzFile f = gzopen(path.c_str(), "wb");
        if (f == nullptr) throw IoError(msg("cannot open for writing: ", path));
        gzbuffer(f, 1 << 16);
        const int wrote = gzwrite(f, buf.data(), static_cast<unsigned>(buf.size()));
        const int rc = gzclose(f);
        if (wrote != static_cast<int>(buf.size()) || rc != Z_OK)
            throw IoError(msg("short write: ", path));
    } else {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError(msg("cannot open for writing: ", path));
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError(msg("short write: ", path));
    }
}

/// Writes a binary mask with the reference volume's geometry and orientation.
inline void write_mask(const MaskVolume& mask, const std::string& path, const Volume& reference) {
    require_same_geometry(mask, reference, "mask vs reference");
    Volume v;
    v.dims = reference.dims;
    v.spacing = reference.spacing;
    v.meta = reference.meta;
    v.data.resize(mask.data.size());
    for (std::size_t i = 0; i < mask.data.size(); ++i) v.data[i] = mask.data[i] ? 1.0f : 0.0f;
    write_volume(v, path);
}

}  // namespace idal
