#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include <idal/idal.hpp>

#include "test_util.hpp"

using namespace idal;

namespace {

Volume sample_volume() {
    Volume v({5, 4, 3}, {1.5, 2.0, 2.5});
    for (std::size_t i = 0; i < v.data.size(); ++i)
        v.data[i] = static_cast<float>(i) * 0.25f - 3.0f;
    v.meta.qform_code = 1;
    v.meta.sform_code = 2;
    v.meta.quatern_b = 0.1f;
    v.meta.qoffset_x = -90.5f;
    v.meta.qoffset_y = 12.25f;
    v.meta.qoffset_z = 3.0f;
    v.meta.srow_x = {1.5f, 0.0f, 0.0f, -90.5f};
    v.meta.srow_y = {0.0f, 2.0f, 0.0f, 12.25f};
    v.meta.srow_z = {0.0f, 0.0f, 2.5f, 3.0f};
    v.meta.descrip = "io round trip probe";
    return v;
}

// Hand-built single-file NIfTI-1 with explicit byte layout, independent of
// write_volume. `swapped` emits every multi-byte field big-endian.
struct RawNifti {
    std::vector<unsigned char> buf;
    bool swapped = false;

    explicit RawNifti(std::size_t payload_bytes, std::size_t offset = 352)
        : buf(offset + payload_bytes, 0) {}

    void put16(std::size_t off, std::int16_t v) {
        auto u = static_cast<std::uint16_t>(v);
        if (swapped) u = static_cast<std::uint16_t>((u >> 8) | (u << 8));
        std::memcpy(buf.data() + off, &u, 2);
    }
    void put32(std::size_t off, std::int32_t v) {
        auto u = static_cast<std::uint32_t>(v);
        if (swapped)
            u = (u >> 24) | ((u >> 8) & 0x0000ff00u) | ((u << 8) & 0x00ff0000u) | (u << 24);
        std::memcpy(buf.data() + off, &u, 4);
    }
    void putf(std::size_t off, float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        if (swapped)
            u = (u >> 24) | ((u >> 8) & 0x0000ff00u) | ((u << 8) & 0x00ff0000u) | (u << 24);
        std::memcpy(buf.data() + off, &u, 4);
    }

    void header(std::int16_t datatype, std::int16_t bitpix, Dims3 dims,
                Spacing3 spacing = {1, 1, 1}) {
        put32(0, 348);
        put16(40, 3);
        for (std::size_t a = 0; a < 3; ++a)
            put16(42 + 2 * a, static_cast<std::int16_t>(dims[a]));
        for (std::size_t a = 4; a < 8; ++a) put16(40 + 2 * a, 1);
        put16(70, datatype);
        put16(72, bitpix);
        putf(76, 1.0f);
        for (std::size_t a = 0; a < 3; ++a) putf(80 + 4 * a, static_cast<float>(spacing[a]));
        putf(108, 352.0f);
        buf[344] = 'n';
        buf[345] = '+';
        buf[346] = '1';
    }

    void write(const std::filesystem::path& p) const {
        std::ofstream out(p, std::ios::binary);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    }
};

}  // namespace

TEST_CASE("nii round trip preserves geometry, data and orientation", "[io]") {
    testutil::TempDir td("io_rt");
    const Volume v = sample_volume();
    for (const char* name : {"v.nii", "v.nii.gz"}) {
        const auto path = (td.path / name).string();
        write_volume(v, path);
        const Volume r = read_volume(path);
        REQUIRE(r.dims == v.dims);
        REQUIRE(spacing_close(r.spacing, v.spacing));
        REQUIRE(r.data == v.data);
        REQUIRE(r.meta.qform_code == v.meta.qform_code);
        REQUIRE(r.meta.sform_code == v.meta.sform_code);
        REQUIRE(r.meta.quatern_b == v.meta.quatern_b);
        REQUIRE(r.meta.qoffset_x == v.meta.qoffset_x);
        REQUIRE(r.meta.srow_x == v.meta.srow_x);
        REQUIRE(r.meta.srow_y == v.meta.srow_y);
        REQUIRE(r.meta.srow_z == v.meta.srow_z);
        REQUIRE(r.meta.descrip == v.meta.descrip);
    }
}

TEST_CASE("writing the same volume twice is byte-identical", "[io]") {
    testutil::TempDir td("io_det");
    const Volume v = sample_volume();
    for (const char* name : {"a.nii", "a.nii.gz"}) {
        const auto p1 = td.path / name;
        const auto p2 = td.path / (std::string("copy_") + name);
        write_volume(v, p1.string());
        write_volume(v, p2.string());
        REQUIRE(testutil::read_file_bytes(p1) == testutil::read_file_bytes(p2));
    }
}

TEST_CASE("int16 data with scl_slope scaling", "[io]") {
    testutil::TempDir td("io_i16");
    RawNifti raw(8 * 2);
    raw.header(4, 16, {2, 2, 2}, {2.0, 3.0, 4.0});
    raw.putf(112, 2.5f);   // scl_slope
    raw.putf(116, 10.0f);  // scl_inter
    const std::int16_t vals[8] = {-3, -2, -1, 0, 1, 2, 3, 4};
    for (std::size_t i = 0; i < 8; ++i) raw.put16(352 + 2 * i, vals[i]);
    const auto p = td.path / "i16.nii";
    raw.write(p);

    const Volume v = read_volume(p.string());
    REQUIRE(v.dims == Dims3{2, 2, 2});
    REQUIRE(spacing_close(v.spacing, {2.0, 3.0, 4.0}));
    for (std::size_t i = 0; i < 8; ++i)
        REQUIRE(v.data[i] == static_cast<float>(vals[i]) * 2.5f + 10.0f);
}

TEST_CASE("byte-swapped files read identically", "[io]") {
    testutil::TempDir td("io_swap");
    auto build = [](bool swapped) {
        RawNifti raw(8 * 2);
        raw.swapped = swapped;
        raw.header(4, 16, {2, 2, 2}, {1.0, 1.0, 1.0});
        raw.putf(112, 1.5f);
        raw.putf(268, -7.5f);  // qoffset_x
        const std::int16_t vals[8] = {100, -200, 300, -400, 500, -600, 700, 800};
        for (std::size_t i = 0; i < 8; ++i) raw.put16(352 + 2 * i, vals[i]);
        return raw;
    };
    const auto pn = td.path / "native.nii";
    const auto ps = td.path / "swapped.nii";
    build(false).write(pn);
    build(true).write(ps);
    REQUIRE(testutil::read_file_bytes(pn) != testutil::read_file_bytes(ps));

    const Volume a = read_volume(pn.string());
    const Volume b = read_volume(ps.string());
    REQUIRE(a.data == b.data);
    REQUIRE(a.meta.qoffset_x == b.meta.qoffset_x);
    REQUIRE(b.data[1] == -200.0f * 1.5f);
}

TEST_CASE("uint8 and float64 datatypes convert to float", "[io]") {
    testutil::TempDir td("io_dt");
    {
        RawNifti raw(8);
        raw.header(2, 8, {2, 2, 2});
        for (std::size_t i = 0; i < 8; ++i) raw.buf[352 + i] = static_cast<unsigned char>(30 * i);
        const auto p = td.path / "u8.nii";
        raw.write(p);
        const Volume v = read_volume(p.string());
        REQUIRE(v.data[7] == 210.0f);
    }
    {
        RawNifti raw(8 * 8);
        raw.header(64, 64, {2, 2, 2});
        for (std::size_t i = 0; i < 8; ++i) {
            const double d = 0.125 * static_cast<double>(i) - 0.25;
            std::memcpy(raw.buf.data() + 352 + 8 * i, &d, 8);
        }
        const auto p = td.path / "f64.nii";
        raw.write(p);
        const Volume v = read_volume(p.string());
        REQUIRE(v.data[3] == 0.125f);
    }
}

TEST_CASE("zero pixdim entries fall back to unit spacing", "[io]") {
    testutil::TempDir td("io_sp0");
    RawNifti raw(8 * 2);
    raw.header(4, 16, {2, 2, 2}, {0.0, 2.0, 0.0});
    const auto p = td.path / "sp0.nii";
    raw.write(p);
    const Volume v = read_volume(p.string());
    REQUIRE(spacing_close(v.spacing, {1.0, 2.0, 1.0}));
}

TEST_CASE("nonstandard vox_offset is honored", "[io]") {
    testutil::TempDir td("io_off");
    RawNifti raw(8 * 2, 400);
    raw.header(4, 16, {2, 2, 2});
    raw.putf(108, 400.0f);
    raw.put16(400, 1234);
    const auto p = td.path / "off.nii";
    raw.write(p);
    REQUIRE(read_volume(p.string()).data[0] == 1234.0f);
}

TEST_CASE("trailing singleton dims collapse, real 4D is rejected", "[io]") {
    testutil::TempDir td("io_4d");
    {
        RawNifti raw(8 * 2);
        raw.header(4, 16, {2, 2, 2});
        raw.put16(40, 4);  // dim[0]=4 with dim[4]=1
        const auto p = td.path / "ok4d.nii";
        raw.write(p);
        REQUIRE(read_volume(p.string()).dims == Dims3{2, 2, 2});
    }
    {
        RawNifti raw(16 * 2);
        raw.header(4, 16, {2, 2, 2});
        raw.put16(40, 4);
        raw.put16(48, 2);  // dim[4]=2: two frames
        const auto p = td.path / "bad4d.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), UnsupportedError);
    }
}

TEST_CASE("read_volume error paths", "[io]") {
    testutil::TempDir td("io_err");

    SECTION("missing file") {
        REQUIRE_THROWS_AS(read_volume((td.path / "nope.nii").string()), IoError);
    }
    SECTION("truncated header") {
        const auto p = td.path / "trunc.nii";
        std::ofstream(p, std::ios::binary).write("short", 5);
        REQUIRE_THROWS_AS(read_volume(p.string()), HeaderError);
    }
    SECTION("bad sizeof_hdr") {
        RawNifti raw(8 * 2);
        raw.header(4, 16, {2, 2, 2});
        raw.put32(0, 999);
        const auto p = td.path / "badhdr.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), HeaderError);
    }
    SECTION("missing magic") {
        RawNifti raw(8 * 2);
        raw.header(4, 16, {2, 2, 2});
        raw.buf[344] = 0;
        const auto p = td.path / "nomagic.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), HeaderError);
    }
    SECTION("two-file magic") {
        RawNifti raw(8 * 2);
        raw.header(4, 16, {2, 2, 2});
        raw.buf[345] = 'i';
        raw.buf[346] = '1';
        const auto p = td.path / "pair.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), UnsupportedError);
    }
    SECTION("truncated data") {
        RawNifti raw(8 * 2 - 4);
        raw.header(4, 16, {2, 2, 2});
        const auto p = td.path / "shortdata.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), HeaderError);
    }
    SECTION("unsupported datatype") {
        RawNifti raw(8 * 3);
        raw.header(128, 24, {2, 2, 2});  // RGB24
        const auto p = td.path / "rgb.nii";
        raw.write(p);
        REQUIRE_THROWS_AS(read_volume(p.string()), UnsupportedError);
    }
    SECTION("corrupt gzip stream") {
        const auto p = td.path / "corrupt.nii.gz";
        std::ofstream out(p, std::ios::binary);
        const unsigned char bytes[] = {0x1f, 0x8b, 0x08, 0x00, 0xde, 0xad, 0xbe, 0xef, 0x00, 0x03,
                                       0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88};
        out.write(reinterpret_cast<const char*>(bytes), sizeof(bytes));
        out.close();
        REQUIRE_THROWS_AS(read_volume(p.string()), IoError);
    }
}

TEST_CASE("write_mask stores 0/1 floats in the reference geometry", "[io]") {
    testutil::TempDir td("io_mask");
    const Volume ref = sample_volume();
    MaskVolume m(ref.dims, ref.spacing);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = (i % 3 == 0) ? static_cast<std::uint8_t>(7) : static_cast<std::uint8_t>(0);

    const auto p = td.path / "mask.nii.gz";
    write_mask(m, p.string(), ref);
    const Volume r = read_volume(p.string());
    REQUIRE(r.dims == ref.dims);
    REQUIRE(r.meta.descrip == ref.meta.descrip);
    for (std::size_t i = 0; i < r.data.size(); ++i)
        REQUIRE(r.data[i] == (m.data[i] ? 1.0f : 0.0f));

    MaskVolume wrong({4, 4, 3}, ref.spacing);
    REQUIRE_THROWS_AS(write_mask(wrong, (td.path / "x.nii").string(), ref), GeometryError);
}

TEST_CASE("volume geometry validation", "[io]") {
    REQUIRE_THROWS_AS(Volume({0, 2, 2}, {1, 1, 1}), InvariantError);
    REQUIRE_THROWS_AS(Volume({2, 2, 2}, {1, 0, 1}), InvariantError);
    Volume v({2, 2, 2}, {1, 1, 1});
    v.data.pop_back();
    REQUIRE_THROWS_AS(v.validate(), InvariantError);
}
