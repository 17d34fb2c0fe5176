#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "xsplain/rng.hpp"
#include "xsplain/splat_io.hpp"

using namespace xsplain;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / ("xsplain_io_test_" + std::to_string(counter++));
    fs::create_directories(dir);
    return dir;
}

void write_raw_ply(const fs::path& path, const std::string& header, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary);
    out << header;
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
}

std::string gaussian_header(int n, const char* format = "binary_little_endian") {
    std::string h = "ply\nformat " + std::string(format) + " 1.0\nelement vertex " + std::to_string(n) + "\n";
    for (const char* f : {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                          "opacity"})
        h += "property float " + std::string(f) + "\n";
    h += "end_header\n";
    return h;
}

float max_field_deviation(const GaussianPrimitive& a, const GaussianPrimitive& b) {
    float worst = 0.0f;
    for (int i = 0; i < 3; ++i) {
        worst = std::max(worst, std::abs(a.position[i] - b.position[i]));
        worst = std::max(worst, std::abs(a.scale[i] - b.scale[i]));
    }
    for (int i = 0; i < 4; ++i) worst = std::max(worst, std::abs(a.rotation[i] - b.rotation[i]));
    return std::max(worst, std::abs(a.opacity - b.opacity));
}

} // namespace

TEST_CASE("load applies the 3DGS on-disk activations") {
    const fs::path dir = temp_dir();
    // One vertex: zero scale logits, opacity logit 0, rotation (2,0,0,0).
    write_raw_ply(dir / "one.ply", gaussian_header(1),
                  {0.5f, -1.0f, 2.0f, 0.0f, 0.0f, 0.0f, 2.0f, 0.0f, 0.0f, 0.0f, 0.0f});
    const auto prims = load_ply(dir / "one.ply", FeatureMode::Gaussian11d);
    REQUIRE(prims.size() == 1);
    CHECK(prims[0].scale[0] == doctest::Approx(1.0f));
    CHECK(prims[0].scale[1] == doctest::Approx(1.0f));
    CHECK(prims[0].scale[2] == doctest::Approx(1.0f));
    CHECK(prims[0].opacity == doctest::Approx(0.5f));
    CHECK(prims[0].rotation[0] == doctest::Approx(1.0f));
    CHECK(prims[0].rotation[1] == doctest::Approx(0.0f));
    const float qn = std::sqrt(prims[0].rotation[0] * prims[0].rotation[0] +
                               prims[0].rotation[1] * prims[0].rotation[1] +
                               prims[0].rotation[2] * prims[0].rotation[2] +
                               prims[0].rotation[3] * prims[0].rotation[3]);
    CHECK(std::abs(qn - 1.0f) < 1e-4f);
}

TEST_CASE("missing field names the field") {
    const fs::path dir = temp_dir();
    std::string h = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n";
    for (const char* f : {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"})
        h += "property float " + std::string(f) + "\n";
    h += "end_header\n";
    write_raw_ply(dir / "missing.ply", h, std::vector<float>(10, 0.0f));
    try {
        load_ply(dir / "missing.ply", FeatureMode::Gaussian11d);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("opacity") != std::string::npos);
    }
}

TEST_CASE("non-finite values carry the vertex index") {
    const fs::path dir = temp_dir();
    std::vector<float> data(22, 0.1f);
    data[6] = 1.0f; // valid quaternion for vertex 0
    data[11 + 6] = 1.0f;
    data[11 + 2] = std::numeric_limits<float>::quiet_NaN();
    write_raw_ply(dir / "nan.ply", gaussian_header(2), data);
    try {
        load_ply(dir / "nan.ply", FeatureMode::Gaussian11d);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("vertex 1") != std::string::npos);
    }
}

TEST_CASE("unknown vertex properties are skipped") {
    const fs::path dir = temp_dir();
    std::string h = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n";
    h += "property float x\nproperty float y\nproperty float z\n";
    h += "property float f_dc_0\n"; // extra field from a real splat export
    for (const char* f : {"scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"})
        h += "property float " + std::string(f) + "\n";
    h += "end_header\n";
    write_raw_ply(dir / "extra.ply", h,
                  {1.0f, 2.0f, 3.0f, 9.9f, 0.0f, 0.0f, 0.0f, 1.0f, 0.0f, 0.0f, 0.0f, 0.0f});
    const auto prims = load_ply(dir / "extra.ply", FeatureMode::Gaussian11d);
    REQUIRE(prims.size() == 1);
    CHECK(prims[0].position[2] == doctest::Approx(3.0f));
    CHECK(prims[0].opacity == doctest::Approx(0.5f));
}

TEST_CASE("point-cloud mode zero-pads the quaternion and opacity slots") {
    const fs::path dir = temp_dir();
    std::string h = "ply\nformat binary_little_endian 1.0\nelement vertex 2\n";
    for (const char* f : {"x", "y", "z", "nx", "ny", "nz"}) h += "property float " + std::string(f) + "\n";
    h += "end_header\n";
    write_raw_ply(dir / "pc.ply", h, {0, 0, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1});
    const auto prims = load_ply(dir / "pc.ply", FeatureMode::Pointcloud6d);
    REQUIRE(prims.size() == 2);
    CHECK(prims[0].scale[0] == 1.0f); // normal in the first feature slots
    CHECK(prims[1].scale[2] == 1.0f);
    for (int i = 0; i < 4; ++i) CHECK(prims[0].rotation[i] == 0.0f);
    CHECK(prims[0].opacity == 0.0f);
}

TEST_CASE("round trips are lossless to 1e-6") {
    const fs::path dir = temp_dir();
    SUBCASE("single primitive") {
        GaussianPrimitive g;
        g.position = {0.25f, -1.5f, 3.0f};
        g.scale = {0.1f, 0.2f, 0.04f};
        g.rotation = {1.0f, 0.0f, 0.0f, 0.0f};
        g.opacity = 0.75f;
        write_ply({g}, dir / "one.ply", FeatureMode::Gaussian11d);
        const auto back = load_ply(dir / "one.ply", FeatureMode::Gaussian11d);
        REQUIRE(back.size() == 1);
        CHECK(max_field_deviation(g, back[0]) < 1e-6f);
    }
    SUBCASE("512-primitive synthetic sphere, binary and ascii") {
        const LabeledSample sample = generate_synthetic("sphere", 512, 7, 4);
        for (bool binary : {true, false}) {
            const fs::path path = dir / (binary ? "sphere_b.ply" : "sphere_a.ply");
            write_ply(sample.primitives, path, FeatureMode::Gaussian11d, binary);
            const auto back = load_ply(path, FeatureMode::Gaussian11d);
            REQUIRE(back.size() == sample.primitives.size());
            float worst = 0.0f;
            for (size_t i = 0; i < back.size(); ++i)
                worst = std::max(worst, max_field_deviation(sample.primitives[i], back[i]));
            CHECK(worst < 1e-6f);
        }
    }
    SUBCASE("point-cloud mode round trip") {
        std::vector<GaussianPrimitive> prims(3);
        Rng rng(13);
        for (auto& g : prims) {
            for (int a = 0; a < 3; ++a) {
                g.position[a] = static_cast<float>(rng.uniform(-1, 1));
                g.scale[a] = static_cast<float>(rng.gaussian());
            }
        }
        write_ply(prims, dir / "pc_rt.ply", FeatureMode::Pointcloud6d);
        const auto back = load_ply(dir / "pc_rt.ply", FeatureMode::Pointcloud6d);
        REQUIRE(back.size() == 3);
        for (size_t i = 0; i < 3; ++i) CHECK(max_field_deviation(prims[i], back[i]) < 1e-6f);
    }
    SUBCASE("opacity saturated at the ends still reproduces within 1e-6") {
        GaussianPrimitive g;
        g.position = {0, 0, 0};
        g.scale = {1, 1, 1};
        g.rotation = {0, 1, 0, 0};
        g.opacity = 1.0f;
        write_ply({g}, dir / "sat.ply", FeatureMode::Gaussian11d);
        CHECK(std::abs(load_ply(dir / "sat.ply", FeatureMode::Gaussian11d)[0].opacity - 1.0f) < 1e-6f);
    }
    SUBCASE("empty sequence is an error") {
        CHECK_THROWS_AS(write_ply({}, dir / "empty.ply", FeatureMode::Gaussian11d), UsageError);
    }
}

TEST_CASE("normalize_positions maps per axis into the unit cube") {
    auto prim_at = [](float x, float y, float z) {
        GaussianPrimitive g;
        g.position = {x, y, z};
        g.scale = {1, 1, 1};
        g.rotation = {1, 0, 0, 0};
        g.opacity = 1.0f;
        return g;
    };
    SUBCASE("endpoints") {
        const auto norm = normalize_positions({prim_at(0, 0, 0), prim_at(2, 2, 2)});
        CHECK(norm[0] == std::array<float, 3>{0, 0, 0});
        CHECK(norm[1] == std::array<float, 3>{1, 1, 1});
    }
    SUBCASE("degenerate axes map to 0.5") {
        const auto norm = normalize_positions({prim_at(1, 2, 3), prim_at(1, 2, 3)});
        for (const auto& p : norm) CHECK(p == std::array<float, 3>{0.5f, 0.5f, 0.5f});
    }
    SUBCASE("hand-evaluated min-max with one degenerate axis") {
        const auto norm = normalize_positions({prim_at(-1, 0, 3), prim_at(1, 4, 3)});
        CHECK(norm[0] == std::array<float, 3>{0.0f, 0.0f, 0.5f});
        CHECK(norm[1] == std::array<float, 3>{1.0f, 1.0f, 0.5f});
    }
}

TEST_CASE("assign_voxels implements the clipped floor formula") {
    SUBCASE("hand case G=2") {
        const auto va = assign_voxels({{0.6f, 0.2f, 0.9f}}, 2);
        CHECK(va.voxel_index[0] == 5); // 1*4 + 0*2 + 1
    }
    SUBCASE("origin goes to voxel 0 for any G") {
        for (int g : {1, 2, 7, 15}) CHECK(assign_voxels({{0, 0, 0}}, g).voxel_index[0] == 0);
    }
    SUBCASE("coordinates at 1.0 clip to the last cell") {
        const auto va = assign_voxels({{1.0f, 1.0f, 1.0f}}, 2);
        CHECK(va.voxel_index[0] == 7);
    }
    SUBCASE("counts tally to the number of primitives") {
        Rng rng(5);
        std::vector<std::array<float, 3>> pts(257);
        for (auto& p : pts)
            p = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                 static_cast<float>(rng.uniform())};
        for (int g : {1, 3, 7}) {
            const auto va = assign_voxels(pts, g);
            int64_t total = 0;
            for (int32_t c : va.voxel_counts) {
                CHECK(c >= 0);
                total += c;
            }
            CHECK(total == static_cast<int64_t>(pts.size()));
            for (int32_t v : va.voxel_index) {
                CHECK(v >= 0);
                CHECK(v < g * g * g);
            }
        }
    }
    SUBCASE("stored indices reproduce exactly from stored normalized positions") {
        const LabeledSample s = generate_synthetic("torus", 256, 3, 7);
        const auto va = assign_voxels(s.normalized_positions, s.grid_size);
        CHECK(va.voxel_index == s.voxel_index);
        CHECK(va.voxel_counts == s.voxel_counts);
    }
}

TEST_CASE("synthetic generator contracts") {
    SUBCASE("determinism: same seed gives bit-identical samples") {
        const LabeledSample a = generate_synthetic("sphere", 512, 7, 7);
        const LabeledSample b = generate_synthetic("sphere", 512, 7, 7);
        REQUIRE(a.primitives.size() == b.primitives.size());
        for (size_t i = 0; i < a.primitives.size(); ++i)
            CHECK(max_field_deviation(a.primitives[i], b.primitives[i]) == 0.0f);
        CHECK(a.voxel_index == b.voxel_index);
    }
    SUBCASE("normalized positions live in the unit cube; opacity in [0.5, 1]") {
        const LabeledSample s = generate_synthetic("box", 512, 11, 7);
        for (const auto& p : s.normalized_positions)
            for (float c : p) {
                CHECK(c >= 0.0f);
                CHECK(c <= 1.0f);
            }
        for (const auto& g : s.primitives) {
            CHECK(g.opacity >= 0.5f);
            CHECK(g.opacity <= 1.0f);
            for (float sc : g.scale) CHECK(sc > 0.0f);
            float qn = 0.0f;
            for (float q : g.rotation) qn += q * q;
            CHECK(std::abs(std::sqrt(qn) - 1.0f) < 1e-4f);
        }
    }
    SUBCASE("sphere mean radial distance stays in the design range plus jitter") {
        for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL, 17ULL, 99ULL}) {
            const LabeledSample s = generate_synthetic("sphere", 512, seed, 7);
            double mean_radius = 0.0;
            for (const auto& g : s.primitives)
                mean_radius += std::sqrt(g.position[0] * g.position[0] + g.position[1] * g.position[1] +
                                         g.position[2] * g.position[2]);
            mean_radius /= static_cast<double>(s.primitives.size());
            CHECK(mean_radius > synthetic::kSphereRadiusLo - 4.0 * synthetic::kJitterSigma);
            CHECK(mean_radius < synthetic::kSphereRadiusHi + 4.0 * synthetic::kJitterSigma);
        }
    }
    SUBCASE("unknown class and too-few primitives are config errors") {
        CHECK_THROWS_AS(generate_synthetic("teapot", 512, 1, 7), ConfigError);
        CHECK_THROWS_AS(generate_synthetic("sphere", 8, 1, 7), ConfigError);
    }
}

TEST_CASE("split_dataset contracts") {
    std::vector<std::pair<std::string, int>> items;
    const std::vector<std::string> classes = {"a", "b", "c", "d"};
    for (int cls = 0; cls < 4; ++cls)
        for (int i = 0; i < 25; ++i)
            items.emplace_back(classes[static_cast<size_t>(cls)] + "_" + std::to_string(i), cls);

    SUBCASE("exact ratios on 100 samples") {
        const DatasetSplit s = split_dataset(items, {0.8, 0.1, 0.1}, 9, classes, FeatureMode::Gaussian11d);
        CHECK(s.train.size() == 80);
        CHECK(s.val.size() == 10);
        CHECK(s.test.size() == 10);
    }
    SUBCASE("determinism") {
        const DatasetSplit s1 = split_dataset(items, {0.8, 0.1, 0.1}, 9, classes, FeatureMode::Gaussian11d);
        const DatasetSplit s2 = split_dataset(items, {0.8, 0.1, 0.1}, 9, classes, FeatureMode::Gaussian11d);
        CHECK(s1.train == s2.train);
        CHECK(s1.val == s2.val);
        CHECK(s1.test == s2.test);
    }
    SUBCASE("disjoint, exhaustive, class-balanced within one") {
        std::vector<std::pair<std::string, int>> big;
        for (int cls = 0; cls < 4; ++cls)
            for (int i = 0; i < 50; ++i)
                big.emplace_back(classes[static_cast<size_t>(cls)] + std::to_string(i), cls);
        const DatasetSplit s = split_dataset(big, {0.8, 0.1, 0.1}, 3, classes, FeatureMode::Gaussian11d);
        std::set<std::string> all;
        for (const auto& id : s.train) all.insert(id);
        for (const auto& id : s.val) all.insert(id);
        for (const auto& id : s.test) all.insert(id);
        CHECK(all.size() == big.size());

        auto class_counts = [&](const std::vector<std::string>& ids) {
            std::array<int, 4> counts{};
            for (const auto& id : ids)
                for (int cls = 0; cls < 4; ++cls)
                    if (id.rfind(classes[static_cast<size_t>(cls)], 0) == 0)
                        ++counts[static_cast<size_t>(cls)];
            return counts;
        };
        for (const auto& ids : {s.train, s.val, s.test}) {
            const auto counts = class_counts(ids);
            const int lo = *std::min_element(counts.begin(), counts.end());
            const int hi = *std::max_element(counts.begin(), counts.end());
            CHECK(hi - lo <= 1);
        }
    }
    SUBCASE("ratio validation") {
        CHECK_THROWS_AS(split_dataset(items, {0.8, 0.1, 0.2}, 1, classes, FeatureMode::Gaussian11d),
                        ConfigError);
        CHECK_THROWS_AS(split_dataset(items, {0.8, -0.1, 0.3}, 1, classes, FeatureMode::Gaussian11d),
                        ConfigError);
    }
    SUBCASE("class with fewer samples than splits") {
        std::vector<std::pair<std::string, int>> tiny = {{"a_0", 0}, {"a_1", 0}, {"b_0", 1}, {"b_1", 1},
                                                         {"b_2", 1}};
        CHECK_THROWS_AS(split_dataset(tiny, {0.8, 0.1, 0.1}, 1, {"a", "b"}, FeatureMode::Gaussian11d),
                        DataError);
    }
}

TEST_CASE("manifest round trip and dataset loading") {
    const fs::path dir = temp_dir();
    DatasetManifest manifest;
    manifest.feature_mode = FeatureMode::Gaussian11d;
    manifest.class_names = {"sphere", "box"};
    std::vector<std::pair<std::string, int>> id_labels;
    for (int cls = 0; cls < 2; ++cls) {
        for (int i = 0; i < 4; ++i) {
            const std::string shape = manifest.class_names[static_cast<size_t>(cls)];
            const LabeledSample s =
                generate_synthetic(shape, 64, static_cast<uint64_t>(cls * 10 + i), 3, cls);
            const std::string id = shape + "_" + std::to_string(i);
            write_ply(s.primitives, dir / (id + ".ply"), FeatureMode::Gaussian11d);
            manifest.samples.push_back({id, id + ".ply", cls});
            id_labels.emplace_back(id, cls);
        }
    }
    manifest.split =
        split_dataset(id_labels, {0.5, 0.25, 0.25}, 3, manifest.class_names, FeatureMode::Gaussian11d);
    save_manifest(manifest, dir / "manifest.json");

    const Dataset ds = load_dataset(dir / "manifest.json", 3);
    CHECK(ds.samples.size() == 8);
    CHECK(ds.num_classes() == 2);
    CHECK(ds.grid_size == 3);
    const LabeledSample& s0 = ds.by_id("sphere_0");
    CHECK(s0.label == 0);
    CHECK(s0.grid_size == 3);
    CHECK(s0.voxel_counts.size() == 27);
    CHECK_THROWS_AS(ds.by_id("nope"), RegistryError);
}

TEST_CASE("permute_sample keeps per-primitive metadata aligned") {
    const LabeledSample s = generate_synthetic("cylinder", 64, 2, 3);
    std::vector<int32_t> perm(64);
    for (int i = 0; i < 64; ++i) perm[static_cast<size_t>(i)] = 63 - i;
    const LabeledSample r = permute_sample(s, perm);
    CHECK(r.voxel_counts == s.voxel_counts);
    for (int i = 0; i < 64; ++i) {
        CHECK(r.voxel_index[static_cast<size_t>(i)] == s.voxel_index[static_cast<size_t>(63 - i)]);
        CHECK(r.primitives[static_cast<size_t>(i)].position ==
              s.primitives[static_cast<size_t>(63 - i)].position);
    }
}
