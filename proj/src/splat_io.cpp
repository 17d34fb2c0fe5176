#include "xsplain/splat_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xsplain/rng.hpp"

namespace xsplain {

using json = nlohmann::json;

std::string to_string(FeatureMode mode) {
    return mode == FeatureMode::Gaussian11d ? "gaussian-11d" : "pointcloud-6d";
}

FeatureMode feature_mode_from_string(const std::string& name) {
    if (name == "gaussian-11d") return FeatureMode::Gaussian11d;
    if (name == "pointcloud-6d") return FeatureMode::Pointcloud6d;
    throw ConfigError("unknown feature mode '" + name + "' (expected gaussian-11d or pointcloud-6d)");
}

const LabeledSample& Dataset::by_id(const std::string& id) const {
    auto it = index_by_id.find(id);
    if (it == index_by_id.end()) throw RegistryError("sample id '" + id + "' not present in dataset");
    return samples[it->second];
}

// --- PLY ---------------------------------------------------------------

namespace {

struct PlyProperty {
    std::string name;
    int byte_size = 0;
    bool is_float = false;
    bool is_double = false;
};

struct PlyHeader {
    bool binary = false;
    int64_t vertex_count = 0;
    std::vector<PlyProperty> properties;
    int64_t stride = 0;
};

int property_size(const std::string& type) {
    if (type == "char" || type == "int8" || type == "uchar" || type == "uint8") return 1;
    if (type == "short" || type == "int16" || type == "ushort" || type == "uint16") return 2;
    if (type == "int" || type == "int32" || type == "uint" || type == "uint32") return 4;
    if (type == "float" || type == "float32") return 4;
    if (type == "double" || type == "float64") return 8;
    return 0;
}

PlyHeader parse_ply_header(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
    if (line == "ply\r") line = "ply";
    if (line != "ply") throw FormatError(path.string() + ": missing 'ply' magic");

    PlyHeader header;
    bool in_vertex_element = false;
    bool seen_vertex = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment" || tok.empty()) continue;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "binary_little_endian")
                header.binary = true;
            else if (fmt == "ascii")
                header.binary = false;
            else
                throw FormatError(path.string() + ": unsupported PLY format '" + fmt + "'");
        } else if (tok == "element") {
            std::string name;
            int64_t count = 0;
            ls >> name >> count;
            if (name == "vertex") {
                if (seen_vertex) throw FormatError(path.string() + ": duplicate vertex element");
                seen_vertex = true;
                in_vertex_element = true;
                header.vertex_count = count;
            } else {
                if (!seen_vertex)
                    throw FormatError(path.string() + ": vertex element must come first, found '" + name + "'");
                in_vertex_element = false; // trailing elements are ignored
            }
        } else if (tok == "property") {
            if (!in_vertex_element) continue;
            std::string type;
            ls >> type;
            if (type == "list") throw FormatError(path.string() + ": list properties not supported on vertices");
            PlyProperty prop;
            prop.byte_size = property_size(type);
            if (prop.byte_size == 0)
                throw FormatError(path.string() + ": unknown property type '" + type + "'");
            prop.is_float = (type == "float" || type == "float32");
            prop.is_double = (type == "double" || type == "float64");
            ls >> prop.name;
            header.properties.push_back(prop);
        } else if (tok == "end_header") {
            if (!seen_vertex) throw FormatError(path.string() + ": no vertex element");
            for (const auto& p : header.properties) header.stride += p.byte_size;
            return header;
        }
    }
    throw FormatError(path.string() + ": unterminated header");
}

std::vector<std::string> mode_fields(FeatureMode mode) {
    if (mode == FeatureMode::Gaussian11d)
        return {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"};
    return {"x", "y", "z", "nx", "ny", "nz"};
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

float logit(float p) {
    const float lo = 1e-7f;
    p = std::clamp(p, lo, 1.0f - lo);
    return std::log(p / (1.0f - p));
}

GaussianPrimitive primitive_from_raw(const float* f, FeatureMode mode, int64_t vertex,
                                     const std::filesystem::path& path) {
    const int n = mode == FeatureMode::Gaussian11d ? 11 : 6;
    for (int i = 0; i < n; ++i)
        if (!std::isfinite(f[i]))
            throw DataError(path.string() + ": non-finite value at vertex " + std::to_string(vertex));
    GaussianPrimitive g;
    g.position = {f[0], f[1], f[2]};
    if (mode == FeatureMode::Gaussian11d) {
        g.scale = {std::exp(f[3]), std::exp(f[4]), std::exp(f[5])};
        float qn = std::sqrt(f[6] * f[6] + f[7] * f[7] + f[8] * f[8] + f[9] * f[9]);
        if (qn == 0.0f)
            throw DataError(path.string() + ": zero-norm quaternion at vertex " + std::to_string(vertex));
        g.rotation = {f[6] / qn, f[7] / qn, f[8] / qn, f[9] / qn};
        g.opacity = sigmoid(f[10]);
    } else {
        g.scale = {f[3], f[4], f[5]};
        g.rotation = {0.0f, 0.0f, 0.0f, 0.0f};
        g.opacity = 0.0f;
    }
    return g;
}

} // namespace

std::vector<GaussianPrimitive> load_ply(const std::filesystem::path& path, FeatureMode mode) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    PlyHeader header = parse_ply_header(in, path);

    const std::vector<std::string> wanted = mode_fields(mode);
    std::vector<int> slot_of_property(header.properties.size(), -1);
    std::vector<bool> found(wanted.size(), false);
    for (size_t p = 0; p < header.properties.size(); ++p) {
        for (size_t w = 0; w < wanted.size(); ++w) {
            if (header.properties[p].name == wanted[w]) {
                slot_of_property[p] = static_cast<int>(w);
                found[w] = true;
            }
        }
    }
    for (size_t w = 0; w < wanted.size(); ++w)
        if (!found[w])
            throw FormatError(path.string() + ": missing vertex field '" + wanted[w] + "' for " +
                              to_string(mode) + " mode");

    std::vector<GaussianPrimitive> out;
    out.reserve(static_cast<size_t>(header.vertex_count));
    std::vector<float> raw(wanted.size(), 0.0f);

    if (header.binary) {
        std::vector<char> row(static_cast<size_t>(header.stride));
        for (int64_t v = 0; v < header.vertex_count; ++v) {
            in.read(row.data(), header.stride);
            if (!in) throw FormatError(path.string() + ": truncated at vertex " + std::to_string(v));
            int64_t off = 0;
            for (size_t p = 0; p < header.properties.size(); ++p) {
                const auto& prop = header.properties[p];
                if (slot_of_property[p] >= 0) {
                    float value = 0.0f;
                    if (prop.is_float) {
                        std::memcpy(&value, row.data() + off, 4);
                    } else if (prop.is_double) {
                        double d;
                        std::memcpy(&d, row.data() + off, 8);
                        value = static_cast<float>(d);
                    } else {
                        throw FormatError(path.string() + ": field '" + prop.name + "' must be float or double");
                    }
                    raw[static_cast<size_t>(slot_of_property[p])] = value;
                }
                off += prop.byte_size;
            }
            out.push_back(primitive_from_raw(raw.data(), mode, v, path));
        }
    } else {
        std::string line;
        for (int64_t v = 0; v < header.vertex_count; ++v) {
            if (!std::getline(in, line))
                throw FormatError(path.string() + ": truncated at vertex " + std::to_string(v));
            std::istringstream ls(line);
            for (size_t p = 0; p < header.properties.size(); ++p) {
                double value;
                if (!(ls >> value))
                    throw FormatError(path.string() + ": bad ASCII vertex at line for vertex " + std::to_string(v));
                if (slot_of_property[p] >= 0)
                    raw[static_cast<size_t>(slot_of_property[p])] = static_cast<float>(value);
            }
            out.push_back(primitive_from_raw(raw.data(), mode, v, path));
        }
    }
    return out;
}

void write_ply(const std::vector<GaussianPrimitive>& primitives, const std::filesystem::path& path,
               FeatureMode mode, bool binary) {
    if (primitives.empty()) throw UsageError("write_ply: empty primitive sequence");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");

    const std::vector<std::string> fields = mode_fields(mode);
    out << "ply\n";
    out << "format " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    out << "element vertex " << primitives.size() << "\n";
    for (const auto& f : fields) out << "property float " << f << "\n";
    out << "end_header\n";

    std::vector<float> raw(fields.size());
    for (const auto& g : primitives) {
        raw[0] = g.position[0];
        raw[1] = g.position[1];
        raw[2] = g.position[2];
        if (mode == FeatureMode::Gaussian11d) {
            for (int i = 0; i < 3; ++i) {
                if (!(g.scale[static_cast<size_t>(i)] > 0.0f))
                    throw DataError("write_ply: non-positive scale component");
                raw[static_cast<size_t>(3 + i)] = std::log(g.scale[static_cast<size_t>(i)]);
            }
            for (int i = 0; i < 4; ++i) raw[static_cast<size_t>(6 + i)] = g.rotation[static_cast<size_t>(i)];
            raw[10] = logit(g.opacity);
        } else {
            for (int i = 0; i < 3; ++i) raw[static_cast<size_t>(3 + i)] = g.scale[static_cast<size_t>(i)];
        }
        if (binary) {
            out.write(reinterpret_cast<const char*>(raw.data()),
                      static_cast<std::streamsize>(raw.size() * sizeof(float)));
        } else {
            for (size_t i = 0; i < raw.size(); ++i) {
                char buf[48];
                std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(raw[i]));
                out << (i ? " " : "") << buf;
            }
            out << "\n";
        }
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// --- Normalization and voxelization --------------------------------------

std::vector<std::array<float, 3>> normalize_positions(const std::vector<GaussianPrimitive>& primitives) {
    if (primitives.empty()) throw UsageError("normalize_positions: empty primitive sequence");
    std::array<float, 3> lo = primitives[0].position;
    std::array<float, 3> hi = primitives[0].position;
    for (const auto& g : primitives)
        for (int a = 0; a < 3; ++a) {
            lo[static_cast<size_t>(a)] = std::min(lo[static_cast<size_t>(a)], g.position[static_cast<size_t>(a)]);
            hi[static_cast<size_t>(a)] = std::max(hi[static_cast<size_t>(a)], g.position[static_cast<size_t>(a)]);
        }
    std::vector<std::array<float, 3>> out(primitives.size());
    for (size_t i = 0; i < primitives.size(); ++i)
        for (int a = 0; a < 3; ++a) {
            const float span = hi[static_cast<size_t>(a)] - lo[static_cast<size_t>(a)];
            out[i][static_cast<size_t>(a)] =
                span > 0.0f ? (primitives[i].position[static_cast<size_t>(a)] - lo[static_cast<size_t>(a)]) / span
                            : 0.5f;
        }
    return out;
}

VoxelAssignment assign_voxels(const std::vector<std::array<float, 3>>& normalized, int grid_size) {
    if (grid_size < 1) throw ConfigError("assign_voxels: grid size must be >= 1");
    VoxelAssignment out;
    out.voxel_index.resize(normalized.size());
    out.voxel_counts.assign(static_cast<size_t>(grid_size) * grid_size * grid_size, 0);
    const auto cell = [grid_size](float x) {
        int c = static_cast<int>(std::floor(x * static_cast<float>(grid_size)));
        return std::clamp(c, 0, grid_size - 1);
    };
    for (size_t i = 0; i < normalized.size(); ++i) {
        const int32_t v = static_cast<int32_t>(cell(normalized[i][0]) * grid_size * grid_size +
                                               cell(normalized[i][1]) * grid_size + cell(normalized[i][2]));
        out.voxel_index[i] = v;
        ++out.voxel_counts[static_cast<size_t>(v)];
    }
    return out;
}

LabeledSample make_labeled_sample(std::string id, std::vector<GaussianPrimitive> primitives, int label,
                                  int grid_size) {
    LabeledSample s;
    s.id = std::move(id);
    s.primitives = std::move(primitives);
    s.label = label;
    s.grid_size = grid_size;
    s.normalized_positions = normalize_positions(s.primitives);
    VoxelAssignment va = assign_voxels(s.normalized_positions, grid_size);
    s.voxel_index = std::move(va.voxel_index);
    s.voxel_counts = std::move(va.voxel_counts);
    return s;
}

// --- Synthetic data -------------------------------------------------------

namespace {

using Vec3 = std::array<float, 3>;

Vec3 rotate(const std::array<std::array<float, 3>, 3>& m, const Vec3& v) {
    Vec3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[static_cast<size_t>(i)] += m[static_cast<size_t>(i)][static_cast<size_t>(j)] * v[static_cast<size_t>(j)];
    return r;
}

std::array<std::array<float, 3>, 3> rotation_about(const Vec3& axis, float angle) {
    const float c = std::cos(angle), s = std::sin(angle), t = 1.0f - c;
    const float x = axis[0], y = axis[1], z = axis[2];
    return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
             {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
             {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

// Column frame [t1 t2 n] to a unit quaternion (w, x, y, z).
std::array<float, 4> frame_to_quaternion(const Vec3& t1, const Vec3& t2, const Vec3& n) {
    const float m00 = t1[0], m01 = t2[0], m02 = n[0];
    const float m10 = t1[1], m11 = t2[1], m12 = n[1];
    const float m20 = t1[2], m21 = t2[2], m22 = n[2];
    float w, x, y, z;
    const float tr = m00 + m11 + m22;
    if (tr > 0.0f) {
        const float s = std::sqrt(tr + 1.0f) * 2.0f;
        w = 0.25f * s;
        x = (m21 - m12) / s;
        y = (m02 - m20) / s;
        z = (m10 - m01) / s;
    } else if (m00 > m11 && m00 > m22) {
        const float s = std::sqrt(1.0f + m00 - m11 - m22) * 2.0f;
        w = (m21 - m12) / s;
        x = 0.25f * s;
        y = (m01 + m10) / s;
        z = (m02 + m20) / s;
    } else if (m11 > m22) {
        const float s = std::sqrt(1.0f + m11 - m00 - m22) * 2.0f;
        w = (m02 - m20) / s;
        x = (m01 + m10) / s;
        y = 0.25f * s;
        z = (m12 + m21) / s;
    } else {
        const float s = std::sqrt(1.0f + m22 - m00 - m11) * 2.0f;
        w = (m10 - m01) / s;
        x = (m02 + m20) / s;
        y = (m12 + m21) / s;
        z = 0.25f * s;
    }
    const float qn = std::sqrt(w * w + x * x + y * y + z * z);
    return {w / qn, x / qn, y / qn, z / qn};
}

Vec3 normalized_or(const Vec3& v, const Vec3& fallback) {
    const float n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n < 1e-8f) return fallback;
    return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 any_tangent(const Vec3& n) {
    const Vec3 ref = std::abs(n[2]) < 0.9f ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
    const Vec3 t{n[1] * ref[2] - n[2] * ref[1], n[2] * ref[0] - n[0] * ref[2], n[0] * ref[1] - n[1] * ref[0]};
    return normalized_or(t, {1, 0, 0});
}

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

struct SurfacePoint {
    Vec3 position;
    Vec3 normal;
};

SurfacePoint sample_sphere(Rng& rng, float radius) {
    Vec3 u{static_cast<float>(rng.gaussian()), static_cast<float>(rng.gaussian()),
           static_cast<float>(rng.gaussian())};
    u = normalized_or(u, {1, 0, 0});
    return {{radius * u[0], radius * u[1], radius * u[2]}, u};
}

SurfacePoint sample_box(Rng& rng, const Vec3& half) {
    const float areas[3] = {half[1] * half[2], half[0] * half[2], half[0] * half[1]};
    const float total = areas[0] + areas[1] + areas[2];
    float pick = static_cast<float>(rng.uniform()) * total;
    int axis = 0;
    while (axis < 2 && pick > areas[axis]) {
        pick -= areas[axis];
        ++axis;
    }
    const float sign = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    Vec3 p{};
    Vec3 n{};
    p[static_cast<size_t>(axis)] = sign * half[static_cast<size_t>(axis)];
    n[static_cast<size_t>(axis)] = sign;
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    p[static_cast<size_t>(a1)] = static_cast<float>(rng.uniform(-half[static_cast<size_t>(a1)], half[static_cast<size_t>(a1)]));
    p[static_cast<size_t>(a2)] = static_cast<float>(rng.uniform(-half[static_cast<size_t>(a2)], half[static_cast<size_t>(a2)]));
    return {p, n};
}

SurfacePoint sample_torus(Rng& rng, float major, float minor) {
    // Rejection on the ring angle keeps the sampling area-uniform.
    const float pi = std::numbers::pi_v<float>;
    float theta = 0.0f;
    for (;;) {
        theta = static_cast<float>(rng.uniform(0.0, 2.0 * pi));
        const float w = (major + minor * std::cos(theta)) / (major + minor);
        if (rng.uniform() <= w) break;
    }
    const float phi = static_cast<float>(rng.uniform(0.0, 2.0 * pi));
    const Vec3 n{std::cos(phi) * std::cos(theta), std::sin(phi) * std::cos(theta), std::sin(theta)};
    const Vec3 p{(major + minor * std::cos(theta)) * std::cos(phi),
                 (major + minor * std::cos(theta)) * std::sin(phi), minor * std::sin(theta)};
    return {p, n};
}

SurfacePoint sample_cylinder(Rng& rng, float radius, float half_height) {
    const float pi = std::numbers::pi_v<float>;
    const float side_area = 2.0f * pi * radius * 2.0f * half_height;
    const float cap_area = pi * radius * radius;
    const float pick = static_cast<float>(rng.uniform()) * (side_area + 2.0f * cap_area);
    if (pick < side_area) {
        const float phi = static_cast<float>(rng.uniform(0.0, 2.0 * pi));
        const float h = static_cast<float>(rng.uniform(-half_height, half_height));
        return {{radius * std::cos(phi), radius * std::sin(phi), h}, {std::cos(phi), std::sin(phi), 0.0f}};
    }
    const float sign = pick < side_area + cap_area ? 1.0f : -1.0f;
    const float r = radius * std::sqrt(static_cast<float>(rng.uniform()));
    const float phi = static_cast<float>(rng.uniform(0.0, 2.0 * pi));
    return {{r * std::cos(phi), r * std::sin(phi), sign * half_height}, {0.0f, 0.0f, sign}};
}

} // namespace

LabeledSample generate_synthetic(const std::string& shape, int n_primitives, uint64_t seed, int grid_size,
                                 int label) {
    const auto it = std::find(synthetic::kClasses.begin(), synthetic::kClasses.end(), shape);
    if (it == synthetic::kClasses.end())
        throw ConfigError("generate_synthetic: unknown class '" + shape + "'");
    if (n_primitives < 32) throw ConfigError("generate_synthetic: need at least 32 primitives");
    const int canonical = static_cast<int>(it - synthetic::kClasses.begin());
    if (label < 0) label = canonical;

    Rng rng(seed ^ (0x5851f42d4c957f2dULL * static_cast<uint64_t>(canonical + 1)));
    namespace sy = synthetic;

    // Per-sample shape parameters.
    const float sphere_r = static_cast<float>(rng.uniform(sy::kSphereRadiusLo, sy::kSphereRadiusHi));
    const Vec3 box_half{static_cast<float>(rng.uniform(sy::kBoxHalfLo, sy::kBoxHalfHi)),
                        static_cast<float>(rng.uniform(sy::kBoxHalfLo, sy::kBoxHalfHi)),
                        static_cast<float>(rng.uniform(sy::kBoxHalfLo, sy::kBoxHalfHi))};
    const float torus_major = static_cast<float>(rng.uniform(sy::kTorusMajorLo, sy::kTorusMajorHi));
    const float torus_minor =
        torus_major * static_cast<float>(rng.uniform(sy::kTorusMinorRatioLo, sy::kTorusMinorRatioHi));
    const float cyl_r = static_cast<float>(rng.uniform(sy::kCylinderRadiusLo, sy::kCylinderRadiusHi));
    const float cyl_h = static_cast<float>(rng.uniform(sy::kCylinderHalfHeightLo, sy::kCylinderHalfHeightHi));

    // Per-sample pose: uniform random orientation (axis from an isotropic
    // gaussian, angle uniform).
    const float pi = std::numbers::pi_v<float>;
    Vec3 pose_axis{static_cast<float>(rng.gaussian()), static_cast<float>(rng.gaussian()),
                   static_cast<float>(rng.gaussian())};
    pose_axis = normalized_or(pose_axis, {0, 0, 1});
    const float pose_angle = static_cast<float>(rng.uniform(0.0, 2.0 * pi));
    const auto pose = rotation_about(pose_axis, pose_angle);

    // Occlusion sector in shape-local coordinates.
    Vec3 occ_dir{static_cast<float>(rng.gaussian()), static_cast<float>(rng.gaussian()),
                 static_cast<float>(rng.gaussian())};
    occ_dir = normalized_or(occ_dir, {1, 0, 0});
    const float occ_threshold = static_cast<float>(rng.uniform(sy::kOcclusionLo, sy::kOcclusionHi));

    std::vector<GaussianPrimitive> prims;
    prims.reserve(static_cast<size_t>(n_primitives));
    for (int i = 0; i < n_primitives; ++i) {
        SurfacePoint sp;
        for (;;) {
            switch (canonical) {
            case 0: sp = sample_sphere(rng, sphere_r); break;
            case 1: sp = sample_box(rng, box_half); break;
            case 2: sp = sample_torus(rng, torus_major, torus_minor); break;
            default: sp = sample_cylinder(rng, cyl_r, cyl_h); break;
            }
            const Vec3 u = normalized_or(sp.position, {1, 0, 0});
            if (u[0] * occ_dir[0] + u[1] * occ_dir[1] + u[2] * occ_dir[2] < occ_threshold) break;
        }
        sp.position = rotate(pose, sp.position);
        sp.normal = rotate(pose, sp.normal);

        GaussianPrimitive g;
        for (int a = 0; a < 3; ++a)
            g.position[static_cast<size_t>(a)] =
                sp.position[static_cast<size_t>(a)] + static_cast<float>(rng.gaussian(0.0, sy::kJitterSigma));
        const Vec3 t1 = any_tangent(sp.normal);
        const Vec3 t2 = cross(sp.normal, t1);
        g.rotation = frame_to_quaternion(t1, t2, sp.normal);
        g.scale = {static_cast<float>(rng.uniform(0.04, 0.09)), static_cast<float>(rng.uniform(0.04, 0.09)),
                   static_cast<float>(rng.uniform(0.008, 0.02))};
        g.opacity = static_cast<float>(rng.uniform(0.5, 1.0));
        prims.push_back(g);
    }

    std::ostringstream id;
    id << shape << "_" << seed;
    return make_labeled_sample(id.str(), std::move(prims), label, grid_size);
}

// --- Splits and manifests -------------------------------------------------

DatasetSplit split_dataset(const std::vector<std::pair<std::string, int>>& id_labels,
                           const std::array<double, 3>& ratios, uint64_t seed,
                           const std::vector<std::string>& class_names, FeatureMode mode) {
    double sum = 0.0;
    for (double r : ratios) {
        if (r <= 0.0) throw ConfigError("split_dataset: ratios must be positive");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_dataset: ratios must sum to 1");

    std::vector<std::vector<std::string>> per_class(class_names.size());
    for (const auto& [id, label] : id_labels) {
        if (label < 0 || label >= static_cast<int>(class_names.size()))
            throw DataError("split_dataset: label " + std::to_string(label) + " for sample '" + id +
                            "' outside class list");
        per_class[static_cast<size_t>(label)].push_back(id);
    }

    DatasetSplit split;
    split.class_names = class_names;
    split.feature_mode = mode;
    Rng rng(seed);
    // Remainder ties go to the split furthest below its global target, so
    // the overall counts land on the exact ratios when they divide evenly.
    std::array<int64_t, 3> global_taken{};
    std::array<double, 3> global_target{};
    for (int s = 0; s < 3; ++s)
        global_target[static_cast<size_t>(s)] =
            ratios[static_cast<size_t>(s)] * static_cast<double>(id_labels.size());
    for (size_t cls = 0; cls < per_class.size(); ++cls) {
        auto& ids = per_class[cls];
        if (ids.size() < 3)
            throw DataError("split_dataset: class '" + class_names[cls] + "' has " +
                            std::to_string(ids.size()) + " samples, fewer than the 3 splits");
        std::sort(ids.begin(), ids.end());
        rng.shuffle(ids);

        const auto n = static_cast<int64_t>(ids.size());
        std::array<int64_t, 3> take{};
        std::array<double, 3> frac{};
        int64_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = ratios[static_cast<size_t>(s)] * static_cast<double>(n);
            take[static_cast<size_t>(s)] = static_cast<int64_t>(std::floor(exact));
            frac[static_cast<size_t>(s)] = exact - std::floor(exact);
            assigned += take[static_cast<size_t>(s)];
        }
        while (assigned < n) {
            int best = 0;
            // Tolerant comparisons: the fractional parts land a few ulp
            // apart depending on how the compiler contracts the products.
            constexpr double kTieEps = 1e-9;
            for (int s = 1; s < 3; ++s) {
                const auto su = static_cast<size_t>(s);
                const auto bu = static_cast<size_t>(best);
                const double deficit_s =
                    global_target[su] - static_cast<double>(global_taken[su] + take[su]);
                const double deficit_b =
                    global_target[bu] - static_cast<double>(global_taken[bu] + take[bu]);
                if (frac[su] > frac[bu] + kTieEps ||
                    (std::abs(frac[su] - frac[bu]) <= kTieEps && deficit_s > deficit_b + kTieEps))
                    best = s;
            }
            ++take[static_cast<size_t>(best)];
            frac[static_cast<size_t>(best)] = -1.0;
            ++assigned;
        }
        if (take[0] == 0)
            throw DataError("split_dataset: class '" + class_names[cls] + "' would have no training samples");
        for (int s = 0; s < 3; ++s) global_taken[static_cast<size_t>(s)] += take[static_cast<size_t>(s)];

        size_t pos = 0;
        for (int64_t i = 0; i < take[0]; ++i) split.train.push_back(ids[pos++]);
        for (int64_t i = 0; i < take[1]; ++i) split.val.push_back(ids[pos++]);
        for (int64_t i = 0; i < take[2]; ++i) split.test.push_back(ids[pos++]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    json j;
    j["version"] = 1;
    j["feature_mode"] = to_string(manifest.feature_mode);
    j["class_names"] = manifest.class_names;
    j["samples"] = json::array();
    for (const auto& e : manifest.samples)
        j["samples"].push_back({{"id", e.id}, {"path", e.path}, {"label", e.label}});
    j["split"] = {{"train", manifest.split.train}, {"val", manifest.split.val}, {"test", manifest.split.test}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    DatasetManifest m;
    try {
        if (j.at("version").get<int>() != 1)
            throw FormatError(path.string() + ": unsupported manifest version");
        m.feature_mode = feature_mode_from_string(j.at("feature_mode").get<std::string>());
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        for (const auto& e : j.at("samples")) {
            DatasetManifest::Entry entry;
            entry.id = e.at("id").get<std::string>();
            entry.path = e.at("path").get<std::string>();
            entry.label = e.at("label").get<int>();
            m.samples.push_back(std::move(entry));
        }
        m.split.train = j.at("split").at("train").get<std::vector<std::string>>();
        m.split.val = j.at("split").at("val").get<std::vector<std::string>>();
        m.split.test = j.at("split").at("test").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    m.split.class_names = m.class_names;
    m.split.feature_mode = m.feature_mode;
    return m;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, int grid_size) {
    Dataset ds;
    ds.manifest = load_manifest(manifest_path);
    ds.grid_size = grid_size;
    const auto base = manifest_path.parent_path();
    ds.samples.reserve(ds.manifest.samples.size());
    for (const auto& entry : ds.manifest.samples) {
        auto prims = load_ply(base / entry.path, ds.manifest.feature_mode);
        ds.samples.push_back(make_labeled_sample(entry.id, std::move(prims), entry.label, grid_size));
        ds.index_by_id[entry.id] = ds.samples.size() - 1;
    }
    return ds;
}

LabeledSample permute_sample(const LabeledSample& sample, const std::vector<int32_t>& permutation) {
    if (permutation.size() != sample.primitives.size())
        throw UsageError("permute_sample: permutation size mismatch");
    LabeledSample out = sample;
    for (size_t i = 0; i < permutation.size(); ++i) {
        const auto src = static_cast<size_t>(permutation[i]);
        out.primitives[i] = sample.primitives[src];
        out.normalized_positions[i] = sample.normalized_positions[src];
        out.voxel_index[i] = sample.voxel_index[src];
    }
    return out;
}

} // namespace xsplain
