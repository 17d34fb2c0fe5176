#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "xsplain/errors.hpp"

namespace xsplain {

enum class FeatureMode { Gaussian11d, Pointcloud6d };

std::string to_string(FeatureMode mode);
FeatureMode feature_mode_from_string(const std::string& name);

// One splat, geometric attributes only. In gaussian-11d mode the fields are
// the activated 3DGS attributes (linear scale, sigmoid opacity, unit
// quaternion). In pointcloud-6d mode the scale slots carry the surface
// normal and the quaternion/opacity slots stay zero, so one 11-wide input
// layout serves both modes.
struct GaussianPrimitive {
    std::array<float, 3> position{};
    std::array<float, 3> scale{};
    std::array<float, 4> rotation{};
    float opacity = 0.0f;
};

// A normalized, voxelized cloud with its label. The voxel index of each
// primitive is assigned once from the stored normalized positions and is
// never recomputed downstream.
struct LabeledSample {
    std::string id;
    std::vector<GaussianPrimitive> primitives;
    int label = -1;
    std::vector<std::array<float, 3>> normalized_positions;
    std::vector<int32_t> voxel_index;
    std::vector<int32_t> voxel_counts; // length grid_size^3
    int grid_size = 0;

    int64_t size() const { return static_cast<int64_t>(primitives.size()); }
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;
    std::vector<std::string> class_names;
    FeatureMode feature_mode = FeatureMode::Gaussian11d;
};

// On-disk index of a dataset: ids, file paths, labels and the split.
struct DatasetManifest {
    struct Entry {
        std::string id;
        std::string path; // relative to the manifest's directory
        int label = -1;
    };
    FeatureMode feature_mode = FeatureMode::Gaussian11d;
    std::vector<std::string> class_names;
    std::vector<Entry> samples;
    DatasetSplit split;
};

// Fully loaded dataset, voxelized for one grid size.
struct Dataset {
    DatasetManifest manifest;
    std::vector<LabeledSample> samples;
    std::unordered_map<std::string, size_t> index_by_id;
    int grid_size = 0;

    const LabeledSample& by_id(const std::string& id) const;
    int num_classes() const { return static_cast<int>(manifest.class_names.size()); }
};

// --- PLY ---------------------------------------------------------------

// Reads a binary-little-endian or ASCII PLY. gaussian-11d expects the 3DGS
// vertex fields x,y,z,scale_0..2,rot_0..3,opacity and applies the on-disk
// activations (exp on scales, sigmoid on opacity, quaternion renorm);
// pointcloud-6d expects x,y,z,nx,ny,nz and zero-pads the remaining feature
// slots. Unknown vertex properties are skipped.
std::vector<GaussianPrimitive> load_ply(const std::filesystem::path& path, FeatureMode mode);

// Inverse of load_ply: stores log scales and logit opacities so a
// round-trip reproduces every field to 1e-6.
void write_ply(const std::vector<GaussianPrimitive>& primitives, const std::filesystem::path& path,
               FeatureMode mode, bool binary = true);

// --- Normalization and voxelization --------------------------------------

// Per-axis min-max map into the unit cube; a degenerate axis maps to 0.5.
std::vector<std::array<float, 3>> normalize_positions(const std::vector<GaussianPrimitive>& primitives);

struct VoxelAssignment {
    std::vector<int32_t> voxel_index;
    std::vector<int32_t> voxel_counts; // length grid_size^3
};

// v = floor(x*G)*G^2 + floor(y*G)*G + floor(z*G), each floor clipped to
// [0, G-1].
VoxelAssignment assign_voxels(const std::vector<std::array<float, 3>>& normalized, int grid_size);

LabeledSample make_labeled_sample(std::string id, std::vector<GaussianPrimitive> primitives, int label,
                                  int grid_size);

// --- Synthetic data -------------------------------------------------------

namespace synthetic {
inline const std::vector<std::string> kClasses = {"sphere", "box", "torus", "cylinder"};
// Shape parameters are drawn per sample from these design ranges. The
// ranges overlap across classes, every sample gets a uniform random
// orientation, and an occlusion sector of the surface is left unsampled
// (scan-style partial coverage), so classification has to rest on
// localized geometry (hole, caps, corners) rather than bounding-box
// statistics.
constexpr float kJitterSigma = 0.10f;
// Surface directions u with dot(u, occlusion_dir) >= t are dropped;
// t ~ U[lo, hi], so roughly 28%-60% of the surface is hidden per sample.
constexpr float kOcclusionLo = -0.20f, kOcclusionHi = 0.45f;
constexpr float kSphereRadiusLo = 0.55f, kSphereRadiusHi = 0.90f;
constexpr float kBoxHalfLo = 0.38f, kBoxHalfHi = 0.72f;
constexpr float kTorusMajorLo = 0.45f, kTorusMajorHi = 0.70f;
// Minor radius as a fraction of the major one; the upper end nearly closes
// the hole, which makes those tori genuinely sphere-like under jitter.
constexpr float kTorusMinorRatioLo = 0.55f, kTorusMinorRatioHi = 0.92f;
constexpr float kCylinderRadiusLo = 0.38f, kCylinderRadiusHi = 0.70f;
constexpr float kCylinderHalfHeightLo = 0.38f, kCylinderHalfHeightHi = 0.80f;
} // namespace synthetic

// Splats sampled on the surface of one of the four synthetic classes, with
// tangent-aligned anisotropic scales and opacity in [0.5, 1]. Deterministic
// for a fixed seed. label defaults to the index in synthetic::kClasses.
LabeledSample generate_synthetic(const std::string& shape, int n_primitives, uint64_t seed, int grid_size,
                                 int label = -1);

// --- Splits and manifests -------------------------------------------------

// Stratified split, deterministic for a fixed seed. Ratios must be positive
// and sum to 1; every class must have at least as many samples as splits.
DatasetSplit split_dataset(const std::vector<std::pair<std::string, int>>& id_labels,
                           const std::array<double, 3>& ratios, uint64_t seed,
                           const std::vector<std::string>& class_names, FeatureMode mode);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Loads every referenced PLY, normalizes and voxelizes at the given grid
// size.
Dataset load_dataset(const std::filesystem::path& manifest_path, int grid_size);

// Reorders the primitives of a sample (with all per-primitive metadata) by
// the given permutation; permutation[i] is the old index of new row i.
LabeledSample permute_sample(const LabeledSample& sample, const std::vector<int32_t>& permutation);

} // namespace xsplain
