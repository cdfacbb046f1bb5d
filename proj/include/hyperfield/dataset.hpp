// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/forward_maps.hpp"
#include "hyperfield/image.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hyperfield {

enum class PrimitiveKind { sphere, box };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Constant(0.5);  // radius in x for spheres, half extents for boxes
  Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.7);
};

using Scene = std::vector<Primitive>;

struct SceneSpec {
  std::vector<std::string> classes{"spheres", "boxes", "composites"};
  Index objects_per_class = 10;
  Index views_per_object = 8;
  Index image_size = 32;
  double ring_radius = 2.0;
  double min_elevation_deg = 10.0;
  double max_elevation_deg = 40.0;
  double focal_scale = 1.2;    // focal = focal_scale * image_size
  Index march_samples = 1024;  // occupancy samples per ray for ground truth
  double test_fraction = 0.2;  // per class, taken from the end
};

/// Camera on a ring around the origin, looking at it with +y up.
Camera ring_camera(double radius, double azimuth_rad, double elevation_rad, double focal, Index size);

bool occupied(const Scene& scene, const Eigen::Vector3d& p);

/// Ground-truth image by fine occupancy marching along each pixel ray.
/// Hits are shaded albedo * (0.6 + 0.4 n_y); misses take the background.
Image render_scene(const Scene& scene, const Camera& cam, double near, double far, Index march_samples,
                   bool white_bg = true);

Scene random_scene(const std::string& klass, std::uint64_t seed);

struct ViewRecord {
  Camera camera;
  std::string file;
};

struct ObjectRecord {
  Index id = 0;
  std::string klass;
  std::string split;
  std::vector<ViewRecord> views;
};

struct ClipRecord {
  Index id = 0;
  std::string split;
  std::string file;
};

struct Dataset {
  std::filesystem::path root;
  std::map<std::string, std::string> header;
  std::vector<ObjectRecord> objects;
  std::vector<ClipRecord> clips;

  std::string task() const;
  Index image_size() const;
  Index sample_rate() const;
  Index clip_length() const;
  std::vector<std::string> classes() const;

  Image load_view(const ObjectRecord& obj, std::size_t view) const;
  std::vector<float> load_clip(const ClipRecord& clip) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

void generate_nvs_dataset(const SceneSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);

struct AudioSpec {
  Index clips = 8;
  Index sample_rate = 16000;
  double duration = 1.0;
  double min_freq = 20.0;
  double max_freq = 120.0;
  Index min_components = 2;
  Index max_components = 5;
  double test_fraction = 0.25;
  double tone_hz = 0.0;  // nonzero: every clip is this single pure tone
};

std::vector<float> synth_clip(const AudioSpec& spec, std::uint64_t seed);
void generate_audio_dataset(const AudioSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);

void write_f32(const std::vector<float>& samples, const std::filesystem::path& path);
std::vector<float> read_f32(const std::filesystem::path& path);

std::uint64_t instance_seed(std::uint64_t seed, Index index);

}  // namespace hyperfield
