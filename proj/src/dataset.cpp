// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace hyperfield {

namespace fs = std::filesystem;

std::uint64_t instance_seed(std::uint64_t seed, Index index) {
  return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(index + 1));
}

Camera ring_camera(double radius, double azimuth, double elevation, double focal, Index size) {
  const Eigen::Vector3d pos(radius * std::cos(elevation) * std::cos(azimuth), radius * std::sin(elevation),
                            radius * std::cos(elevation) * std::sin(azimuth));
  const Eigen::Vector3d z = pos.normalized();  // camera looks down -z, towards the origin
  const Eigen::Vector3d x = Eigen::Vector3d::UnitY().cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Camera cam;
  cam.pose.setIdentity();
  cam.pose.block<3, 1>(0, 0) = x;
  cam.pose.block<3, 1>(0, 1) = y;
  cam.pose.block<3, 1>(0, 2) = z;
  cam.pose.block<3, 1>(0, 3) = pos;
  cam.focal = focal;
  cam.width = size;
  cam.height = size;
  return cam;
}

namespace {

bool inside(const Primitive& p, const Eigen::Vector3d& x) {
  const Eigen::Vector3d d = x - p.center;
  if (p.kind == PrimitiveKind::sphere) return d.squaredNorm() <= p.size.x() * p.size.x();
  return (d.array().abs() <= p.size.array()).all();
}

Eigen::Vector3d normal_at(const Primitive& p, const Eigen::Vector3d& x) {
  const Eigen::Vector3d d = x - p.center;
  if (p.kind == PrimitiveKind::sphere) return d.normalized();
  Eigen::Index axis = 0;
  (d.array().abs() / p.size.array()).maxCoeff(&axis);
  Eigen::Vector3d n = Eigen::Vector3d::Zero();
  n(axis) = d(axis) < 0 ? -1.0 : 1.0;
  return n;
}

const Primitive* hit_primitive(const Scene& scene, const Eigen::Vector3d& x) {
  for (const auto& p : scene) {
    if (inside(p, x)) return &p;
  }
  return nullptr;
}

}  // namespace

bool occupied(const Scene& scene, const Eigen::Vector3d& p) { return hit_primitive(scene, p) != nullptr; }

Image render_scene(const Scene& scene, const Camera& cam, double near, double far, Index march_samples,
                   bool white_bg) {
  Image img(cam.height, cam.width, 3, white_bg ? 1.0f : 0.0f);
  if (scene.empty()) return img;
  const RayBatch rays = make_rays(cam, all_pixels(cam), near, far);
  const double step = (far - near) / static_cast<double>(march_samples);
  for (Index r = 0; r < rays.size(); ++r) {
    const Eigen::Vector3d o = rays.origins.row(r).transpose();
    const Eigen::Vector3d d = rays.directions.row(r).transpose();
    double prev = near;
    for (Index k = 0; k < march_samples; ++k) {
      const double t = near + (static_cast<double>(k) + 0.5) * step;
      if (!occupied(scene, o + t * d)) {
        prev = t;
        continue;
      }
      // Bisect the last free/occupied interval for the surface point.
      double lo = prev, hi = t;
      for (int it = 0; it < 30; ++it) {
        const double mid = 0.5 * (lo + hi);
        (occupied(scene, o + mid * d) ? hi : lo) = mid;
      }
      const Eigen::Vector3d x = o + hi * d;
      const Primitive* p = hit_primitive(scene, x);
      const double shade = 0.6 + 0.4 * normal_at(*p, x).y();
      for (Index c = 0; c < 3; ++c) {
        img.pixels[static_cast<std::size_t>(r * 3 + c)] = static_cast<float>(p->albedo(c) * shade);
      }
      break;
    }
  }
  return img;
}

Scene random_scene(const std::string& klass, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  auto albedo = [&] { return Eigen::Vector3d(range(0.15, 0.9), range(0.15, 0.9), range(0.15, 0.9)); };
  auto jitter = [&](double s) { return Eigen::Vector3d(range(-s, s), range(-s, s), range(-s, s)); };
  Scene scene;
  if (klass == "spheres") {
    scene.push_back({PrimitiveKind::sphere, jitter(0.15), Eigen::Vector3d::Constant(range(0.35, 0.6)), albedo()});
  } else if (klass == "boxes") {
    scene.push_back({PrimitiveKind::box, jitter(0.15),
                     Eigen::Vector3d(range(0.2, 0.45), range(0.2, 0.45), range(0.2, 0.45)), albedo()});
  } else if (klass == "composites") {
    const Eigen::Vector3d offset(range(-0.3, 0.3), range(-0.2, 0.2), range(-0.3, 0.3));
    scene.push_back({PrimitiveKind::box, -0.5 * offset, Eigen::Vector3d(range(0.2, 0.35), range(0.2, 0.35),
                                                                        range(0.2, 0.35)),
                     albedo()});
    scene.push_back({PrimitiveKind::sphere, offset + Eigen::Vector3d(0.0, 0.2, 0.0),
                     Eigen::Vector3d::Constant(range(0.25, 0.4)), albedo()});
  } else {
    throw std::invalid_argument("unknown object class '" + klass + "'");
  }
  return scene;
}

void write_f32(const std::vector<float>& samples, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (float v : samples) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    os.write(b, 4);
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<float> read_f32(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw std::runtime_error(path.string() + ": size is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[k * 4 + i])) << (8 * i);
    out[k] = std::bit_cast<float>(bits);
  }
  return out;
}

std::vector<float> synth_clip(const AudioSpec& spec, std::uint64_t seed) {
  const auto n = static_cast<Index>(std::llround(spec.duration * static_cast<double>(spec.sample_rate)));
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double rate = static_cast<double>(spec.sample_rate);
  if (spec.tone_hz > 0.0) {
    for (Index i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] = std::sin(two_pi * spec.tone_hz * i / rate);
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<Index> count(spec.min_components, spec.max_components);
    const Index k = count(rng);
    for (Index c = 0; c < k; ++c) {
      const bool chirp = u(rng) < 0.3;
      const double f0 = spec.min_freq + (spec.max_freq - spec.min_freq) * u(rng);
      const double f1 = chirp ? spec.min_freq + (spec.max_freq - spec.min_freq) * u(rng) : f0;
      const double amp = 0.3 + 0.7 * u(rng);
      const double phase = two_pi * u(rng);
      for (Index i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / rate;
        const double arg = two_pi * (f0 * t + 0.5 * (f1 - f0) * t * t / spec.duration) + phase;
        acc[static_cast<std::size_t>(i)] += amp * std::sin(arg);
      }
    }
  }
  double peak = 0.0;
  for (double v : acc) peak = std::max(peak, std::abs(v));
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(peak > 0.0 ? acc[i] / peak : 0.0);
  return out;
}

namespace {

std::string pose_string(const Eigen::Matrix4d& pose) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) os << (r + c == 0 ? "" : ",") << pose(r, c);
  }
  return os.str();
}

Eigen::Matrix4d parse_pose(const std::string& s) {
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
  std::istringstream is(s);
  std::string item;
  int k = 0;
  while (std::getline(is, item, ',')) {
    if (k >= 12) throw std::runtime_error("pose has more than 12 entries");
    pose(k / 4, k % 4) = std::stod(item);
    ++k;
  }
  if (k != 12) throw std::runtime_error("pose needs 12 entries");
  return pose;
}

std::string split_for(Index index, Index count, double test_fraction) {
  const auto test = static_cast<Index>(std::floor(test_fraction * static_cast<double>(count)));
  return index >= count - test ? "test" : "train";
}

void write_manifest(const fs::path& dir, const std::string& body) {
  const fs::path tmp = dir / "manifest.txt.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << body;
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, dir / "manifest.txt");
}

}  // namespace

void generate_nvs_dataset(const SceneSpec& spec, std::uint64_t seed, const fs::path& dir) {
  if (spec.image_size < 1 || spec.views_per_object < 1) throw std::invalid_argument("empty dataset spec");
  fs::create_directories(dir);
  const double focal = spec.focal_scale * static_cast<double>(spec.image_size);
  const double near = std::max(1e-3, spec.ring_radius - std::sqrt(3.0));
  const double far = spec.ring_radius + std::sqrt(3.0);
  std::ostringstream m;
  m << std::setprecision(17);
  m << "# hyperfield synthetic dataset\n";
  m << "format = hyperfield-dataset-1\n";
  m << "task = nvs\n";
  m << "image_size = " << spec.image_size << "\n";
  m << "focal = " << focal << "\n";
  m << "views = " << spec.views_per_object << "\n";
  m << "classes = ";
  for (std::size_t c = 0; c < spec.classes.size(); ++c) m << (c ? "," : "") << spec.classes[c];
  m << "\n";
  m << "seed = " << seed << "\n";

  Index id = 0;
  for (const auto& klass : spec.classes) {
    for (Index i = 0; i < spec.objects_per_class; ++i, ++id) {
      std::mt19937_64 rng(instance_seed(seed, id));
      const Scene scene = random_scene(klass, rng());
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double az0 = 2.0 * std::numbers::pi * u(rng);
      m << "object id=" << id << " class=" << klass << " split=" << split_for(i, spec.objects_per_class, spec.test_fraction)
        << "\n";
      for (Index v = 0; v < spec.views_per_object; ++v) {
        const double az = az0 + 2.0 * std::numbers::pi * static_cast<double>(v) / static_cast<double>(spec.views_per_object);
        const double el = (spec.min_elevation_deg + (spec.max_elevation_deg - spec.min_elevation_deg) * u(rng)) *
                          std::numbers::pi / 180.0;
        const Camera cam = ring_camera(spec.ring_radius, az, el, focal, spec.image_size);
        std::ostringstream name;
        name << "obj" << std::setw(4) << std::setfill('0') << id << "_view" << std::setw(2) << v << ".ppm";
        write_ppm(render_scene(scene, cam, near, far, spec.march_samples), dir / name.str());
        m << "view object=" << id << " index=" << v << " file=" << name.str() << " pose=" << pose_string(cam.pose)
          << "\n";
      }
    }
  }
  write_manifest(dir, m.str());
}

void generate_audio_dataset(const AudioSpec& spec, std::uint64_t seed, const fs::path& dir) {
  if (spec.clips < 1 || spec.sample_rate < 1 || spec.duration <= 0.0) throw std::invalid_argument("empty audio spec");
  fs::create_directories(dir);
  std::ostringstream m;
  m << "# hyperfield synthetic dataset\n";
  m << "format = hyperfield-dataset-1\n";
  m << "task = audio\n";
  m << "sample_rate = " << spec.sample_rate << "\n";
  m << "length = " << std::llround(spec.duration * static_cast<double>(spec.sample_rate)) << "\n";
  m << "seed = " << seed << "\n";
  for (Index i = 0; i < spec.clips; ++i) {
    std::ostringstream name;
    name << "clip" << std::setw(4) << std::setfill('0') << i << ".f32";
    write_f32(synth_clip(spec, instance_seed(seed, i)), dir / name.str());
    m << "clip id=" << i << " split=" << split_for(i, spec.clips, spec.test_fraction) << " file=" << name.str() << "\n";
  }
  write_manifest(dir, m.str());
}

namespace {

std::map<std::string, std::string> record_fields(std::istringstream& is, const std::string& where) {
  std::map<std::string, std::string> f;
  std::string item;
  while (is >> item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::runtime_error(where + ": expected key=value, got '" + item + "'");
    f[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return f;
}

const std::string& field(const std::map<std::string, std::string>& f, const std::string& key,
                         const std::string& where) {
  auto it = f.find(key);
  if (it == f.end()) throw std::runtime_error(where + ": missing '" + key + "'");
  return it->second;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset manifest " + path.string());
  Dataset ds;
  ds.root = dir;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) {
      ds.header[trim(line.substr(0, eq))] = trim(line.substr(eq + 3));
      continue;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    const auto f = record_fields(ls, where);
    try {
      if (kind == "object") {
        ObjectRecord o;
        o.id = std::stoll(field(f, "id", where));
        o.klass = field(f, "class", where);
        o.split = field(f, "split", where);
        if (o.id != static_cast<Index>(ds.objects.size())) throw std::runtime_error(where + ": object ids out of order");
        ds.objects.push_back(o);
      } else if (kind == "view") {
        const Index obj = std::stoll(field(f, "object", where));
        if (obj < 0 || obj >= static_cast<Index>(ds.objects.size())) throw std::runtime_error(where + ": unknown object");
        ViewRecord v;
        v.file = field(f, "file", where);
        v.camera.pose = parse_pose(field(f, "pose", where));
        v.camera.focal = std::stod(ds.header.at("focal"));
        v.camera.width = v.camera.height = std::stoll(ds.header.at("image_size"));
        ds.objects[static_cast<std::size_t>(obj)].views.push_back(v);
      } else if (kind == "clip") {
        ClipRecord c;
        c.id = std::stoll(field(f, "id", where));
        c.split = field(f, "split", where);
        c.file = field(f, "file", where);
        ds.clips.push_back(c);
      } else {
        throw std::runtime_error(where + ": unknown record '" + kind + "'");
      }
    } catch (const std::out_of_range&) {
      throw std::runtime_error(where + ": record precedes required header keys");
    } catch (const std::invalid_argument&) {
      throw std::runtime_error(where + ": malformed number");
    }
  }
  if (ds.header.count("task") == 0) throw std::runtime_error(path.string() + ": missing 'task'");
  return ds;
}

std::string Dataset::task() const { return header.at("task"); }
Index Dataset::image_size() const { return std::stoll(header.at("image_size")); }
Index Dataset::sample_rate() const { return std::stoll(header.at("sample_rate")); }
Index Dataset::clip_length() const { return std::stoll(header.at("length")); }

std::vector<std::string> Dataset::classes() const {
  std::vector<std::string> out;
  for (const auto& o : objects) {
    if (std::find(out.begin(), out.end(), o.klass) == out.end()) out.push_back(o.klass);
  }
  return out;
}

Image Dataset::load_view(const ObjectRecord& obj, std::size_t view) const {
  return read_ppm(root / obj.views.at(view).file);
}

std::vector<float> Dataset::load_clip(const ClipRecord& clip) const {
  auto samples = read_f32(root / clip.file);
  if (header.count("length") != 0 && static_cast<Index>(samples.size()) != clip_length()) {
    throw std::runtime_error(clip.file + ": expected " + header.at("length") + " samples");
  }
  return samples;
}

}  // namespace hyperfield
