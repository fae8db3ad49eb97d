#pragma once

// Synthetic scene harness: a deterministic ray-cast stereo renderer with
// exact ground truth, plus voxel-label file ingestion and PGM image dumps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "brg/camera.hpp"
#include "brg/ssc.hpp"
#include "brg/tensor.hpp"

namespace brg {

// ---------------------------------------------------------------------------
// synthetic scenes

// Axis-aligned box in the left-camera frame (x right, y down, z forward).
struct SceneBox {
  double x0, y0, z0, x1, y1, z1;
  int64_t label = 1;  // semantic class, 1..M
};

struct SceneSpec {
  int64_t image_h = 64, image_w = 64;
  int64_t grid_h = 16, grid_w = 16, grid_z = 8;
  int64_t class_count = 5;  // M+1
  // voxel grid spans x in [x_min,x_max), z in [z_min,z_max), y in [y_min,y_max)
  double x_min = -2.0, x_max = 2.0;
  double z_min = 1.0, z_max = 5.0;
  double y_min = -1.5, y_max = 0.5;
  std::vector<SceneBox> boxes;
};

struct SceneSample {
  std::vector<double> left, right;  // [image_h * image_w] intensities in [0,1]
  std::vector<double> depth;        // left-camera depth per pixel (0 = no hit)
  VoxelGrid gt_grid;
};

namespace scenedet {

// Procedural texture as a pure function of the 3D surface point, so the two
// views agree exactly wherever they see the same point.
inline double surface_texture(double x, double y, double z, int64_t label, uint64_t seed) {
  auto h = static_cast<uint64_t>(label) * 0x9e3779b97f4a7c15ull + seed;
  double s = std::sin(9.0 * x + 0.37 * static_cast<double>(h % 97)) *
             std::cos(7.0 * y + 0.21 * static_cast<double>(h % 89)) *
             std::sin(5.0 * z + 0.11 * static_cast<double>(h % 83));
  double base = 0.25 + 0.12 * static_cast<double>(label);
  return std::clamp(base + 0.2 * s, 0.0, 1.0);
}

struct Hit {
  double t = 0.0;     // ray parameter = depth (rays have dz = 1)
  int64_t label = 0;  // 0 = miss
  double x = 0, y = 0, z = 0;
};

// Slab intersection for a ray (ox,oy,0) + t*(dx,dy,1), t > 0.
inline bool ray_box(double ox, double oy, double dx, double dy, const SceneBox& b, double& t_hit,
                    double& hx, double& hy, double& hz) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  double o[3] = {ox, oy, 0.0};
  double dvec[3] = {dx, dy, 1.0};
  double lo[3] = {b.x0, b.y0, b.z0};
  double hi[3] = {b.x1, b.y1, b.z1};
  for (int a = 0; a < 3; ++a) {
    if (dvec[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / dvec[a];
    double tb = (hi[a] - o[a]) / dvec[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  double t = t0 > 1e-9 ? t0 : t1;
  if (t <= 1e-9) return false;
  t_hit = t;
  hx = ox + t * dx;
  hy = oy + t * dy;
  hz = t;
  return true;
}

inline Hit cast_ray(const SceneSpec& spec, double ox, double dx, double dy) {
  Hit best;
  best.t = std::numeric_limits<double>::infinity();
  for (const auto& b : spec.boxes) {
    double t, hx, hy, hz;
    if (ray_box(ox, 0.0, dx, dy, b, t, hx, hy, hz) && t < best.t) {
      best.t = t;
      best.label = b.label;
      best.x = hx;
      best.y = hy;
      best.z = hz;
    }
  }
  if (!std::isfinite(best.t)) best = Hit{};
  return best;
}

// Shade the pixel seen from a camera whose center sits at (ox, 0, 0).
inline double shade(const SceneSpec& spec, const CameraIntrinsics& cam, double ox, double u,
                    double v, uint64_t seed, double* depth_out = nullptr) {
  double dx = (u - cam.cu) / cam.fu;
  double dy = (v - cam.cv) / cam.fv;
  Hit h = cast_ray(spec, ox, dx, dy);
  if (depth_out) *depth_out = h.label ? h.t : 0.0;
  if (!h.label) return 0.05;  // background
  return surface_texture(h.x, h.y, h.z, h.label, seed);
}

}  // namespace scenedet

// Default scene content: a ground slab plus a few labeled boxes, jittered by
// the seed but always inside the voxel grid bounds.
inline SceneSpec make_scene_spec(uint64_t seed, int64_t class_count = 5) {
  SceneSpec spec;
  spec.class_count = class_count;
  Rng rng(seed);
  // ground plane as a thin box, label 1
  spec.boxes.push_back({-4.0, 0.3, 0.5, 4.0, 0.5, 8.0, 1});
  int64_t n_boxes = 3 + static_cast<int64_t>(rng.next_unit() * 3.0);  // 3..5
  for (int64_t i = 0; i < n_boxes; ++i) {
    double cx = -1.4 + 2.8 * rng.next_unit();
    double cz = 1.6 + 2.6 * rng.next_unit();
    double sx = 0.3 + 0.5 * rng.next_unit();
    double sz = 0.3 + 0.5 * rng.next_unit();
    double h = 0.4 + 0.8 * rng.next_unit();
    int64_t label = 1 + static_cast<int64_t>(rng.next_unit() * static_cast<double>(class_count - 1));
    label = std::min<int64_t>(label, class_count - 1);
    spec.boxes.push_back({cx - sx, 0.3 - h, cz - sz, cx + sx, 0.3, cz + sz, label});
  }
  return spec;
}

// Voxelize by point-in-box test at voxel centers; exact for axis-aligned
// boxes, giving ground truth that is consistent with the renderer.
inline VoxelGrid voxelize_scene(const SceneSpec& spec) {
  VoxelGrid g = VoxelGrid::make(spec.grid_h, spec.grid_w, spec.grid_z, spec.class_count);
  double dx = (spec.x_max - spec.x_min) / static_cast<double>(spec.grid_w);
  double dz = (spec.z_max - spec.z_min) / static_cast<double>(spec.grid_h);
  double dy = (spec.y_max - spec.y_min) / static_cast<double>(spec.grid_z);
  for (int64_t ih = 0; ih < spec.grid_h; ++ih)
    for (int64_t iw = 0; iw < spec.grid_w; ++iw)
      for (int64_t iz = 0; iz < spec.grid_z; ++iz) {
        double z = spec.z_min + (static_cast<double>(ih) + 0.5) * dz;
        double x = spec.x_min + (static_cast<double>(iw) + 0.5) * dx;
        double y = spec.y_max - (static_cast<double>(iz) + 0.5) * dy;  // z axis = up
        uint16_t label = 0;
        for (const auto& b : spec.boxes)
          if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 && z >= b.z0 && z < b.z1)
            label = static_cast<uint16_t>(b.label);
        g.labels[static_cast<size_t>((ih * spec.grid_w + iw) * spec.grid_z + iz)] = label;
      }
  return g;
}

// Sample the renderer at possibly fractional pixel coordinates of either view.
inline double render_at(const SceneSpec& spec, const CameraRig& rig, bool right_view, double u,
                        double v, uint64_t seed) {
  double ox = right_view ? rig.baseline : 0.0;
  const CameraIntrinsics& cam = right_view ? rig.right : rig.left;
  return scenedet::shade(spec, cam, ox, u, v, seed);
}

inline SceneSample render_scene(const SceneSpec& spec, const CameraRig& rig, uint64_t seed) {
  SceneSample s;
  int64_t n = spec.image_h * spec.image_w;
  s.left.resize(static_cast<size_t>(n));
  s.right.resize(static_cast<size_t>(n));
  s.depth.resize(static_cast<size_t>(n));
  for (int64_t v = 0; v < spec.image_h; ++v)
    for (int64_t u = 0; u < spec.image_w; ++u) {
      size_t i = static_cast<size_t>(v * spec.image_w + u);
      double d = 0.0;
      s.left[i] = scenedet::shade(spec, rig.left, 0.0, static_cast<double>(u),
                                  static_cast<double>(v), seed, &d);
      s.depth[i] = d;
      s.right[i] = scenedet::shade(spec, rig.right, rig.baseline, static_cast<double>(u),
                                   static_cast<double>(v), seed);
    }
  s.gt_grid = voxelize_scene(spec);
  return s;
}

// ---------------------------------------------------------------------------
// voxel label files (u16 LE row-major labels + optional MSB-first bitmask)

inline void write_voxel_labels(const std::string& path, const VoxelGrid& g,
                               const std::function<uint16_t(uint16_t)>& to_raw = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (uint16_t lab : g.labels) {
    uint16_t raw = to_raw ? to_raw(lab) : lab;
    char b[2] = {static_cast<char>(raw & 0xff), static_cast<char>((raw >> 8) & 0xff)};
    f.write(b, 2);
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline void write_invalid_mask(const std::string& path, const VoxelGrid& g) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  size_t nbytes = (g.invalid_mask.size() + 7) / 8;
  std::vector<uint8_t> buf(nbytes, 0);
  for (size_t i = 0; i < g.invalid_mask.size(); ++i)
    if (g.invalid_mask[i]) buf[i / 8] |= static_cast<uint8_t>(0x80u >> (i % 8));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Reads u16 LE labels, remapping each raw id through `remap` (raw id ->
// contiguous class index). Unknown raw ids raise an error naming the id.
// If `invalid_path` is nonempty the MSB-first bitmask is applied.
inline VoxelGrid read_voxel_labels(const std::string& path, int64_t h, int64_t w, int64_t z,
                                   int64_t class_count,
                                   const std::map<uint16_t, uint16_t>& remap,
                                   const std::string& invalid_path = "") {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  int64_t n = h * w * z;
  if (static_cast<int64_t>(bytes.size()) != n * 2)
    throw std::runtime_error("label file " + path + ": expected " + std::to_string(n * 2) +
                             " bytes, got " + std::to_string(bytes.size()));
  VoxelGrid g = VoxelGrid::make(h, w, z, class_count);
  for (int64_t i = 0; i < n; ++i) {
    uint16_t raw = static_cast<uint16_t>(static_cast<uint8_t>(bytes[static_cast<size_t>(2 * i)]) |
                                         (static_cast<uint8_t>(bytes[static_cast<size_t>(2 * i + 1)])
                                          << 8));
    auto it = remap.find(raw);
    if (it == remap.end())
      throw std::runtime_error("label file " + path + ": unmapped label id " + std::to_string(raw));
    g.labels[static_cast<size_t>(i)] = it->second;
  }
  if (!invalid_path.empty()) {
    std::ifstream fi(invalid_path, std::ios::binary);
    if (!fi) throw std::runtime_error("cannot open: " + invalid_path);
    std::vector<char> mb((std::istreambuf_iterator<char>(fi)), std::istreambuf_iterator<char>());
    size_t expect = (static_cast<size_t>(n) + 7) / 8;
    if (mb.size() != expect)
      throw std::runtime_error("invalid mask " + invalid_path + ": expected " +
                               std::to_string(expect) + " bytes, got " + std::to_string(mb.size()));
    for (int64_t i = 0; i < n; ++i)
      if (static_cast<uint8_t>(mb[static_cast<size_t>(i / 8)]) & (0x80u >> (i % 8)))
        g.invalid_mask[static_cast<size_t>(i)] = 1;
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// PGM (binary P5) image dumps

inline void write_pgm(const std::string& path, const std::vector<double>& img, int64_t h,
                      int64_t w) {
  if (static_cast<int64_t>(img.size()) != h * w)
    throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (double v : img) {
    int iv = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    f.put(static_cast<char>(iv));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace brg
