#pragma once

// Stereo calibration, disparity/depth conversion and the flat camera
// parameter vector consumed by the BEV constructor.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "brg/config.hpp"
#include "brg/tensor.hpp"

namespace brg {

// Disparities below this are rejected: z = fu*b/D is singular at D = 0.
inline constexpr double kEpsilonDisparity = 1e-6;

struct CameraIntrinsics {
  double fu = 0.0, fv = 0.0;  // focal lengths, pixels
  double cu = 0.0, cv = 0.0;  // principal point, pixels

  void validate() const {
    if (fu <= 0.0 || fv <= 0.0) throw std::invalid_argument("intrinsics: focal lengths must be positive");
  }
};

struct CameraRig {
  CameraIntrinsics left;
  CameraIntrinsics right;
  double baseline = 0.0;                        // meters
  std::array<double, 16> extrinsics = {1, 0, 0, 0,   // left-camera pose in the
                                       0, 1, 0, 0,   // voxel-grid frame, row-major
                                       0, 0, 1, 0,
                                       0, 0, 0, 1};

  void validate() const {
    left.validate();
    right.validate();
    if (baseline <= 0.0) throw std::invalid_argument("rig: baseline must be positive");
    if (extrinsics[12] != 0.0 || extrinsics[13] != 0.0 || extrinsics[14] != 0.0 ||
        extrinsics[15] != 1.0)
      throw std::invalid_argument("rig: extrinsics bottom row must be [0,0,0,1]");
  }

  static CameraRig from_config(const Config& c) {
    CameraRig rig;
    rig.left.fu = rig.right.fu = c.get_double("fu");
    rig.left.fv = rig.right.fv = c.get_double("fv");
    rig.left.cu = rig.right.cu = c.get_double("cu");
    rig.left.cv = rig.right.cv = c.get_double("cv");
    rig.baseline = c.get_double("baseline");
    if (c.has("extrinsics")) {
      auto e = c.get_vector("extrinsics");
      if (e.size() != 16) throw std::runtime_error("config: extrinsics needs 16 entries");
      for (size_t i = 0; i < 16; ++i) rig.extrinsics[i] = e[i];
    }
    rig.validate();
    return rig;
  }
};

struct DepthBins {
  double d_min = 0.0, d_max = 0.0;  // meters
  int64_t count = 0;

  void validate() const {
    if (!(0.0 < d_min && d_min < d_max)) throw std::invalid_argument("depth bins: need 0 < d_min < d_max");
    if (count < 1) throw std::invalid_argument("depth bins: count must be positive");
  }

  // Uniform-in-depth centers covering [d_min, d_max] endpoints exactly.
  double center(int64_t i) const {
    if (count == 1) return d_min;
    return d_min + (d_max - d_min) * static_cast<double>(i) / static_cast<double>(count - 1);
  }

  std::vector<double> centers() const {
    std::vector<double> c(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) c[static_cast<size_t>(i)] = center(i);
    return c;
  }

  // Index of the center nearest to z; ties round down.
  int64_t nearest_bin(double z) const {
    int64_t best = 0;
    double bd = std::abs(z - center(0));
    for (int64_t i = 1; i < count; ++i) {
      double d = std::abs(z - center(i));
      if (d < bd) { bd = d; best = i; }
    }
    return best;
  }
};

inline double disparity_to_depth(double disparity, const CameraRig& rig) {
  if (disparity <= kEpsilonDisparity)
    throw std::invalid_argument("disparity_to_depth: disparity below epsilon");
  return rig.left.fu * rig.baseline / disparity;
}

inline double depth_to_disparity(double z, const CameraRig& rig) {
  if (z <= 0.0) throw std::invalid_argument("depth_to_disparity: depth must be positive");
  return rig.left.fu * rig.baseline / z;
}

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline Point3 backproject(double u, double v, double z, const CameraIntrinsics& intr) {
  if (z <= 0.0) throw std::invalid_argument("backproject: depth must be positive");
  return {(u - intr.cu) * z / intr.fu, (v - intr.cv) * z / intr.fv, z};
}

// Fixed layout [fu, fv, cu, cv, b, 16 extrinsic entries row-major], length 21.
inline Tensor assemble_params(const CameraRig& rig) {
  std::vector<double> p;
  p.reserve(21);
  p.push_back(rig.left.fu);
  p.push_back(rig.left.fv);
  p.push_back(rig.left.cu);
  p.push_back(rig.left.cv);
  p.push_back(rig.baseline);
  for (double e : rig.extrinsics) p.push_back(e);
  return Tensor::from({21}, std::move(p));
}

}  // namespace brg
