#pragma once

// Named trainable parameters. Registration order is the optimizer's
// iteration order, so runs are reproducible.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "brg/config.hpp"
#include "brg/tensor.hpp"
#include "brg/vol_io.hpp"

namespace brg {

class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 1) : rng_(seed) {}

  // Uniform(-b, b) with b = sqrt(3 / fan_in); biases and other fan_in==0
  // tensors start at zero.
  Tensor add(const std::string& name, const Shape& shape, int64_t fan_in) {
    for (auto& [n, t] : params_)
      if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor t;
    if (fan_in > 0) {
      double b = std::sqrt(3.0 / static_cast<double>(fan_in));
      t = random_uniform(shape, -b, b, rng_, true);
    } else {
      t = Tensor::zeros(shape, true);
    }
    params_.emplace_back(name, t);
    return t;
  }

  Tensor get(const std::string& name) const {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw std::invalid_argument("unknown parameter: " + name);
  }

  std::vector<std::pair<std::string, Tensor>>& all() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& all() const { return params_; }

  void zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  // One VOL1 file per parameter plus a key-value manifest listing them.
  void save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream man(dir + "/manifest.cfg");
    if (!man) throw std::runtime_error("cannot write manifest in " + dir);
    man << "# weight manifest: name = file\n";
    for (const auto& [n, t] : params_) {
      std::string file = n + ".vol";
      vol_write(dir + "/" + file, t);
      man << n << " = " << file << "\n";
    }
  }

  void load(const std::string& dir) {
    Config man = Config::load(dir + "/manifest.cfg");
    for (auto& [n, t] : params_) {
      Tensor loaded = vol_read(dir + "/" + man.get_string(n));
      if (loaded.shape() != t.shape())
        throw std::runtime_error("weight " + n + " has shape " + shape_str(loaded.shape()) +
                                 ", expected " + shape_str(t.shape()));
      t.values() = loaded.values();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  Rng rng_;
};

}  // namespace brg
