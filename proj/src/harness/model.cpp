// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "actc/harness/config.hpp"

namespace actc {

namespace {

struct Extent {
  size_t h = 0, w = 0;
};

size_t to_size(const std::string& tok, const std::string& layer) {
  size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || tok.empty()) {
    throw ConfigError("model: bad number '" + tok + "' in " + layer);
  }
  return size_t(v);
}

Extent to_extent(const std::string& tok, const std::string& layer) {
  const auto x = tok.find('x');
  if (x == std::string::npos) {
    const size_t k = to_size(tok, layer);
    return {k, k};
  }
  return {to_size(tok.substr(0, x), layer), to_size(tok.substr(x + 1), layer)};
}

}  // namespace

std::vector<std::unique_ptr<Layer>> parse_layers(const std::string& spec) {
  std::vector<std::unique_ptr<Layer>> layers;
  std::istringstream in(spec);
  std::string tok;
  while (in >> tok) {
    const auto open = tok.find('(');
    const std::string name = tok.substr(0, open);
    std::vector<std::string> args;
    if (open != std::string::npos) {
      if (tok.back() != ')') throw ConfigError("model: missing ')' in " + tok);
      std::stringstream a(tok.substr(open + 1, tok.size() - open - 2));
      std::string item;
      while (std::getline(a, item, ',')) args.push_back(item);
    }
    auto need = [&](size_t lo, size_t hi) {
      if (args.size() < lo || args.size() > hi) {
        throw ConfigError("model: " + tok + " takes " + std::to_string(lo) + ".." +
                          std::to_string(hi) + " arguments");
      }
    };
    try {
      if (name == "linear") {
        need(2, 2);
        layers.push_back(std::make_unique<Linear>(to_size(args[0], tok), to_size(args[1], tok)));
      } else if (name == "conv") {
        need(3, 6);
        Conv2dGeometry g;
        g.in_channels = to_size(args[0], tok);
        g.out_channels = to_size(args[1], tok);
        const Extent k = to_extent(args[2], tok);
        g.kernel_h = k.h;
        g.kernel_w = k.w;
        if (args.size() > 3) g.stride = to_size(args[3], tok);
        if (args.size() > 4) g.padding = to_size(args[4], tok);
        if (args.size() > 5) g.groups = to_size(args[5], tok);
        layers.push_back(std::make_unique<Conv2d>(g));
      } else if (name == "bn") {
        need(1, 1);
        layers.push_back(std::make_unique<BatchNorm>(to_size(args[0], tok)));
      } else if (name == "relu") {
        need(0, 0);
        layers.push_back(std::make_unique<ReLU>());
      } else if (name == "maxpool" || name == "avgpool") {
        need(1, 2);
        const Extent k = to_extent(args[0], tok);
        PoolGeometry g{k.h, k.w, args.size() > 1 ? to_size(args[1], tok) : k.h};
        if (name == "maxpool") {
          layers.push_back(std::make_unique<MaxPool2d>(g));
        } else {
          layers.push_back(std::make_unique<AvgPool2d>(g));
        }
      } else {
        throw ConfigError("model: unknown layer '" + name + "'");
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError("model: " + tok + ": " + e.what());
    }
  }
  if (layers.empty()) throw ConfigError("model: no layers in '" + spec + "'");
  return layers;
}

std::string expand_model(const std::string& spec, const Shape& s, size_t outputs) {
  const size_t d = shape_numel(s);
  std::ostringstream os;
  if (spec == "mlp") {
    os << "linear(" << d << ",128) relu linear(128," << outputs << ")";
  } else if (spec == "quadratic") {
    os << "linear(" << d << "," << outputs << ")";
  } else if (spec == "cnn" || spec == "block") {
    if (s.size() != 3) {
      throw ConfigError("model " + spec + " needs a [C, H, W] input_shape, got " + shape_str(s));
    }
    if (spec == "block") {
      os << "conv(" << s[0] << "," << s[0] << ",3,1,1) bn(" << s[0] << ") relu";
    } else {
      const size_t h = s[1] / 2 / 2, w = s[2] / 2 / 2;
      if (h == 0 || w == 0) throw ConfigError("model cnn needs inputs of at least 4x4");
      os << "conv(" << s[0] << ",8,3,1,1) bn(8) relu maxpool(2,2) conv(8,16,3,1,1) bn(16) relu "
         << "avgpool(2,2) linear(" << 16 * h * w << "," << outputs << ")";
    }
  } else {
    return spec;
  }
  return os.str();
}

void init_weights(GraphExecutor& exec, uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (size_t i = 0; i < exec.size(); ++i) {
    Layer& layer = exec.layer(i);
    if (layer.kind() != LayerKind::kLinear && layer.kind() != LayerKind::kConv2d) continue;
    Tensor& w = layer.params()[0];
    const size_t fan_in =
        layer.kind() == LayerKind::kLinear ? w.dim(0) : w.dim(1) * w.dim(2) * w.dim(3);
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : w.data()) v = float(u(rng));
    for (size_t p = 1; p < layer.params().size(); ++p) {
      for (auto& v : layer.params()[p].data()) v = 0.0f;
    }
  }
}

GraphExecutor build_model(const std::string& spec, const Shape& sample_shape, size_t outputs,
                          uint64_t seed) {
  GraphExecutor exec(parse_layers(expand_model(spec, sample_shape, outputs)));
  init_weights(exec, seed);
  return exec;
}

}  // namespace actc
