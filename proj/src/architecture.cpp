#include "ulp/architecture.hpp"

#include <cmath>

#include "ulp/errors.hpp"
#include "ulp/rng.hpp"

namespace ulp {

using nlohmann::json;
using nn::Shape3;

std::string to_string(ArchFamily f) {
  return f == ArchFamily::VggLike ? "vgg-like" : "resnet-like";
}

ArchFamily arch_family_from_string(const std::string& s) {
  if (s == "vgg-like") return ArchFamily::VggLike;
  if (s == "resnet-like") return ArchFamily::ResnetLike;
  throw InvalidArgument("unknown architecture family '" + s + "'");
}

json ArchitectureSpec::to_json() const {
  json blocks = json::array();
  for (const auto& b : conv_blocks)
    blocks.push_back({{"channels", b.channels}, {"kernel", b.kernel}, {"stride", b.stride}});
  return {{"family", to_string(family)},
          {"conv_blocks", blocks},
          {"fc_widths", fc_widths},
          {"num_classes", num_classes},
          {"input_shape", {input_shape.h, input_shape.w, input_shape.c}},
          {"seed", seed}};
}

ArchitectureSpec ArchitectureSpec::from_json(const json& j) {
  ArchitectureSpec s;
  s.family = arch_family_from_string(j.at("family").get<std::string>());
  for (const auto& b : j.at("conv_blocks"))
    s.conv_blocks.push_back(
        {b.at("channels").get<int>(), b.at("kernel").get<int>(), b.at("stride").get<int>()});
  s.fc_widths = j.at("fc_widths").get<std::vector<int>>();
  s.num_classes = j.at("num_classes").get<int>();
  const auto sh = j.at("input_shape");
  s.input_shape = {sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>()};
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

namespace {

void he_init(nn::Network& net, uint64_t seed) {
  Rng rng(Rng::derive(seed, 0xDEAD));
  for (nn::Mat* p : net.params()) {
    if (p->rows() == 1) {  // bias rows stay zero
      p->setZero();
      continue;
    }
    const double stddev = std::sqrt(2.0 / static_cast<double>(p->rows()));
    for (Eigen::Index i = 0; i < p->size(); ++i) p->data()[i] = rng.normal(0.0, stddev);
  }
}

}  // namespace

nn::Network build_model(const ArchitectureSpec& spec) {
  if (spec.conv_blocks.empty()) throw InvalidArgument("architecture needs at least one conv block");
  if (spec.num_classes < 2) throw InvalidArgument("architecture needs at least 2 classes");
  if (spec.input_shape.size() <= 0) throw DimensionError("bad input shape");

  nn::Network net;
  net.input_shape = spec.input_shape;
  net.num_classes = spec.num_classes;
  Shape3 cur = spec.input_shape;
  int idx = 0;

  if (spec.family == ArchFamily::VggLike) {
    for (const auto& b : spec.conv_blocks) {
      auto conv = nn::make_conv2d(cur, b.channels, b.kernel, b.stride, "conv" + std::to_string(idx));
      cur = conv->output_shape();
      net.add(std::move(conv));
      net.add(nn::make_relu(cur));
      if (cur.h >= 2 && cur.w >= 2) {
        auto pool = nn::make_maxpool2(cur);
        cur = pool->output_shape();
        pool->block_boundary = true;
        net.add(std::move(pool));
      } else {
        net.layer(net.n_layers() - 1).block_boundary = true;
      }
      ++idx;
    }
  } else {
    const auto& stem = spec.conv_blocks.front();
    auto conv = nn::make_conv2d(cur, stem.channels, stem.kernel, stem.stride, "stem");
    cur = conv->output_shape();
    net.add(std::move(conv));
    auto relu = nn::make_relu(cur);
    relu->block_boundary = true;
    net.add(std::move(relu));
    for (size_t i = 1; i < spec.conv_blocks.size(); ++i) {
      const auto& b = spec.conv_blocks[i];
      auto block =
          nn::make_residual_block(cur, b.channels, b.kernel, b.stride, "res" + std::to_string(i));
      cur = block->output_shape();
      block->block_boundary = true;
      net.add(std::move(block));
    }
    auto gap = nn::make_global_avg_pool(cur);
    cur = gap->output_shape();
    net.add(std::move(gap));
  }

  int features = cur.size();
  int fc_idx = 0;
  for (int width : spec.fc_widths) {
    if (width < 1) throw InvalidArgument("fc width must be positive");
    net.add(nn::make_dense(features, width, "fc" + std::to_string(fc_idx)));
    net.add(nn::make_relu({1, 1, width}));
    features = width;
    ++fc_idx;
  }
  net.add(nn::make_dense(features, spec.num_classes, "head"));

  he_init(net, spec.seed);
  return net;
}

ArchitectureSpec sample_random_architecture(ArchFamily family, uint64_t seed, Shape3 input_shape,
                                            int num_classes) {
  Rng rng(Rng::derive(seed, 0xA7C4));
  ArchitectureSpec s;
  s.family = family;
  s.num_classes = num_classes;
  s.input_shape = input_shape;
  s.seed = Rng::derive(seed, 0x11);

  static const int kChannelChoices[] = {8, 12, 16, 24, 32};
  static const int kFcChoices[] = {16, 24, 32, 48, 64};
  const int depth = static_cast<int>(rng.uniform_int(2, 3));
  int ch = kChannelChoices[rng.uniform_int(0, 2)];
  for (int i = 0; i < depth; ++i) {
    if (family == ArchFamily::VggLike) {
      s.conv_blocks.push_back({ch, 3, 1});
    } else {
      // First entry is the stem; residual stages downsample by stride 2.
      s.conv_blocks.push_back({ch, 3, i == 0 ? 1 : 2});
    }
    ch = std::min(64, ch * 2);
  }
  s.fc_widths = {kFcChoices[rng.uniform_int(0, 4)]};
  return s;
}

ArchitectureSpec default_architecture(ArchFamily family, Shape3 input_shape, int num_classes,
                                      uint64_t seed) {
  ArchitectureSpec s;
  s.family = family;
  s.num_classes = num_classes;
  s.input_shape = input_shape;
  s.seed = seed;
  if (family == ArchFamily::VggLike) {
    s.conv_blocks = {{8, 3, 1}, {16, 3, 1}};
    s.fc_widths = {32};
  } else {
    s.conv_blocks = {{8, 3, 1}, {16, 3, 2}, {32, 3, 2}};
    s.fc_widths = {32};
  }
  return s;
}

}  // namespace ulp
