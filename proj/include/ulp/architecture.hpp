#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ulp/nn.hpp"

namespace ulp {

enum class ArchFamily { VggLike, ResnetLike };

std::string to_string(ArchFamily f);
ArchFamily arch_family_from_string(const std::string& s);

struct ConvBlockSpec {
  int channels = 8;
  int kernel = 3;
  int stride = 1;
};

// Serializable description of one classifier. `seed` drives weight init.
struct ArchitectureSpec {
  ArchFamily family = ArchFamily::VggLike;
  std::vector<ConvBlockSpec> conv_blocks;
  std::vector<int> fc_widths;
  int num_classes = 0;
  nn::Shape3 input_shape;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
};

// Builds an initialized network (He-normal init from spec.seed) exposing
// pre-softmax logits.
// vgg-like:    [conv - relu - maxpool2]* -> [dense - relu]* -> dense(K)
// resnet-like: conv - relu - [residual]* -> global avg pool -> [dense - relu]* -> dense(K)
// Throws on empty conv_blocks or inconsistent shapes.
nn::Network build_model(const ArchitectureSpec& spec);

// Randomized desk-scale variant: depth, channel counts and fc widths drawn
// from fixed ranges (2-3 blocks, 8-32 channels, 16-64 fc units).
ArchitectureSpec sample_random_architecture(ArchFamily family, uint64_t seed,
                                            nn::Shape3 input_shape, int num_classes);

// Canonical small fixed architecture used for zoo defaults.
ArchitectureSpec default_architecture(ArchFamily family, nn::Shape3 input_shape, int num_classes,
                                      uint64_t seed);

}  // namespace ulp
