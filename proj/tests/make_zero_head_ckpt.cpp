// Writes a checkpoint whose regression head is zero, so every Grad-CAM map is
// identically zero. Usage: make_zero_head_ckpt <out.ckpt> <D,H,W>
#include <cstdio>
#include <iostream>

#include "volage/checkpoint.hpp"
#include "volage/config.hpp"

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: make_zero_head_ckpt OUT D,H,W\n";
    return 2;
  }
  volage::RunConfig cfg;
  cfg.model.conv_channels = {2, 4, 4, 4};
  cfg.model.dense_widths = {8, 1};
  int d = 0, h = 0, w = 0;
  if (std::sscanf(argv[2], "%d,%d,%d", &d, &h, &w) != 3) return 2;
  cfg.model.input_shape = {d, h, w};
  volage::Model m = volage::build(cfg.model, 1);
  for (auto& t : m.mutable_params().dense_weights) t.set_zero();
  volage::save_checkpoint(argv[1], m, {{"dataset", "zero_head"}, {"run_config", volage::to_json(cfg)}});
  return 0;
}
