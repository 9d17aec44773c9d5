#pragma once

#include <cstdint>
#include <vector>

#include "gradcheck.hpp"
#include "tloc/model.hpp"
#include "tloc/rng.hpp"
#include "tloc/synth.hpp"
#include "tloc/train.hpp"

namespace tloc::testing {

// L=2, C=8, 8×8 images, P=4, 2 heads, dual with MFF and attentive fusion.
inline model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.image_h = c.image_w = 8;
  c.patch = 4;
  c.seg_classes = 4;
  c.seg_embed_dim = 3;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.ffn_dim = 16;
  c.scorer_hidden = 4;
  c.k_coarse = 3;
  c.k_middle = 4;
  c.k_fine = 5;
  c.k_scene = 3;
  c.hidden_middle = 6;
  c.hidden_fine = 6;
  return c;
}

inline model::ImageBatch random_images(const model::ModelConfig& c, std::size_t batch, Rng& rng) {
  model::ImageBatch b;
  b.batch = batch;
  b.rgb.resize(batch * 3 * c.image_h * c.image_w);
  for (auto& v : b.rgb) v = rng.uniform();
  if (c.dual()) {
    b.seg.resize(batch * c.image_h * c.image_w);
    for (auto& v : b.seg) v = static_cast<std::int32_t>(rng.below(c.seg_classes));
  }
  return b;
}

// Replaces every parameter with N(0, scale²) so that no gradient is trivially
// small and identity-initialized pieces are exercised off their fixed point.
inline void randomize(model::Model& m, Rng& rng, double scale) {
  for (const auto& p : m.parameters()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v = rng.normal(0.0, scale);
  }
}

inline train::Labels random_labels(const model::ModelConfig& c, std::size_t batch, Rng& rng) {
  train::Labels l;
  for (std::size_t i = 0; i < batch; ++i) {
    l.coarse.push_back(static_cast<std::int32_t>(rng.below(c.k_coarse)));
    l.middle.push_back(static_cast<std::int32_t>(rng.below(c.k_middle)));
    l.fine.push_back(static_cast<std::int32_t>(rng.below(c.k_fine)));
    l.scene.push_back(static_cast<std::int32_t>(rng.below(c.k_scene)));
  }
  return l;
}

// Six locations in two clusters, 16×16 images; trains in well under a second.
inline data::WorldSpec small_world(std::uint64_t seed) {
  data::WorldSpec ws;
  ws.seed = seed;
  ws.n_locations = 6;
  ws.n_clusters = 2;
  ws.samples_per_location = 30;
  ws.image_h = ws.image_w = 16;
  ws.n_val = 30;
  ws.n_test = 30;
  return ws;
}

struct GradSweep {
  double worst = 0.0;
  std::size_t parameters = 0;
  std::size_t elements = 0;
};

// Every parameter element of the tiny dual model against central differences
// of the weighted four-head loss.
inline GradSweep end_to_end_grad_check(std::uint64_t seed) {
  const model::ModelConfig c = tiny_config();
  model::Model m(c, seed);
  Rng rng(seed, "gradcheck");
  randomize(m, rng, 0.3);
  const model::ImageBatch images = random_images(c, 2, rng);
  const train::Labels labels = random_labels(c, 2, rng);
  const train::LossWeights w{0.3, 0.3, 0.2};
  std::vector<ad::Tensor> params;
  GradSweep out;
  for (const auto& p : m.parameters()) {
    params.push_back(p.tensor);
    out.elements += p.tensor.numel();
  }
  out.parameters = params.size();
  out.worst = grad_check([&] { return train::total_loss(m.forward(images), labels, w); }, params, 1e-5, 1e-4);
  return out;
}

}  // namespace tloc::testing
