#pragma once

#include <map>
#include <string>
#include <vector>

#include "stylevox/config.hpp"
#include "stylevox/tensor.hpp"

namespace sv {
class CounterRng;
}

namespace sv::nets {

// Named parameter tensors; std::map keeps iteration (and therefore optimizer
// state, checkpoint layout and gradient ordering) deterministic.
using ParamStore = std::map<std::string, Tensor>;
using ShapeSpec = std::map<std::string, std::vector<int64_t>>;

int num_style_layers(int levels);

ShapeSpec generator_param_shapes(const ModelConfig& cfg);
ShapeSpec discriminator_param_shapes(const ModelConfig& cfg);
int64_t count_params(const ModelConfig& cfg);

// Parameters are stored ~N(0,1) and scaled at runtime (equalized learning
// rate); mapping layers store N(0, 1/lr_mul) so their effective init matches
// the rest of the network despite the 0.01 learning-rate multiplier.
ParamStore init_generator(const ModelConfig& cfg, CounterRng& rng, DType dt = DType::F32);
ParamStore init_discriminator(const ModelConfig& cfg, CounterRng& rng, DType dt = DType::F32);

// weight [K,C,kd,kh,kw], style [C]; scales input channels, then (optionally)
// renormalizes each output channel's weight norm
Tensor modulate_demodulate(const Tensor& weight, const Tensor& style, bool demod,
                           double eps = 1e-8);

// z [N, latent] -> w [N, latent]; the pixel-norm of z happens in
// generator_forward, this is the bare stack of dense+LReLU layers
Tensor mapping_forward(const ModelConfig& cfg, const ParamStore& params, const Tensor& z);

// one noise map per style layer at that layer's resolution, batch axis 1 or N
std::vector<Tensor> make_noise(const ModelConfig& cfg, CounterRng& rng, int64_t batch = 1,
                               DType dt = DType::F32);
std::vector<Tensor> zero_noise(const ModelConfig& cfg, DType dt = DType::F32);

// w_layers: num_style_layers()+1 tensors of shape [N, latent]; the extra entry
// styles the output conv. noise: num_style_layers() maps (empty vector: none).
// When taps is given (batch 1 only) it receives each style layer's activation.
Tensor synthesis_forward(const ModelConfig& cfg, const ParamStore& params,
                         const std::vector<Tensor>& w_layers, const std::vector<Tensor>& noise,
                         std::vector<Tensor>* taps = nullptr);

enum class NoiseMode { Zero, Random, Fixed };

// pixel_norm -> mapping -> synthesis with w broadcast to every style layer;
// mixing_cutoff k in [0, 2L-1] feeds layers < k from z_a, the rest (and the
// output conv) from z_b; pass cutoff -1 (or undefined z_b) for no mixing.
Tensor generator_forward(const ModelConfig& cfg, const ParamStore& params, const Tensor& z_a,
                         const Tensor& z_b, int mixing_cutoff, NoiseMode mode,
                         CounterRng* noise_rng, const std::vector<Tensor>* fixed_noise = nullptr);

// synthesis from explicit w codes (shared per sample): w_low styles layers
// < cutoff, w_high the rest and the output conv
Tensor mix_styles(const ModelConfig& cfg, const ParamStore& params, const Tensor& w_low,
                  const Tensor& w_high, int cutoff, const std::vector<Tensor>& noise);

Tensor discriminator_forward(const ModelConfig& cfg, const ParamStore& params,
                             const Tensor& volume);  // -> [N,1] logits

// flat concatenation of all parameter tensors' gradients targets; helper for
// optimizers and gradient calls
std::vector<Tensor> param_tensors(const ParamStore& store);
std::vector<std::string> param_names(const ParamStore& store);

}  // namespace sv::nets
