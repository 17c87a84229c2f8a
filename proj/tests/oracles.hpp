#pragma once

// Scalar-loop reference implementations. They share no code with the library
// beyond weight containers, and are written for clarity rather than speed.

#include <string>
#include <vector>

#include "megan/hypernet.hpp"
#include "megan/model.hpp"

namespace oracle {

using megan::Matrix;

double swish(double x, double slope);

/// One input row through the bias-free gated FFN with per-channel slopes.
std::vector<double> beta_swiglu(const std::vector<double>& x, const std::vector<double>& slopes,
                                const Matrix& w_gate, const Matrix& w_up, const Matrix& w_down);

/// Full decoder forward for one sequence; `slopes` is L x C (1 + beta), or empty for SiLU.
Matrix forward(const std::vector<int>& tokens, const megan::BaseWeights& base, const megan::ModelConfig& config,
               const Matrix& slopes = Matrix());

/// Raw beta for one layer, computed with explicit loops.
std::vector<double> generate_beta(const Matrix& condition_embeddings, const Matrix& latent, int layer_index,
                                  const megan::HypernetParams& hyper);

/// Forward with the hypernetwork in the loop: beta per layer from the prefix rows of the FFN input.
Matrix conditioned_forward(const std::vector<int>& tokens, std::size_t prefix_len, const Matrix& condition_embeddings,
                           const megan::BaseWeights& base, const megan::HypernetParams& hyper,
                           const megan::ModelConfig& config, Matrix* betas_out = nullptr);

}  // namespace oracle
