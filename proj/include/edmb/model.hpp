// SPDX-License-Identifier: Apache-2.0
//
// The full detector: two Mamba encoders, the high-resolution CNN encoder and
// the Gaussian decoder, with a flat named parameter registry.

#pragma once

#include <cstdint>
#include <string>

#include "edmb/decoder.hpp"

namespace edmb {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t init_seed = 0;

  /// Input sizes must be multiples of this.
  int size_unit() const { return encoder.patch_size * 8; }
};

/// FNV-1a hash over every architecture field.
std::uint64_t config_fingerprint(const ModelConfig& cfg);

enum class Stage { global, fine };

/// Parameters owned by the first training stage; frozen in the second.
bool is_stage1_param(const std::string& name);

template <typename T>
struct EdmbModel {
  ModelConfig cfg;
  MambaEncoder<T> global_encoder;
  MambaEncoder<T> fine_encoder;
  HighResEncoder<T> highres_encoder;
  LgdDecoder<T> decoder;

  EdmbModel() = default;
  explicit EdmbModel(const ModelConfig& cfg);

  /// Training forward for a stage. Stage 1 yields aux_p; stage 2 yields
  /// mu, var, aux_mu, aux_var and the frozen aux_p. Frozen parts always run
  /// untracked with normalisation in inference mode.
  EdgeDistribution<T> forward_train(const Tensor<T>& image, Stage stage, Rng& rng);

  /// Inference forward (no auxiliary heads), normalisation in inference mode.
  /// With `with_aux` the auxiliary maps are produced too.
  EdgeDistribution<T> forward_eval(const Tensor<T>& image, bool with_aux = false);

  ParamList<T> parameters() const;
};

}  // namespace edmb
