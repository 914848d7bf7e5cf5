#pragma once

// Synthetic compositional datasets and the on-disk split format.
//
// Directory layout:
//   states.txt, objects.txt         one name per line
//   pairs_{train,val,test}.txt      "state object" per line
//   samples.jsonl                   {"offset","dim","n","state","object","split"}
//                                   offset is a byte offset into features.bin
//   features.bin                    row-major little-endian f32, dim×n per sample

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsca/composition_space.hpp"
#include "tsca/tensor.hpp"

namespace tsca {

enum class Split { kTrain, kVal, kTest };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Sample {
  Tensor raw_patches;  // f×N
  std::size_t gt_state = 0;
  std::size_t gt_object = 0;
  std::size_t gt_pair = 0;  // index into CompositionSpace::pairs
  Split split = Split::kTrain;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  CompositionSpace space;
  std::vector<Sample> samples;

  std::vector<const Sample*> select(Split split) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenConfig {
  std::size_t num_states = 4;
  std::size_t num_objects = 4;
  double seen_fraction = 0.625;
  std::size_t samples_per_pair = 8;  // train samples per seen pair
  std::size_t eval_per_pair = 4;     // val/test samples per pair in that split
  std::size_t num_patches = 8;
  std::size_t raw_dim = 32;
  double noise_sigma = 0.3;          // norm of additive patch noise relative to unit prototypes
  double distractor_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pure function of the config. Pairs are the full product in state-major
/// order. Unseen pairs are split between val (floor half) and test.
Dataset generate(const GenConfig& config);

void save_split(const Dataset& data, const std::filesystem::path& dir);
Dataset load_split(const std::filesystem::path& dir);

/// Same primitives and seen mask, pairs widened to all of S×O (state-major).
/// test_pairs / val_pairs are remapped into the new ordering.
CompositionSpace open_world_space(const CompositionSpace& space);

}  // namespace tsca
