#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace tsca {

struct Pair {
  std::size_t state = 0;
  std::size_t object = 0;

  friend bool operator==(const Pair&, const Pair&) = default;
  friend auto operator<=>(const Pair&, const Pair&) = default;
};

// Label space: primitives, the composition pairs in play, and split masks.
// Masks are parallel to `pairs`; `test_pairs` and `val_pairs` index into it.
struct CompositionSpace {
  std::vector<std::string> states;
  std::vector<std::string> objects;
  std::vector<Pair> pairs;
  std::vector<bool> seen_mask;
  std::vector<bool> unseen_mask;
  std::vector<std::size_t> test_pairs;
  std::vector<std::size_t> val_pairs;

  std::size_t num_states() const { return states.size(); }
  std::size_t num_objects() const { return objects.size(); }
  std::optional<std::size_t> index_of(Pair p) const;
  std::vector<Pair> seen_pairs() const;
  std::vector<Pair> test_pair_list() const;

  // Throws ContractError if masks overlap, pairs leave S×O, or an unseen
  // pair uses a primitive that no seen pair covers.
  void validate() const;

  friend bool operator==(const CompositionSpace&, const CompositionSpace&) = default;
};

}  // namespace tsca
