#include "tsca/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tsca/errors.hpp"

namespace tsca {

namespace fs = std::filesystem;

// ---- CompositionSpace ------------------------------------------------------

std::optional<std::size_t> CompositionSpace::index_of(Pair p) const {
  auto it = std::find(pairs.begin(), pairs.end(), p);
  if (it == pairs.end()) return std::nullopt;
  return static_cast<std::size_t>(it - pairs.begin());
}

std::vector<Pair> CompositionSpace::seen_pairs() const {
  std::vector<Pair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (seen_mask[i]) out.push_back(pairs[i]);
  }
  return out;
}

std::vector<Pair> CompositionSpace::test_pair_list() const {
  std::vector<Pair> out;
  out.reserve(test_pairs.size());
  for (std::size_t i : test_pairs) out.push_back(pairs.at(i));
  return out;
}

void CompositionSpace::validate() const {
  if (seen_mask.size() != pairs.size() || unseen_mask.size() != pairs.size()) {
    throw ContractError("composition space: mask length mismatch");
  }
  std::vector<bool> state_seen(states.size(), false);
  std::vector<bool> object_seen(objects.size(), false);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].state >= states.size() || pairs[i].object >= objects.size()) {
      throw ContractError("composition space: pair outside S×O");
    }
    if (seen_mask[i] && unseen_mask[i]) {
      throw ContractError("composition space: pair is both seen and unseen");
    }
    if (seen_mask[i]) {
      state_seen[pairs[i].state] = true;
      object_seen[pairs[i].object] = true;
    }
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (unseen_mask[i] && (!state_seen[pairs[i].state] || !object_seen[pairs[i].object])) {
      throw ContractError("composition space: unseen pair (" + states[pairs[i].state] + ", " +
                          objects[pairs[i].object] + ") uses a primitive absent from seen pairs");
    }
  }
  for (std::size_t i : test_pairs) {
    if (i >= pairs.size()) throw ContractError("composition space: test pair index out of range");
  }
  for (std::size_t i : val_pairs) {
    if (i >= pairs.size()) throw ContractError("composition space: val pair index out of range");
  }
}

// ---- splits --------------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ParseError("unknown split '" + s + "'");
}

std::vector<const Sample*> Dataset::select(Split split) const {
  std::vector<const Sample*> out;
  for (const Sample& s : samples) {
    if (s.split == split) out.push_back(&s);
  }
  return out;
}

// ---- generation ----------------------------------------------------------

void GenConfig::validate() const {
  if (num_states == 0 || num_objects == 0) throw ConfigError("need at least one state and object");
  if (!(seen_fraction > 0.0 && seen_fraction < 1.0)) {
    throw ConfigError("seen fraction must lie in (0, 1), got " + std::to_string(seen_fraction));
  }
  if (samples_per_pair == 0 || eval_per_pair == 0) throw ConfigError("sample counts must be positive");
  if (num_patches == 0 || raw_dim == 0) throw ConfigError("patch count and raw dim must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ConfigError("noise sigma must be finite and nonnegative");
  }
  if (!(distractor_fraction >= 0.0 && distractor_fraction <= 1.0)) {
    throw ConfigError("distractor fraction must lie in [0, 1]");
  }
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<double> unit_vector(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double n2 = 0.0;
  for (double& x : v) {
    x = normal(rng);
    n2 += x * x;
  }
  const double n = std::sqrt(n2);
  for (double& x : v) x = to_f32(x / n);
  return v;
}

enum class PatchKind { kState, kObject, kMixed, kDistractor };

Tensor make_patches(const GenConfig& cfg, const std::vector<double>& u, const std::vector<double>& v,
                    std::mt19937_64& rng) {
  const std::size_t f = cfg.raw_dim;
  const std::size_t n = cfg.num_patches;
  const auto distractors =
      static_cast<std::size_t>(std::lround(cfg.distractor_fraction * static_cast<double>(n)));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_scale = cfg.noise_sigma / std::sqrt(static_cast<double>(f));
  const double distractor_scale = 1.0 / std::sqrt(static_cast<double>(f));

  std::vector<double> mixed(f);
  double n2 = 0.0;
  for (std::size_t i = 0; i < f; ++i) {
    mixed[i] = u[i] + v[i];
    n2 += mixed[i] * mixed[i];
  }
  for (double& x : mixed) x /= std::sqrt(n2);

  Tensor out(f, n);
  for (std::size_t p = 0; p < n; ++p) {
    const PatchKind kind = p >= n - distractors ? PatchKind::kDistractor
                                                : static_cast<PatchKind>(p % 3);
    for (std::size_t i = 0; i < f; ++i) {
      double base = 0.0;
      double noise = 0.0;
      switch (kind) {
        case PatchKind::kState: base = u[i]; break;
        case PatchKind::kObject: base = v[i]; break;
        case PatchKind::kMixed: base = mixed[i]; break;
        case PatchKind::kDistractor: base = distractor_scale * normal(rng); break;
      }
      if (kind != PatchKind::kDistractor && noise_scale > 0.0) noise = noise_scale * normal(rng);
      out(i, p) = to_f32(base + noise);
    }
  }
  return out;
}

}  // namespace

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t ns = cfg.num_states;
  const std::size_t no = cfg.num_objects;
  const std::size_t total = ns * no;

  Dataset data;
  CompositionSpace& space = data.space;
  for (std::size_t s = 0; s < ns; ++s) space.states.push_back("state" + std::to_string(s));
  for (std::size_t o = 0; o < no; ++o) space.objects.push_back("object" + std::to_string(o));
  for (std::size_t s = 0; s < ns; ++s) {
    for (std::size_t o = 0; o < no; ++o) space.pairs.push_back({s, o});
  }

  std::vector<std::vector<double>> state_protos;
  std::vector<std::vector<double>> object_protos;
  for (std::size_t s = 0; s < ns; ++s) state_protos.push_back(unit_vector(rng, cfg.raw_dim));
  for (std::size_t o = 0; o < no; ++o) object_protos.push_back(unit_vector(rng, cfg.raw_dim));

  const auto num_seen = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.seen_fraction * static_cast<double>(total))), 1,
      total);

  std::vector<std::size_t> order(total);
  bool covered = false;
  for (int attempt = 0; attempt < 100 && !covered; ++attempt) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    space.seen_mask.assign(total, false);
    space.unseen_mask.assign(total, true);
    for (std::size_t k = 0; k < num_seen; ++k) {
      space.seen_mask[order[k]] = true;
      space.unseen_mask[order[k]] = false;
    }
    try {
      space.validate();
      covered = true;
    } catch (const ContractError&) {
    }
  }
  if (!covered) {
    throw ConfigError("could not draw a seen split covering every primitive after 100 attempts (" +
                      std::to_string(num_seen) + " seen of " + std::to_string(total) +
                      " pairs); raise the seen fraction");
  }

  // Unseen pairs in draw order: the first floor(n/2) go to val, the rest to test.
  std::vector<std::size_t> unseen(order.begin() + static_cast<std::ptrdiff_t>(num_seen), order.end());
  const std::size_t val_count = unseen.size() / 2;
  std::vector<bool> unseen_in_val(total, false);
  for (std::size_t k = 0; k < val_count; ++k) unseen_in_val[unseen[k]] = true;
  for (std::size_t i = 0; i < total; ++i) {
    if (space.seen_mask[i] || !unseen_in_val[i]) space.test_pairs.push_back(i);
    if (space.seen_mask[i] || unseen_in_val[i]) space.val_pairs.push_back(i);
  }

  auto emit = [&](std::size_t pair, Split split, std::size_t count) {
    const Pair p = space.pairs[pair];
    for (std::size_t k = 0; k < count; ++k) {
      Sample s;
      s.raw_patches = make_patches(cfg, state_protos[p.state], object_protos[p.object], rng);
      s.gt_state = p.state;
      s.gt_object = p.object;
      s.gt_pair = pair;
      s.split = split;
      data.samples.push_back(std::move(s));
    }
  };
  for (std::size_t i = 0; i < total; ++i) {
    if (space.seen_mask[i]) {
      emit(i, Split::kTrain, cfg.samples_per_pair);
      emit(i, Split::kVal, cfg.eval_per_pair);
      emit(i, Split::kTest, cfg.eval_per_pair);
    } else {
      emit(i, unseen_in_val[i] ? Split::kVal : Split::kTest, cfg.eval_per_pair);
    }
  }
  return data;
}

// ---- serialization -------------------------------------------------------

namespace {

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  for (const auto& l : lines) os << l << '\n';
}

std::vector<std::string> pair_lines(const CompositionSpace& space, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) {
    const Pair p = space.pairs[i];
    out.push_back(space.states[p.state] + " " + space.objects[p.object]);
  }
  return out;
}

void put_f32(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                         static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  os.write(bytes, 4);
}

double get_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("missing file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> read_names(const fs::path& path) {
  std::vector<std::string> names;
  std::set<std::string> unique;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& l = lines[i];
    if (l.empty()) continue;
    if (l.find_first_of(" \t") != std::string::npos) {
      throw ParseError(path.filename().string() + ":" + std::to_string(i + 1) +
                       ": names may not contain whitespace");
    }
    if (!unique.insert(l).second) {
      throw ParseError(path.filename().string() + ":" + std::to_string(i + 1) + ": duplicate name '" + l + "'");
    }
    names.push_back(l);
  }
  if (names.empty()) throw ParseError(path.filename().string() + " is empty");
  return names;
}

std::map<std::string, std::size_t> name_index(const std::vector<std::string>& names) {
  std::map<std::string, std::size_t> m;
  for (std::size_t i = 0; i < names.size(); ++i) m.emplace(names[i], i);
  return m;
}

std::vector<Pair> read_pairs(const fs::path& path, const std::map<std::string, std::size_t>& states,
                             const std::map<std::string, std::size_t>& objects) {
  std::vector<Pair> out;
  const auto lines = read_lines(path);
  const std::string file = path.filename().string();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::istringstream fields(lines[i]);
    std::string s;
    std::string o;
    std::string extra;
    if (!(fields >> s >> o) || (fields >> extra)) {
      throw ParseError(file + ":" + std::to_string(i + 1) + ": expected 'state object'");
    }
    auto si = states.find(s);
    if (si == states.end()) {
      throw ParseError(file + ":" + std::to_string(i + 1) + ": unknown state '" + s + "'");
    }
    auto oi = objects.find(o);
    if (oi == objects.end()) {
      throw ParseError(file + ":" + std::to_string(i + 1) + ": unknown object '" + o + "'");
    }
    out.push_back({si->second, oi->second});
  }
  return out;
}

}  // namespace

void save_split(const Dataset& data, const fs::path& dir) {
  const CompositionSpace& space = data.space;
  fs::create_directories(dir);
  write_lines(dir / "states.txt", space.states);
  write_lines(dir / "objects.txt", space.objects);
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < space.pairs.size(); ++i) {
    if (space.seen_mask[i]) train.push_back(i);
  }
  write_lines(dir / "pairs_train.txt", pair_lines(space, train));
  write_lines(dir / "pairs_val.txt", pair_lines(space, space.val_pairs));
  write_lines(dir / "pairs_test.txt", pair_lines(space, space.test_pairs));

  std::ofstream features(dir / "features.bin", std::ios::binary);
  std::ofstream samples(dir / "samples.jsonl", std::ios::binary);
  if (!features || !samples) throw ConfigError("cannot write dataset files in " + dir.string());
  std::uint64_t offset = 0;
  for (const Sample& s : data.samples) {
    nlohmann::ordered_json j;
    j["offset"] = offset;
    j["dim"] = s.raw_patches.rows();
    j["n"] = s.raw_patches.cols();
    j["state"] = space.states[s.gt_state];
    j["object"] = space.objects[s.gt_object];
    j["split"] = split_name(s.split);
    samples << j.dump() << '\n';
    for (double v : s.raw_patches.data()) put_f32(features, v);
    offset += 4 * s.raw_patches.size();
  }
}

Dataset load_split(const fs::path& dir) {
  Dataset data;
  CompositionSpace& space = data.space;
  space.states = read_names(dir / "states.txt");
  space.objects = read_names(dir / "objects.txt");
  const auto states = name_index(space.states);
  const auto objects = name_index(space.objects);
  const auto train = read_pairs(dir / "pairs_train.txt", states, objects);
  const auto val = read_pairs(dir / "pairs_val.txt", states, objects);
  const auto test = read_pairs(dir / "pairs_test.txt", states, objects);

  std::set<Pair> all(train.begin(), train.end());
  all.insert(val.begin(), val.end());
  all.insert(test.begin(), test.end());
  space.pairs.assign(all.begin(), all.end());
  const std::set<Pair> seen(train.begin(), train.end());
  for (const Pair& p : space.pairs) {
    space.seen_mask.push_back(seen.count(p) > 0);
    space.unseen_mask.push_back(seen.count(p) == 0);
  }
  auto indices = [&](const std::vector<Pair>& list) {
    std::set<std::size_t> idx;
    for (const Pair& p : list) idx.insert(*space.index_of(p));
    return std::vector<std::size_t>(idx.begin(), idx.end());
  };
  space.test_pairs = indices(test);
  space.val_pairs = indices(val);
  try {
    space.validate();
  } catch (const ContractError& e) {
    throw ParseError(std::string("invalid split: ") + e.what());
  }

  std::ifstream fin(dir / "features.bin", std::ios::binary);
  if (!fin) throw ParseError("missing file " + (dir / "features.bin").string());
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(fin)),
                                        std::istreambuf_iterator<char>());

  const auto lines = read_lines(dir / "samples.jsonl");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = "samples.jsonl:" + std::to_string(i + 1) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    Sample s;
    std::uint64_t offset = 0;
    std::size_t dim = 0;
    std::size_t n = 0;
    std::string state;
    std::string object;
    try {
      offset = j.at("offset").get<std::uint64_t>();
      dim = j.at("dim").get<std::size_t>();
      n = j.at("n").get<std::size_t>();
      state = j.at("state").get<std::string>();
      object = j.at("object").get<std::string>();
      s.split = parse_split(j.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "bad or missing field (" + e.what() + ")");
    } catch (const ParseError& e) {
      throw ParseError(where + e.what());
    }
    if (dim == 0 || n == 0) throw ParseError(where + "empty feature block");
    auto si = states.find(state);
    auto oi = objects.find(object);
    if (si == states.end()) throw ParseError(where + "unknown state '" + state + "'");
    if (oi == objects.end()) throw ParseError(where + "unknown object '" + object + "'");
    s.gt_state = si->second;
    s.gt_object = oi->second;
    const auto pair = space.index_of({s.gt_state, s.gt_object});
    if (!pair) throw ParseError(where + "pair (" + state + ", " + object + ") is in no split file");
    s.gt_pair = *pair;
    if (s.split == Split::kTrain && !space.seen_mask[s.gt_pair]) {
      throw ParseError(where + "train sample uses an unseen pair");
    }
    const std::uint64_t bytes = 4ull * dim * n;
    if (offset % 4 != 0 || offset + bytes > blob.size()) {
      throw ParseError(where + "feature block [" + std::to_string(offset) + ", " +
                       std::to_string(offset + bytes) + ") exceeds features.bin (" +
                       std::to_string(blob.size()) + " bytes)");
    }
    s.raw_patches = Tensor(dim, n);
    for (std::size_t k = 0; k < dim * n; ++k) {
      const double v = get_f32(blob.data() + offset + 4 * k);
      if (!std::isfinite(v)) throw ParseError(where + "non-finite feature value");
      s.raw_patches[k] = v;
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

CompositionSpace open_world_space(const CompositionSpace& space) {
  CompositionSpace out;
  out.states = space.states;
  out.objects = space.objects;
  for (std::size_t s = 0; s < space.num_states(); ++s) {
    for (std::size_t o = 0; o < space.num_objects(); ++o) {
      const Pair p{s, o};
      const auto old = space.index_of(p);
      const bool seen = old && space.seen_mask[*old];
      out.pairs.push_back(p);
      out.seen_mask.push_back(seen);
      out.unseen_mask.push_back(!seen);
    }
  }
  auto remap = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> r;
    for (std::size_t i : idx) {
      const Pair p = space.pairs.at(i);
      r.push_back(p.state * space.num_objects() + p.object);
    }
    std::sort(r.begin(), r.end());
    return r;
  };
  out.test_pairs = remap(space.test_pairs);
  out.val_pairs = remap(space.val_pairs);
  return out;
}

}  // namespace tsca
