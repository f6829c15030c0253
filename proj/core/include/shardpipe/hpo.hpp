#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "shardpipe/arch.hpp"
#include "shardpipe/estimator.hpp"
#include "shardpipe/nn.hpp"

namespace shardpipe {

using Value = std::variant<std::int64_t, double, std::string>;
std::string to_string(const Value& v);

struct Categorical {
  std::vector<Value> choices;
};
struct IntRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;  // inclusive
};
struct RealRange {
  double lo = 0.0;
  double hi = 1.0;
  bool log_scale = false;
};
using SearchSpace = std::variant<Categorical, IntRange, RealRange>;

struct NamedSpace {
  std::string name;
  SearchSpace space;
};

// Throws SearchError when a space breaks its bounds rules.
void validate(const SearchSpace& s);

// Categorical and IntRange draw rng() modulo the cardinality; RealRange uses
// the top 53 bits as a uniform in [0, 1), in log space when log_scale is set.
// Only mt19937_64 output is consumed, so draws are identical on every host.
Value sample(const SearchSpace& s, std::mt19937_64& rng);

using Config = std::map<std::string, Value>;

// Cartesian product, lexicographic in declaration order (the last space
// varies fastest). Rejects RealRange, ranges wider than 64 values and
// products above one million.
std::vector<Config> grid_enumerate(const std::vector<NamedSpace>& spaces);

// A ModelSpec and SgdConfig with "$name" placeholders, for example
// arch "1-$hidden-1:relu,id" and learning rate "$lr". Nothing is built until
// resolve_template runs.
struct Placeholder {
  std::string name;
};
using RealLeaf = std::variant<double, Placeholder>;

struct Resolved {
  ModelSpec spec;
  SgdConfig sgd;
};

class ModelTemplate {
 public:
  // Throws SearchError for placeholders without a declared space and
  // ArchParseError for malformed concrete tokens.
  ModelTemplate(std::string arch, RealLeaf learning_rate, std::vector<NamedSpace> spaces,
                std::optional<Loss> loss = std::nullopt, std::uint64_t seed = 0);

  const std::string& arch() const noexcept { return arch_; }
  const std::vector<NamedSpace>& spaces() const noexcept { return spaces_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // Number of concrete models resolve_template has produced.
  std::size_t construction_counter() const noexcept { return counter_; }

 private:
  friend Resolved resolve_template(ModelTemplate& t, const Config& config);

  std::string arch_;
  RealLeaf learning_rate_;
  std::vector<NamedSpace> spaces_;
  std::optional<Loss> loss_;
  std::uint64_t seed_;
  std::size_t counter_ = 0;
};

// A config missing any declared space throws SearchError and leaves the
// counter alone. Otherwise the counter goes up by one before the resolved spec
// is validated, so an invalid spec still counts as an instantiation.
Resolved resolve_template(ModelTemplate& t, const Config& config);

enum class Direction { Minimize, Maximize };
std::string_view to_string(Direction d);

struct RandomSampler {
  std::uint64_t seed = 0;
};
struct GridSampler {};
using Sampler = std::variant<RandomSampler, GridSampler>;

struct Trial {
  std::size_t ordinal = 0;
  Config config;
  // +inf (Minimize) or -inf (Maximize) when failed.
  double result = 0.0;
  bool failed = false;
  std::string error;
};

struct Study {
  Direction direction = Direction::Minimize;
  std::size_t budget = 1;
  Sampler sampler = RandomSampler{};
  std::vector<Trial> trials;
  std::optional<std::size_t> best;
};

// The objective receives the resolved model and the raw config. Throwing or
// returning a non-finite value fails the trial.
using Objective = std::function<double(const Resolved&, const Config&)>;

// Runs trials in order. Grid runs min(budget, grid size) trials. Throws
// SearchError when budget is 0 or every trial fails.
Study run_study(ModelTemplate& t, const Objective& objective, Study study);

// {"direction":...,"trials":[{"ordinal":n,"config":{...},"result":x|"failed"}],"best":n}
std::string to_json(const Study& s);

// Space file: {"name": {"kind":"categorical","choices":[...]} |
//                       {"kind":"int","lo":a,"hi":b} |
//                       {"kind":"real","lo":a,"hi":b,"log":bool}, ...}
// Declaration order follows the file. Throws SearchError.
std::vector<NamedSpace> parse_spaces_json(std::string_view text);

struct AutoFitResult {
  Estimator estimator;
  Study study;
};

// Trains each trial on the first 80% of rows (global order) and scores the
// model loss on the last 20%, then refits the best config on all rows. The
// refit is one more resolve_template call. Data is repartitioned to the
// cluster size (one partition in local mode).
AutoFitResult auto_estimator_fit(ModelTemplate& t, const Shards& data, const DataColumns& cols,
                                 const FitConfig& fit, Study study, ClusterContext* cluster = nullptr);

}  // namespace shardpipe
