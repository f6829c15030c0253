#include "shardpipe/hpo.hpp"

#include <cmath>
#include <limits>
#include <set>

#include <json.hpp>

#include "shardpipe/errors.hpp"

namespace shardpipe {

namespace {

constexpr std::size_t kMaxGridRange = 64;
constexpr std::size_t kMaxGridSize = 1'000'000;

bool is_placeholder(std::string_view token) { return token.size() > 1 && token.front() == '$'; }

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::uint64_t int_span(const IntRange& r) {
  return static_cast<std::uint64_t>(r.hi) - static_cast<std::uint64_t>(r.lo) + 1;
}

std::vector<Value> grid_values(const NamedSpace& ns) {
  if (const auto* c = std::get_if<Categorical>(&ns.space)) return c->choices;
  if (const auto* r = std::get_if<IntRange>(&ns.space)) {
    if (int_span(*r) > kMaxGridRange || int_span(*r) == 0) {
      throw SearchError("space '" + ns.name + "' has more than " + std::to_string(kMaxGridRange) +
                        " values; grid search cannot enumerate it");
    }
    std::vector<Value> out;
    for (std::int64_t v = r->lo;; ++v) {
      out.emplace_back(v);
      if (v == r->hi) break;
    }
    return out;
  }
  throw SearchError("space '" + ns.name + "' is a real range; grid search cannot enumerate it");
}

std::int64_t as_int(const Value& v, const std::string& name) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  if (const auto* d = std::get_if<double>(&v); d && std::floor(*d) == *d && std::isfinite(*d)) {
    return static_cast<std::int64_t>(*d);
  }
  throw SearchError("value of '" + name + "' must be an integer, got " + to_string(v));
}

double as_real(const Value& v, const std::string& name) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  throw SearchError("value of '" + name + "' must be a number, got " + to_string(v));
}

nlohmann::ordered_json value_json(const Value& v) {
  return std::visit([](const auto& x) { return nlohmann::ordered_json(x); }, v);
}

bool better(double a, double b, Direction d) { return d == Direction::Minimize ? a < b : a > b; }

}  // namespace

std::string to_string(const Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  return nlohmann::json(std::get<double>(v)).dump();
}

void validate(const SearchSpace& s) {
  if (const auto* c = std::get_if<Categorical>(&s)) {
    if (c->choices.empty()) throw SearchError("categorical space needs at least one choice");
  } else if (const auto* r = std::get_if<IntRange>(&s)) {
    if (r->lo > r->hi) throw SearchError("int range needs lo <= hi");
  } else {
    const auto& rr = std::get<RealRange>(s);
    if (!std::isfinite(rr.lo) || !std::isfinite(rr.hi) || !(rr.lo < rr.hi)) {
      throw SearchError("real range needs finite lo < hi");
    }
    if (rr.log_scale && !(rr.lo > 0)) throw SearchError("log-scale real range needs lo > 0");
  }
}

Value sample(const SearchSpace& s, std::mt19937_64& rng) {
  if (const auto* c = std::get_if<Categorical>(&s)) return c->choices[rng() % c->choices.size()];
  if (const auto* r = std::get_if<IntRange>(&s)) {
    const std::uint64_t span = int_span(*r);
    const std::uint64_t off = span == 0 ? rng() : rng() % span;
    return static_cast<std::int64_t>(static_cast<std::uint64_t>(r->lo) + off);
  }
  const auto& rr = std::get<RealRange>(s);
  const double u = uniform01(rng);
  double v = rr.log_scale ? std::exp(std::log(rr.lo) + u * (std::log(rr.hi) - std::log(rr.lo)))
                          : rr.lo + u * (rr.hi - rr.lo);
  return std::clamp(v, rr.lo, rr.hi);
}

std::vector<Config> grid_enumerate(const std::vector<NamedSpace>& spaces) {
  std::vector<std::vector<Value>> values;
  std::size_t total = 1;
  for (const auto& ns : spaces) {
    validate(ns.space);
    values.push_back(grid_values(ns));
    total *= values.back().size();
    if (total > kMaxGridSize) {
      throw SearchError("grid has more than " + std::to_string(kMaxGridSize) + " configurations");
    }
  }
  std::vector<Config> out;
  out.reserve(total);
  std::vector<std::size_t> idx(spaces.size(), 0);
  for (std::size_t n = 0; n < total; ++n) {
    Config c;
    for (std::size_t k = 0; k < spaces.size(); ++k) c[spaces[k].name] = values[k][idx[k]];
    out.push_back(std::move(c));
    for (std::size_t k = spaces.size(); k-- > 0;) {
      if (++idx[k] < values[k].size()) break;
      idx[k] = 0;
    }
  }
  return out;
}

ModelTemplate::ModelTemplate(std::string arch, RealLeaf learning_rate, std::vector<NamedSpace> spaces,
                             std::optional<Loss> loss, std::uint64_t seed)
    : arch_(std::move(arch)),
      learning_rate_(std::move(learning_rate)),
      spaces_(std::move(spaces)),
      loss_(loss),
      seed_(seed) {
  std::set<std::string> declared;
  for (const auto& ns : spaces_) {
    validate(ns.space);
    if (!declared.insert(ns.name).second) throw SearchError("space '" + ns.name + "' declared twice");
  }
  auto check_ref = [&](const std::string& name) {
    if (!declared.contains(name)) throw SearchError("placeholder '$" + name + "' has no search space");
  };
  const ArchTokens tokens = split_arch(arch_);
  for (const auto& d : tokens.dims) {
    if (is_placeholder(d)) {
      check_ref(d.substr(1));
    } else {
      parse_arch(d + "-1:id");  // concrete dims must already be valid
    }
  }
  for (const auto& a : tokens.activations) {
    if (is_placeholder(a)) {
      check_ref(a.substr(1));
    } else {
      parse_activation(a);
    }
  }
  if (const auto* p = std::get_if<Placeholder>(&learning_rate_)) check_ref(p->name);
}

Resolved resolve_template(ModelTemplate& t, const Config& config) {
  for (const auto& ns : t.spaces_) {
    if (!config.contains(ns.name)) throw SearchError("config has no value for '" + ns.name + "'");
  }
  auto subst = [&](const std::string& token, bool integral) {
    if (!is_placeholder(token)) return token;
    const std::string name = token.substr(1);
    const Value& v = config.at(name);
    return integral ? std::to_string(as_int(v, name)) : to_string(v);
  };
  const ArchTokens tokens = split_arch(t.arch_);
  std::string text;
  for (std::size_t i = 0; i < tokens.dims.size(); ++i) {
    if (i > 0) text += '-';
    text += subst(tokens.dims[i], true);
  }
  text += ':';
  for (std::size_t i = 0; i < tokens.activations.size(); ++i) {
    if (i > 0) text += ',';
    text += subst(tokens.activations[i], false);
  }
  SgdConfig sgd;
  sgd.seed = t.seed_;
  if (const auto* p = std::get_if<Placeholder>(&t.learning_rate_)) {
    sgd.learning_rate = static_cast<float>(as_real(config.at(p->name), p->name));
  } else {
    sgd.learning_rate = static_cast<float>(std::get<double>(t.learning_rate_));
  }

  ++t.counter_;
  Resolved r{parse_arch(text, t.loss_), sgd};
  validate(r.spec);
  if (!(r.sgd.learning_rate > 0) || !std::isfinite(r.sgd.learning_rate)) {
    throw SearchError("learning rate must be positive and finite");
  }
  return r;
}

std::string_view to_string(Direction d) { return d == Direction::Minimize ? "minimize" : "maximize"; }

Study run_study(ModelTemplate& t, const Objective& objective, Study study) {
  if (study.budget == 0) throw SearchError("study budget must be at least 1");
  study.trials.clear();
  study.best.reset();

  std::vector<Config> configs;
  if (std::holds_alternative<GridSampler>(study.sampler)) {
    configs = grid_enumerate(t.spaces());
    if (configs.size() > study.budget) configs.resize(study.budget);
  } else {
    std::mt19937_64 rng(std::get<RandomSampler>(study.sampler).seed);
    for (std::size_t n = 0; n < study.budget; ++n) {
      Config c;
      for (const auto& ns : t.spaces()) c[ns.name] = sample(ns.space, rng);
      configs.push_back(std::move(c));
    }
  }

  const double worst = study.direction == Direction::Minimize
                           ? std::numeric_limits<double>::infinity()
                           : -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < configs.size(); ++n) {
    Trial trial;
    trial.ordinal = n;
    trial.config = configs[n];
    try {
      const Resolved r = resolve_template(t, trial.config);
      trial.result = objective(r, trial.config);
      if (!std::isfinite(trial.result)) {
        trial.failed = true;
        trial.error = "objective is not finite";
      }
    } catch (const ClusterError&) {
      throw;
    } catch (const std::exception& e) {
      trial.failed = true;
      trial.error = e.what();
    }
    if (trial.failed) trial.result = worst;
    if (!trial.failed && (!study.best || better(trial.result, study.trials[*study.best].result,
                                                study.direction))) {
      study.best = n;
    }
    study.trials.push_back(std::move(trial));
  }
  if (!study.best) {
    throw SearchError("all " + std::to_string(study.trials.size()) + " trials failed; first error: " +
                      study.trials.front().error);
  }
  return study;
}

std::string to_json(const Study& s) {
  nlohmann::ordered_json trials = nlohmann::ordered_json::array();
  for (const auto& t : s.trials) {
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    for (const auto& [k, v] : t.config) config[k] = value_json(v);
    nlohmann::ordered_json jt{{"ordinal", t.ordinal}, {"config", config}};
    if (t.failed) {
      jt["result"] = "failed";
    } else {
      jt["result"] = t.result;
    }
    trials.push_back(std::move(jt));
  }
  nlohmann::ordered_json j{{"direction", to_string(s.direction)}, {"trials", trials}};
  j["best"] = s.best ? nlohmann::ordered_json(*s.best) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

std::vector<NamedSpace> parse_spaces_json(std::string_view text) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SearchError(std::string("space file is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw SearchError("space file must be a JSON object");

  std::vector<NamedSpace> out;
  for (const auto& [name, def] : doc.items()) {
    auto fail = [&](const std::string& why) { throw SearchError("space '" + name + "': " + why); };
    if (!def.is_object() || !def.contains("kind") || !def["kind"].is_string()) fail("needs a \"kind\"");
    const std::string kind = def["kind"];
    auto number = [&](const char* key) {
      if (!def.contains(key) || !def[key].is_number()) fail(std::string("needs numeric \"") + key + "\"");
      return def[key];
    };
    if (kind == "categorical") {
      if (!def.contains("choices") || !def["choices"].is_array()) fail("needs a \"choices\" array");
      Categorical c;
      for (const auto& v : def["choices"]) {
        if (v.is_number_integer()) {
          c.choices.emplace_back(v.get<std::int64_t>());
        } else if (v.is_number()) {
          c.choices.emplace_back(v.get<double>());
        } else if (v.is_string()) {
          c.choices.emplace_back(v.get<std::string>());
        } else {
          fail("choices must be numbers or strings");
        }
      }
      out.push_back({name, c});
    } else if (kind == "int") {
      const auto lo = number("lo");
      const auto hi = number("hi");
      if (!lo.is_number_integer() || !hi.is_number_integer()) fail("int bounds must be integers");
      out.push_back({name, IntRange{lo.get<std::int64_t>(), hi.get<std::int64_t>()}});
    } else if (kind == "real") {
      RealRange r{number("lo").get<double>(), number("hi").get<double>(), false};
      if (def.contains("log")) {
        if (!def["log"].is_boolean()) fail("\"log\" must be a boolean");
        r.log_scale = def["log"].get<bool>();
      }
      out.push_back({name, r});
    } else {
      fail("unknown kind '" + kind + "'");
    }
    try {
      validate(out.back().space);
    } catch (const SearchError& e) {
      fail(e.what());
    }
  }
  return out;
}

AutoFitResult auto_estimator_fit(ModelTemplate& t, const Shards& data, const DataColumns& cols,
                                 const FitConfig& fit, Study study, ClusterContext* cluster) {
  const RecordBatch all = collect(data);
  const std::size_t n = all.num_rows();
  const std::size_t n_val = n / 5;
  if (n_val == 0 || n_val == n) {
    throw DataError("need at least 5 rows to hold out a validation fold, got " + std::to_string(n));
  }
  const std::size_t parts = cluster ? cluster->size() : 1;
  const Shards train = shards_from_rows(all.slice(0, n - n_val), parts);
  const Shards val = shards_from_rows(all.slice(n - n_val, n), parts);

  Objective objective = [&](const Resolved& r, const Config&) {
    Estimator est = Estimator::from_model(r.spec, r.sgd, cluster);
    est.fit(train, cols, fit);
    return est.evaluate(val, cols, Metric::Loss);
  };
  Study done = run_study(t, objective, std::move(study));

  const Resolved best = resolve_template(t, done.trials[*done.best].config);
  Estimator est = Estimator::from_model(best.spec, best.sgd, cluster);
  est.fit(shards_from_rows(all, parts), cols, fit);
  return {std::move(est), std::move(done)};
}

}  // namespace shardpipe
