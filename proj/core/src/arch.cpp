#include "shardpipe/arch.hpp"

#include <charconv>

namespace shardpipe {

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::size_t parse_dim(const std::string& token) {
  std::size_t v = 0;
  const auto* end = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(token.data(), end, v);
  if (token.empty() || ec != std::errc() || ptr != end) {
    throw ArchParseError(token, "expected a positive integer dimension");
  }
  if (v == 0) throw ArchParseError(token, "dimension must be at least 1");
  return v;
}

}  // namespace

ArchTokens split_arch(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ArchParseError(std::string(text), "missing ':' between dims and activations");
  }
  ArchTokens t;
  t.dims = split(text.substr(0, colon), '-');
  t.activations = split(text.substr(colon + 1), ',');
  if (t.dims.size() < 2) {
    throw ArchParseError(std::string(text.substr(0, colon)), "need at least two dimensions");
  }
  if (t.activations.size() != t.dims.size() - 1) {
    throw ArchParseError(std::string(text.substr(colon + 1)),
                         "expected " + std::to_string(t.dims.size() - 1) +
                             " activations for " + std::to_string(t.dims.size()) + " dims");
  }
  return t;
}

Activation parse_activation(std::string_view token) {
  if (token == "relu") return Activation::ReLU;
  if (token == "softmax") return Activation::Softmax;
  if (token == "id" || token == "identity") return Activation::Identity;
  throw ArchParseError(std::string(token), "unknown activation (use relu, softmax, id)");
}

std::optional<Loss> parse_loss(std::string_view token) {
  if (token == "mse") return Loss::MSE;
  if (token == "ce" || token == "cross_entropy" || token == "crossentropy") {
    return Loss::CrossEntropy;
  }
  return std::nullopt;
}

ModelSpec parse_arch(std::string_view text, std::optional<Loss> loss) {
  const ArchTokens t = split_arch(text);
  ModelSpec spec;
  for (std::size_t i = 0; i + 1 < t.dims.size(); ++i) {
    spec.layers.push_back(
        {parse_dim(t.dims[i]), parse_dim(t.dims[i + 1]), parse_activation(t.activations[i])});
  }
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
    if (spec.layers[i].activation == Activation::Softmax) {
      throw ArchParseError(t.activations[i], "softmax is only allowed on the final layer");
    }
  }
  spec.loss = loss.value_or(spec.layers.back().activation == Activation::Softmax
                                ? Loss::CrossEntropy
                                : Loss::MSE);
  return spec;
}

std::string format_arch(const ModelSpec& spec) {
  std::string dims;
  std::string acts;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (i == 0) dims += std::to_string(spec.layers[i].input_dim);
    dims += "-" + std::to_string(spec.layers[i].output_dim);
    if (i > 0) acts += ",";
    acts += spec.layers[i].activation == Activation::Identity ? "id"
                                                              : std::string(to_string(spec.layers[i].activation));
  }
  return dims + ":" + acts;
}

}  // namespace shardpipe
