#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shardpipe/errors.hpp"
#include "shardpipe/nn.hpp"

namespace shardpipe {

// Architecture mini-language: "d0-d1-...-dk:act1,...,actk", for example
// "784-64-10:relu,softmax". Activations are relu, softmax, id (or identity).
// The loss defaults to CrossEntropy for a softmax head and MSE otherwise.
class ArchParseError : public Error {
 public:
  ArchParseError(const std::string& token, const std::string& why)
      : Error("bad architecture token '" + token + "': " + why), token_(token) {}
  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

// Raw tokens, before any numeric interpretation. Used by the template parser,
// which allows "$name" placeholders in either list.
struct ArchTokens {
  std::vector<std::string> dims;
  std::vector<std::string> activations;
};

ArchTokens split_arch(std::string_view text);

Activation parse_activation(std::string_view token);
std::optional<Loss> parse_loss(std::string_view token);

ModelSpec parse_arch(std::string_view text, std::optional<Loss> loss = std::nullopt);
std::string format_arch(const ModelSpec& spec);

}  // namespace shardpipe
