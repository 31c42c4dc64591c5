#include "plrnn/core.hpp"

namespace plrnn {

std::string to_string(ObsKind kind) {
  switch (kind) {
    case ObsKind::linear_gaussian: return "linear_gaussian";
    case ObsKind::relu_gaussian: return "relu_gaussian";
    case ObsKind::softmax_categorical: return "softmax_categorical";
  }
  return "unknown";
}

ObsKind obs_kind_from_string(std::string_view name) {
  if (name == "linear_gaussian") return ObsKind::linear_gaussian;
  if (name == "relu_gaussian") return ObsKind::relu_gaussian;
  if (name == "softmax_categorical") return ObsKind::softmax_categorical;
  throw ConfigError("obs_kind", "unknown observation model '" + std::string(name) + "'");
}

}  // namespace plrnn
