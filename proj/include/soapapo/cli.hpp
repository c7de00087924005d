#pragma once

#include <iosfwd>
#include <memory>
#include <string_view>

#include "soapapo/llm_gateway.hpp"

namespace soapapo {

inline constexpr std::string_view kVersion = "0.1.0";

struct CliHooks {
  /// Replaces the configured backend (tests inject counting or failing backends).
  std::shared_ptr<llm::Backend> backend;
};

/// Entry point of the `soapapo` binary. Exit codes: 0 success, 1 domain error, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const CliHooks& hooks = {});

}  // namespace soapapo
