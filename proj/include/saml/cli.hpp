#pragma once

#include <string>
#include <vector>

namespace saml {

// Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
int run_cli(const std::vector<std::string> & args);
int run_cli(int argc, const char * const * argv);

} // namespace saml
