#pragma once

#include <ostream>

namespace ssp {

/// Entry point of the ssp executable. Returns 0 on success, 2 for
/// configuration or validation errors and 3 for runtime or numeric failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ssp
