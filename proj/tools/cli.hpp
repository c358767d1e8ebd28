#pragma once

#include <iosfwd>

namespace iaekf {

/// Exit codes: 0 success, 1 configuration or input error, 2 numerical degeneracy.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace iaekf
