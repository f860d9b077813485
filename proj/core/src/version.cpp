#include "factlab/version.hpp"

namespace factlab {

const char* version_string() { return "factlab 0.1.0"; }

} // namespace factlab
