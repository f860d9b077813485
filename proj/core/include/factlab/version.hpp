#pragma once

namespace factlab {

// Version string recorded in run manifests so a run directory identifies the
// code that produced it.
const char* version_string();

} // namespace factlab
