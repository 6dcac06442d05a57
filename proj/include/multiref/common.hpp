#pragma once

#include <stdexcept>
#include <string>

namespace multiref {

using real = double;

/// Bad model/config wiring (shape mismatches, inconsistent manifests, invalid presets).
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A documented call contract was violated by the caller (e.g. unnormalized masks).
struct contract_violation : std::logic_error {
    using std::logic_error::logic_error;
};

/// Filesystem / decode / serialization failures.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace multiref
