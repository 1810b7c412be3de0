#pragma once

#include <stdexcept>
#include <string>

namespace vhm {

// File and stream failures; everything else surfaces as std::invalid_argument
// or std::runtime_error.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace vhm
