#ifndef CODA_ERRORS_HPP
#define CODA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace coda {

// Shape/dimension mismatches between operands.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Convolution geometry that does not produce integral output sizes.
struct geometry_error : std::runtime_error {
  explicit geometry_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input values (out-of-range pixels, bad labels, ...).
struct input_error : std::runtime_error {
  explicit input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Byte-level file format violations (IDX, CIFAR, checkpoints).
struct format_error : std::runtime_error {
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated API contracts (non-scalar backward root, bad class index, ...).
struct contract_error : std::runtime_error {
  explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace coda

#endif  // CODA_ERRORS_HPP
