// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace ilcp {

/// Strongly typed integer identifier. Tag distinguishes cells from UEs.
template <class Tag>
struct Id {
  std::uint32_t value = std::numeric_limits<std::uint32_t>::max();

  constexpr Id() = default;
  constexpr explicit Id(std::uint32_t v) : value(v) {}

  constexpr bool valid() const {
    return value != std::numeric_limits<std::uint32_t>::max();
  }
  constexpr auto operator<=>(const Id &) const = default;
};

struct CellTag {};
struct UeTag {};
using CellId = Id<CellTag>;
using UeId = Id<UeTag>;

/// Time index; one step is 10 ms.
using Step = std::int64_t;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

} // namespace ilcp

template <class Tag>
struct std::hash<ilcp::Id<Tag>> {
  std::size_t operator()(const ilcp::Id<Tag> &id) const noexcept {
    return std::hash<std::uint32_t>{}(id.value);
  }
};
