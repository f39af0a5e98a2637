#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace semstg
{

/**
 * @brief Base class of every error raised by the library.
 */
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class ShapeError : public Error
{
public:
  using Error::Error;
};

/// Value outside an operation's domain (non-finite, reciprocal of ~0, ...).
class DomainError : public Error
{
public:
  using Error::Error;
};

/// Violated precondition of an API call.
class ContractError : public Error
{
public:
  using Error::Error;
};

/// Malformed annotation input; carries the 1-based line number.
class ParseError : public Error
{
public:
  ParseError(std::size_t line, const std::string & what)
  : Error("line " + std::to_string(line) + ": " + what), line_(line)
  {
  }

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Class label not present in the vocabulary.
class VocabularyError : public Error
{
public:
  using Error::Error;
};

/// Unreadable, truncated or mismatched checkpoint / cache file.
class FormatError : public Error
{
public:
  using Error::Error;
};

/// Invalid run or synthetic-corpus configuration.
class ConfigError : public Error
{
public:
  using Error::Error;
};

}  // namespace semstg
