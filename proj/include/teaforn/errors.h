#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace teaforn {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Out-of-range hyperparameter or argument value.
class ParameterError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
   public:
    using std::out_of_range::out_of_range;
};

// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

// Every entry of a softmax slice was masked.
class DegenerateDistributionError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

class ParseError : public std::runtime_error {
   public:
    ParseError(std::size_t line, const std::string &what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const { return line_; }

   private:
    std::size_t line_;
};

class IncompatibleCheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
   public:
    DivergenceError(const std::string &what, std::string snapshot_path)
        : std::runtime_error(what), snapshot_path_(std::move(snapshot_path)) {}

    const std::string &snapshot_path() const { return snapshot_path_; }

   private:
    std::string snapshot_path_;
};

}  // namespace teaforn
