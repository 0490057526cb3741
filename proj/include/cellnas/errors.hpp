#pragma once

#include <stdexcept>
#include <string>

namespace cellnas {

// Shape or channel disagreement between operands.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Out-of-range hyper-parameter (stride, rate, channel count, ...).
class ParameterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input data: NaN architecture rows, unnormalized targets, bad genotypes.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// A loss or gradient became non-finite during search or training.
class NumericalAbort : public std::runtime_error {
public:
    NumericalAbort(const std::string& what, long batch_id)
        : std::runtime_error(what), batch_id_(batch_id) {}
    long batch_id() const { return batch_id_; }

private:
    long batch_id_;
};

// Text input (config, genotype) that fails to parse. Carries a 1-based line.
class ParseError : public std::runtime_error {
public:
    ParseError(int line, const std::string& reason)
        : std::runtime_error("line " + std::to_string(line) + ": " + reason), line_(line), reason_(reason) {}
    int line() const { return line_; }
    const std::string& reason() const { return reason_; }

private:
    int line_;
    std::string reason_;
};

// Checkpoint container that is corrupt or from another format version.
class IntegrityError : public std::runtime_error {
public:
    IntegrityError(const std::string& section, const std::string& reason)
        : std::runtime_error("checkpoint section '" + section + "': " + reason), section_(section) {}
    const std::string& section() const { return section_; }

private:
    std::string section_;
};

}  // namespace cellnas
