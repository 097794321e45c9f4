#pragma once

#include <stdexcept>
#include <string>

namespace backchain {

// Error taxonomy shared by all modules. Everything derives from std
// exceptions so callers can catch coarsely; the subclasses carry the
// structured fields diagnostics need.

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct PreconditionError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, size_t pos)
        : std::runtime_error(what + " (position " + std::to_string(pos) + ")"), position(pos) {}
    size_t position;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    NumericError(const std::string& what, int layer_, const std::string& site_)
        : std::runtime_error(what + " [layer " + std::to_string(layer_) + ", site " + site_ + "]"),
          layer(layer_),
          site(site_) {}
    int layer;
    std::string site;
};

struct VerificationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingFailure : std::runtime_error {
    TrainingFailure(const std::string& what, std::string last_checkpoint_)
        : std::runtime_error(what), last_checkpoint(std::move(last_checkpoint_)) {}
    std::string last_checkpoint;
};

}  // namespace backchain
