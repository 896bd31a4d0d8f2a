#pragma once

#include <stdexcept>

namespace fmoe {

// Dimension or block-boundary mismatch between operands.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// A peer violated the wire contract (bad magic, mismatched tag, wrong sizes).
class ProtocolError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Socket-level failure: rendezvous, broken connection, short read/write.
class TransportError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace fmoe
