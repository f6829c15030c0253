#pragma once

#include <stdexcept>
#include <string>

namespace shardpipe {

// Base for every error the library raises. Subclasses group failures by the
// layer that detected them so callers (the CLI in particular) can map them to
// exit codes without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent user data: CSV problems, missing columns, bad
// partition layout.
class DataError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ClusterError : public Error {
 public:
  using Error::Error;
};

// A registered task threw on a worker. Carries the failing worker id.
class TaskError : public ClusterError {
 public:
  TaskError(int worker_id, const std::string& message)
      : ClusterError("task failed on worker " + std::to_string(worker_id) + ": " + message),
        worker_id_(worker_id) {}

  int worker_id() const noexcept { return worker_id_; }

 private:
  int worker_id_;
};

class SearchError : public Error {
 public:
  using Error::Error;
};

}  // namespace shardpipe
