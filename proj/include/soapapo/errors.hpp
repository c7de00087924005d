#pragma once

#include <stdexcept>
#include <string>

namespace soapapo {

/// Base for every domain failure the pipeline reports. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// corpus
class IngestionError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  SchemaError(const std::string& key, const std::string& what)
      : Error(what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

// llm gateway
class TransportError : public Error {
 public:
  TransportError(int last_status, const std::string& what)
      : Error(what), last_status_(last_status) {}
  int last_status() const noexcept { return last_status_; }

 private:
  int last_status_;
};

class ScriptGapError : public Error {
 public:
  explicit ScriptGapError(const std::string& digest)
      : Error("mock script has no entry for request digest " + digest), digest_(digest) {}
  const std::string& digest() const noexcept { return digest_; }

 private:
  std::string digest_;
};

// prompt kit
class RenderError : public Error {
 public:
  RenderError(const std::string& slot, const std::string& what)
      : Error(what), slot_(slot) {}
  const std::string& slot() const noexcept { return slot_; }

 private:
  std::string slot_;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CoercionError : public Error {
 public:
  CoercionError(const std::string& key, const std::string& what)
      : Error(what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// apo engine
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A reply that stayed unreadable after the repair round. `key()` names the missing or
/// mistyped field when the dictionary parsed but failed its schema, and is empty otherwise.
class IterationError : public Error {
 public:
  IterationError(const std::string& what, std::string raw_output, std::string key = {})
      : Error(what), raw_output_(std::move(raw_output)), key_(std::move(key)) {}
  const std::string& raw_output() const noexcept { return raw_output_; }
  const std::string& key() const noexcept { return key_; }

 private:
  std::string raw_output_;
  std::string key_;
};

// configuration and reporting
class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : Error(what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace soapapo
