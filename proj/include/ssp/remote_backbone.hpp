#pragma once

#include <functional>
#include <istream>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <string_view>

#include "ssp/backbone.hpp"

namespace ssp {

/// Carries one request line to a server and returns its one response line.
/// Lines exclude the trailing newline.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string round_trip(const std::string& line) = 0;
};

/// Spawns `command` through /bin/sh and talks to it over its stdin/stdout.
class StdioTransport final : public Transport {
 public:
  explicit StdioTransport(const std::string& command);
  ~StdioTransport() override;
  StdioTransport(const StdioTransport&) = delete;
  StdioTransport& operator=(const StdioTransport&) = delete;

  std::string round_trip(const std::string& line) override;

 private:
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string buffer_;
};

class TcpTransport final : public Transport {
 public:
  /// address is "host:port".
  explicit TcpTransport(const std::string& address);
  ~TcpTransport() override;
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  std::string round_trip(const std::string& line) override;

 private:
  int fd_ = -1;
  std::string buffer_;
};

/// In-process server; useful for tests and for exercising the wire format
/// without a second process.
class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(std::shared_ptr<const Backbone> server) : server_(std::move(server)) {}
  std::string round_trip(const std::string& line) override;

 private:
  std::shared_ptr<const Backbone> server_;
};

/// Backbone client for the newline-delimited JSON protocol. Requests are
/// serialized per instance. The protocol has no log-probability operation,
/// so next_token_logprobs is unavailable.
class RemoteBackbone final : public Backbone {
 public:
  explicit RemoteBackbone(std::unique_ptr<Transport> transport);

  BackboneMeta meta() const override { return meta_; }
  EmbeddingSeq embed(std::span<const TokenId> tokens) const override;
  Vec forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const override;
  Mat vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const override;
  Vec next_token_logprobs(std::span<const TokenId> tokens) const override;
  Tokens generate(std::span<const TokenId> tokens, std::size_t max_new, DecodeStrategy strategy) const override;

  bool supports_vjp() const override { return true; }
  bool supports_token_ops() const override { return false; }

 private:
  std::string call(const std::string& request) const;

  std::unique_ptr<Transport> transport_;
  mutable std::mutex mutex_;
  BackboneMeta meta_;
};

/// Answers one request line; failures become {"error":{...}} responses.
std::string handle_request_line(const Backbone& backbone, std::string_view line);

/// Serves requests line by line until end of input.
void serve_stream(const Backbone& backbone, std::istream& in, std::ostream& out);

/// Listens on host:port and serves connections one at a time. Stops after
/// `max_connections` connections when it is non-zero. `on_listen` receives
/// the bound port (useful with port 0).
void serve_tcp(const Backbone& backbone, const std::string& host, int port, std::size_t max_connections = 0,
               const std::function<void(int)>& on_listen = {});

}  // namespace ssp
