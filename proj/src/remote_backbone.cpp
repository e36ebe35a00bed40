#include "ssp/remote_backbone.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <json.hpp>

#include "ssp/error.hpp"

namespace ssp {

using json = nlohmann::json;

namespace {

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EPIPE || errno == ECONNRESET) throw Error(ErrorCode::ProtocolError, "server closed the connection");
      throw Error(ErrorCode::IoError, std::string("write failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

/// Reads up to the next newline; false at end of stream with nothing buffered.
bool read_line(int fd, std::string& buffer, std::string& line) {
  for (;;) {
    const auto pos = buffer.find('\n');
    if (pos != std::string::npos) {
      line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      return true;
    }
    char chunk[65536];
    const ssize_t n = ::read(fd, chunk, sizeof(chunk));
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == ECONNRESET) throw Error(ErrorCode::ProtocolError, "server closed the connection");
      throw Error(ErrorCode::IoError, std::string("read failed: ") + std::strerror(errno));
    }
    if (n == 0) {
      if (buffer.empty()) return false;
      line = std::move(buffer);
      buffer.clear();
      return true;
    }
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

std::string exchange(int out_fd, int in_fd, std::string& buffer, const std::string& line) {
  write_all(out_fd, line + "\n");
  std::string response;
  if (!read_line(in_fd, buffer, response)) throw Error(ErrorCode::ProtocolError, "server closed the connection");
  return response;
}

json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto row = m.row(r);
    rows.push_back(json(std::vector<double>(row.begin(), row.end())));
  }
  return rows;
}

Vec vec_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw Error(ErrorCode::ProtocolError, std::string(what) + " must be an array");
  Vec v;
  v.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_number()) throw Error(ErrorCode::ProtocolError, std::string(what) + " must hold numbers");
    v.push_back(x.get<double>());
  }
  return v;
}

Mat mat_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw Error(ErrorCode::ProtocolError, std::string(what) + " must be an array of rows");
  Mat m;
  m.rows = j.size();
  for (const auto& row : j) {
    Vec v = vec_from_json(row, what);
    if (m.cols == 0) m.cols = v.size();
    if (v.size() != m.cols || v.empty()) throw Error(ErrorCode::ProtocolError, std::string(what) + " rows are ragged");
    m.values.insert(m.values.end(), v.begin(), v.end());
  }
  return m;
}

Tokens tokens_from_json(const json& j) {
  if (!j.is_array()) throw Error(ErrorCode::ProtocolError, "tokens must be an array");
  Tokens t;
  for (const auto& x : j) {
    if (!x.is_number_integer()) throw Error(ErrorCode::ProtocolError, "tokens must be integers");
    t.push_back(x.get<TokenId>());
  }
  return t;
}

std::size_t size_field(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned()) {
    throw Error(ErrorCode::ProtocolError, std::string("missing or invalid '") + key + "'");
  }
  return j[key].get<std::size_t>();
}

std::string error_message(const Error& e) {
  // what() is "Code: message"
  std::string_view what = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  if (what.starts_with(prefix)) what.remove_prefix(prefix.size());
  return std::string(what);
}

json error_json(std::string_view code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

}  // namespace

StdioTransport::StdioTransport(const std::string& command) {
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) {
    throw Error(ErrorCode::IoError, std::string("pipe failed: ") + std::strerror(errno));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::IoError, std::string("fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::signal(SIGPIPE, SIG_IGN);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pid_ = pid;
}

StdioTransport::~StdioTransport() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

std::string StdioTransport::round_trip(const std::string& line) { return exchange(to_child_, from_child_, buffer_, line); }

TcpTransport::TcpTransport(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::ConfigError, "remote address must be host:port");
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0) {
    throw Error(ErrorCode::IoError, "cannot resolve " + address);
  }
  for (addrinfo* p = res; p; p = p->ai_next) {
    const int fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) {
      fd_ = fd;
      break;
    }
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw Error(ErrorCode::IoError, "cannot connect to " + address);
  ::signal(SIGPIPE, SIG_IGN);
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

std::string TcpTransport::round_trip(const std::string& line) { return exchange(fd_, fd_, buffer_, line); }

std::string LoopbackTransport::round_trip(const std::string& line) { return handle_request_line(*server_, line); }

RemoteBackbone::RemoteBackbone(std::unique_ptr<Transport> transport) : transport_(std::move(transport)) {
  const json r = json::parse(call(json{{"op", "meta"}}.dump()));
  meta_.dim = size_field(r, "dim");
  meta_.layers = size_field(r, "layers");
  meta_.vocab = size_field(r, "vocab");
  meta_.max_context = size_field(r, "max_context");
  if (!r.contains("name") || !r["name"].is_string()) throw Error(ErrorCode::ProtocolError, "meta lacks a name");
  meta_.name = r["name"].get<std::string>();
  if (meta_.dim == 0 || meta_.layers == 0 || meta_.vocab == 0 || meta_.max_context == 0) {
    throw Error(ErrorCode::ProtocolError, "meta sizes must be positive");
  }
}

std::string RemoteBackbone::call(const std::string& request) const {
  std::string response;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    response = transport_->round_trip(request);
  }
  json r;
  try {
    r = json::parse(response);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ProtocolError, std::string("malformed response: ") + e.what());
  }
  if (!r.is_object()) throw Error(ErrorCode::ProtocolError, "response must be an object");
  if (r.contains("error")) {
    const json& e = r["error"];
    const std::string code = e.value("code", "ProtocolError");
    const std::string message = e.value("message", "");
    throw Error(parse_error_code(code).value_or(ErrorCode::ProtocolError), "remote: " + message);
  }
  return response;
}

EmbeddingSeq RemoteBackbone::embed(std::span<const TokenId> tokens) const {
  check_tokens(meta_, tokens);
  const json r = json::parse(call(json{{"op", "embed"}, {"tokens", std::vector<TokenId>(tokens.begin(), tokens.end())}}.dump()));
  if (!r.contains("embeddings")) throw Error(ErrorCode::ProtocolError, "embed response lacks embeddings");
  EmbeddingSeq seq;
  seq.matrix = mat_from_json(r["embeddings"], "embeddings");
  if (seq.matrix.rows != tokens.size() || seq.matrix.cols != meta_.dim) {
    throw Error(ErrorCode::ProtocolError, "embed response has the wrong shape");
  }
  return seq;
}

Vec RemoteBackbone::forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const {
  check_layer(meta_, layer);
  const json r = json::parse(call(json{{"op", "forward"}, {"layer", layer}, {"embeddings", mat_to_json(seq.matrix)}}.dump()));
  if (!r.contains("hidden")) throw Error(ErrorCode::ProtocolError, "forward response lacks hidden");
  Vec h = vec_from_json(r["hidden"], "hidden");
  if (h.size() != meta_.dim) throw Error(ErrorCode::ProtocolError, "forward response has the wrong width");
  return h;
}

Mat RemoteBackbone::vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const {
  check_layer(meta_, layer);
  if (!seq.inject) throw Error(ErrorCode::UnsupportedInput, "vjp needs an inject span");
  if (cotangent.size() != meta_.dim) throw Error(ErrorCode::ShapeMismatch, "cotangent width");
  const json req{{"op", "vjp"},
                 {"layer", layer},
                 {"embeddings", mat_to_json(seq.matrix)},
                 {"inject", {{"start", seq.inject->start}, {"len", seq.inject->length}}},
                 {"cotangent", std::vector<double>(cotangent.begin(), cotangent.end())}};
  const json r = json::parse(call(req.dump()));
  if (!r.contains("grads")) throw Error(ErrorCode::ProtocolError, "vjp response lacks grads");
  Mat g = mat_from_json(r["grads"], "grads");
  if (g.rows != seq.inject->length || g.cols != meta_.dim) {
    throw Error(ErrorCode::ProtocolError, "vjp response has the wrong shape");
  }
  return g;
}

Vec RemoteBackbone::next_token_logprobs(std::span<const TokenId>) const {
  throw Error(ErrorCode::UnsupportedCapability, "the remote protocol has no log-probability operation");
}

Tokens RemoteBackbone::generate(std::span<const TokenId> tokens, std::size_t max_new, DecodeStrategy strategy) const {
  check_tokens(meta_, tokens);
  json strat = strategy.kind == DecodeStrategy::Kind::greedy ? json("greedy") : json{{"beam", strategy.beams}};
  const json req{{"op", "generate"},
                 {"tokens", std::vector<TokenId>(tokens.begin(), tokens.end())},
                 {"max_new", max_new},
                 {"strategy", strat}};
  const json r = json::parse(call(req.dump()));
  if (!r.contains("tokens")) throw Error(ErrorCode::ProtocolError, "generate response lacks tokens");
  return tokens_from_json(r["tokens"]);
}

std::string handle_request_line(const Backbone& backbone, std::string_view line) {
  json req;
  try {
    req = json::parse(line);
  } catch (const json::exception& e) {
    return error_json("ProtocolError", std::string("malformed request: ") + e.what()).dump();
  }
  try {
    if (!req.is_object() || !req.contains("op") || !req["op"].is_string()) {
      throw Error(ErrorCode::ProtocolError, "request needs a string 'op'");
    }
    const std::string op = req["op"].get<std::string>();
    if (op == "meta") {
      const auto m = backbone.meta();
      return json{{"dim", m.dim}, {"layers", m.layers}, {"vocab", m.vocab}, {"max_context", m.max_context}, {"name", m.name}}
          .dump();
    }
    if (op == "embed") {
      const Tokens t = tokens_from_json(req.value("tokens", json()));
      return json{{"embeddings", mat_to_json(backbone.embed(t).matrix)}}.dump();
    }
    if (op == "forward") {
      EmbeddingSeq seq;
      seq.matrix = mat_from_json(req.value("embeddings", json()), "embeddings");
      const Vec h = backbone.forward_hidden(seq, size_field(req, "layer"));
      return json{{"hidden", h}}.dump();
    }
    if (op == "vjp") {
      EmbeddingSeq seq;
      seq.matrix = mat_from_json(req.value("embeddings", json()), "embeddings");
      const json inj = req.value("inject", json());
      if (!inj.is_object()) throw Error(ErrorCode::ProtocolError, "vjp needs an inject object");
      seq.inject = InjectSpan{size_field(inj, "start"), size_field(inj, "len")};
      if (seq.inject->start + seq.inject->length > seq.length()) {
        throw Error(ErrorCode::ShapeMismatch, "inject span exceeds the sequence");
      }
      const Vec cot = vec_from_json(req.value("cotangent", json()), "cotangent");
      return json{{"grads", mat_to_json(backbone.vjp_inject(seq, size_field(req, "layer"), cot))}}.dump();
    }
    if (op == "generate") {
      const Tokens t = tokens_from_json(req.value("tokens", json()));
      const json s = req.value("strategy", json("greedy"));
      DecodeStrategy strategy;
      if (s == "greedy") {
        strategy = DecodeStrategy::greedy();
      } else if (s.is_object() && s.contains("beam") && s["beam"].is_number_unsigned() && s["beam"].get<std::size_t>() > 0) {
        strategy = DecodeStrategy::beam(s["beam"].get<std::size_t>());
      } else {
        throw Error(ErrorCode::ProtocolError, "strategy must be \"greedy\" or {\"beam\":k}");
      }
      return json{{"tokens", backbone.generate(t, size_field(req, "max_new"), strategy)}}.dump();
    }
    throw Error(ErrorCode::ProtocolError, "unknown op '" + op + "'");
  } catch (const Error& e) {
    return error_json(to_string(e.code()), error_message(e)).dump();
  } catch (const json::exception& e) {
    return error_json("ProtocolError", e.what()).dump();
  }
}

void serve_stream(const Backbone& backbone, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out << handle_request_line(backbone, line) << '\n';
    out.flush();
  }
}

void serve_tcp(const Backbone& backbone, const std::string& host, int port, std::size_t max_connections,
               const std::function<void(int)>& on_listen) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw Error(ErrorCode::IoError, std::string("socket failed: ") + std::strerror(errno));
  const int yes = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw Error(ErrorCode::ConfigError, "serve host must be an IPv4 address");
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 4) != 0) {
    const std::string msg = std::strerror(errno);
    ::close(fd);
    throw Error(ErrorCode::IoError, "cannot listen: " + msg);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::signal(SIGPIPE, SIG_IGN);
  if (on_listen) on_listen(ntohs(addr.sin_port));

  for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) {
      if (errno == EINTR) continue;
      break;
    }
    std::string buffer;
    std::string line;
    try {
      while (read_line(conn, buffer, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        write_all(conn, handle_request_line(backbone, line) + "\n");
      }
    } catch (const Error&) {
      // a dropped client ends only its own connection
    }
    ::close(conn);
  }
  ::close(fd);
}

}  // namespace ssp
