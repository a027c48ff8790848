#pragma once

#include <sys/types.h>

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace twostep::runtime {

/// A bidirectional stream of text lines. send_line may be called from several
/// threads; read_line from one. close() may be called from any thread and
/// unblocks a pending read_line.
class Connection {
 public:
  virtual ~Connection() = default;

  /// False once the peer is gone or the connection was closed.
  virtual bool send_line(const std::string& line) = 0;
  /// Blocks for the next line; nullopt on end of stream.
  virtual std::optional<std::string> read_line() = 0;
  /// Stop sending; the peer sees end of stream after buffered lines.
  virtual void close_write() = 0;
  /// Tear the connection down immediately.
  virtual void close() = 0;
  virtual std::string describe() const = 0;
};

/// Two connected in-memory endpoints.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_memory_pair();

/// Lines over a pair of file descriptors (pipes or one socket). Owns the
/// descriptors. When `child` is positive the connection owns that process:
/// close() kills it and the destructor reaps it.
class FdConnection : public Connection {
 public:
  FdConnection(int read_fd, int write_fd, std::string description, pid_t child = -1,
               bool is_socket = false);
  ~FdConnection() override;

  bool send_line(const std::string& line) override;
  std::optional<std::string> read_line() override;
  void close_write() override;
  void close() override;
  std::string describe() const override { return description_; }

  pid_t child() const noexcept { return child_; }
  /// Sends SIGKILL to the owned process, if any.
  void kill_child();

 private:
  int read_fd_;
  int write_fd_;
  std::string description_;
  pid_t child_;
  bool is_socket_;
  std::mutex write_mutex_;
  bool write_closed_ = false;
  std::string buffer_;
  bool eof_ = false;
};

/// Starts `argv` with its stdin/stdout connected to the returned connection.
/// stderr is inherited.
std::unique_ptr<FdConnection> spawn_process(const std::vector<std::string>& argv);

/// A connection to this process's own stdin/stdout.
std::unique_ptr<Connection> stdio_connection();

/// "host:port" split; throws std::invalid_argument when malformed.
std::pair<std::string, std::uint16_t> parse_address(const std::string& address);

/// Connects to a TCP endpoint, retrying until `timeout_seconds` elapses.
std::unique_ptr<Connection> tcp_connect(const std::string& address, double timeout_seconds = 10.0);

/// A listening TCP socket.
class TcpListener {
 public:
  /// Binds and listens; port 0 picks an ephemeral port.
  explicit TcpListener(const std::string& bind_address);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  /// Blocks for the next client; nullptr once shut down.
  std::unique_ptr<Connection> accept();
  /// Unblocks accept().
  void shutdown();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

}  // namespace twostep::runtime
