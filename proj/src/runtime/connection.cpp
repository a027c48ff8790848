#include "twostep/runtime/connection.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <arpa/inet.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <stdexcept>
#include <thread>

extern char** environ;

namespace twostep::runtime {

namespace {

std::runtime_error sys_error(const std::string& what) {
  return std::runtime_error(what + ": " + std::strerror(errno));
}

void ignore_sigpipe() {
  static const bool once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

struct Channel {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<std::string> lines;
  bool closed = false;
  bool dropped = false;
};

class MemoryConnection : public Connection {
 public:
  MemoryConnection(std::shared_ptr<Channel> in, std::shared_ptr<Channel> out, std::string name)
      : in_(std::move(in)), out_(std::move(out)), name_(std::move(name)) {}
  ~MemoryConnection() override { close(); }

  bool send_line(const std::string& line) override {
    std::lock_guard lock(out_->mutex);
    if (out_->closed) return false;
    out_->lines.push_back(line);
    out_->cv.notify_all();
    return true;
  }

  std::optional<std::string> read_line() override {
    std::unique_lock lock(in_->mutex);
    in_->cv.wait(lock, [&] { return in_->dropped || !in_->lines.empty() || in_->closed; });
    if (in_->dropped || in_->lines.empty()) return std::nullopt;
    std::string line = std::move(in_->lines.front());
    in_->lines.pop_front();
    return line;
  }

  void close_write() override {
    std::lock_guard lock(out_->mutex);
    out_->closed = true;
    out_->cv.notify_all();
  }

  void close() override {
    close_write();
    std::lock_guard lock(in_->mutex);
    in_->closed = true;
    in_->dropped = true;
    in_->lines.clear();
    in_->cv.notify_all();
  }

  std::string describe() const override { return name_; }

 private:
  std::shared_ptr<Channel> in_;
  std::shared_ptr<Channel> out_;
  std::string name_;
};

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_memory_pair() {
  auto a_to_b = std::make_shared<Channel>();
  auto b_to_a = std::make_shared<Channel>();
  return {std::make_unique<MemoryConnection>(b_to_a, a_to_b, "in-process"),
          std::make_unique<MemoryConnection>(a_to_b, b_to_a, "in-process")};
}

FdConnection::FdConnection(int read_fd, int write_fd, std::string description, pid_t child,
                           bool is_socket)
    : read_fd_(read_fd),
      write_fd_(write_fd),
      description_(std::move(description)),
      child_(child),
      is_socket_(is_socket) {
  ignore_sigpipe();
}

FdConnection::~FdConnection() {
  close_write();
  if (is_socket_) {
    ::close(read_fd_);
  } else {
    if (read_fd_ >= 0) ::close(read_fd_);
  }
  if (child_ > 0) {
    // Give the child a moment to exit on its own after end of input.
    int status = 0;
    for (int i = 0; i < 500; ++i) {
      if (::waitpid(child_, &status, WNOHANG) != 0) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(child_, SIGKILL);
    ::waitpid(child_, &status, 0);
  }
}

bool FdConnection::send_line(const std::string& line) {
  std::lock_guard lock(write_mutex_);
  if (write_closed_) return false;
  std::string data = line;
  data.push_back('\n');
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = is_socket_ ? ::send(write_fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                                 : ::write(write_fd_, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

std::optional<std::string> FdConnection::read_line() {
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    if (eof_) return std::nullopt;
    char chunk[4096];
    const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      // A partial final line without newline is not a message.
      eof_ = true;
      buffer_.clear();
      return std::nullopt;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

void FdConnection::close_write() {
  std::lock_guard lock(write_mutex_);
  if (write_closed_) return;
  write_closed_ = true;
  if (is_socket_) {
    ::shutdown(write_fd_, SHUT_WR);
  } else {
    ::close(write_fd_);
    write_fd_ = -1;
  }
}

void FdConnection::close() {
  close_write();
  if (is_socket_) ::shutdown(read_fd_, SHUT_RDWR);
  kill_child();
}

void FdConnection::kill_child() {
  if (child_ > 0) ::kill(child_, SIGKILL);
}

std::unique_ptr<FdConnection> spawn_process(const std::vector<std::string>& argv) {
  if (argv.empty()) throw std::invalid_argument("spawn_process: empty argv");
  ignore_sigpipe();
  int to_child[2];
  int from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw sys_error("pipe");
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw sys_error("pipe");
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = -1;
  const int rc = ::posix_spawn(&pid, argv[0].c_str(), &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(to_child[0]);
  ::close(from_child[1]);
  if (rc != 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    throw std::runtime_error("cannot start " + argv[0] + ": " + std::strerror(rc));
  }
  return std::make_unique<FdConnection>(from_child[0], to_child[1],
                                        "subprocess pid " + std::to_string(pid), pid);
}

std::unique_ptr<Connection> stdio_connection() {
  return std::make_unique<FdConnection>(STDIN_FILENO, ::dup(STDOUT_FILENO), "stdio");
}

std::pair<std::string, std::uint16_t> parse_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon + 1 == address.size()) {
    throw std::invalid_argument("address '" + address + "' is not host:port");
  }
  const std::string port_text = address.substr(colon + 1);
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(port_text, &used);
    if (used != port_text.size()) throw std::invalid_argument(port_text);
  } catch (const std::exception&) {
    throw std::invalid_argument("address '" + address + "' has a bad port");
  }
  if (port < 0 || port > 65535) throw std::invalid_argument("port out of range in '" + address + "'");
  std::string host = address.substr(0, colon);
  if (host.empty()) host = "0.0.0.0";
  return {host, static_cast<std::uint16_t>(port)};
}

namespace {

addrinfo* resolve_tcp(const std::string& host, std::uint16_t port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) throw std::runtime_error("cannot resolve " + host + ": " + ::gai_strerror(rc));
  return res;
}

}  // namespace

std::unique_ptr<Connection> tcp_connect(const std::string& address, double timeout_seconds) {
  const auto [host, port] = parse_address(address);
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration<double>(timeout_seconds);
  for (;;) {
    addrinfo* res = resolve_tcp(host, port, false);
    const int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(res);
      throw sys_error("socket");
    }
    const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc == 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return std::make_unique<FdConnection>(fd, fd, "tcp " + address, -1, true);
    }
    const int err = errno;
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw std::runtime_error("cannot connect to " + address + ": " + std::strerror(err));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

TcpListener::TcpListener(const std::string& bind_address) {
  const auto [host, port] = parse_address(bind_address);
  addrinfo* res = resolve_tcp(host, port, true);
  fd_ = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw sys_error("socket");
  }
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const int rc = ::bind(fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(fd_, 64) != 0) {
    const auto err = sys_error("cannot listen on " + bind_address);
    ::close(fd_);
    throw err;
  }
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Connection> TcpListener::accept() {
  for (;;) {
    sockaddr_in peer{};
    socklen_t len = sizeof peer;
    const int fd = ::accept4(fd_, reinterpret_cast<sockaddr*>(&peer), &len, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      return nullptr;
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    char host[64] = {};
    ::inet_ntop(AF_INET, &peer.sin_addr, host, sizeof host);
    return std::make_unique<FdConnection>(
        fd, fd, "tcp " + std::string(host) + ":" + std::to_string(ntohs(peer.sin_port)), -1, true);
  }
}

void TcpListener::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

}  // namespace twostep::runtime
