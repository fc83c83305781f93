#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstddef>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "meswitch/registry.hpp"
#include "meswitch/router.hpp"
#include "meswitch/toylm.hpp"

namespace meswitch {

struct ServeRequest {
    std::string id;
    std::string query;
    std::optional<std::string> expert;
    std::optional<std::size_t> max_new;
};

struct ServeError {
    std::string kind;
    std::string message;
};

struct ServeResponse {
    std::string id;
    std::string domain;
    std::string expert;
    std::vector<Token> tokens;
    double latency_ms = 0.0;
    std::optional<ServeError> error;

    nlohmann::json to_json() const {
        nlohmann::json j{{"id", id}, {"domain", domain}, {"expert", expert}, {"latency_ms", latency_ms}};
        if (error) {
            j["error"] = {{"kind", error->kind}, {"message", error->message}};
        } else {
            j["tokens"] = tokens;
        }
        return j;
    }

    static ServeResponse from_json(const nlohmann::json& j) {
        ServeResponse r;
        try {
            r.id = j.at("id").get<std::string>();
            r.domain = j.value("domain", std::string());
            r.expert = j.value("expert", std::string());
            r.latency_ms = j.value("latency_ms", 0.0);
            if (j.contains("error")) {
                r.error = ServeError{j.at("error").at("kind").get<std::string>(),
                                     j.at("error").at("message").get<std::string>()};
            } else {
                r.tokens = j.at("tokens").get<std::vector<Token>>();
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::protocol, std::string("malformed response: ") + e.what());
        }
        return r;
    }
};

inline nlohmann::json request_to_json(const ServeRequest& r) {
    nlohmann::json j{{"id", r.id}, {"query", r.query}};
    if (r.expert) {
        j["expert"] = *r.expert;
    }
    if (r.max_new) {
        j["max_new"] = *r.max_new;
    }
    return j;
}

inline ServeRequest parse_request(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
        fail(ErrorKind::protocol, "request is not valid JSON");
    }
    require(j.is_object(), ErrorKind::protocol, "request must be a JSON object");
    ServeRequest r;
    try {
        r.id = j.at("id").get<std::string>();
        r.query = j.at("query").get<std::string>();
        if (j.contains("expert") && !j.at("expert").is_null()) {
            r.expert = j.at("expert").get<std::string>();
        }
        if (j.contains("max_new") && !j.at("max_new").is_null()) {
            require(j.at("max_new").is_number_unsigned(), ErrorKind::protocol,
                    "max_new must be a non-negative integer");
            r.max_new = j.at("max_new").get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::protocol, std::string("bad request field: ") + e.what());
    }
    return r;
}

/// Shared read-only state for request handling: the base model, the expert
/// registry, and the router used when a request names no expert.
class ServingContext {
public:
    ServingContext(const ToyLM& base, ExpertRegistry& registry, const RouterModel* router,
                   std::size_t default_max_new = 16, std::size_t max_new_limit = 256)
        : base_(base), registry_(registry), router_(router), default_max_new_(default_max_new),
          max_new_limit_(max_new_limit) {}

    ServeResponse handle(const ServeRequest& req) const {
        const auto t0 = std::chrono::steady_clock::now();
        ServeResponse resp;
        resp.id = req.id;
        try {
            if (req.expert) {
                const auto meta = registry_.find(*req.expert);
                require(meta.has_value(), ErrorKind::not_found, "unknown expert '" + *req.expert + "'");
                resp.expert = meta->id;
                resp.domain = meta->domain;
            } else {
                require(router_ != nullptr, ErrorKind::invalid_argument, "request names no expert and no router is loaded");
                resp.domain = classify(*router_, req.query).label.name;
                const auto id = registry_.expert_for_domain(resp.domain);
                require(id.has_value(), ErrorKind::not_found, "no expert serves domain '" + resp.domain + "'");
                resp.expert = *id;
            }
            const std::size_t max_new = req.max_new.value_or(default_max_new_);
            require(max_new <= max_new_limit_, ErrorKind::out_of_range,
                    "max_new " + std::to_string(max_new) + " exceeds the limit " + std::to_string(max_new_limit_));
            const std::vector<Token> prompt = tokenize(req.query);
            ExpertPin pin(registry_, resp.expert, true);
            const auto seq = greedy_decode(base_, pin.deltas(), prompt, max_new);
            resp.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
        } catch (const Error& e) {
            resp.error = ServeError{std::string(kind_name(e.kind())), e.what()};
        } catch (const std::exception& e) {
            resp.error = ServeError{"internal", e.what()};
        }
        resp.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return resp;
    }

    /// One request line in, one response line out (without the newline).
    std::string handle_line(std::string_view line) const {
        ServeRequest req;
        try {
            req = parse_request(line);
        } catch (const Error& e) {
            ServeResponse resp;
            resp.error = ServeError{std::string(kind_name(e.kind())), e.what()};
            return resp.to_json().dump();
        }
        return handle(req).to_json().dump();
    }

private:
    const ToyLM& base_;
    ExpertRegistry& registry_;
    const RouterModel* router_;
    std::size_t default_max_new_;
    std::size_t max_new_limit_;
};

namespace detail {

inline constexpr std::size_t kMaxLineBytes = 1 << 20;

inline void send_all(int fd, std::string_view data) {
    while (!data.empty()) {
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            fail(ErrorKind::io, std::string("send: ") + std::strerror(errno));
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

/// Buffered newline-delimited reader over a socket.
class LineReader {
public:
    explicit LineReader(int fd) : fd_(fd) {}

    /// Next line without its terminator; nullopt at end of stream.
    std::optional<std::string> next() {
        for (;;) {
            const auto nl = buf_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buf_.substr(0, nl);
                buf_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') {
                    line.pop_back();
                }
                return line;
            }
            if (buf_.size() > kMaxLineBytes) {
                fail(ErrorKind::protocol, "line exceeds " + std::to_string(kMaxLineBytes) + " bytes");
            }
            char chunk[4096];
            const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
            if (n < 0 && errno == EINTR) {
                continue;
            }
            if (n <= 0) {
                if (!buf_.empty()) {
                    std::string line = std::move(buf_);
                    buf_.clear();
                    return line;
                }
                return std::nullopt;
            }
            buf_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    int fd_;
    std::string buf_;
};

}  // namespace detail

/// TCP JSONL daemon: one thread per connection, requests on a connection are
/// answered in order.
class JsonlServer {
public:
    explicit JsonlServer(const ServingContext& ctx) : ctx_(ctx) {}
    JsonlServer(const JsonlServer&) = delete;
    JsonlServer& operator=(const JsonlServer&) = delete;
    ~JsonlServer() { stop(); }

    /// Bind 127.0.0.1:`port` (0 picks an ephemeral port) and start accepting.
    void start(std::uint16_t port = 0, const std::string& host = "127.0.0.1") {
        require(listen_fd_ < 0, ErrorKind::invalid_argument, "server already started");
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) {
            fail(ErrorKind::io, std::string("socket: ") + std::strerror(errno));
        }
        const int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd);
            fail(ErrorKind::invalid_argument, "bad listen address " + host);
        }
        if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 64) != 0) {
            const std::string msg = std::strerror(errno);
            ::close(fd);
            fail(ErrorKind::io, "cannot listen on " + host + ":" + std::to_string(port) + ": " + msg);
        }
        socklen_t len = sizeof(addr);
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        listen_fd_ = fd;
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    std::uint16_t port() const noexcept { return port_; }
    std::size_t requests_served() const noexcept { return served_.load(); }

    void stop() {
        if (!running_.exchange(false)) {
            return;
        }
        ::shutdown(listen_fd_, SHUT_RDWR);
        if (accept_thread_.joinable()) {
            accept_thread_.join();
        }
        ::close(listen_fd_);
        listen_fd_ = -1;
        std::vector<std::thread> workers;
        {
            std::lock_guard lock(mu_);
            for (int fd : open_fds_) {
                ::shutdown(fd, SHUT_RDWR);
            }
            workers.swap(workers_);
        }
        for (auto& t : workers) {
            t.join();
        }
    }

    /// Block until stop() is called from another thread.
    void wait() {
        while (running_) {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }

private:
    void accept_loop() {
        while (running_) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR) {
                    continue;
                }
                return;
            }
            std::lock_guard lock(mu_);
            if (!running_) {
                ::close(fd);
                return;
            }
            open_fds_.insert(fd);
            workers_.emplace_back([this, fd] { serve_connection(fd); });
        }
    }

    void serve_connection(int fd) {
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        detail::LineReader reader(fd);
        try {
            while (auto line = reader.next()) {
                if (line->find_first_not_of(" \t") == std::string::npos) {
                    continue;
                }
                const std::string reply = ctx_.handle_line(*line);
                ++served_;
                detail::send_all(fd, reply + "\n");
            }
        } catch (const Error& e) {
            ServeResponse resp;
            resp.error = ServeError{std::string(kind_name(e.kind())), e.what()};
            try {
                detail::send_all(fd, resp.to_json().dump() + "\n");
            } catch (const Error&) {
            }
        }
        std::lock_guard lock(mu_);
        open_fds_.erase(fd);
        ::close(fd);
    }

    const ServingContext& ctx_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::atomic<std::size_t> served_{0};
    std::thread accept_thread_;
    std::mutex mu_;
    std::set<int> open_fds_;
    std::vector<std::thread> workers_;
};

/// Blocking client for the JSONL protocol.
class JsonlClient {
public:
    JsonlClient(const std::string& host, std::uint16_t port) : fd_(::socket(AF_INET, SOCK_STREAM, 0)) {
        if (fd_ < 0) {
            fail(ErrorKind::io, std::string("socket: ") + std::strerror(errno));
        }
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd_);
            fail(ErrorKind::invalid_argument, "bad address " + host);
        }
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            const std::string msg = std::strerror(errno);
            ::close(fd_);
            fail(ErrorKind::io, "cannot connect to " + host + ":" + std::to_string(port) + ": " + msg);
        }
        const int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        reader_ = std::make_unique<detail::LineReader>(fd_);
    }
    JsonlClient(const JsonlClient&) = delete;
    JsonlClient& operator=(const JsonlClient&) = delete;
    ~JsonlClient() { ::close(fd_); }

    std::string round_trip(std::string_view line) {
        detail::send_all(fd_, std::string(line) + "\n");
        auto reply = reader_->next();
        require(reply.has_value(), ErrorKind::protocol, "server closed the connection");
        return *reply;
    }

    ServeResponse request(const ServeRequest& req) {
        const std::string reply = round_trip(request_to_json(req).dump());
        try {
            return ServeResponse::from_json(nlohmann::json::parse(reply));
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::protocol, "server reply is not valid JSON");
        }
    }

private:
    int fd_;
    std::unique_ptr<detail::LineReader> reader_;
};

}  // namespace meswitch
