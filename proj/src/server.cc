#include "posecal/server.h"

#include "httplib.h"

namespace posecal {

namespace {

constexpr const char* kJson = "application/json";

void Reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(DumpJson(body), kJson);
}

}  // namespace

ProtocolServer::ProtocolServer(SessionService& service)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  httplib::Server& s = *server_;
  // No SO_REUSEPORT: a second server must not share a port that is in use.
  s.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR,
               reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  s.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    Reply(res, 200, Json{{"ok", true}});
  });
  s.Post("/sessions", [this](const httplib::Request&, httplib::Response& res) {
    try {
      Reply(res, 201, Json{{"ok", true}, {"session", service_.Create()}});
    } catch (const ProtocolError& e) {
      Reply(res, 503, ErrorReply(e.code(), e.what()));
    }
  });
  s.Post(R"(/sessions/([A-Za-z0-9]+))",
         [this](const httplib::Request& req, httplib::Response& res) {
           const auto reply = service_.HandleText(req.matches[1], req.body);
           if (!reply) {
             Reply(res, 404, ErrorReply("unknown_session", "no such session"));
             return;
           }
           res.status = 200;
           res.set_content(*reply, kJson);
         });
  s.Delete(R"(/sessions/([A-Za-z0-9]+))",
           [this](const httplib::Request& req, httplib::Response& res) {
             if (service_.Remove(req.matches[1])) {
               Reply(res, 200, Json{{"ok", true}});
             } else {
               Reply(res, 404,
                     ErrorReply("unknown_session", "no such session"));
             }
           });
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      Reply(res, res.status, ErrorReply("not_found", "no such route"));
    }
  });
}

ProtocolServer::~ProtocolServer() { Stop(); }

bool ProtocolServer::Bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
    return port_ > 0;
  }
  if (!server_->bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

bool ProtocolServer::Listen() { return server_->listen_after_bind(); }

void ProtocolServer::Stop() {
  if (server_) server_->stop();
}

}  // namespace posecal
