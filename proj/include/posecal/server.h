#pragma once

#include <memory>
#include <string>

#include "posecal/protocol.h"

namespace httplib {
class Server;
}

namespace posecal {

// HTTP front end of a SessionService:
//   POST   /sessions       -> {"ok": true, "session": id}
//   POST   /sessions/<id>  body: one protocol command, reply: its result
//   DELETE /sessions/<id>
//   GET    /health
// Replies are JSON; unknown sessions get a 404 with an error envelope.
class ProtocolServer {
 public:
  explicit ProtocolServer(SessionService& service);
  ~ProtocolServer();

  // False when the address cannot be bound (e.g. port in use). Port 0 picks
  // a free port.
  bool Bind(const std::string& host, int port);
  int port() const { return port_; }
  // Blocks until Stop().
  bool Listen();
  void Stop();

 private:
  SessionService& service_;
  std::unique_ptr<httplib::Server> server_;
  int port_ = -1;
};

}  // namespace posecal
