#ifndef RIMNAV_HTTP_HPP_
#define RIMNAV_HTTP_HPP_

#include <map>
#include <string>

#include <httplib.h>

#include "rimnav/service.hpp"

namespace rimnav {

/// Binds every route of `svc` onto an httplib server. No authentication:
/// intended for localhost use.
inline void bind_routes(httplib::Server& server, NavService& svc) {
  auto forward = [&svc](const char* method) {
    return [&svc, method](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> query;
      for (const auto& [k, v] : req.params) query[k] = v;
      const ServiceResponse r = svc.handle(method, req.path, req.body, query);
      res.status = r.status;
      res.set_content(r.text(), "application/json");
    };
  };
  server.Get(".*", forward("GET"));
  server.Post(".*", forward("POST"));
  server.Delete(".*", forward("DELETE"));
}

/// Blocks serving on host:port. Port 0 picks a free port and reports it
/// through `on_bound` before accepting connections.
template <typename OnBound>
bool serve(NavService& svc, const std::string& host, int port, OnBound on_bound, httplib::Server* external = nullptr) {
  httplib::Server local;
  httplib::Server& server = external ? *external : local;
  bind_routes(server, svc);
  int bound = port;
  if (port == 0) {
    bound = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) return false;
  on_bound(bound);
  return server.listen_after_bind();
}

}  // namespace rimnav

#endif  // RIMNAV_HTTP_HPP_
