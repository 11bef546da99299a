#pragma once

#include "relight/service.hpp"

#include <httplib.h>

namespace relight {

namespace detail {

inline void json_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(Json{{"error", message}}.dump(), "application/json");
}

inline std::map<std::string, std::string> query_map(const httplib::Request& req) {
  std::map<std::string, std::string> q;
  for (const auto& [k, v] : req.params)
    if (!q.emplace(k, v).second) throw ArgumentError("parameter '" + k + "' given more than once");
  return q;
}

template <class F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const NotFoundError& e) {
    json_error(res, 404, e.what());
  } catch (const ArgumentError& e) {
    json_error(res, 400, e.what());
  } catch (const std::exception& e) {
    json_error(res, 500, e.what());
  }
}

}  // namespace detail

/// GET /health, /envmaps, /preview?env=, /render?yaw&pitch&dist&env&rot&size.
inline void install_routes(httplib::Server& server, FrameService& service) {
  server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"status":"ok"})", "application/json");
  });
  server.Get("/envmaps", [&service](const httplib::Request&, httplib::Response& res) {
    Json list = Json::array();
    for (const auto& e : service.envs())
      list.push_back({{"id", e.id()}, {"preview", "/preview?env=" + httplib::detail::encode_query_param(e.id())}});
    res.set_content(list.dump(), "application/json");
  });
  server.Get("/preview", [&service](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      const auto q = detail::query_map(req);
      for (const auto& kv : q)
        if (kv.first != "env") throw ArgumentError("unknown parameter '" + kv.first + "'");
      if (!q.count("env")) throw ArgumentError("missing parameter 'env'");
      res.set_content(service.preview_png(q.at("env")), "image/png");
    });
  });
  server.Get("/render", [&service](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      const FrameRequest fr = parse_frame_request(detail::query_map(req));
      res.set_content(service.render_png(fr), "image/png");
    });
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) detail::json_error(res, res.status, res.status == 404 ? "not found" : "request failed");
  });
}

}  // namespace relight
