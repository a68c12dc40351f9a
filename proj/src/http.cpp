#include "idmkit/http.hpp"

#include "httplib.h"
#include "idmkit/errors.hpp"

namespace idm {

nlohmann::json post_json(const std::string& url, const nlohmann::json& body, int timeout_seconds) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("url needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  const std::string base = url.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : url.substr(slash);

  httplib::Client client(base);
  client.set_connection_timeout(timeout_seconds);
  client.set_read_timeout(timeout_seconds);
  const auto res = client.Post(path, body.dump(), "application/json");
  if (!res) throw TransportError("request to " + url + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError(url + " returned HTTP " + std::to_string(res->status));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::parse_error& e) {
    throw TransportError("unparsable reply from " + url + ": " + e.what());
  }
}

}  // namespace idm
