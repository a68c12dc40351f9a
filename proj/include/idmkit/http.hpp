#pragma once

#include <string>

#include "json.hpp"

namespace idm {

/// POSTs `body` to `url` (http:// or https://) and returns the parsed JSON
/// reply. Connection failures, non-200 statuses and unparsable replies throw
/// TransportError.
nlohmann::json post_json(const std::string& url, const nlohmann::json& body, int timeout_seconds);

}  // namespace idm
