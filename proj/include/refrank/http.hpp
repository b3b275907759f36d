#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>

namespace refrank {

struct HttpResponse {
    int status = 0;          // 0 means transport-level failure (no response)
    std::string body;
    std::string error;       // transport error description when status == 0
    bool ok() const { return status >= 200 && status < 300; }
};

// Minimal POST-JSON transport boundary so teacher and embedder clients can be
// driven by scripted fakes in tests.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResponse post_json(const std::string& url, const std::string& body,
                                   const std::map<std::string, std::string>& headers) = 0;
};

// Real transport over httplib. timeout_seconds applies to connect/read/write.
std::shared_ptr<Transport> make_http_transport(double timeout_seconds);

}  // namespace refrank
