#include "refrank/http.hpp"

#include <cmath>

#include <httplib.h>

#include "refrank/error.hpp"

namespace refrank {

namespace {

// Splits "http://host:port/path" into client base and path.
struct UrlParts {
    std::string base;
    std::string path;
};

UrlParts split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        fail(Errc::BadConfig, "endpoint URL missing scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

class HttplibTransport final : public Transport {
public:
    explicit HttplibTransport(double timeout_seconds) : timeout_seconds_(timeout_seconds) {}

    HttpResponse post_json(const std::string& url, const std::string& body,
                           const std::map<std::string, std::string>& headers) override {
        UrlParts parts = split_url(url);
        httplib::Client client(parts.base);
        auto secs = std::max(1, int(std::ceil(timeout_seconds_)));
        client.set_connection_timeout(secs, 0);
        client.set_read_timeout(secs, 0);
        client.set_write_timeout(secs, 0);
        httplib::Headers hdrs(headers.begin(), headers.end());
        auto res = client.Post(parts.path, hdrs, body, "application/json");
        HttpResponse out;
        if (!res) {
            out.status = 0;
            out.error = httplib::to_string(res.error());
            return out;
        }
        out.status = res->status;
        out.body = res->body;
        return out;
    }

private:
    double timeout_seconds_;
};

}  // namespace

std::shared_ptr<Transport> make_http_transport(double timeout_seconds) {
    return std::make_shared<HttplibTransport>(timeout_seconds);
}

}  // namespace refrank
