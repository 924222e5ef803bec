#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <cstdlib>
#include <fstream>

#include "flopsgate/dataset.hpp"

namespace flopsgate {

namespace {

constexpr const char* kDefaultHost = "https://storage.googleapis.com";
constexpr const char* kDefaultPath = "/cvdf-datasets/mnist/";

}  // namespace

void download_mnist(const std::filesystem::path& dir) {
  std::string host = kDefaultHost;
  std::string prefix = kDefaultPath;
  if (const char* env = std::getenv("FLOPSGATE_MNIST_URL"); env && *env) {
    // scheme://host[:port]/path/
    std::string url = env;
    const auto scheme = url.find("://");
    const auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    host = url.substr(0, slash);
    prefix = slash == std::string::npos ? "/" : url.substr(slash);
    if (prefix.back() != '/') prefix += '/';
  }
  std::filesystem::create_directories(dir);
  httplib::Client client(host);
  client.set_follow_location(true);
  client.set_connection_timeout(30);
  client.set_read_timeout(120);
  for (const char* name : {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
                           "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"}) {
    const auto target = dir / name;
    if (std::filesystem::exists(target)) continue;
    auto res = client.Get(prefix + name);
    if (!res) {
      throw DatasetError("download of " + std::string(name) + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw DatasetError("download of " + std::string(name) + " returned HTTP " + std::to_string(res->status));
    }
    const auto tmp = target.string() + ".part";
    {
      std::ofstream os(tmp, std::ios::binary);
      os.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
      if (!os) throw DatasetError("cannot write " + tmp);
    }
    std::filesystem::rename(tmp, target);
  }
}

}  // namespace flopsgate
