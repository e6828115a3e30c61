#include "nfa/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "nfa/sha256.hpp"

namespace nfa {

namespace {
constexpr const char* kMagic = "NFA1";

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("checkpoint '" + path + "': " + what);
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (ckpt.names.size() != ckpt.params.size())
    throw std::invalid_argument("save_checkpoint: names/params size mismatch");
  nlohmann::json header;
  header["magic"] = kMagic;
  header["architecture"] = ckpt.architecture;
  header["config"] = ckpt.config;
  header["seed"] = ckpt.seed;
  nlohmann::json plist = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    plist.push_back({{"name", ckpt.names[i]}, {"shape", ckpt.params[i].shape()}});
  }
  header["params"] = plist;

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  const std::string h = header.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\n');
  for (const auto& p : ckpt.params) {
    out.write(reinterpret_cast<const char*>(p.data()),
              static_cast<std::streamsize>(p.numel() * sizeof(float)));
  }
  if (!out) fail(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  std::string line;
  if (!std::getline(in, line)) fail(path, "truncated: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    fail(path, "header is not valid JSON");
  }
  if (!header.contains("magic") || header["magic"] != kMagic)
    fail(path, "bad magic (expected NFA1)");
  Checkpoint ckpt;
  try {
    ckpt.architecture = header.at("architecture").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    for (const auto& entry : header.at("params")) {
      ckpt.names.push_back(entry.at("name").get<std::string>());
      Shape shape = entry.at("shape").get<Shape>();
      std::vector<float> buf(static_cast<std::size_t>(shape_numel(shape)));
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        fail(path, "truncated payload for parameter '" + ckpt.names.back() + "'");
      ckpt.params.emplace_back(std::move(shape), std::move(buf));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("malformed header: ") + e.what());
  }
  if (in.peek() != std::ifstream::traits_type::eof())
    fail(path, "payload larger than declared shapes");
  return ckpt;
}

std::string params_sha256(const std::vector<TensorF>& params) {
  Sha256 h;
  for (const auto& p : params)
    h.update(p.data(), static_cast<std::size_t>(p.numel()) * sizeof(float));
  return h.hex_digest();
}

}  // namespace nfa
