#include "nfa/volio.hpp"

#include <fstream>

#include <json.hpp>

namespace nfa {
namespace {

using json = nlohmann::json;

constexpr const char* kMagic = "NFAVOL1";

void write_blob(const std::filesystem::path& path, const json& header, const void* payload,
                std::size_t bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolioError(VolioErrorKind::Io, "cannot open for writing: " + path.string());
  const std::string h = header.dump();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.put('\n');
  os.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!os) throw VolioError(VolioErrorKind::Io, "write failed: " + path.string());
}

json read_header(std::ifstream& is, const std::filesystem::path& path, const char* want_kind) {
  std::string line;
  if (!std::getline(is, line))
    throw VolioError(VolioErrorKind::Truncated, "missing header line: " + path.string());
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw VolioError(VolioErrorKind::BadHeader, "unparseable header in " + path.string() + ": " + e.what());
  }
  if (!h.contains("magic") || h["magic"] != kMagic)
    throw VolioError(VolioErrorKind::BadMagic, "bad magic in " + path.string());
  if (!h.contains("kind") || h["kind"] != want_kind)
    throw VolioError(VolioErrorKind::BadHeader,
                     "expected kind '" + std::string(want_kind) + "' in " + path.string());
  return h;
}

void read_payload(std::ifstream& is, const std::filesystem::path& path, void* dst,
                  std::size_t bytes) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes)
    throw VolioError(VolioErrorKind::Truncated,
                     "payload truncated in " + path.string() + " (expected " +
                         std::to_string(bytes) + " bytes, got " + std::to_string(is.gcount()) + ")");
  // Anything left over means the header does not describe the payload.
  if (is.peek() != std::ifstream::traits_type::eof())
    throw VolioError(VolioErrorKind::DimMismatch,
                     "payload larger than header dims describe in " + path.string());
}

Dims3 header_dims(const json& h, const std::filesystem::path& path) {
  if (!h.contains("dims") || !h["dims"].is_array() || h["dims"].size() != 3)
    throw VolioError(VolioErrorKind::BadHeader, "missing dims in " + path.string());
  Dims3 d{h["dims"][0].get<std::int64_t>(), h["dims"][1].get<std::int64_t>(),
          h["dims"][2].get<std::int64_t>()};
  if (d.ny < 1 || d.nx < 1 || d.nz < 1)
    throw VolioError(VolioErrorKind::BadHeader, "non-positive dims in " + path.string());
  return d;
}

Spacing3 header_spacing(const json& h, const std::filesystem::path& path) {
  if (!h.contains("spacing") || !h["spacing"].is_array() || h["spacing"].size() != 3)
    throw VolioError(VolioErrorKind::BadHeader, "missing spacing in " + path.string());
  return Spacing3{h["spacing"][0].get<double>(), h["spacing"][1].get<double>(),
                  h["spacing"][2].get<double>()};
}

void check_dtype(const json& h, const char* want, const std::filesystem::path& path) {
  if (!h.contains("dtype") || h["dtype"] != want)
    throw VolioError(VolioErrorKind::BadHeader,
                     "expected dtype '" + std::string(want) + "' in " + path.string());
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Volume& v) {
  json h{{"magic", kMagic},
         {"kind", "volume"},
         {"dims", {v.dims().ny, v.dims().nx, v.dims().nz}},
         {"spacing", {v.spacing().sy, v.spacing().sx, v.spacing().sz}},
         {"dtype", "f32"}};
  write_blob(path, h, v.data().data(), v.data().size() * sizeof(float));
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolioError(VolioErrorKind::Io, "cannot open: " + path.string());
  const json h = read_header(is, path, "volume");
  check_dtype(h, "f32", path);
  const Dims3 d = header_dims(h, path);
  std::vector<float> data(static_cast<std::size_t>(d.numel()));
  read_payload(is, path, data.data(), data.size() * sizeof(float));
  return Volume(d, header_spacing(h, path), std::move(data));
}

void write_labels(const std::filesystem::path& path, const LabelVolume& v) {
  json h{{"magic", kMagic},
         {"kind", "labels"},
         {"dims", {v.dims().ny, v.dims().nx, v.dims().nz}},
         {"spacing", {v.spacing().sy, v.spacing().sx, v.spacing().sz}},
         {"dtype", "u8"},
         {"classes", v.num_classes()}};
  write_blob(path, h, v.labels().data(), v.labels().size());
}

LabelVolume read_labels(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolioError(VolioErrorKind::Io, "cannot open: " + path.string());
  const json h = read_header(is, path, "labels");
  check_dtype(h, "u8", path);
  const Dims3 d = header_dims(h, path);
  if (!h.contains("classes"))
    throw VolioError(VolioErrorKind::BadHeader, "missing classes in " + path.string());
  std::vector<std::uint8_t> data(static_cast<std::size_t>(d.numel()));
  read_payload(is, path, data.data(), data.size());
  return LabelVolume(d, header_spacing(h, path), h["classes"].get<int>(), std::move(data));
}

void write_enface(const std::filesystem::path& path, const EnFaceImage& img) {
  json h{{"magic", kMagic},
         {"kind", "enface"},
         {"dims", {1, img.nx(), img.nz()}},
         {"spacing", {1.0, 1.0, 1.0}},
         {"dtype", "f32"}};
  write_blob(path, h, img.data().data(), img.data().size() * sizeof(float));
}

EnFaceImage read_enface(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolioError(VolioErrorKind::Io, "cannot open: " + path.string());
  const json h = read_header(is, path, "enface");
  check_dtype(h, "f32", path);
  const Dims3 d = header_dims(h, path);
  std::vector<float> data(static_cast<std::size_t>(d.nx * d.nz));
  read_payload(is, path, data.data(), data.size() * sizeof(float));
  return EnFaceImage(d.nx, d.nz, std::move(data));
}

}  // namespace nfa
