#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "nfa/volume.hpp"

namespace nfa {

/// Distinct failure kinds for the NFAVOL1 container format.
enum class VolioErrorKind { Io, BadMagic, BadHeader, Truncated, DimMismatch };

class VolioError : public std::runtime_error {
 public:
  VolioError(VolioErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  VolioErrorKind kind() const { return kind_; }

 private:
  VolioErrorKind kind_;
};

/// File layout: one JSON header line (magic "NFAVOL1", kind, dims, spacing,
/// dtype) terminated by '\n', then the little-endian payload. Round trips
/// are bit-exact. Volumes and en-face images use f32, labels u8.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

void write_labels(const std::filesystem::path& path, const LabelVolume& v);
LabelVolume read_labels(const std::filesystem::path& path);

void write_enface(const std::filesystem::path& path, const EnFaceImage& img);
EnFaceImage read_enface(const std::filesystem::path& path);

}  // namespace nfa
