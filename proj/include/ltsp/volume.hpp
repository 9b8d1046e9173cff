#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ltsp/error.hpp"
#include "ltsp/rng.hpp"

namespace ltsp {

enum class ElemKind { scalar_f32, label_u8 };

inline const char* to_string(ElemKind k) {
  return k == ElemKind::scalar_f32 ? "scalar-f32" : "label-u8";
}

// Dense 3D grid with voxel spacing metadata. Axis order is S,H,W (row-major,
// W fastest). Exactly one of the payload vectors is active, per `kind`.
struct Volume {
  std::array<int64_t, 3> extent{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  ElemKind kind = ElemKind::scalar_f32;
  bool normalized = false;  // HU values already mapped into [0,1]
  std::vector<float> scalars;
  std::vector<uint8_t> labels;

  int64_t numel() const { return extent[0] * extent[1] * extent[2]; }

  static Volume make_scalar(std::array<int64_t, 3> ext, float fill = 0.f) {
    Volume v;
    v.extent = ext;
    v.kind = ElemKind::scalar_f32;
    v.scalars.assign(static_cast<size_t>(v.numel()), fill);
    return v;
  }

  static Volume make_labels(std::array<int64_t, 3> ext, uint8_t fill = 0) {
    Volume v;
    v.extent = ext;
    v.kind = ElemKind::label_u8;
    v.labels.assign(static_cast<size_t>(v.numel()), fill);
    return v;
  }

  int64_t index(int64_t s, int64_t h, int64_t w) const { return (s * extent[1] + h) * extent[2] + w; }
  bool in_bounds(int64_t s, int64_t h, int64_t w) const {
    return s >= 0 && s < extent[0] && h >= 0 && h < extent[1] && w >= 0 && w < extent[2];
  }
  float& scalar_at(int64_t s, int64_t h, int64_t w) { return scalars[static_cast<size_t>(index(s, h, w))]; }
  float scalar_at(int64_t s, int64_t h, int64_t w) const { return scalars[static_cast<size_t>(index(s, h, w))]; }
  uint8_t& label_at(int64_t s, int64_t h, int64_t w) { return labels[static_cast<size_t>(index(s, h, w))]; }
  uint8_t label_at(int64_t s, int64_t h, int64_t w) const { return labels[static_cast<size_t>(index(s, h, w))]; }

  void check_payload() const {
    const size_t want = static_cast<size_t>(numel());
    if (kind == ElemKind::scalar_f32)
      require(scalars.size() == want && labels.empty(), ErrorCategory::shape, "payload_size",
              "scalar volume payload does not match extents");
    else
      require(labels.size() == want && scalars.empty(), ErrorCategory::shape, "payload_size",
              "label volume payload does not match extents");
  }
};

// ---------------------------------------------------------------------------
// LTSPVOL1 on-disk format: a plain-text header file (<base>.vol) plus a raw
// little-endian payload file (<base>.raw) next to it.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string volume_base(const std::string& path) {
  if (path.size() > 4 && path.substr(path.size() - 4) == ".vol") return path.substr(0, path.size() - 4);
  return path;
}

}  // namespace detail

inline void write_volume(const Volume& v, const std::string& path) {
  v.check_payload();
  const std::string base = detail::volume_base(path);
  const std::string payload_name = std::filesystem::path(base + ".raw").filename().string();

  std::ostringstream hdr;
  hdr << "LTSPVOL1\n";
  hdr << "extent " << v.extent[0] << ' ' << v.extent[1] << ' ' << v.extent[2] << '\n';
  hdr << "spacing " << std::setprecision(17) << v.spacing[0] << ' ' << v.spacing[1] << ' '
      << v.spacing[2] << '\n';
  hdr << "kind " << to_string(v.kind) << '\n';
  hdr << "byteorder little-endian\n";
  hdr << "normalized " << (v.normalized ? 1 : 0) << '\n';
  hdr << "payload " << payload_name << '\n';

  std::ofstream hf(base + ".vol", std::ios::binary | std::ios::trunc);
  require(hf.good(), ErrorCategory::io, "open_write", "cannot write " + base + ".vol");
  hf << hdr.str();
  hf.close();
  require(hf.good(), ErrorCategory::io, "write_failed", "short write on " + base + ".vol");

  std::ofstream pf(base + ".raw", std::ios::binary | std::ios::trunc);
  require(pf.good(), ErrorCategory::io, "open_write", "cannot write " + base + ".raw");
  if (v.kind == ElemKind::scalar_f32)
    pf.write(reinterpret_cast<const char*>(v.scalars.data()),
             static_cast<std::streamsize>(v.scalars.size() * sizeof(float)));
  else
    pf.write(reinterpret_cast<const char*>(v.labels.data()),
             static_cast<std::streamsize>(v.labels.size()));
  pf.close();
  require(pf.good(), ErrorCategory::io, "write_failed", "short write on " + base + ".raw");
}

inline Volume read_volume(const std::string& path) {
  const std::string base = detail::volume_base(path);
  std::ifstream hf(base + ".vol", std::ios::binary);
  require(hf.good(), ErrorCategory::io, "open_read", "cannot open " + base + ".vol");

  std::string magic;
  std::getline(hf, magic);
  require(magic == "LTSPVOL1", ErrorCategory::io, "bad_magic",
          "bad volume magic in " + base + ".vol: '" + magic + "'");

  Volume v;
  std::string payload_name;
  bool have_extent = false, have_kind = false;
  std::string line;
  while (std::getline(hf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "extent") {
      ls >> v.extent[0] >> v.extent[1] >> v.extent[2];
      have_extent = !ls.fail();
    } else if (key == "spacing") {
      ls >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
      require(v.spacing[0] > 0 && v.spacing[1] > 0 && v.spacing[2] > 0, ErrorCategory::io,
              "bad_spacing", "non-positive spacing in " + base + ".vol");
    } else if (key == "kind") {
      std::string kind;
      ls >> kind;
      if (kind == "scalar-f32")
        v.kind = ElemKind::scalar_f32;
      else if (kind == "label-u8")
        v.kind = ElemKind::label_u8;
      else
        raise(ErrorCategory::io, "bad_kind", "unknown element kind '" + kind + "'");
      have_kind = true;
    } else if (key == "byteorder") {
      std::string bo;
      ls >> bo;
      require(bo == "little-endian", ErrorCategory::io, "bad_byteorder",
              "unsupported byte order '" + bo + "'");
    } else if (key == "normalized") {
      int flag = 0;
      ls >> flag;
      v.normalized = flag != 0;
    } else if (key == "payload") {
      ls >> payload_name;
    } else {
      raise(ErrorCategory::io, "bad_header", "unknown header key '" + key + "' in " + base + ".vol");
    }
  }
  require(have_extent && have_kind, ErrorCategory::io, "bad_header",
          "missing extent/kind in " + base + ".vol");
  require(v.extent[0] > 0 && v.extent[1] > 0 && v.extent[2] > 0, ErrorCategory::io, "bad_extent",
          "non-positive extent in " + base + ".vol");

  std::string payload_path = base + ".raw";
  if (!payload_name.empty())
    payload_path = (std::filesystem::path(base).parent_path() / payload_name).string();
  std::ifstream pf(payload_path, std::ios::binary);
  require(pf.good(), ErrorCategory::io, "open_read", "cannot open payload " + payload_path);
  pf.seekg(0, std::ios::end);
  const auto bytes = static_cast<size_t>(pf.tellg());
  pf.seekg(0);

  const size_t want = static_cast<size_t>(v.numel()) *
                      (v.kind == ElemKind::scalar_f32 ? sizeof(float) : sizeof(uint8_t));
  require(bytes == want, ErrorCategory::io, "payload_mismatch",
          "payload " + payload_path + " holds " + std::to_string(bytes) + " bytes, expected " +
              std::to_string(want));

  if (v.kind == ElemKind::scalar_f32) {
    v.scalars.resize(static_cast<size_t>(v.numel()));
    pf.read(reinterpret_cast<char*>(v.scalars.data()), static_cast<std::streamsize>(want));
  } else {
    v.labels.resize(static_cast<size_t>(v.numel()));
    pf.read(reinterpret_cast<char*>(v.labels.data()), static_cast<std::streamsize>(want));
  }
  require(pf.good(), ErrorCategory::io, "read_failed", "short read on " + payload_path);
  return v;
}

// ---------------------------------------------------------------------------
// HU normalization: clamp to [-1000, 600], map linearly onto [0, 1].
// ---------------------------------------------------------------------------

inline Volume normalize_hu(const Volume& v) {
  require(v.kind == ElemKind::scalar_f32, ErrorCategory::shape, "wrong_kind",
          "normalize_hu expects a scalar volume");
  require(!v.normalized, ErrorCategory::numeric, "double_normalize",
          "volume is already normalized");
  Volume out = v;
  for (auto& x : out.scalars) {
    float t = (x + 1000.0f) / 1600.0f;
    x = t < 0.0f ? 0.0f : (t > 1.0f ? 1.0f : t);
  }
  out.normalized = true;
  return out;
}

// ---------------------------------------------------------------------------
// Center-crop sampling (crop centers drawn from the foreground span)
// ---------------------------------------------------------------------------

struct CropSample {
  Volume cube;        // intensity
  Volume label_cube;  // labels
  std::array<int64_t, 3> origin{0, 0, 0};
  std::array<int64_t, 3> center{0, 0, 0};
};

inline CropSample center_crop_sample(const Volume& intensity, const Volume& mask,
                                     std::array<int64_t, 3> cube_extent, Rng& rng) {
  require(intensity.kind == ElemKind::scalar_f32 && mask.kind == ElemKind::label_u8,
          ErrorCategory::shape, "wrong_kind", "center_crop_sample expects (scalar, label) volumes");
  require(intensity.extent == mask.extent, ErrorCategory::shape, "extent_mismatch",
          "intensity and mask extents differ");
  for (int a = 0; a < 3; ++a)
    require(cube_extent[static_cast<size_t>(a)] <= intensity.extent[static_cast<size_t>(a)] &&
                cube_extent[static_cast<size_t>(a)] > 0,
            ErrorCategory::shape, "cube_too_large", "crop cube exceeds volume extents");

  std::array<int64_t, 3> lo{INT64_MAX, INT64_MAX, INT64_MAX}, hi{-1, -1, -1};
  for (int64_t s = 0; s < mask.extent[0]; ++s)
    for (int64_t h = 0; h < mask.extent[1]; ++h)
      for (int64_t w = 0; w < mask.extent[2]; ++w)
        if (mask.label_at(s, h, w)) {
          lo[0] = std::min(lo[0], s);
          hi[0] = std::max(hi[0], s);
          lo[1] = std::min(lo[1], h);
          hi[1] = std::max(hi[1], h);
          lo[2] = std::min(lo[2], w);
          hi[2] = std::max(hi[2], w);
        }
  require(hi[0] >= 0, ErrorCategory::numeric, "empty_mask",
          "center_crop_sample requires a non-empty mask");

  CropSample out;
  std::array<int64_t, 3> start{};
  for (int a = 0; a < 3; ++a) {
    const auto ai = static_cast<size_t>(a);
    out.center[ai] = rng.uniform_int(lo[ai], hi[ai]);
    int64_t st = out.center[ai] - cube_extent[ai] / 2;
    st = std::max<int64_t>(0, std::min(st, intensity.extent[ai] - cube_extent[ai]));
    start[ai] = st;
  }
  out.origin = start;

  out.cube = Volume::make_scalar(cube_extent);
  out.cube.spacing = intensity.spacing;
  out.cube.normalized = intensity.normalized;
  out.label_cube = Volume::make_labels(cube_extent);
  out.label_cube.spacing = mask.spacing;
  for (int64_t s = 0; s < cube_extent[0]; ++s)
    for (int64_t h = 0; h < cube_extent[1]; ++h) {
      const int64_t src = intensity.index(start[0] + s, start[1] + h, start[2]);
      const int64_t dst = out.cube.index(s, h, 0);
      std::memcpy(out.cube.scalars.data() + dst, intensity.scalars.data() + src,
                  sizeof(float) * static_cast<size_t>(cube_extent[2]));
      std::memcpy(out.label_cube.labels.data() + dst, mask.labels.data() + src,
                  static_cast<size_t>(cube_extent[2]));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: optional W-axis flip, optional small rotation about S.
// Intensity resamples bilinearly (the S axis is untouched), labels use
// nearest neighbor; out-of-range samples are zero.
// ---------------------------------------------------------------------------

inline void flip_w(Volume& v) {
  const int64_t se = v.extent[0], he = v.extent[1], we = v.extent[2];
  for (int64_t s = 0; s < se; ++s)
    for (int64_t h = 0; h < he; ++h)
      for (int64_t w = 0; w < we / 2; ++w) {
        const auto a = static_cast<size_t>(v.index(s, h, w));
        const auto b = static_cast<size_t>(v.index(s, h, we - 1 - w));
        if (v.kind == ElemKind::scalar_f32)
          std::swap(v.scalars[a], v.scalars[b]);
        else
          std::swap(v.labels[a], v.labels[b]);
      }
}

inline void rotate_about_s(const Volume& src, Volume& dst, double angle_rad) {
  const int64_t se = src.extent[0], he = src.extent[1], we = src.extent[2];
  const double ch = (static_cast<double>(he) - 1.0) / 2.0;
  const double cw = (static_cast<double>(we) - 1.0) / 2.0;
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  for (int64_t h = 0; h < he; ++h)
    for (int64_t w = 0; w < we; ++w) {
      // inverse mapping: rotate output coordinates back into the source
      const double dh = static_cast<double>(h) - ch;
      const double dw = static_cast<double>(w) - cw;
      const double sh = ca * dh + sa * dw + ch;
      const double sw = -sa * dh + ca * dw + cw;
      if (src.kind == ElemKind::label_u8) {
        const int64_t nh = static_cast<int64_t>(std::llround(sh));
        const int64_t nw = static_cast<int64_t>(std::llround(sw));
        for (int64_t s = 0; s < se; ++s)
          dst.label_at(s, h, w) = src.in_bounds(s, nh, nw) ? src.label_at(s, nh, nw) : 0;
      } else {
        const int64_t h0 = static_cast<int64_t>(std::floor(sh));
        const int64_t w0 = static_cast<int64_t>(std::floor(sw));
        const double fh = sh - static_cast<double>(h0);
        const double fw = sw - static_cast<double>(w0);
        for (int64_t s = 0; s < se; ++s) {
          double acc = 0.0;
          for (int dh2 = 0; dh2 < 2; ++dh2)
            for (int dw2 = 0; dw2 < 2; ++dw2) {
              const int64_t hh = h0 + dh2, ww = w0 + dw2;
              if (!src.in_bounds(s, hh, ww)) continue;
              const double wgt = (dh2 ? fh : 1.0 - fh) * (dw2 ? fw : 1.0 - fw);
              acc += wgt * static_cast<double>(src.scalar_at(s, hh, ww));
            }
          dst.scalar_at(s, h, w) = static_cast<float>(acc);
        }
      }
    }
}

inline void augment(Volume& cube, Volume& label_cube, Rng& rng, double max_rotation_deg = 10.0) {
  require(cube.extent == label_cube.extent, ErrorCategory::shape, "extent_mismatch",
          "augment expects paired shapes");
  if (rng.bernoulli(0.5)) {
    flip_w(cube);
    flip_w(label_cube);
  }
  if (rng.bernoulli(0.5)) {
    const double angle = rng.uniform(-max_rotation_deg, max_rotation_deg) * M_PI / 180.0;
    Volume rc = cube, rl = label_cube;
    rotate_about_s(cube, rc, angle);
    rotate_about_s(label_cube, rl, angle);
    cube = std::move(rc);
    label_cube = std::move(rl);
  }
}

}  // namespace ltsp
