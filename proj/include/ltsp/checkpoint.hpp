#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ltsp/net.hpp"

namespace ltsp {

// LTSPCKPT binary checkpoint:
//   magic "LTSPCKPT" | u32 version | u32 config_len | config text |
//   u32 record_count | records
// record: u32 name_len | name | u8 rank | u32 extents[rank] | f32 data[numel]
// All integers and floats little-endian. Parameter values are stored as f32
// regardless of the in-memory precision.

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

template <typename T>
void put_record(std::ostream& os, const std::string& name, const Shape& shape,
                const std::vector<T>& values) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  const uint8_t rank = static_cast<uint8_t>(shape.size());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int64_t e : shape) put_u32(os, static_cast<uint32_t>(e));
  for (T v : values) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
}

struct RawRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline RawRecord get_record(std::istream& is) {
  RawRecord rec;
  const uint32_t name_len = get_u32(is);
  require(is.good() && name_len < 4096, ErrorCategory::io, "ckpt_corrupt",
          "corrupt checkpoint record name");
  rec.name.resize(name_len);
  is.read(rec.name.data(), name_len);
  uint8_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 1);
  require(is.good() && rank >= 1 && rank <= 5, ErrorCategory::io, "ckpt_corrupt",
          "corrupt checkpoint record rank");
  int64_t numel = 1;
  for (int r = 0; r < rank; ++r) {
    const uint32_t e = get_u32(is);
    rec.shape.push_back(static_cast<int64_t>(e));
    numel *= e;
  }
  require(is.good() && numel >= 1, ErrorCategory::io, "ckpt_corrupt",
          "corrupt checkpoint record shape");
  rec.values.resize(static_cast<size_t>(numel));
  is.read(reinterpret_cast<char*>(rec.values.data()),
          static_cast<std::streamsize>(sizeof(float) * rec.values.size()));
  require(is.good(), ErrorCategory::io, "ckpt_corrupt", "truncated checkpoint record payload");
  return rec;
}

}  // namespace detail

template <typename T>
void save_checkpoint(LtspNet<T>& net, AblationMode ablation, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), ErrorCategory::io, "open_write", "cannot write checkpoint " + path);
  os.write("LTSPCKPT", 8);
  detail::put_u32(os, kCheckpointVersion);

  const auto& cfg = net.config();
  std::ostringstream cfgs;
  cfgs << "input_cube_extent=" << cfg.input_cube_extent << '\n';
  cfgs << "channel_schedule=" << cfg.channel_schedule[0] << ',' << cfg.channel_schedule[1] << ','
       << cfg.channel_schedule[2] << ',' << cfg.channel_schedule[3] << '\n';
  cfgs << "coarse_channels=" << cfg.coarse_channels << '\n';
  cfgs << "propagation_kernel=" << cfg.propagation_kernel << '\n';
  cfgs << "class_count=" << cfg.class_count << '\n';
  cfgs << "ablation=" << to_string(ablation) << '\n';
  const std::string cfg_text = cfgs.str();
  detail::put_u32(os, static_cast<uint32_t>(cfg_text.size()));
  os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));

  auto params = net.named_parameters();
  auto buffers = net.named_buffers();
  detail::put_u32(os, static_cast<uint32_t>(params.size() + buffers.size()));
  for (auto& [name, t] : params) detail::put_record(os, name, t.shape(), t.values());
  for (auto& [name, buf] : buffers)
    detail::put_record(os, name, Shape{static_cast<int64_t>(buf->size())}, *buf);
  os.close();
  require(os.good(), ErrorCategory::io, "write_failed", "short write on checkpoint " + path);
}

template <typename T>
struct LoadedCheckpoint {
  LtspNetConfig config;
  AblationMode ablation = AblationMode::two_slices_cells;
  LtspNet<T> net;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorCategory::io, "open_read", "cannot open checkpoint " + path);
  char magic[8] = {};
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, "LTSPCKPT", 8) == 0, ErrorCategory::io, "bad_magic",
          "bad checkpoint magic in " + path);
  const uint32_t version = detail::get_u32(is);
  require(version == kCheckpointVersion, ErrorCategory::io, "bad_version",
          "unsupported checkpoint version " + std::to_string(version));

  const uint32_t cfg_len = detail::get_u32(is);
  require(is.good() && cfg_len < 65536, ErrorCategory::io, "ckpt_corrupt",
          "corrupt checkpoint config block");
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);

  LtspNetConfig cfg;
  AblationMode ablation = AblationMode::two_slices_cells;
  {
    std::istringstream ls(cfg_text);
    std::string line;
    while (std::getline(ls, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCategory::io, "ckpt_corrupt",
              "malformed checkpoint config line '" + line + "'");
      const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "input_cube_extent")
        cfg.input_cube_extent = std::stoll(val);
      else if (key == "channel_schedule") {
        std::istringstream cs(val);
        std::string tok;
        for (int i = 0; i < 4 && std::getline(cs, tok, ','); ++i)
          cfg.channel_schedule[static_cast<size_t>(i)] = std::stoll(tok);
      } else if (key == "coarse_channels")
        cfg.coarse_channels = std::stoll(val);
      else if (key == "propagation_kernel")
        cfg.propagation_kernel = static_cast<int>(std::stoll(val));
      else if (key == "class_count")
        cfg.class_count = std::stoll(val);
      else if (key == "ablation")
        ablation = parse_ablation(val);
      else
        raise(ErrorCategory::io, "ckpt_corrupt", "unknown checkpoint config key '" + key + "'");
    }
  }

  const uint32_t n_records = detail::get_u32(is);
  LoadedCheckpoint<T> out{cfg, ablation, LtspNet<T>(cfg, 0)};

  std::vector<std::pair<std::string, Tensor<T>>> params = out.net.named_parameters();
  std::vector<std::pair<std::string, std::vector<T>*>> buffers = out.net.named_buffers();
  std::vector<bool> param_seen(params.size(), false), buffer_seen(buffers.size(), false);

  for (uint32_t r = 0; r < n_records; ++r) {
    auto rec = detail::get_record(is);
    bool matched = false;
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].first != rec.name) continue;
      require(params[i].second.shape() == rec.shape, ErrorCategory::io, "ckpt_shape",
              "checkpoint record '" + rec.name + "' shape " + shape_str(rec.shape) +
                  " does not match model " + shape_str(params[i].second.shape()));
      auto& dst = params[i].second.values();
      for (size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(rec.values[j]);
      param_seen[i] = true;
      matched = true;
      break;
    }
    if (!matched) {
      for (size_t i = 0; i < buffers.size(); ++i) {
        if (buffers[i].first != rec.name) continue;
        require(buffers[i].second->size() == rec.values.size(), ErrorCategory::io, "ckpt_shape",
                "checkpoint buffer '" + rec.name + "' size mismatch");
        for (size_t j = 0; j < rec.values.size(); ++j)
          (*buffers[i].second)[j] = static_cast<T>(rec.values[j]);
        buffer_seen[i] = true;
        matched = true;
        break;
      }
    }
    require(matched, ErrorCategory::io, "ckpt_unknown_record",
            "checkpoint record '" + rec.name + "' does not exist in the model");
  }
  for (size_t i = 0; i < params.size(); ++i)
    require(param_seen[i], ErrorCategory::io, "ckpt_missing_record",
            "checkpoint is missing parameter '" + params[i].first + "'");
  for (size_t i = 0; i < buffers.size(); ++i)
    require(buffer_seen[i], ErrorCategory::io, "ckpt_missing_record",
            "checkpoint is missing buffer '" + buffers[i].first + "'");
  return out;
}

}  // namespace ltsp
