#include "retrodesk/params.hpp"

namespace retrodesk {

namespace {
constexpr char kCheckpointMagic[4] = {'R', 'C', 'K', 'P'};
constexpr uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterStore<float>& params) {
  auto os = open_out(path);
  write_magic(os, kCheckpointMagic);
  write_pod<uint32_t>(os, kCheckpointVersion);
  std::string cfg = config.to_json();
  write_pod<uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_pod<uint64_t>(os, params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.at(i);
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(os, params.is_frozen(i) ? 1 : 0);
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.ndim));
    for (int d = 0; d < t.ndim; ++d) write_pod<int64_t>(os, t.dims[d]);
    write_vec(os, *t.data);
  }
  if (!os) throw FormatError("write failed: " + path);
}

std::pair<ModelConfig, ParameterStore<float>> load_checkpoint(
    const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, kCheckpointMagic, path);
  expect_version(is, kCheckpointVersion, path);
  uint64_t cfg_len = read_pod<uint64_t>(is, path + " config length");
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw FormatError(path + ": truncated config blob");
  ModelConfig config = ModelConfig::from_json(cfg);
  uint64_t count = read_pod<uint64_t>(is, path + " tensor count");
  ParameterStore<float> params;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is, path + " name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError(path + ": truncated tensor name");
    uint8_t frozen = read_pod<uint8_t>(is, path + " freeze flag");
    uint32_t ndim = read_pod<uint32_t>(is, path + " rank");
    if (ndim < 1 || ndim > 4) throw FormatError(path + ": bad tensor rank");
    Tensor<float> t;
    t.ndim = static_cast<int>(ndim);
    for (uint32_t d = 0; d < ndim; ++d)
      t.dims[d] = read_pod<int64_t>(is, path + " dim");
    t.data = std::make_shared<std::vector<float>>();
    read_vec(is, *t.data, static_cast<size_t>(t.numel()), path + " data");
    params.add(name, std::move(t));
    if (frozen) params.set_frozen(name, true);
  }
  return {config, params};
}

}  // namespace retrodesk
