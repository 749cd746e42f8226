#include "fuselm/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "fuselm/bytes.hpp"

namespace fuselm {

namespace {
constexpr char kMagic[4] = {'F', 'L', 'M', 'C'};
}

void save_container(const std::filesystem::path& path, const Container& container) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  append_le<uint32_t>(buf, kContainerVersion);
  append_le<uint64_t>(buf, container.meta_json.size());
  buf.insert(buf.end(), container.meta_json.begin(), container.meta_json.end());
  append_le<uint64_t>(buf, container.tensors.size());
  for (const auto& [name, tensor] : container.tensors) {
    if (!tensor.defined()) throw IoError("save_container: undefined tensor '" + name + "'");
    append_le<uint64_t>(buf, name.size());
    buf.insert(buf.end(), name.begin(), name.end());
    const Shape& shape = tensor.shape();
    append_le<uint32_t>(buf, static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) append_le<int64_t>(buf, d);
    for (double v : tensor.values()) append_le<double>(buf, v);
  }
  append_le<uint64_t>(buf, fnv1a(buf));

  // Write-then-rename: the final name either holds the old file or the
  // complete new one, never a torn write.
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("rename " + tmp.string() + " -> " + path.string() + " failed: " +
                  ec.message());
  }
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 + 8 + 8) throw IoError("truncated container " + path.string());

  const size_t payload = buf.size() - 8;
  const uint64_t want = read_le<uint64_t>(buf, payload);
  const uint64_t got = fnv1a({buf.data(), payload});
  if (want != got) {
    throw IoError("checksum mismatch in " + path.string() + " (file corrupted)");
  }
  if (!std::equal(kMagic, kMagic + 4, buf.begin())) {
    throw IoError(path.string() + " is not a model container");
  }
  size_t off = 4;
  const uint32_t version = read_le<uint32_t>(buf, off);
  off += 4;
  if (version != kContainerVersion) {
    throw IoError("unsupported container version " + std::to_string(version) +
                  " in " + path.string());
  }

  auto need = [&](size_t n) {
    if (off + n > payload) throw IoError("truncated container " + path.string());
  };

  Container c;
  need(8);
  const uint64_t meta_len = read_le<uint64_t>(buf, off);
  off += 8;
  need(meta_len);
  c.meta_json.assign(buf.begin() + static_cast<ptrdiff_t>(off),
                     buf.begin() + static_cast<ptrdiff_t>(off + meta_len));
  off += meta_len;
  need(8);
  const uint64_t count = read_le<uint64_t>(buf, off);
  off += 8;
  for (uint64_t i = 0; i < count; ++i) {
    need(8);
    const uint64_t name_len = read_le<uint64_t>(buf, off);
    off += 8;
    need(name_len);
    std::string name(buf.begin() + static_cast<ptrdiff_t>(off),
                     buf.begin() + static_cast<ptrdiff_t>(off + name_len));
    off += name_len;
    need(4);
    const uint32_t ndim = read_le<uint32_t>(buf, off);
    off += 4;
    Shape shape(ndim);
    need(static_cast<size_t>(ndim) * 8);
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = read_le<int64_t>(buf, off);
      off += 8;
    }
    const int64_t numel = shape_numel(shape);
    need(static_cast<size_t>(numel) * 8);
    std::vector<double> values(static_cast<size_t>(numel));
    for (int64_t v = 0; v < numel; ++v) {
      values[static_cast<size_t>(v)] = read_le<double>(buf, off);
      off += 8;
    }
    c.tensors.emplace_back(std::move(name),
                           Tensor::from_values(std::move(shape), std::move(values)));
  }
  if (off != payload) {
    throw IoError("trailing bytes in container " + path.string());
  }
  return c;
}

}  // namespace fuselm
