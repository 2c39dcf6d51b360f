#include "train/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "core/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint raw tensor values are little-endian");

namespace ssgan {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'G', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

struct Reader {
  std::ifstream in;
  std::string path;
  std::uint64_t file_size = 0;

  // Guards length fields before they size an allocation: nothing inside the
  // file can be longer than the file itself.
  void check_len(std::uint64_t n) {
    require(n <= file_size, ErrCode::corrupt, "load_checkpoint: " + path + " is truncated");
  }
  void read(void* p, std::size_t n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    require(in.gcount() == static_cast<std::streamsize>(n), ErrCode::corrupt,
            "load_checkpoint: " + path + " is truncated");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    read(&v, sizeof v);
    return v;
  }
  std::string str(std::uint64_t n) {
    check_len(n);
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
};

}  // namespace

void save_checkpoint_file(const std::string& path, const CheckpointData& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrCode::io, "save_checkpoint: cannot open " + tmp);

    put_bytes(out, kMagic, sizeof kMagic);
    put_u32(out, data.version);

    const std::string meta = data.metadata.dump();
    put_u64(out, meta.size());
    put_bytes(out, meta.data(), meta.size());

    put_u64(out, data.tensors.size());
    for (const TensorBlob& t : data.tensors) {
      require(t.dtype == "f32" || t.dtype == "f64", ErrCode::invalid_argument,
              "save_checkpoint: unknown dtype " + t.dtype + " for " + t.name);
      std::uint64_t numel = 1;
      for (std::uint64_t d : t.shape) numel *= d;
      const std::uint64_t elem = t.dtype == "f32" ? 4 : 8;
      require(t.bytes.size() == numel * elem, ErrCode::shape_mismatch,
              "save_checkpoint: " + t.name + " byte count does not match its shape");

      put_u64(out, t.name.size());
      put_bytes(out, t.name.data(), t.name.size());
      put_u64(out, t.dtype.size());
      put_bytes(out, t.dtype.data(), t.dtype.size());
      put_u64(out, t.shape.size());
      for (std::uint64_t d : t.shape) put_u64(out, d);
      put_u64(out, t.bytes.size());
      put_bytes(out, t.bytes.data(), t.bytes.size());
    }
    out.flush();
    require(out.good(), ErrCode::io, "save_checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrCode::io, "save_checkpoint: cannot rename " + tmp + " to " + path);
}

CheckpointData load_checkpoint_file(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), path, 0};
  require(r.in.good(), ErrCode::io, "load_checkpoint: cannot open " + path);
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  require(!ec, ErrCode::io, "load_checkpoint: cannot stat " + path);
  r.file_size = size;

  char magic[4];
  r.read(magic, sizeof magic);
  require(std::memcmp(magic, kMagic, sizeof kMagic) == 0, ErrCode::corrupt,
          "load_checkpoint: " + path + " is not a checkpoint file");

  CheckpointData data;
  data.version = r.u32();
  require(data.version == kVersion, ErrCode::unsupported,
          "load_checkpoint: version " + std::to_string(data.version) + " in " + path +
              ", expected " + std::to_string(kVersion));

  const std::uint64_t meta_len = r.u64();
  const std::string meta = r.str(meta_len);
  data.metadata = nlohmann::json::parse(meta, nullptr, /*allow_exceptions=*/false);
  require(!data.metadata.is_discarded(), ErrCode::corrupt,
          "load_checkpoint: malformed metadata block in " + path);

  const std::uint64_t count = r.u64();
  data.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorBlob t;
    t.name = r.str(r.u64());
    t.dtype = r.str(r.u64());
    require(t.dtype == "f32" || t.dtype == "f64", ErrCode::corrupt,
            "load_checkpoint: unknown dtype " + t.dtype + " for " + t.name);
    const std::uint64_t rank = r.u64();
    require(rank <= 8, ErrCode::corrupt, "load_checkpoint: absurd rank for " + t.name);
    t.shape.resize(rank);
    for (auto& d : t.shape) d = r.u64();
    std::uint64_t numel = 1;
    for (std::uint64_t d : t.shape) {
      require(d == 0 || numel <= UINT64_MAX / 8 / d, ErrCode::corrupt,
              "load_checkpoint: absurd shape for " + t.name);
      numel *= d;
    }
    const std::uint64_t byte_len = r.u64();
    require(byte_len == numel * (t.dtype == "f32" ? 4 : 8), ErrCode::corrupt,
            "load_checkpoint: byte count mismatch for " + t.name);
    r.check_len(byte_len);
    t.bytes.resize(byte_len);
    r.read(t.bytes.data(), byte_len);
    data.tensors.push_back(std::move(t));
  }

  // Anything after the table means the file was not produced by this writer.
  char extra;
  r.in.read(&extra, 1);
  require(r.in.gcount() == 0, ErrCode::corrupt, "load_checkpoint: trailing bytes in " + path);
  return data;
}

}  // namespace ssgan
