#include "ulp/npy.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ulp/errors.hpp"

namespace ulp {

namespace {

const char kNpyMagic[] = "\x93NUMPY";

std::string dtype_descr(Dtype d) {
  switch (d) {
    case Dtype::F4: return "<f4";
    case Dtype::F8: return "<f8";
    case Dtype::I8: return "<i8";
    case Dtype::U1: return "|u1";
  }
  throw InvalidArgument("unknown dtype");
}

size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F4: return 4;
    case Dtype::F8: return 8;
    case Dtype::I8: return 8;
    case Dtype::U1: return 1;
  }
  return 0;
}

std::string npy_header(const Tensor& t, Dtype dtype) {
  std::ostringstream shape;
  shape << "(";
  for (size_t i = 0; i < t.shape.size(); ++i) shape << t.shape[i] << ", ";
  if (t.shape.size() > 1) {
    std::string s = shape.str();
    s.resize(s.size() - 2);  // drop trailing ", "; keep it for 1-tuples
    shape.str(s);
    shape.seekp(0, std::ios_base::end);
  }
  shape << ")";

  std::string dict = "{'descr': '" + dtype_descr(dtype) +
                     "', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  // Total header (magic + version + len field + dict + padding + '\n')
  // must be a multiple of 64.
  const size_t prefix = 6 + 2 + 2;
  size_t total = prefix + dict.size() + 1;
  size_t padded = (total + 63) / 64 * 64;
  dict.append(padded - total, ' ');
  dict.push_back('\n');

  std::string out;
  out.append(kNpyMagic, 6);
  out.push_back('\x01');
  out.push_back('\x00');
  const uint16_t hlen = static_cast<uint16_t>(dict.size());
  out.push_back(static_cast<char>(hlen & 0xff));
  out.push_back(static_cast<char>(hlen >> 8));
  out += dict;
  return out;
}

std::string encode_payload(const Tensor& t, Dtype dtype) {
  std::string bytes(t.size() * dtype_size(dtype), '\0');
  char* p = bytes.data();
  switch (dtype) {
    case Dtype::F4:
      for (double v : t.data) {
        float f = static_cast<float>(v);
        std::memcpy(p, &f, 4);
        p += 4;
      }
      break;
    case Dtype::F8:
      std::memcpy(p, t.data.data(), t.size() * 8);
      break;
    case Dtype::I8:
      for (double v : t.data) {
        int64_t i = static_cast<int64_t>(v);
        std::memcpy(p, &i, 8);
        p += 8;
      }
      break;
    case Dtype::U1:
      for (double v : t.data) *p++ = static_cast<char>(static_cast<uint8_t>(v));
      break;
  }
  return bytes;
}

std::string npy_bytes(const Tensor& t, Dtype dtype) {
  return npy_header(t, dtype) + encode_payload(t, dtype);
}

// --- parsing ---

size_t find_key(const std::string& dict, const std::string& key) {
  size_t pos = dict.find("'" + key + "'");
  if (pos == std::string::npos) throw CorruptFileError("npy header missing key " + key);
  return dict.find(':', pos) + 1;
}

Tensor parse_npy(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kNpyMagic, 6) != 0)
    throw CorruptFileError("not an npy file: " + origin);
  const uint8_t major = static_cast<uint8_t>(bytes[6]);
  size_t hlen, hstart;
  if (major == 1) {
    hlen = static_cast<uint8_t>(bytes[8]) | (static_cast<size_t>(static_cast<uint8_t>(bytes[9])) << 8);
    hstart = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw CorruptFileError("truncated npy header: " + origin);
    hlen = 0;
    for (int i = 3; i >= 0; --i) hlen = (hlen << 8) | static_cast<uint8_t>(bytes[8 + i]);
    hstart = 12;
  } else {
    throw CorruptFileError("unsupported npy version in " + origin);
  }
  if (bytes.size() < hstart + hlen) throw CorruptFileError("truncated npy header: " + origin);
  const std::string dict = bytes.substr(hstart, hlen);

  // descr
  size_t dp = find_key(dict, "descr");
  size_t q0 = dict.find('\'', dp);
  size_t q1 = dict.find('\'', q0 + 1);
  std::string descr = dict.substr(q0 + 1, q1 - q0 - 1);

  // fortran_order
  size_t fp = find_key(dict, "fortran_order");
  const bool fortran = dict.find("True", fp) < dict.find(',', fp);
  if (fortran) throw CorruptFileError("fortran_order npy not supported: " + origin);

  // shape
  size_t sp = find_key(dict, "shape");
  size_t p0 = dict.find('(', sp);
  size_t p1 = dict.find(')', p0);
  std::vector<size_t> shape;
  {
    std::string inner = dict.substr(p0 + 1, p1 - p0 - 1);
    std::istringstream iss(inner);
    std::string tok;
    while (std::getline(iss, tok, ',')) {
      bool has_digit = false;
      for (char c : tok) has_digit |= (c >= '0' && c <= '9');
      if (has_digit) shape.push_back(std::stoull(tok));
    }
  }

  const size_t n = Tensor::numel(shape);
  const char* data = bytes.data() + hstart + hlen;
  const size_t avail = bytes.size() - hstart - hlen;

  Tensor t(shape);
  auto need = [&](size_t esize) {
    if (avail < n * esize) throw CorruptFileError("truncated npy payload: " + origin);
  };
  if (descr == "<f8") {
    need(8);
    std::memcpy(t.data.data(), data, n * 8);
  } else if (descr == "<f4") {
    need(4);
    for (size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, data + i * 4, 4);
      t.data[i] = f;
    }
  } else if (descr == "<i8") {
    need(8);
    for (size_t i = 0; i < n; ++i) {
      int64_t v;
      std::memcpy(&v, data + i * 8, 8);
      t.data[i] = static_cast<double>(v);
    }
  } else if (descr == "<i4") {
    need(4);
    for (size_t i = 0; i < n; ++i) {
      int32_t v;
      std::memcpy(&v, data + i * 4, 4);
      t.data[i] = v;
    }
  } else if (descr == "|u1" || descr == "<u1") {
    need(1);
    for (size_t i = 0; i < n; ++i) t.data[i] = static_cast<uint8_t>(data[i]);
  } else if (descr == "|i1" || descr == "<i1") {
    need(1);
    for (size_t i = 0; i < n; ++i) t.data[i] = static_cast<int8_t>(data[i]);
  } else {
    throw CorruptFileError("unsupported npy dtype '" + descr + "' in " + origin);
  }
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- minimal zip container ---

void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint16_t get_u16(const std::string& s, size_t off) {
  return static_cast<uint16_t>(static_cast<uint8_t>(s[off]) |
                               (static_cast<uint16_t>(static_cast<uint8_t>(s[off + 1])) << 8));
}

uint32_t get_u32(const std::string& s, size_t off) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(s[off + i]);
  return v;
}

std::string inflate_raw(const char* src, size_t src_len, size_t dst_len) {
  std::string out(dst_len, '\0');
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) throw IoError("inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(src));
  zs.avail_in = static_cast<uInt>(src_len);
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(dst_len);
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw CorruptFileError("zip entry inflate failed");
  return out;
}

}  // namespace

void write_npy(const std::filesystem::path& path, const Tensor& t, Dtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = npy_bytes(t, dtype);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_npy(const std::filesystem::path& path) {
  return parse_npy(read_file(path), path.string());
}

void write_npz(const std::filesystem::path& path, const std::vector<NamedTensor>& arrays) {
  std::string out;
  std::string central;
  uint16_t count = 0;
  for (const auto& a : arrays) {
    const std::string fname = a.name + ".npy";
    const std::string payload = npy_bytes(a.tensor, a.dtype);
    const uint32_t crc =
        static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
                                    static_cast<uInt>(payload.size())));
    const uint32_t offset = static_cast<uint32_t>(out.size());

    // Local file header, method 0 (stored).
    put_u32(out, 0x04034b50);
    put_u16(out, 20);      // version needed
    put_u16(out, 0);       // flags
    put_u16(out, 0);       // method: stored
    put_u16(out, 0);       // mod time
    put_u16(out, 0x21);    // mod date (1980-01-01)
    put_u32(out, crc);
    put_u32(out, static_cast<uint32_t>(payload.size()));
    put_u32(out, static_cast<uint32_t>(payload.size()));
    put_u16(out, static_cast<uint16_t>(fname.size()));
    put_u16(out, 0);  // extra len
    out += fname;
    out += payload;

    // Central directory record.
    put_u32(central, 0x02014b50);
    put_u16(central, 20);  // version made by
    put_u16(central, 20);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0x21);
    put_u32(central, crc);
    put_u32(central, static_cast<uint32_t>(payload.size()));
    put_u32(central, static_cast<uint32_t>(payload.size()));
    put_u16(central, static_cast<uint16_t>(fname.size()));
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u32(central, 0);
    put_u32(central, offset);
    central += fname;
    ++count;
  }
  const uint32_t cd_offset = static_cast<uint32_t>(out.size());
  out += central;
  // End of central directory.
  put_u32(out, 0x06054b50);
  put_u16(out, 0);
  put_u16(out, 0);
  put_u16(out, count);
  put_u16(out, count);
  put_u32(out, static_cast<uint32_t>(central.size()));
  put_u32(out, cd_offset);
  put_u16(out, 0);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

std::map<std::string, Tensor> read_npz(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  // Locate end-of-central-directory (no zip comment is written by us, but
  // tolerate one up to 64 KiB for archives from other tools).
  if (bytes.size() < 22) throw CorruptFileError("not a zip archive: " + path.string());
  size_t eocd = std::string::npos;
  const size_t scan_from = bytes.size() >= 22 + 65536 ? bytes.size() - 22 - 65536 : 0;
  for (size_t i = bytes.size() - 22; i + 1 > scan_from; --i) {
    if (get_u32(bytes, i) == 0x06054b50) {
      eocd = i;
      break;
    }
    if (i == 0) break;
  }
  if (eocd == std::string::npos) throw CorruptFileError("zip EOCD not found: " + path.string());
  const uint16_t n_entries = get_u16(bytes, eocd + 10);
  size_t pos = get_u32(bytes, eocd + 16);

  std::map<std::string, Tensor> result;
  for (uint16_t e = 0; e < n_entries; ++e) {
    if (pos + 46 > bytes.size() || get_u32(bytes, pos) != 0x02014b50)
      throw CorruptFileError("bad zip central directory: " + path.string());
    const uint16_t method = get_u16(bytes, pos + 10);
    const uint32_t csize = get_u32(bytes, pos + 20);
    const uint32_t usize = get_u32(bytes, pos + 24);
    const uint16_t name_len = get_u16(bytes, pos + 28);
    const uint16_t extra_len = get_u16(bytes, pos + 30);
    const uint16_t comment_len = get_u16(bytes, pos + 32);
    const uint32_t local_off = get_u32(bytes, pos + 42);
    std::string fname = bytes.substr(pos + 46, name_len);
    pos += 46 + name_len + extra_len + comment_len;

    if (local_off + 30 > bytes.size() || get_u32(bytes, local_off) != 0x04034b50)
      throw CorruptFileError("bad zip local header: " + path.string());
    const uint16_t lname = get_u16(bytes, local_off + 26);
    const uint16_t lextra = get_u16(bytes, local_off + 28);
    const size_t data_off = local_off + 30 + lname + lextra;
    if (data_off + csize > bytes.size())
      throw CorruptFileError("truncated zip entry: " + path.string());

    std::string payload;
    if (method == 0) {
      payload = bytes.substr(data_off, csize);
    } else if (method == 8) {
      payload = inflate_raw(bytes.data() + data_off, csize, usize);
    } else {
      throw CorruptFileError("unsupported zip method in " + path.string());
    }

    std::string key = fname;
    if (key.size() > 4 && key.substr(key.size() - 4) == ".npy") key.resize(key.size() - 4);
    result[key] = parse_npy(payload, path.string() + ":" + fname);
  }
  return result;
}

}  // namespace ulp
