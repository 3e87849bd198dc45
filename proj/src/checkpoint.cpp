#include "evircod/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "evircod/errors.hpp"
#include "evircod/run_config.hpp"

namespace evircod {

namespace {

constexpr char kMagic[8] = {'E', 'V', 'I', 'R', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <class T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(T));
  }
  void text(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes_ += s;
  }
  void doubles(const std::vector<double>& v) {
    pod<std::uint64_t>(v.size());
    bytes_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string text() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = pod<std::uint64_t>();
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint " + path_ + " is truncated");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

void write_named(Writer& w, const std::vector<std::pair<std::string, std::vector<double>>>& items) {
  w.pod<std::uint64_t>(items.size());
  for (const auto& [name, values] : items) {
    w.text(name);
    w.doubles(values);
  }
}

std::vector<std::pair<std::string, std::vector<double>>> read_named(Reader& r) {
  std::vector<std::pair<std::string, std::vector<double>>> out(r.pod<std::uint64_t>());
  for (auto& [name, values] : out) {
    name = r.text();
    values = r.doubles();
  }
  return out;
}

void copy_into(const std::vector<nn::ParamRef>& refs, const std::vector<std::pair<std::string, std::vector<double>>>& saved,
               const char* what) {
  if (refs.size() != saved.size()) {
    throw ConfigError(std::string("checkpoint holds ") + std::to_string(saved.size()) + " " + what + ", model has " +
                      std::to_string(refs.size()));
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto dst = refs[i].tensor->data_mut();
    if (refs[i].name != saved[i].first || dst.size() != saved[i].second.size()) {
      throw ConfigError(std::string("checkpoint ") + what + " '" + saved[i].first + "' does not match '" + refs[i].name + "'");
    }
    std::copy(saved[i].second.begin(), saved[i].second.end(), dst.begin());
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes().append(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(Checkpoint::kVersion);
  w.pod(ckpt.fingerprint);
  w.pod(ckpt.epoch);
  w.pod(ckpt.step);
  w.text(ckpt.config_text);
  w.text(ckpt.rng_state);
  write_named(w, ckpt.parameters);
  write_named(w, ckpt.buffers);
  w.doubles(ckpt.optimizer);
  w.pod<std::uint64_t>(fnv1a(w.bytes()));
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw DataError("cannot write checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < sizeof kMagic + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError(path + " is not a checkpoint");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  const std::string payload = bytes.substr(0, bytes.size() - sizeof stored);
  if (fnv1a(payload) != stored) throw DataError("checkpoint " + path + " is corrupted (checksum mismatch)");

  Reader r(payload, path);
  for (std::size_t i = 0; i < sizeof kMagic; ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw DataError("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                    std::to_string(Checkpoint::kVersion));
  }
  Checkpoint c;
  c.fingerprint = r.pod<std::uint64_t>();
  c.epoch = r.pod<std::int64_t>();
  c.step = r.pod<std::int64_t>();
  c.config_text = r.text();
  c.rng_state = r.text();
  c.parameters = read_named(r);
  c.buffers = read_named(r);
  c.optimizer = r.doubles();
  return c;
}

void capture(const nn::Module& module, Checkpoint& ckpt) {
  ckpt.parameters.clear();
  ckpt.buffers.clear();
  for (const auto& p : module.parameters()) {
    auto v = p.tensor->data();
    ckpt.parameters.emplace_back(p.name, std::vector<double>(v.begin(), v.end()));
  }
  for (const auto& b : module.buffers()) {
    auto v = b.tensor->data();
    ckpt.buffers.emplace_back(b.name, std::vector<double>(v.begin(), v.end()));
  }
}

void restore(nn::Module& module, const Checkpoint& ckpt) {
  copy_into(module.parameters(), ckpt.parameters, "parameters");
  copy_into(module.buffers(), ckpt.buffers, "buffers");
}

}  // namespace evircod
