#include "fel/checkpoint.hpp"

#include <stdexcept>

#include "fel/serialize.hpp"

namespace fel {

namespace {

constexpr char kMagic[4] = {'F', 'E', 'L', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_tensor(ByteWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    w.u32(static_cast<std::uint32_t>(t.dim(i)));
  for (double v : t.data) w.f64(v);
}

Tensor get_tensor(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i)
    shape.push_back(static_cast<int>(r.u32()));
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = r.f64();
  return t;
}

template <typename Enum>
Enum checked_enum(std::uint8_t raw, std::uint8_t max, const char* what) {
  if (raw > max)
    throw std::runtime_error("checkpoint: bad " + std::string(what) +
                             " value " + std::to_string(raw));
  return static_cast<Enum>(raw);
}

}  // namespace

const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adamw";
}

bool parse_optimizer(const std::string& s, OptimizerKind& out) {
  if (s == "sgd") out = OptimizerKind::sgd;
  else if (s == "adamw") out = OptimizerKind::adamw;
  else return false;
  return true;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u8(ck.has_enhancer ? 1 : 0);
  if (ck.has_enhancer) {
    const EnhancerConfig& c = ck.enhancer_config;
    w.u32(static_cast<std::uint32_t>(c.scale_pair.first));
    w.u32(static_cast<std::uint32_t>(c.scale_pair.second));
    w.u32(static_cast<std::uint32_t>(c.num_blocks));
    w.u32(static_cast<std::uint32_t>(c.channels));
    w.u8(static_cast<std::uint8_t>(c.downsample_method));
    w.u8(static_cast<std::uint8_t>(c.aggregation_high));
    w.u8(static_cast<std::uint8_t>(c.aggregation_low));
    w.u8(static_cast<std::uint8_t>(c.value_source));
    w.u8(c.attention_scaling ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(c.output_projection));
    w.u8(c.share_fen ? 1 : 0);
  }
  w.u32(static_cast<std::uint32_t>(ck.head_in_channels));
  w.u32(static_cast<std::uint32_t>(ck.head_input_size));
  w.u32(static_cast<std::uint32_t>(ck.head_num_classes));
  const OptimizerConfig& oc = ck.opt.config;
  w.u8(static_cast<std::uint8_t>(oc.kind));
  w.f64(oc.lr);
  w.f64(oc.momentum);
  w.f64(oc.beta1);
  w.f64(oc.beta2);
  w.f64(oc.eps);
  w.f64(oc.weight_decay);
  w.u64(ck.opt.step);
  w.u32(static_cast<std::uint32_t>(ck.epochs_done));
  for (std::uint64_t word : ck.rng_state) w.u64(word);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, tensor] : ck.tensors) {
    w.str(name);
    put_tensor(w, tensor);
  }
  w.u32(static_cast<std::uint32_t>(ck.opt.slot_m.size()));
  for (const Tensor& t : ck.opt.slot_m) put_tensor(w, t);
  w.u32(static_cast<std::uint32_t>(ck.opt.slot_v.size()));
  for (const Tensor& t : ck.opt.slot_v) put_tensor(w, t);
  ByteWriter footer;
  footer.u64(fnv1a64(w.data().data(), w.data().size()));
  write_file(path, w.data() + footer.data());
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16)
    throw std::runtime_error("checkpoint " + path + " is too small to be valid");
  const std::string payload = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(
                  bytes[bytes.size() - 8 + static_cast<std::size_t>(i)]))
              << (8 * i);
  if (fnv1a64(payload.data(), payload.size()) != stored)
    throw std::runtime_error("checkpoint " + path +
                             " failed its integrity check");
  ByteReader r(payload);
  char magic[4];
  for (char& m : magic) m = static_cast<char>(r.u8());
  if (std::string(magic, 4) != std::string(kMagic, 4))
    throw std::runtime_error("checkpoint " + path + " has the wrong magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint " + path + " uses version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kVersion));
  Checkpoint ck;
  ck.has_enhancer = r.u8() != 0;
  if (ck.has_enhancer) {
    EnhancerConfig& c = ck.enhancer_config;
    c.scale_pair.first = static_cast<int>(r.u32());
    c.scale_pair.second = static_cast<int>(r.u32());
    c.num_blocks = static_cast<int>(r.u32());
    c.channels = static_cast<int>(r.u32());
    c.downsample_method =
        checked_enum<DownsampleMethod>(r.u8(), 3, "downsample method");
    c.aggregation_high =
        checked_enum<AggregationMode>(r.u8(), 2, "aggregation");
    c.aggregation_low = checked_enum<AggregationMode>(r.u8(), 2, "aggregation");
    c.value_source = checked_enum<ValueSource>(r.u8(), 1, "value source");
    c.attention_scaling = r.u8() != 0;
    c.output_projection =
        checked_enum<OutputProjection>(r.u8(), 1, "output projection");
    c.share_fen = r.u8() != 0;
    c.validate();
  }
  ck.head_in_channels = static_cast<int>(r.u32());
  ck.head_input_size = static_cast<int>(r.u32());
  ck.head_num_classes = static_cast<int>(r.u32());
  OptimizerConfig& oc = ck.opt.config;
  oc.kind = checked_enum<OptimizerKind>(r.u8(), 1, "optimizer kind");
  oc.lr = r.f64();
  oc.momentum = r.f64();
  oc.beta1 = r.f64();
  oc.beta2 = r.f64();
  oc.eps = r.f64();
  oc.weight_decay = r.f64();
  ck.opt.step = r.u64();
  ck.epochs_done = static_cast<int>(r.u32());
  for (std::uint64_t& word : ck.rng_state) word = r.u64();
  const std::uint32_t count = r.u32();
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    ck.tensors.emplace_back(std::move(name), get_tensor(r));
  }
  const std::uint32_t m_count = r.u32();
  for (std::uint32_t i = 0; i < m_count; ++i)
    ck.opt.slot_m.push_back(get_tensor(r));
  const std::uint32_t v_count = r.u32();
  for (std::uint32_t i = 0; i < v_count; ++i)
    ck.opt.slot_v.push_back(get_tensor(r));
  if (r.remaining() != 0)
    throw std::runtime_error("checkpoint " + path + " has " +
                             std::to_string(r.remaining()) +
                             " unexpected trailing bytes");
  return ck;
}

}  // namespace fel
