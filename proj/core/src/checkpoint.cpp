#include "egrot/checkpoint.hpp"

#include <set>

#include "egrot/binary_io.hpp"
#include "egrot/error.hpp"

namespace egrot {

namespace {

void write_record(io::ByteWriter& w, const TensorRecord& r, Precision p) {
  w.u32(static_cast<std::uint32_t>(r.name.size()));
  w.bytes(r.name.data(), r.name.size());
  w.u32(static_cast<std::uint32_t>(r.shape.size()));
  for (std::size_t e : r.shape) w.u64(e);
  for (double v : r.values) {
    if (p == Precision::kF32) {
      w.f32(static_cast<float>(v));
    } else {
      w.f64(v);
    }
  }
}

TensorRecord read_record(io::ByteReader& r, Precision p, const std::string& origin) {
  TensorRecord rec;
  const std::uint32_t name_len = r.u32();
  rec.name.resize(name_len);
  r.bytes(rec.name.data(), name_len);
  const std::uint32_t rank = r.u32();
  r.require(static_cast<std::uint64_t>(rank) * 8);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t e = r.u64();
    if (e == 0 || count > (std::uint64_t{1} << 40) / e) {
      throw IncompatibleCheckpoint("'" + origin + "': tensor '" + rec.name + "' has an invalid extent");
    }
    count *= e;
    rec.shape.push_back(e);
  }
  const std::uint64_t width = p == Precision::kF32 ? 4 : 8;
  if (count > r.remaining() / width) {
    throw IncompatibleCheckpoint("'" + origin + "': tensor '" + rec.name + "' extends past the end of the file");
  }
  rec.values.resize(count);
  for (auto& v : rec.values) v = p == Precision::kF32 ? static_cast<double>(r.f32()) : r.f64();
  return rec;
}

template <typename T>
TensorRecord to_record(const std::string& name, const ag::Shape& shape, std::span<const T> values) {
  return {name, shape, std::vector<double>(values.begin(), values.end())};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(c.config_hash);
  w.str(canonical_json(c.config));
  w.u32(c.precision == Precision::kF32 ? 4 : 8);
  w.u64(c.step);
  w.u64(c.optimizer_step);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& r : c.params) write_record(w, r, c.precision);
  w.u32(static_cast<std::uint32_t>(c.moments.size()));
  for (const auto& r : c.moments) write_record(w, r, c.precision);
  return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& origin) {
  io::ByteReader r(std::move(bytes), origin);
  try {
    char magic[4];
    r.bytes(magic, 4);
    if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
      throw IncompatibleCheckpoint("'" + origin + "' is not a checkpoint (bad magic)");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
      throw IncompatibleCheckpoint("'" + origin + "' has checkpoint version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
    }
    Checkpoint c;
    c.config_hash = r.str();
    try {
      c.config = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
      throw IncompatibleCheckpoint("'" + origin + "': embedded config is not valid JSON");
    }
    const std::uint32_t width = r.u32();
    if (width != 4 && width != 8) {
      throw IncompatibleCheckpoint("'" + origin + "': unknown precision tag " + std::to_string(width));
    }
    c.precision = width == 4 ? Precision::kF32 : Precision::kF64;
    c.step = r.u64();
    c.optimizer_step = r.u64();
    std::set<std::string> names;
    for (auto* list : {&c.params, &c.moments}) {
      const std::uint32_t n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        list->push_back(read_record(r, c.precision, origin));
        if (!names.insert(list->back().name).second) {
          throw IncompatibleCheckpoint("'" + origin + "': duplicate tensor name '" + list->back().name + "'");
        }
      }
    }
    if (!r.at_end()) throw IncompatibleCheckpoint("'" + origin + "': trailing bytes after the last record");
    return c;
  } catch (const FormatError& e) {
    throw IncompatibleCheckpoint(std::string(e.what()));
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = encode_checkpoint(ckpt);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  std::vector<std::uint8_t> bytes(r.remaining());
  if (!bytes.empty()) r.bytes(bytes.data(), bytes.size());
  return decode_checkpoint(std::move(bytes), path);
}

template <typename T>
Checkpoint make_checkpoint(const RunConfig& config, const model::Model<T>& model, const ag::OptimizerState<T>& opt,
                           std::uint64_t step) {
  Checkpoint c;
  c.config = config;
  c.config_hash = config_hash(c.config);
  c.precision = sizeof(T) == 4 ? Precision::kF32 : Precision::kF64;
  c.step = step;
  c.optimizer_step = opt.step;
  for (const auto& p : model.params()) c.params.push_back(to_record<T>(p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& [name, m] : opt.moments) {
    const ag::Shape& shape = model.param(name).shape();
    c.moments.push_back(to_record<T>("m/" + name, shape, m.first));
    c.moments.push_back(to_record<T>("v/" + name, shape, m.second));
  }
  return c;
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  try {
    RunConfig c = ckpt.config.get<RunConfig>();
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw IncompatibleCheckpoint(std::string("embedded config rejected: ") + e.what());
  }
}

template <typename T>
model::Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = config_from_checkpoint(ckpt);
  ag::ParamList<T> params;
  for (const auto& r : ckpt.params) {
    params.push_back({r.name, ag::Tensor<T>(r.shape, std::vector<T>(r.values.begin(), r.values.end()), true)});
  }
  try {
    return model::Model<T>(cfg.model, std::move(params));
  } catch (const ShapeMismatch& e) {
    throw IncompatibleCheckpoint(std::string("weights do not fit the stored model config: ") + e.what());
  }
}

template <typename T>
ag::OptimizerState<T> optimizer_from_checkpoint(const Checkpoint& ckpt, const ag::AdamWConfig& hyper) {
  ag::OptimizerState<T> st;
  st.config = hyper;
  st.step = ckpt.optimizer_step;
  for (const auto& r : ckpt.moments) {
    if (r.name.size() < 3 || (r.name[0] != 'm' && r.name[0] != 'v') || r.name[1] != '/') {
      throw IncompatibleCheckpoint("unexpected optimizer record '" + r.name + "'");
    }
    auto& mom = st.moments[r.name.substr(2)];
    (r.name[0] == 'm' ? mom.first : mom.second).assign(r.values.begin(), r.values.end());
  }
  return st;
}

template Checkpoint make_checkpoint(const RunConfig&, const model::Model<float>&, const ag::OptimizerState<float>&,
                                    std::uint64_t);
template Checkpoint make_checkpoint(const RunConfig&, const model::Model<double>&,
                                    const ag::OptimizerState<double>&, std::uint64_t);
template model::Model<float> model_from_checkpoint(const Checkpoint&);
template model::Model<double> model_from_checkpoint(const Checkpoint&);
template ag::OptimizerState<float> optimizer_from_checkpoint(const Checkpoint&, const ag::AdamWConfig&);
template ag::OptimizerState<double> optimizer_from_checkpoint(const Checkpoint&, const ag::AdamWConfig&);

}  // namespace egrot
