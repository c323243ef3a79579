// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "mxa/error.hpp"

namespace mxa {

namespace {

constexpr std::uint8_t kMagic[4] = {0x4D, 0x58, 0x54, 0x44};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in[i]) << (8 * i));
  return v;
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (n > b_.size() - pos_) throw FormatError(std::string("container truncated while reading ") + what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T num(const char* what) {
    return get_le<T>(take(sizeof(T), what));
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint64_t product(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) throw FormatError("tensor shape overflows");
    n *= d;
  }
  return n;
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32:
    case DType::U32:
      return 4;
    case DType::F64:
      return 8;
  }
  throw FormatError("unknown dtype");
}

Tensor Tensor::f64(std::string name, std::vector<std::uint64_t> shape, std::span<const double> values) {
  Tensor t{std::move(name), DType::F64, std::move(shape), {}};
  if (product(t.shape) != values.size()) throw FormatError("tensor " + t.name + ": value count does not match shape");
  t.payload.reserve(values.size() * 8);
  for (double v : values) put_le(t.payload, std::bit_cast<std::uint64_t>(v));
  return t;
}

Tensor Tensor::f32(std::string name, std::vector<std::uint64_t> shape, std::span<const float> values) {
  Tensor t{std::move(name), DType::F32, std::move(shape), {}};
  if (product(t.shape) != values.size()) throw FormatError("tensor " + t.name + ": value count does not match shape");
  for (float v : values) put_le(t.payload, std::bit_cast<std::uint32_t>(v));
  return t;
}

Tensor Tensor::u32(std::string name, std::vector<std::uint64_t> shape, std::span<const std::uint32_t> values) {
  Tensor t{std::move(name), DType::U32, std::move(shape), {}};
  if (product(t.shape) != values.size()) throw FormatError("tensor " + t.name + ": value count does not match shape");
  for (std::uint32_t v : values) put_le(t.payload, v);
  return t;
}

Tensor Tensor::matrix(std::string name, const Matrix& m) { return f64(std::move(name), {m.rows(), m.cols()}, m.data()); }

std::uint64_t Tensor::element_count() const { return product(shape); }

std::vector<double> Tensor::as_f64() const {
  std::vector<double> out(element_count());
  std::span<const std::uint8_t> p(payload);
  if (dtype == DType::F64) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<double>(get_le<std::uint64_t>(p.subspan(8 * i)));
  } else if (dtype == DType::F32) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_le<std::uint32_t>(p.subspan(4 * i)));
  } else {
    throw FormatError("tensor " + name + ": expected a floating-point dtype");
  }
  return out;
}

std::vector<std::uint32_t> Tensor::as_u32() const {
  if (dtype != DType::U32) throw FormatError("tensor " + name + ": expected u32");
  std::vector<std::uint32_t> out(element_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_le<std::uint32_t>(std::span(payload).subspan(4 * i));
  return out;
}

Matrix Tensor::as_matrix() const {
  if (shape.size() != 2) throw FormatError("tensor " + name + ": expected a 2-d tensor");
  return Matrix(shape[0], shape[1], as_f64());
}

void TensorContainer::add(Tensor t) {
  if (find(t.name)) throw FormatError("duplicate tensor name '" + t.name + "'");
  tensors.push_back(std::move(t));
}

const Tensor* TensorContainer::find(std::string_view name) const {
  for (const Tensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& TensorContainer::get(std::string_view name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("missing tensor '" + std::string(name) + "'");
}

std::vector<std::uint8_t> serialize_container(const TensorContainer& c) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint16_t>(out, kVersion);
  if (c.tensors.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("too many tensors");
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const Tensor& t : c.tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("tensor name too long");
    if (t.shape.size() > 255) throw FormatError("tensor rank too large");
    if (t.payload.size() != t.element_count() * dtype_size(t.dtype))
      throw FormatError("tensor " + t.name + ": payload length does not match shape");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (std::uint64_t d : t.shape) put_le<std::uint64_t>(out, d);
    out.insert(out.end(), t.payload.begin(), t.payload.end());
  }
  return out;
}

TensorContainer deserialize_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw FormatError("bad magic: not an MXTD file");
  const auto version = r.num<std::uint16_t>("version");
  if (version != kVersion) throw FormatError("unsupported MXTD version " + std::to_string(version));
  const auto count = r.num<std::uint32_t>("tensor count");
  TensorContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto name_len = r.num<std::uint16_t>("name length");
    auto name = r.take(name_len, "name");
    t.name.assign(name.begin(), name.end());
    const auto code = r.num<std::uint8_t>("dtype");
    if (code < 1 || code > 3) throw FormatError("tensor " + t.name + ": unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const auto ndim = r.num<std::uint8_t>("ndim");
    for (std::uint8_t k = 0; k < ndim; ++k) t.shape.push_back(r.num<std::uint64_t>("dims"));
    const std::uint64_t n = product(t.shape);
    if (n > std::numeric_limits<std::size_t>::max() / dtype_size(t.dtype)) throw FormatError("tensor too large");
    auto payload = r.take(static_cast<std::size_t>(n * dtype_size(t.dtype)), "payload");
    t.payload.assign(payload.begin(), payload.end());
    c.add(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return c;
}

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  const auto bytes = serialize_container(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write failed for " + path.string());
}

TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_container(bytes);
}

// ---------------------------------------------------------------- model

namespace {

void put_vec(TensorContainer& c, const std::string& name, const Vector& v) { c.add(Tensor::f64(name, {v.size()}, v)); }

Vector get_vec(const TensorContainer& c, const std::string& name) { return c.get(name).as_f64(); }

}  // namespace

TensorContainer model_to_container(const ModelWeights& w, const ModelConfig& cfg) {
  w.check(cfg);
  TensorContainer c;
  const std::vector<std::uint32_t> meta = {
      static_cast<std::uint32_t>(cfg.d_model),    static_cast<std::uint32_t>(cfg.n_layers),
      static_cast<std::uint32_t>(cfg.n_heads),    static_cast<std::uint32_t>(cfg.d_ff),
      static_cast<std::uint32_t>(cfg.vocab_size), static_cast<std::uint32_t>(cfg.max_seq_len),
      cfg.has_bias ? 1u : 0u};
  c.add(Tensor::u32("meta.config", {meta.size()}, meta));
  c.add(Tensor::f64("meta.rms_eps", {1}, std::vector<double>{cfg.rms_eps}));
  const std::vector<std::uint32_t> hb = {static_cast<std::uint32_t>(w.ffn_hadamard_block)};
  c.add(Tensor::u32("meta.ffn_hadamard_block", {1}, hb));
  c.add(Tensor::matrix("embedding", w.embedding));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const LayerWeights& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    put_vec(c, p + "attn_norm", l.attn_norm);
    c.add(Tensor::matrix(p + "wq", l.wq));
    c.add(Tensor::matrix(p + "wk", l.wk));
    c.add(Tensor::matrix(p + "wv", l.wv));
    c.add(Tensor::matrix(p + "wo", l.wo));
    put_vec(c, p + "bq", l.bq);
    put_vec(c, p + "bk", l.bk);
    put_vec(c, p + "bv", l.bv);
    put_vec(c, p + "bo", l.bo);
    put_vec(c, p + "ffn_norm", l.ffn_norm);
    c.add(Tensor::matrix(p + "w_gate", l.w_gate));
    c.add(Tensor::matrix(p + "w_up", l.w_up));
    c.add(Tensor::matrix(p + "w_down", l.w_down));
    put_vec(c, p + "b_gate", l.b_gate);
    put_vec(c, p + "b_up", l.b_up);
    put_vec(c, p + "b_down", l.b_down);
  }
  put_vec(c, "final_norm", w.final_norm);
  c.add(Tensor::matrix("head", w.head));
  put_vec(c, "b_head", w.b_head);
  return c;
}

void model_from_container(const TensorContainer& c, ModelWeights& w, ModelConfig& cfg) {
  const auto meta = c.get("meta.config").as_u32();
  if (meta.size() != 7) throw FormatError("meta.config must have 7 entries");
  cfg.d_model = meta[0];
  cfg.n_layers = meta[1];
  cfg.n_heads = meta[2];
  cfg.d_ff = meta[3];
  cfg.vocab_size = meta[4];
  cfg.max_seq_len = meta[5];
  cfg.has_bias = meta[6] != 0;
  if (const Tensor* eps = c.find("meta.rms_eps")) cfg.rms_eps = eps->as_f64().at(0);
  w = ModelWeights{};
  if (const Tensor* hb = c.find("meta.ffn_hadamard_block")) w.ffn_hadamard_block = hb->as_u32().at(0);
  w.embedding = c.get("embedding").as_matrix();
  w.layers.resize(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    l.attn_norm = get_vec(c, p + "attn_norm");
    l.wq = c.get(p + "wq").as_matrix();
    l.wk = c.get(p + "wk").as_matrix();
    l.wv = c.get(p + "wv").as_matrix();
    l.wo = c.get(p + "wo").as_matrix();
    l.bq = get_vec(c, p + "bq");
    l.bk = get_vec(c, p + "bk");
    l.bv = get_vec(c, p + "bv");
    l.bo = get_vec(c, p + "bo");
    l.ffn_norm = get_vec(c, p + "ffn_norm");
    l.w_gate = c.get(p + "w_gate").as_matrix();
    l.w_up = c.get(p + "w_up").as_matrix();
    l.w_down = c.get(p + "w_down").as_matrix();
    l.b_gate = get_vec(c, p + "b_gate");
    l.b_up = get_vec(c, p + "b_up");
    l.b_down = get_vec(c, p + "b_down");
  }
  w.final_norm = get_vec(c, "final_norm");
  w.head = c.get("head").as_matrix();
  w.b_head = get_vec(c, "b_head");
  try {
    w.check(cfg);
  } catch (const DimensionError& e) {
    throw FormatError(std::string("model container inconsistent: ") + e.what());
  }
}

// ---------------------------------------------------------------- transforms

namespace {

void put_params(TensorContainer& c, const std::string& p, const TransformParams& tp) {
  std::visit(
      [&](const auto& params) {
        using T = std::decay_t<decltype(params)>;
        const bool lu = std::is_same_v<T, LuParams>;
        const std::vector<std::uint32_t> meta = {lu ? 0u : 1u, static_cast<std::uint32_t>(params.structure_block)};
        c.add(Tensor::u32(p + "meta", {2}, meta));
        if constexpr (std::is_same_v<T, LuParams>) {
          std::vector<std::uint32_t> perm(params.p.map.begin(), params.p.map.end());
          c.add(Tensor::u32(p + "perm", {perm.size()}, perm));
          c.add(Tensor::matrix(p + "L", params.l));
          c.add(Tensor::matrix(p + "U", params.u));
        } else {
          c.add(Tensor::matrix(p + "G", params.g));
          c.add(Tensor::matrix(p + "R", params.r));
        }
        put_vec(c, p + "log_s", params.log_s);
        put_vec(c, p + "sign_s", params.sign_s);
        put_vec(c, p + "v", params.v);
      },
      tp);
  const AffineTransform t = assemble(tp);
  c.add(Tensor::matrix(p + "A", t.a()));
  c.add(Tensor::matrix(p + "A_inv", t.a_inv()));
}

TransformParams get_params(const TensorContainer& c, const std::string& p) {
  const auto meta = c.get(p + "meta").as_u32();
  if (meta.size() != 2 || meta[0] > 1) throw FormatError(p + "meta: invalid");
  auto fill = [&](auto& params) {
    params.log_s = get_vec(c, p + "log_s");
    params.sign_s = get_vec(c, p + "sign_s");
    params.v = get_vec(c, p + "v");
    params.structure_block = meta[1];
  };
  if (meta[0] == 0) {
    LuParams lu;
    const auto perm = c.get(p + "perm").as_u32();
    lu.p.map.assign(perm.begin(), perm.end());
    lu.l = c.get(p + "L").as_matrix();
    lu.u = c.get(p + "U").as_matrix();
    fill(lu);
    return lu;
  }
  QrParams qr;
  qr.g = c.get(p + "G").as_matrix();
  qr.r = c.get(p + "R").as_matrix();
  fill(qr);
  return qr;
}

}  // namespace

TensorContainer transforms_to_container(const LearnableTransforms& p) {
  TensorContainer c;
  const std::vector<std::uint32_t> meta = {static_cast<std::uint32_t>(p.t2.size()), p.t3_enabled ? 1u : 0u,
                                           static_cast<std::uint32_t>(p.t3_block)};
  c.add(Tensor::u32("meta.transforms", {3}, meta));
  put_params(c, "t1.", p.t1);
  for (std::size_t i = 0; i < p.t2.size(); ++i) put_params(c, "t2." + std::to_string(i) + ".", p.t2[i]);
  return c;
}

LearnableTransforms transforms_from_container(const TensorContainer& c) {
  const auto meta = c.get("meta.transforms").as_u32();
  if (meta.size() != 3) throw FormatError("meta.transforms must have 3 entries");
  LearnableTransforms p;
  p.t1 = get_params(c, "t1.");
  for (std::uint32_t i = 0; i < meta[0]; ++i) p.t2.push_back(get_params(c, "t2." + std::to_string(i) + "."));
  p.t3_enabled = meta[1] != 0;
  p.t3_block = meta[2];
  try {
    (void)p.assemble();
  } catch (const std::exception& e) {
    throw FormatError(std::string("transform checkpoint invalid: ") + e.what());
  }
  return p;
}

}  // namespace mxa
