#include "fgn/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fgn {

ModelFormatError::ModelFormatError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

namespace {

enum : std::uint8_t { kDense = 0, kFgnDense = 1, kConv = 2, kFgnConv = 3 };

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint64_t v) {
    if (v > 0xffffffffULL) throw std::invalid_argument("model dimension does not fit in u32");
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32_raw(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void block(const Tensor& t) {
    for (double v : t.data) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void u32_raw(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += 4;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  Tensor block(Shape shape) {
    Tensor t(std::move(shape));
    need(4 * t.size());
    for (double& v : t.data) v = f32();
    return t;
  }
  std::size_t dim(const char* what) {
    const std::size_t at = pos_;
    const std::uint32_t v = u32();
    if (v == 0) throw ModelFormatError(std::string("zero ") + what, at);
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw ModelFormatError("truncated model", b_.size());
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

Activation read_activation(Reader& r) {
  const std::size_t at = r.pos();
  const std::uint8_t a = r.u8();
  if (a > 2) throw ModelFormatError("unknown activation tag " + std::to_string(a), at);
  return static_cast<Activation>(a);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Network& net) {
  if (net.layers.size() > 0xffff) throw std::invalid_argument("too many layers");
  Writer w;
  for (char c : std::string("FGNN")) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kModelFormatVersion);
  w.u16(static_cast<std::uint16_t>(net.layers.size()));
  for (const Layer& layer : net.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      w.u8(kDense);
      w.u8(static_cast<std::uint8_t>(d->activation));
      w.u32(d->in_dim());
      w.u32(d->out_dim());
      w.u8(0);
      w.block(d->weights);
      w.block(d->bias);
    } else if (const auto* f = std::get_if<FgnDenseLayer>(&layer)) {
      f->validate();
      w.u8(kFgnDense);
      w.u8(static_cast<std::uint8_t>(f->activation));
      w.u32(f->in_dim());
      w.u32(f->out_dim());
      w.u8(static_cast<std::uint8_t>(f->variance_kind));
      w.f32(f->p_norm);
      w.u8(f->coupled ? 1 : 0);
      w.block(f->weights);
      w.block(f->bias);
      w.block(f->centers);
      w.block(f->variance);
    } else if (const auto* c = std::get_if<Conv1dLayer>(&layer)) {
      w.u8(kConv);
      w.u8(static_cast<std::uint8_t>(c->activation));
      w.u32(c->channels());
      w.u32(c->kernel());
      w.u32(c->stride);
      w.u32(c->dilation);
      w.u8(0);
      w.block(c->weights);
      w.block(c->bias);
    } else {
      const auto& fc = std::get<FgnConv1dLayer>(layer);
      w.u8(kFgnConv);
      w.u8(static_cast<std::uint8_t>(fc.activation));
      w.u32(fc.channels());
      w.u32(fc.kernel());
      w.u32(fc.stride);
      w.u32(fc.dilation);
      w.u8(static_cast<std::uint8_t>(VarianceKind::Spherical));
      w.block(fc.weights);
      w.block(fc.bias);
      w.block(fc.centers);
      w.block(fc.sigma);
    }
  }
  return w.take();
}

Network deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  for (char c : std::string("FGNN"))
    if (r.u8() != static_cast<std::uint8_t>(c)) throw ModelFormatError("bad magic", 0);
  const std::uint16_t version = r.u16();
  if (version != kModelFormatVersion)
    throw ModelFormatError("unsupported model version " + std::to_string(version), 4);
  const std::uint16_t count = r.u16();
  Network net;
  for (std::size_t li = 0; li < count; ++li) {
    const std::size_t at = r.pos();
    const std::uint8_t kind = r.u8();
    const Activation act = read_activation(r);
    if (kind == kDense || kind == kFgnDense) {
      const std::size_t in = r.dim("input width"), out = r.dim("output width");
      const std::size_t vat = r.pos();
      const std::uint8_t vk = r.u8();
      if (kind == kDense) {
        if (vk != 0) throw ModelFormatError("classical layer with variance tag", vat);
        Tensor wt = r.block({out, in});
        Tensor bt = r.block({out});
        net.layers.emplace_back(DenseLayer(std::move(wt), std::move(bt), act));
        continue;
      }
      if (vk < 1 || vk > 3) throw ModelFormatError("unknown variance tag " + std::to_string(vk), vat);
      FgnDenseLayer f;
      f.activation = act;
      f.variance_kind = static_cast<VarianceKind>(vk);
      f.p_norm = r.f32();
      const std::size_t cat = r.pos();
      const std::uint8_t coupled = r.u8();
      if (coupled > 1) throw ModelFormatError("bad coupled flag", cat);
      f.coupled = coupled == 1;
      f.weights = r.block({out, in});
      f.bias = r.block({out});
      f.centers = r.block({out, in});
      f.variance = r.block(vk == 1 ? Shape{out} : vk == 2 ? Shape{out, in} : Shape{out, in, in});
      try {
        f.validate();
      } catch (const std::invalid_argument& e) {
        throw ModelFormatError(e.what(), at);
      }
      net.layers.emplace_back(std::move(f));
    } else if (kind == kConv || kind == kFgnConv) {
      const std::size_t ch = r.dim("channel count"), k = r.dim("kernel size");
      const std::size_t stride = r.dim("stride"), dilation = r.dim("dilation");
      const std::size_t vat = r.pos();
      const std::uint8_t vk = r.u8();
      if (kind == kConv) {
        if (vk != 0) throw ModelFormatError("classical layer with variance tag", vat);
        Conv1dLayer c;
        c.activation = act;
        c.stride = stride;
        c.dilation = dilation;
        c.weights = r.block({ch, k});
        c.bias = r.block({ch});
        net.layers.emplace_back(std::move(c));
      } else {
        if (vk != 1) throw ModelFormatError("fgn conv layers use spherical variance", vat);
        FgnConv1dLayer c;
        c.activation = act;
        c.stride = stride;
        c.dilation = dilation;
        c.weights = r.block({ch, k});
        c.bias = r.block({ch});
        c.centers = r.block({ch, k});
        c.sigma = r.block({ch});
        net.layers.emplace_back(std::move(c));
      }
    } else {
      throw ModelFormatError("unknown layer kind " + std::to_string(kind), at);
    }
  }
  if (!r.done()) throw ModelFormatError("trailing bytes after last layer", r.pos());
  return net;
}

void save_model(const Network& net, const std::filesystem::path& path) {
  const auto bytes = serialize_model(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Network load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_model(bytes);
}

}  // namespace fgn
