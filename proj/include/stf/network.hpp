#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stf/config.hpp"
#include "stf/layers.hpp"
#include "stf/serialize.hpp"
#include "stf/streams.hpp"

namespace stf::inline STF_PRECISION_NS {

struct ModelConfig {
  std::string layout = "ntu25";
  std::vector<std::size_t> channels = {64, 64, 64, 128, 128, 128, 256, 256, 256};
  std::set<std::size_t> mcf_layers = {4, 5, 6, 7, 8, 9};
  std::set<std::size_t> stride_layers = {4, 7};
  std::size_t grains = 0;  // 0: every grain the layout defines
  bool use_tdf = true;
  TdfVariant tdf_variant = TdfVariant::plain;
  std::size_t tdf_kernel = 0;  // 0: variant default
  std::size_t tdf_reduction = 4;
  std::size_t tdf_groups = 0;  // 0: channels / reduction
  std::size_t alpha = 4;
  std::size_t tcn_kernel = 9;
  std::size_t tcn_groups = 4;
  bool learnable_mask = true;
  bool data_bn = true;
  std::size_t num_classes = 60;
  std::size_t in_channels = 3;
  Stream stream = Stream::joint;  // input modality the weights were trained on
  std::uint64_t seed = 0;

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = {"layout", "channels", "mcf_layers", "stride_layers", "grains", "tdf",
                                            "tdf_kernel", "tdf_reduction", "tdf_groups", "alpha", "tcn_kernel",
                                            "tcn_groups", "mask", "data_bn", "num_classes", "in_channels", "stream", "seed"};
    return k;
  }

  // Reads the model keys present in `kv`; other keys are ignored.
  static ModelConfig from(const KeyValueConfig& kv) {
    ModelConfig c;
    const auto& v = kv.values();
    auto get = [&](const char* k) -> const std::string* {
      auto it = v.find(k);
      return it == v.end() ? nullptr : &it->second;
    };
    if (auto s = get("layout")) c.layout = *s;
    if (auto s = get("channels")) c.channels = parse::to_size_list(*s, "channels");
    if (auto s = get("mcf_layers")) {
      auto l = parse::to_size_list(*s, "mcf_layers");
      c.mcf_layers = {l.begin(), l.end()};
    }
    if (auto s = get("stride_layers")) {
      auto l = parse::to_size_list(*s, "stride_layers");
      c.stride_layers = {l.begin(), l.end()};
    }
    if (auto s = get("grains")) c.grains = parse::to_size(*s, "grains");
    if (auto s = get("tdf")) {
      if (*s == "off") {
        c.use_tdf = false;
      } else if (*s == "plain" || *s == "motion") {
        c.use_tdf = true;
        c.tdf_variant = *s == "plain" ? TdfVariant::plain : TdfVariant::motion;
      } else {
        throw ConfigError("'tdf' expects plain, motion or off, got '" + *s + "'");
      }
    }
    if (auto s = get("tdf_kernel")) c.tdf_kernel = parse::to_size(*s, "tdf_kernel");
    if (auto s = get("tdf_reduction")) c.tdf_reduction = parse::to_size(*s, "tdf_reduction");
    if (auto s = get("tdf_groups")) c.tdf_groups = parse::to_size(*s, "tdf_groups");
    if (auto s = get("alpha")) c.alpha = parse::to_size(*s, "alpha");
    if (auto s = get("tcn_kernel")) c.tcn_kernel = parse::to_size(*s, "tcn_kernel");
    if (auto s = get("tcn_groups")) c.tcn_groups = parse::to_size(*s, "tcn_groups");
    if (auto s = get("mask")) c.learnable_mask = parse::to_bool(*s, "mask");
    if (auto s = get("data_bn")) c.data_bn = parse::to_bool(*s, "data_bn");
    if (auto s = get("num_classes")) c.num_classes = parse::to_size(*s, "num_classes");
    if (auto s = get("in_channels")) c.in_channels = parse::to_size(*s, "in_channels");
    if (auto s = get("stream")) c.stream = parse_stream(*s);
    if (auto s = get("seed")) c.seed = parse::to_size(*s, "seed");
    return c;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "layout = " << layout << '\n'
       << "channels = " << parse::join(channels) << '\n'
       << "mcf_layers = " << parse::join(mcf_layers) << '\n'
       << "stride_layers = " << parse::join(stride_layers) << '\n'
       << "grains = " << grains << '\n'
       << "tdf = " << (use_tdf ? (tdf_variant == TdfVariant::plain ? "plain" : "motion") : "off") << '\n'
       << "tdf_kernel = " << tdf_kernel << '\n'
       << "tdf_reduction = " << tdf_reduction << '\n'
       << "tdf_groups = " << tdf_groups << '\n'
       << "alpha = " << alpha << '\n'
       << "tcn_kernel = " << tcn_kernel << '\n'
       << "tcn_groups = " << tcn_groups << '\n'
       << "mask = " << (learnable_mask ? "on" : "off") << '\n'
       << "data_bn = " << (data_bn ? "on" : "off") << '\n'
       << "num_classes = " << num_classes << '\n'
       << "in_channels = " << in_channels << '\n'
       << "stream = " << to_string(stream) << '\n'
       << "seed = " << seed << '\n';
    return os.str();
  }

  void validate(std::size_t layout_grains) const {
    if (channels.size() != 9) throw ConfigError("channel schedule must have 9 entries, got " + std::to_string(channels.size()));
    for (auto c : channels) {
      if (c == 0) throw ConfigError("channel schedule entries must be positive");
    }
    for (auto l : mcf_layers) {
      if (l < 1 || l > 9) throw ConfigError("mcf layer index " + std::to_string(l) + " outside 1..9");
    }
    for (auto l : stride_layers) {
      if (l < 1 || l > 9) throw ConfigError("stride layer index " + std::to_string(l) + " outside 1..9");
    }
    if (grains > layout_grains) {
      throw ConfigError("grains " + std::to_string(grains) + " exceeds the " + std::to_string(layout_grains) +
                        " grains of layout " + layout);
    }
    if (num_classes < 1 || in_channels < 1) throw ConfigError("num_classes and in_channels must be positive");
    if (tcn_kernel % 2 == 0) throw ConfigError("tcn kernel must be odd, got " + std::to_string(tcn_kernel));
  }
};

// Ablation switches applied on top of a config.
enum class Ablation { mcf, tdf, mask };

inline ModelConfig ablate(ModelConfig c, Ablation a) {
  switch (a) {
    case Ablation::mcf: c.mcf_layers.clear(); break;
    case Ablation::tdf: c.use_tdf = false; break;
    case Ablation::mask: c.learnable_mask = false; break;
  }
  return c;
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "mcf") return Ablation::mcf;
  if (s == "tdf") return Ablation::tdf;
  if (s == "mask") return Ablation::mask;
  throw ConfigError("unknown ablation '" + s + "' (expected mcf, tdf or mask)");
}

struct BlockOptions {
  std::size_t cin = 0, cout = 0, stride = 1;
  bool residual = true;
  bool use_mcf = false, use_tdf = false;
  ScnOptions scn;
  McfOptions mcf;
  TdfOptions tdf;
  std::size_t tcn_kernel = 9, tcn_groups = 1;
};

// SCN -> [MCF] -> [TDF] -> TCN with a block residual and a closing ReLU.
class StfBlock {
 public:
  StfBlock() = default;
  StfBlock(const BlockOptions& o, const PartitionedAdjacency& adjacency, const std::vector<GrainMapping>& grains, Rng& rng)
      : scn_(o.cin, o.cout, adjacency, rng, o.scn) {
    if (o.use_mcf) mcf_.emplace(o.cout, grains, rng, o.mcf);
    if (o.use_tdf) tdf_.emplace(o.cout, rng, o.tdf);
    tcn_ = Tcn(o.cout, o.tcn_kernel, o.stride, rng, o.tcn_groups);
    if (!o.residual) {
      residual_ = Residual::none;
    } else if (o.cin == o.cout && o.stride == 1) {
      residual_ = Residual::identity;
    } else {
      residual_ = Residual::projection;
      res_conv_ = TemporalConv(o.cin, o.cout, 1, rng, o.stride);
      res_bn_ = BatchNorm(o.cout);
    }
  }

  Tensor forward(const Tensor& x, bool training, std::vector<Tensor>* attention = nullptr) {
    Tensor h = scn_.forward(x, training);
    if (mcf_) h = mcf_->forward(h, attention);
    if (tdf_) h = tdf_->forward(h, training);
    h = tcn_.forward(h, training);
    switch (residual_) {
      case Residual::none: break;
      case Residual::identity: h = ops::add(h, x); break;
      case Residual::projection: h = ops::add(h, res_bn_.forward(res_conv_.forward(x), training)); break;
    }
    return ops::relu(h);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    scn_.collect(out, prefix + ".scn");
    if (mcf_) mcf_->collect(out, prefix + ".mcf");
    if (tdf_) tdf_->collect(out, prefix + ".tdf");
    tcn_.collect(out, prefix + ".tcn");
    if (residual_ == Residual::projection) {
      res_conv_.collect(out, prefix + ".residual.conv");
      res_bn_.collect(out, prefix + ".residual.bn");
    }
  }
  void collect_buffers(BufferList& out, const std::string& prefix) {
    scn_.collect_buffers(out, prefix + ".scn");
    if (tdf_) tdf_->collect_buffers(out, prefix + ".tdf");
    tcn_.collect_buffers(out, prefix + ".tcn");
    if (residual_ == Residual::projection) res_bn_.collect_buffers(out, prefix + ".residual.bn");
  }

  Scn& scn() { return scn_; }
  Mcf* mcf() { return mcf_ ? &*mcf_ : nullptr; }
  Tdf* tdf() { return tdf_ ? &*tdf_ : nullptr; }
  Tcn& tcn() { return tcn_; }

 private:
  enum class Residual { none, identity, projection };
  Scn scn_;
  std::optional<Mcf> mcf_;
  std::optional<Tdf> tdf_;
  Tcn tcn_;
  Residual residual_ = Residual::none;
  TemporalConv res_conv_;
  BatchNorm res_bn_;
};

// Intermediate results captured during a forward pass.
struct ForwardTrace {
  struct BlockAttention {
    std::size_t block = 0;             // 1-based block index
    std::vector<Tensor> per_grain;     // N x V x V_i each
  };
  std::vector<BlockAttention> attention;
  Tensor features;  // output of the last block, N x C x T x V
};

class Model {
 public:
  static constexpr std::size_t kBlocks = 9;

  explicit Model(ModelConfig config) : Model(config, load_layout(config.layout)) {}

  Model(ModelConfig config, Layout layout) : config_(std::move(config)), layout_(std::move(layout)) {
    config_.validate(layout_.grains.size());
    const std::size_t grains = config_.grains ? config_.grains : layout_.grains.size();
    const std::vector<GrainMapping> used(layout_.grains.begin(), layout_.grains.begin() + static_cast<std::ptrdiff_t>(grains));
    const PartitionedAdjacency adjacency = partition_adjacency(layout_.graph);
    Rng rng(config_.seed);

    if (config_.data_bn) data_bn_ = BatchNorm(config_.in_channels);

    BlockOptions base;
    base.scn.learnable_mask = config_.learnable_mask;
    base.mcf.alpha = config_.alpha;
    base.tdf.variant = config_.tdf_variant;
    base.tdf.kernel = config_.tdf_kernel;
    base.tdf.reduction = config_.tdf_reduction;
    base.tdf.groups = config_.tdf_groups;
    base.tcn_kernel = config_.tcn_kernel;
    base.tcn_groups = config_.tcn_groups;

    BlockOptions stem = base;
    stem.cin = config_.in_channels;
    stem.cout = config_.channels.front();
    stem.residual = false;
    stem_ = StfBlock(stem, adjacency, used, rng);

    std::size_t cin = stem.cout;
    for (std::size_t i = 1; i <= kBlocks; ++i) {
      BlockOptions b = base;
      b.cin = cin;
      b.cout = config_.channels[i - 1];
      b.stride = config_.stride_layers.count(i) ? 2 : 1;
      b.use_mcf = config_.mcf_layers.count(i) != 0;
      b.use_tdf = config_.use_tdf;
      blocks_.emplace_back(b, adjacency, used, rng);
      cin = b.cout;
    }
    head_ = ClassifierHead(cin, config_.num_classes, rng);
  }

  // x: N x C_in x T x V -> logits N x num_classes.
  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(3) != layout_.num_joints()) {
      throw ShapeError("model input " + shape_str(x.shape()) + " does not match C=" +
                       std::to_string(config_.in_channels) + ", V=" + std::to_string(layout_.num_joints()));
    }
    Tensor h = config_.data_bn ? data_bn_.forward(x, training_) : x;
    h = stem_.forward(h, training_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      std::vector<Tensor> att;
      const bool want = trace && blocks_[i].mcf();
      h = blocks_[i].forward(h, training_, want ? &att : nullptr);
      if (want) trace->attention.push_back({i + 1, std::move(att)});
    }
    if (trace) trace->features = h;
    return head_.forward(h);
  }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  ParamList parameters() const {
    ParamList out;
    if (config_.data_bn) data_bn_.collect(out, "data_bn");
    stem_.collect(out, "stem");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "blocks." + std::to_string(i + 1));
    head_.collect(out, "head");
    return out;
  }

  BufferList buffers() {
    BufferList out;
    if (config_.data_bn) data_bn_.collect_buffers(out, "data_bn");
    stem_.collect_buffers(out, "stem");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect_buffers(out, "blocks." + std::to_string(i + 1));
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  const ModelConfig& config() const { return config_; }
  const Layout& layout() const { return layout_; }
  StfBlock& block(std::size_t index) { return blocks_.at(index - 1); }
  StfBlock& stem() { return stem_; }
  ClassifierHead& head() { return head_; }
  bool has_mcf() const { return !config_.mcf_layers.empty(); }

 private:
  ModelConfig config_;
  Layout layout_;
  bool training_ = true;
  BatchNorm data_bn_;
  StfBlock stem_;
  std::vector<StfBlock> blocks_;
  ClassifierHead head_;
};

inline std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

inline std::size_t count_params(const Model& model) { return count_params(model.parameters()); }

inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<std::size_t>& labels) {
  return ops::cross_entropy(logits, labels);
}

// Copies every parameter and buffer whose name exists in both models.
// Returns how many entries were copied.
inline std::size_t copy_matching_state(Model& from, Model& to) {
  std::map<std::string, Tensor> src;
  for (auto& p : from.parameters()) src[p.name] = p.tensor;
  std::size_t copied = 0;
  for (auto& p : to.parameters()) {
    auto it = src.find(p.name);
    if (it == src.end()) continue;
    if (it->second.shape() != p.tensor.shape()) throw ShapeError("parameter " + p.name + " shape differs");
    p.tensor.values() = it->second.values();
    ++copied;
  }
  std::map<std::string, std::vector<real>*> bsrc;
  for (auto& b : from.buffers()) bsrc[b.name] = b.data;
  for (auto& b : to.buffers()) {
    auto it = bsrc.find(b.name);
    if (it == bsrc.end()) continue;
    *b.data = *it->second;
    ++copied;
  }
  return copied;
}

// ------------------------------------------------------------ checkpoints
//
// "STFCKPT1" | u64 config length | config text (key = value lines) |
// u32 entry count | per entry: u32 name length, name, TNSR blob.
// Entries are parameters then buffers, in model order.

inline void save_checkpoint(const std::string& path, Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write("STFCKPT1", 8);
  const std::string text = model.config().to_text();
  io::detail::put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  auto bufs = model.buffers();
  io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size() + bufs.size()));
  auto entry = [&](const std::string& name, const Tensor& t) {
    io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_tensor(os, t);
  };
  for (const auto& p : params) entry(p.name, p.tensor);
  for (const auto& b : bufs) entry(b.name, Tensor::from({b.data->size()}, *b.data));
}

inline ModelConfig read_checkpoint_config(std::istream& is, const std::string& path) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "STFCKPT1") throw DataError(path + ": not a checkpoint");
  std::uint64_t len = 0;
  if (!io::detail::get(is, len) || len > (1u << 20)) throw DataError(path + ": bad config header");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw DataError(path + ": truncated config header");
  return ModelConfig::from(KeyValueConfig::parse_text(text, path));
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  Model model(read_checkpoint_config(is, path));
  std::uint32_t count = 0;
  if (!io::detail::get(is, count)) throw DataError(path + ": truncated entry table");
  std::map<std::string, Tensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t n = 0;
    if (!io::detail::get(is, n) || n > 4096) throw DataError(path + ": bad entry name");
    std::string name(n, '\0');
    if (!is.read(name.data(), n)) throw DataError(path + ": truncated entry name");
    entries[name] = io::read_tensor(is, path + ":" + name);
  }
  std::size_t used = 0;
  for (auto& p : model.parameters()) {
    auto it = entries.find(p.name);
    if (it == entries.end() || it->second.shape() != p.tensor.shape()) {
      throw ContractError(path + ": parameter " + p.name + " missing or mis-shaped");
    }
    p.tensor.values() = it->second.values();
    ++used;
  }
  for (auto& b : model.buffers()) {
    auto it = entries.find(b.name);
    if (it == entries.end() || it->second.numel() != b.data->size()) {
      throw ContractError(path + ": buffer " + b.name + " missing or mis-sized");
    }
    *b.data = it->second.values();
    ++used;
  }
  if (used != entries.size()) throw ContractError(path + ": checkpoint has entries the model does not use");
  return model;
}

}  // namespace stf::inline STF_PRECISION_NS
