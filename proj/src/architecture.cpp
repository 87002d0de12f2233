#include "neurofuse/architecture.hpp"

#include <algorithm>
#include <numeric>

namespace nf {

using ops::Padding;

Preset parse_preset(const std::string& name) {
  if (name == "paper") return Preset::paper;
  if (name == "tiny") return Preset::tiny;
  throw std::invalid_argument("unknown preset '" + name + "' (expected paper or tiny)");
}

const char* preset_name(Preset preset) { return preset == Preset::paper ? "paper" : "tiny"; }

// ---------------------------------------------------------------------------
// Configs

ResidualConfig ResidualConfig::paper() { return ResidualConfig{}; }

ResidualConfig ResidualConfig::tiny() {
  ResidualConfig c;
  c.input_size = 64;
  c.input_channels = 1;
  c.stem_width = 16;
  c.stem_kernel = 3;
  c.stem_stride = 2;
  c.stem_pool = true;
  c.stage_filters = {8, 16, 32};
  c.stage_blocks = {1, 1, 1};
  c.stage_strides = {2, 1, 1};
  return c;
}

int64_t ResidualConfig::output_grid() const {
  int64_t g = ops::conv_out_extent(input_size, stem_kernel, stem_stride, Padding::same);
  if (stem_pool) g = ops::conv_out_extent(g, 3, 2, Padding::same);
  for (int64_t s : stage_strides) g = ops::conv_out_extent(g, 1, s, Padding::same);
  return g;
}

int64_t ResidualConfig::canonical_depth() const {
  return 1 + 3 * std::accumulate(stage_blocks.begin(), stage_blocks.end(), int64_t{0}) + 1;
}

VggConfig VggConfig::paper() { return VggConfig{}; }

VggConfig VggConfig::tiny() {
  VggConfig c;
  c.input_size = 64;
  c.input_channels = 1;
  c.block_widths = {8, 16, 32, 64, 64};
  c.block_convs = {1, 1, 1, 1, 1};
  c.block_pool = {true, true, true, false, false};
  return c;
}

int64_t VggConfig::block_grid(int block) const {
  if (block < 1 || block > static_cast<int>(block_widths.size())) {
    throw std::out_of_range("VGG block index " + std::to_string(block) + " out of range");
  }
  int64_t g = input_size;
  for (int i = 0; i < block; ++i) {
    if (block_pool[static_cast<size_t>(i)]) g = ops::conv_out_extent(g, 2, 2, Padding::valid);
  }
  return g;
}

int64_t VggConfig::canonical_depth() const {
  return std::accumulate(block_convs.begin(), block_convs.end(), int64_t{0}) + 3;
}

ClassifierConfig ClassifierConfig::preset(Preset preset, int64_t num_classes) {
  ClassifierConfig c;
  c.fusion.num_classes = num_classes;
  if (preset == Preset::paper) return c;
  c.residual = ResidualConfig::tiny();
  c.vgg = VggConfig::tiny();
  c.taps.dwsc_out_channels = {16, 32, 64};
  c.taps.target_grid = 8;
  return c;
}

// ---------------------------------------------------------------------------
// Residual backbone

template <typename T>
ResidualBackbone<T>::ResidualBackbone(BuildContext<T>& bc, const ResidualConfig& cfg,
                                      const std::string& prefix)
    : prefix_(prefix), stem_pool_(cfg.stem_pool) {
  if (cfg.stage_filters.size() != cfg.stage_blocks.size() ||
      cfg.stage_filters.size() != cfg.stage_strides.size() || cfg.stage_filters.empty()) {
    throw std::invalid_argument("residual config: stage lists must be non-empty and equal length");
  }
  stem_ = Conv2D<T>(bc, prefix + ".stem.conv", cfg.stem_kernel, cfg.input_channels,
                    cfg.stem_width, cfg.stem_stride, true);
  if (cfg.stem_pool) bc.layers.push_back({prefix + ".stem.pool", LayerKind::pool});
  int64_t cin = cfg.stem_width;
  for (size_t s = 0; s < cfg.stage_filters.size(); ++s) {
    const int64_t f = cfg.stage_filters[s];
    for (int64_t b = 0; b < cfg.stage_blocks[s]; ++b) {
      Block blk;
      blk.name = prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      blk.stride = b == cfg.stage_blocks[s] - 1 ? cfg.stage_strides[s] : 1;
      blk.preact = BatchNorm<T>(bc, blk.name + ".preact_bn", cin);
      if (b == 0) {
        blk.shortcut.emplace(bc, blk.name + ".shortcut", 1, cin, 4 * f, blk.stride, true);
      }
      blk.conv1 = Conv2D<T>(bc, blk.name + ".conv1", 1, cin, f, 1, false);
      blk.bn1 = BatchNorm<T>(bc, blk.name + ".bn1", f);
      blk.conv2 = Conv2D<T>(bc, blk.name + ".conv2", 3, f, f, blk.stride, false);
      blk.bn2 = BatchNorm<T>(bc, blk.name + ".bn2", f);
      blk.conv3 = Conv2D<T>(bc, blk.name + ".conv3", 1, f, 4 * f, 1, true);
      bc.layers.push_back({blk.name + ".add", LayerKind::activation});
      blocks_.push_back(std::move(blk));
      cin = 4 * f;
    }
  }
  post_bn_ = BatchNorm<T>(bc, prefix + ".post_bn", cin);
  bc.layers.push_back({prefix + ".out", LayerKind::activation});
}

template <typename T>
Var<T> ResidualBackbone<T>::block_forward(size_t index, const Var<T>& x,
                                          ForwardContext<T>& ctx) const {
  const Block& b = blocks_.at(index);
  Var<T> pre = ops::relu(b.preact(x, ctx));
  Var<T> shortcut;
  if (b.shortcut) {
    shortcut = (*b.shortcut)(pre, ctx);
  } else if (b.stride > 1) {
    shortcut = ops::max_pool(x, 1, b.stride, Padding::valid);
  } else {
    shortcut = x;
  }
  Var<T> r = ops::relu(b.bn1(b.conv1(pre, ctx), ctx));
  r = ops::relu(b.bn2(b.conv2(r, ctx), ctx));
  r = b.conv3(r, ctx);
  return ctx.emit(b.name + ".add", ops::add(shortcut, r));
}

template <typename T>
Var<T> ResidualBackbone<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> h = stem_(x, ctx);
  if (stem_pool_) h = ctx.emit(prefix_ + ".stem.pool", ops::max_pool(h, 3, 2, Padding::same));
  for (size_t i = 0; i < blocks_.size(); ++i) h = block_forward(i, h, ctx);
  h = ops::relu(post_bn_(h, ctx));
  return ctx.emit(prefix_ + ".out", h);
}

// ---------------------------------------------------------------------------
// Attention blocks

template <typename T>
NonLocalBlock<T>::NonLocalBlock(BuildContext<T>& bc, const std::string& name, int64_t channels,
                                int64_t bottleneck_ratio)
    : name_(name) {
  if (bottleneck_ratio < 1 || channels % bottleneck_ratio != 0) {
    throw std::invalid_argument("non-local block: " + std::to_string(channels) +
                                " channels not divisible by bottleneck ratio " +
                                std::to_string(bottleneck_ratio));
  }
  const int64_t inner = channels / bottleneck_ratio;
  theta_ = Conv2D<T>(bc, name + ".theta", 1, channels, inner, 1, true);
  phi_ = Conv2D<T>(bc, name + ".phi", 1, channels, inner, 1, true);
  g_ = Conv2D<T>(bc, name + ".g", 1, channels, inner, 1, true);
  bc.layers.push_back({name + ".attention", LayerKind::non_local});
  out_ = Conv2D<T>(bc, name + ".out", 1, inner, channels, 1, true, Padding::same, true);
  bc.layers.push_back({name, LayerKind::non_local});
}

template <typename T>
Var<T> NonLocalBlock<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> y = ctx.emit(name_ + ".attention",
                      ops::nonlocal_attention(theta_(x, ctx), phi_(x, ctx), g_(x, ctx)));
  return ctx.emit(name_, ops::add(x, out_(y, ctx)));
}

template <typename T>
ChannelAttention<T>::ChannelAttention(BuildContext<T>& bc, const std::string& name,
                                      int64_t channels, int64_t reduction)
    : name_(name) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument("channel attention: reduction " + std::to_string(reduction) +
                                " does not divide " + std::to_string(channels) + " channels");
  }
  w1_ = Dense<T>(bc, name + ".w1", channels, channels / reduction, false);
  w2_ = Dense<T>(bc, name + ".w2", channels / reduction, channels, false);
  bc.layers.push_back({name + ".map", LayerKind::attention});
  bc.layers.push_back({name, LayerKind::attention});
}

template <typename T>
Var<T> ChannelAttention<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> u = ops::global_avg_pool(x);
  Var<T> a = ops::sigmoid(w2_(ops::relu(w1_(u, ctx)), ctx));
  a = ctx.emit(name_ + ".map", a);
  return ctx.emit(name_, ops::mul_channel(x, a));
}

template <typename T>
SpatialAttention<T>::SpatialAttention(BuildContext<T>& bc, const std::string& name,
                                      int64_t channels)
    : name_(name) {
  ws_ = Conv2D<T>(bc, name + ".ws", 1, channels, 1, 1, false);
  bc.layers.push_back({name + ".map", LayerKind::attention});
  bc.layers.push_back({name, LayerKind::attention});
}

template <typename T>
Var<T> SpatialAttention<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  Var<T> a = ctx.emit(name_ + ".map", ops::sigmoid(ws_(x, ctx)));
  return ctx.emit(name_, ops::mul_spatial(x, a));
}

template <typename T>
DualAttention<T>::DualAttention(BuildContext<T>& bc, const std::string& name, int64_t channels,
                                int64_t reduction)
    : name_(name),
      channel_(bc, name + ".channel", channels, reduction),
      spatial_(bc, name + ".spatial", channels) {
  bc.layers.push_back({name, LayerKind::attention});
}

template <typename T>
Var<T> DualAttention<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  return ctx.emit(name_, ops::add(channel_(x, ctx), spatial_(x, ctx)));
}

// ---------------------------------------------------------------------------
// Modified VGG

template <typename T>
ModifiedVgg<T>::ModifiedVgg(BuildContext<T>& trunk_bc, BuildContext<T>& tap_bc,
                            const VggConfig& vgg, const TapConfig& taps,
                            const std::string& prefix)
    : prefix_(prefix), pools_(vgg.block_pool) {
  const size_t nblocks = vgg.block_widths.size();
  if (vgg.block_convs.size() != nblocks || vgg.block_pool.size() != nblocks) {
    throw std::invalid_argument("VGG config: block lists must have equal length");
  }
  int64_t smallest = vgg.input_size;
  for (int b : taps.tap_blocks) smallest = std::min(smallest, vgg.block_grid(b));
  if (taps.target_grid > smallest) {
    throw ShapeError("tap target grid " + std::to_string(taps.target_grid) +
                     " exceeds the smallest tap grid " + std::to_string(smallest));
  }

  int64_t cin = vgg.input_channels;
  for (size_t b = 0; b < nblocks; ++b) {
    std::vector<Conv2D<T>> convs;
    const std::string bname = prefix + ".block" + std::to_string(b + 1);
    for (int64_t i = 0; i < vgg.block_convs[b]; ++i) {
      convs.emplace_back(trunk_bc, bname + ".conv" + std::to_string(i + 1), 3, cin,
                         vgg.block_widths[b], 1, true);
      cin = vgg.block_widths[b];
    }
    if (vgg.block_pool[b]) trunk_bc.layers.push_back({bname + ".pool", LayerKind::pool});
    blocks_.push_back(std::move(convs));
  }

  for (size_t t = 0; t < taps.tap_blocks.size(); ++t) {
    Tap tap;
    tap.block = taps.tap_blocks[t];
    tap.name = prefix + ".tap" + std::to_string(tap.block);
    const int64_t channels = vgg.block_widths.at(static_cast<size_t>(tap.block - 1));
    const int64_t grid = vgg.block_grid(tap.block);
    if (grid % taps.target_grid != 0) {
      throw ShapeError("tap grid " + std::to_string(grid) + " is not a multiple of target grid " +
                       std::to_string(taps.target_grid));
    }
    tap.pool_window = grid / taps.target_grid;
    tap.nonlocal = NonLocalBlock<T>(tap_bc, tap.name + ".nonlocal", channels,
                                    taps.nonlocal_bottleneck_ratio);
    tap.dwsc = SeparableConv<T>(tap_bc, tap.name + ".dwsc", taps.dwsc_kernel, channels,
                                taps.dwsc_out_channels[t]);
    tap.bn = BatchNorm<T>(tap_bc, tap.name + ".bn", taps.dwsc_out_channels[t]);
    tap_bc.layers.push_back({tap.name + ".pool", LayerKind::pool});
    taps_.push_back(std::move(tap));
  }
  tap_bc.layers.push_back({prefix + ".concat", LayerKind::concat});
}

template <typename T>
Var<T> ModifiedVgg<T>::operator()(const Var<T>& x, ForwardContext<T>& ctx) const {
  std::map<int, Var<T>> block_out;
  Var<T> h = x;
  for (size_t b = 0; b < blocks_.size(); ++b) {
    for (const auto& conv : blocks_[b]) h = ops::relu(conv(h, ctx));
    if (pools_[b]) {
      h = ctx.emit(prefix_ + ".block" + std::to_string(b + 1) + ".pool",
                   ops::max_pool(h, 2, 2, Padding::valid));
    }
    block_out[static_cast<int>(b + 1)] = h;
  }
  std::vector<Var<T>> outs;
  for (const Tap& tap : taps_) {
    Var<T> t = tap.nonlocal(block_out.at(tap.block), ctx);
    t = tap.bn(tap.dwsc(t, ctx), ctx);
    t = ops::max_pool(t, tap.pool_window, tap.pool_window, Padding::valid);
    outs.push_back(ctx.emit(tap.name + ".pool", t));
  }
  return ctx.emit(prefix_ + ".concat", ops::concat_channels(outs));
}

// ---------------------------------------------------------------------------
// Networks

template <typename T>
const LayerInfo* Network<T>::find_layer(const std::string& name) const {
  auto it = std::find_if(layers_.begin(), layers_.end(),
                         [&](const LayerInfo& l) { return l.name == name; });
  return it == layers_.end() ? nullptr : &*it;
}

template <typename T>
void Network<T>::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : registry_) {
    if (p->name.rfind(prefix, 0) == 0) p->set_trainable(trainable);
  }
}

template <typename T>
ResidualBackboneNet<T>::ResidualBackboneNet(const ResidualConfig& cfg, InitOptions init) {
  Initializer<T> in(init);
  BuildContext<T> bc{this->registry_, in, this->layers_, !cfg.frozen};
  body_ = ResidualBackbone<T>(bc, cfg, "residual");
}

template <typename T>
ModifiedVggNet<T>::ModifiedVggNet(const VggConfig& vgg, const TapConfig& taps,
                                  InitOptions init) {
  Initializer<T> in(init);
  BuildContext<T> trunk{this->registry_, in, this->layers_, !vgg.frozen};
  BuildContext<T> tap{this->registry_, in, this->layers_, true};
  body_ = ModifiedVgg<T>(trunk, tap, vgg, taps, "vgg");
}

template <typename T>
FusionClassifier<T>::FusionClassifier(const ClassifierConfig& cfg, InitOptions init)
    : cfg_(cfg), has_head_(cfg.fusion.head == HeadKind::mlp) {
  if (cfg.residual.input_size != cfg.vgg.input_size ||
      cfg.residual.input_channels != cfg.vgg.input_channels) {
    throw ShapeError("residual and VGG backbones must take the same input");
  }
  const int64_t rgrid = cfg.residual.output_grid();
  if (rgrid != cfg.taps.target_grid) {
    throw ShapeError("grid mismatch: residual backbone emits " + std::to_string(rgrid) + "x" +
                     std::to_string(rgrid) + " but VGG taps are pooled to " +
                     std::to_string(cfg.taps.target_grid) + "x" +
                     std::to_string(cfg.taps.target_grid));
  }
  Initializer<T> in(init);
  BuildContext<T> res_bc{this->registry_, in, this->layers_, !cfg.residual.frozen};
  residual_ = ResidualBackbone<T>(res_bc, cfg.residual, "residual");
  BuildContext<T> trunk_bc{this->registry_, in, this->layers_, !cfg.vgg.frozen};
  BuildContext<T> bc{this->registry_, in, this->layers_, true};
  vgg_ = ModifiedVgg<T>(trunk_bc, bc, cfg.vgg, cfg.taps, "vgg");

  const int64_t fused = cfg.fused_channels();
  this->layers_.push_back({kFusedLayer, LayerKind::concat});
  attention_ = DualAttention<T>(bc, "fusion.attention", fused, cfg.fusion.attention_reduction);
  pointwise_ = Conv2D<T>(bc, kPointwiseLayer, 1, fused, cfg.fusion.pointwise_out, 1, true);
  this->layers_.push_back({"fusion.gap", LayerKind::pool});
  feature_bn_ = BatchNorm<T>(bc, kFeatureLayer, cfg.fusion.pointwise_out);
  if (has_head_) {
    head1_ = Dense<T>(bc, "head.dense1", cfg.fusion.pointwise_out, cfg.fusion.mlp_hidden, true);
    head2_ = Dense<T>(bc, "head.dense2", cfg.fusion.mlp_hidden, cfg.fusion.num_classes, true);
  }

  // Construction-time shape inference over the whole chain.
  const auto shapes = infer_shapes();
  const int64_t g = cfg.taps.target_grid;
  if (shapes.at(kFusedLayer) != Shape{1, g, g, fused} ||
      shapes.at(kFeatureLayer) != Shape{1, cfg.fusion.pointwise_out}) {
    throw ShapeError("fusion classifier shape chain inconsistent: fused " +
                     shape_str(shapes.at(kFusedLayer)) + ", features " +
                     shape_str(shapes.at(kFeatureLayer)));
  }
}

template <typename T>
ClassifierOutput<T> FusionClassifier<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) const {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != cfg_.input_size() || xs[2] != cfg_.input_size() ||
      xs[3] != cfg_.input_channels()) {
    throw ShapeError("fusion classifier expects [N," + std::to_string(cfg_.input_size()) + "," +
                     std::to_string(cfg_.input_size()) + "," +
                     std::to_string(cfg_.input_channels()) + "] input, got " + shape_str(xs));
  }
  Var<T> r = residual_(x, ctx);
  Var<T> v = vgg_(x, ctx);
  Var<T> fused = ctx.emit(kFusedLayer, ops::concat_channels(std::vector<Var<T>>{r, v}));
  Var<T> refined = attention_(fused, ctx);
  Var<T> reduced = pointwise_(refined, ctx);
  Var<T> pooled = ctx.emit("fusion.gap", ops::global_avg_pool(reduced));
  ClassifierOutput<T> out;
  out.features = feature_bn_(pooled, ctx);
  if (has_head_) {
    Var<T> h = ops::relu(head1_(out.features, ctx));
    h = ops::dropout(h, cfg_.fusion.dropout, ctx.rng, ctx.mode);
    out.logits = head2_(h, ctx);
  }
  return out;
}

template <typename T>
std::map<std::string, Shape> FusionClassifier<T>::infer_shapes() const {
  std::map<std::string, Var<T>> captured;
  ForwardContext<T> ctx;
  ctx.captures = &captured;
  auto x = Var<T>::leaf(
      Tensor<T>::meta({1, cfg_.input_size(), cfg_.input_size(), cfg_.input_channels()}));
  forward(x, ctx);
  std::map<std::string, Shape> shapes;
  for (const auto& [name, v] : captured) shapes[name] = v.shape();
  return shapes;
}

template class ResidualBackbone<float>;
template class ResidualBackbone<double>;
template class NonLocalBlock<float>;
template class NonLocalBlock<double>;
template class ChannelAttention<float>;
template class ChannelAttention<double>;
template class SpatialAttention<float>;
template class SpatialAttention<double>;
template class DualAttention<float>;
template class DualAttention<double>;
template class ModifiedVgg<float>;
template class ModifiedVgg<double>;
template class Network<float>;
template class Network<double>;
template class ResidualBackboneNet<float>;
template class ResidualBackboneNet<double>;
template class ModifiedVggNet<float>;
template class ModifiedVggNet<double>;
template class FusionClassifier<float>;
template class FusionClassifier<double>;

}  // namespace nf
