#include "canopy/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "canopy/common.hpp"

namespace canopy::models {

using sparse::KernelMap;
using sparse::VoxelKey;

Sample make_sample(const PointCloud& cloud) {
  const auto n = static_cast<Eigen::Index>(cloud.points.size());
  Sample s{Matrix(n, 3), Matrix(n, kInputChannels)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Point& p = cloud.points[static_cast<std::size_t>(i)];
    s.positions.row(i) << p.x, p.y, p.z;
    s.features.row(i) << p.return_index, p.return_count, p.z, cloud.time_gap_years;
  }
  return s;
}

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::minkowski: return "minkowski";
    case ModelKind::kpconv: return "kpconv";
    case ModelKind::pointnet: return "pointnet";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "minkowski") return ModelKind::minkowski;
  if (s == "kpconv") return ModelKind::kpconv;
  if (s == "pointnet") return ModelKind::pointnet;
  throw ValidationError("unknown model kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "': bad integer list '" + s + "'");
    }
  }
  if (out.empty()) throw ValidationError("config key '" + key + "' is empty");
  return out;
}

int parse_int(const std::string& key, const std::string& s) {
  const auto v = parse_int_list(key, s);
  if (v.size() != 1) throw ValidationError("config key '" + key + "' expects one integer");
  return v[0];
}

double parse_real(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad number '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ValidationError("config key '" + key + "': expected true or false");
}

void require_positive(const std::vector<int>& v, const char* what) {
  for (int x : v)
    if (x <= 0) throw ValidationError(std::string(what) + " must be positive");
}

void check_kind(const std::map<std::string, std::string>& kv, const char* kind) {
  auto it = kv.find("kind");
  if (it != kv.end() && it->second != kind)
    throw ValidationError("config is for model kind '" + it->second + "', expected '" + kind + "'");
}

template <class F>
void for_each_key(const std::map<std::string, std::string>& kv, F&& f) {
  for (const auto& [k, v] : kv) {
    if (k == "kind") continue;
    if (!f(k, v)) throw ValidationError("unknown config key '" + k + "'");
  }
}

void validate(const SENetConfig& c) {
  if (!(c.grid > 0.0)) throw ValidationError("grid must be > 0");
  if (c.stem_kernel < 1 || c.stem_kernel % 2 == 0) throw ValidationError("stem_kernel must be odd");
  if (c.stem_width < 1 || c.pool_stride < 1 || c.se_reduction < 1)
    throw ValidationError("SENet sizes must be positive");
  if (c.blocks.size() != c.widths.size() || c.blocks.size() != c.strides.size() || c.blocks.empty())
    throw ValidationError("blocks, widths and strides must have equal non-zero length");
  require_positive(c.blocks, "blocks");
  require_positive(c.widths, "widths");
  for (int s : c.strides)
    if (s < 1 || s > 3) throw ValidationError("stage strides must be in [1, 3]");
}

void validate(const KPConvConfig& c) {
  if (!(c.grid > 0.0) || !(c.radius_factor > 0.0) || !(c.sigma_factor > 0.0))
    throw ValidationError("KPConv grid, radius and sigma factors must be > 0");
  if (c.kernel_points < 1) throw ValidationError("kernel_points must be >= 1");
  if (c.widths.empty()) throw ValidationError("widths must be non-empty");
  require_positive(c.widths, "widths");
}

void validate(const PointNetConfig& c) {
  if (c.widths.size() != 5) throw ValidationError("PointNet widths must have 5 entries");
  if (c.head.empty()) throw ValidationError("PointNet head must be non-empty");
  require_positive(c.widths, "widths");
  require_positive(c.head, "head");
}

}  // namespace

SENetConfig SENetConfig::tiny() {
  SENetConfig c;
  c.stem_width = 8;
  c.blocks = {1, 1, 1, 1};
  c.widths = {8, 8, 16, 32};
  return c;
}

KPConvConfig KPConvConfig::tiny() {
  KPConvConfig c;
  c.widths = {8, 16};
  return c;
}

PointNetConfig PointNetConfig::tiny() {
  PointNetConfig c;
  c.widths = {8, 8, 8, 16, 32};
  c.head = {16, 8, 8};
  return c;
}

std::string to_text(const SENetConfig& c) {
  std::ostringstream os;
  os << "kind=minkowski\n"
     << "grid=" << format_double(c.grid) << "\n"
     << "stem_kernel=" << c.stem_kernel << "\n"
     << "stem_width=" << c.stem_width << "\n"
     << "pool_stride=" << c.pool_stride << "\n"
     << "blocks=" << join(c.blocks) << "\n"
     << "widths=" << join(c.widths) << "\n"
     << "strides=" << join(c.strides) << "\n"
     << "se_reduction=" << c.se_reduction << "\n";
  return os.str();
}

std::string to_text(const KPConvConfig& c) {
  std::ostringstream os;
  os << "kind=kpconv\n"
     << "grid=" << format_double(c.grid) << "\n"
     << "kernel_points=" << c.kernel_points << "\n"
     << "radius_factor=" << format_double(c.radius_factor) << "\n"
     << "sigma_factor=" << format_double(c.sigma_factor) << "\n"
     << "widths=" << join(c.widths) << "\n";
  return os.str();
}

std::string to_text(const PointNetConfig& c) {
  std::ostringstream os;
  os << "kind=pointnet\n"
     << "widths=" << join(c.widths) << "\n"
     << "head=" << join(c.head) << "\n"
     << "input_transform=" << (c.input_transform ? "true" : "false") << "\n"
     << "feature_transform=" << (c.feature_transform ? "true" : "false") << "\n";
  return os.str();
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!kv.emplace(key, trim(line.substr(eq + 1))).second)
      throw ValidationError("duplicate config key '" + key + "'");
  }
  return kv;
}

SENetConfig senet_config_from_text(const std::string& text) {
  const auto kv = parse_key_values(text);
  check_kind(kv, "minkowski");
  SENetConfig c;
  for_each_key(kv, [&](const std::string& k, const std::string& v) {
    if (k == "grid") c.grid = parse_real(k, v);
    else if (k == "stem_kernel") c.stem_kernel = parse_int(k, v);
    else if (k == "stem_width") c.stem_width = parse_int(k, v);
    else if (k == "pool_stride") c.pool_stride = parse_int(k, v);
    else if (k == "blocks") c.blocks = parse_int_list(k, v);
    else if (k == "widths") c.widths = parse_int_list(k, v);
    else if (k == "strides") c.strides = parse_int_list(k, v);
    else if (k == "se_reduction") c.se_reduction = parse_int(k, v);
    else return false;
    return true;
  });
  validate(c);
  return c;
}

KPConvConfig kpconv_config_from_text(const std::string& text) {
  const auto kv = parse_key_values(text);
  check_kind(kv, "kpconv");
  KPConvConfig c;
  for_each_key(kv, [&](const std::string& k, const std::string& v) {
    if (k == "grid") c.grid = parse_real(k, v);
    else if (k == "kernel_points") c.kernel_points = parse_int(k, v);
    else if (k == "radius_factor") c.radius_factor = parse_real(k, v);
    else if (k == "sigma_factor") c.sigma_factor = parse_real(k, v);
    else if (k == "widths") c.widths = parse_int_list(k, v);
    else return false;
    return true;
  });
  validate(c);
  return c;
}

PointNetConfig pointnet_config_from_text(const std::string& text) {
  const auto kv = parse_key_values(text);
  check_kind(kv, "pointnet");
  PointNetConfig c;
  for_each_key(kv, [&](const std::string& k, const std::string& v) {
    if (k == "widths") c.widths = parse_int_list(k, v);
    else if (k == "head") c.head = parse_int_list(k, v);
    else if (k == "input_transform") c.input_transform = parse_bool(k, v);
    else if (k == "feature_transform") c.feature_transform = parse_bool(k, v);
    else return false;
    return true;
  });
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

void ParamStore::add(nn::Parameter p) {
  for (const auto& q : params_)
    if (q.name == p.name) throw ValidationError("duplicate parameter name '" + p.name + "'");
  params_.push_back(std::move(p));
}

Var ParamStore::weight(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                       double fan_in) {
  const double sd = std::sqrt(2.0 / std::max(fan_in, 1.0));
  Matrix w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * rng_.normal();
  Var v = nn::variable(std::move(w));
  add({name, v, false});
  return v;
}

Var ParamStore::zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                      bool decay_exempt) {
  return constant_init(name, Matrix::Zero(rows, cols), decay_exempt);
}

Var ParamStore::constant_init(const std::string& name, Matrix value, bool decay_exempt) {
  Var v = nn::variable(std::move(value));
  add({name, v, decay_exempt});
  return v;
}

nn::BatchNormState& ParamStore::batch_norm_state(const std::string& name, Eigen::Index channels) {
  bn_.emplace_back(name, std::make_unique<nn::BatchNormState>(channels));
  return *bn_.back().second;
}

std::vector<std::pair<std::string, nn::BatchNormState*>> ParamStore::buffers() {
  std::vector<std::pair<std::string, nn::BatchNormState*>> out;
  for (auto& [n, s] : bn_) out.emplace_back(n, s.get());
  return out;
}

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, int in, int out)
    : weight(store.weight(name + ".weight", in, out, in)),
      bias(store.zeros(name + ".bias", 1, out, true)) {}

BatchNormLayer::BatchNormLayer(ParamStore& store, const std::string& name, int channels)
    : gamma(store.constant_init(name + ".gamma", Matrix::Ones(1, channels), true)),
      beta(store.zeros(name + ".beta", 1, channels, true)),
      state(&store.batch_norm_state(name, channels)) {}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += static_cast<std::size_t>(p.value().size());
  return n;
}

std::vector<Section> model_state_sections(Model& model) {
  ByteWriter params;
  params.u64(model.parameters().size());
  for (const auto& p : model.parameters()) {
    params.str(p.name);
    params.matrix(p.value());
  }
  ByteWriter buffers;
  const auto bufs = model.buffers();
  buffers.u64(bufs.size());
  for (const auto& [name, st] : bufs) {
    buffers.str(name);
    buffers.u64(static_cast<std::uint64_t>(st->running_mean.size()));
    buffers.f64s(st->running_mean.data(), static_cast<std::size_t>(st->running_mean.size()));
    buffers.f64s(st->running_var.data(), static_cast<std::size_t>(st->running_var.size()));
  }
  return {{"params", params.take()}, {"buffers", buffers.take()}};
}

void load_model_state(Model& model, const std::vector<Section>& sections) {
  ByteReader params(find_section(sections, "params").payload);
  auto& ps = model.parameters();
  if (params.u64() != ps.size()) throw ValidationError("checkpoint parameter count mismatch");
  for (auto& p : ps) {
    const std::string name = params.str();
    if (name != p.name)
      throw ValidationError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
    Eigen::MatrixXd m = params.matrix();
    if (m.rows() != p.value().rows() || m.cols() != p.value().cols())
      throw ValidationError("checkpoint shape mismatch for '" + name + "'");
    p.value() = m;
  }
  if (!params.done()) throw ValidationError("trailing bytes in params section");

  ByteReader buffers(find_section(sections, "buffers").payload);
  auto bufs = model.buffers();
  if (buffers.u64() != bufs.size()) throw ValidationError("checkpoint buffer count mismatch");
  for (auto& [expected, st] : bufs) {
    const std::string name = buffers.str();
    if (name != expected) throw ValidationError("checkpoint buffer '" + name + "' unexpected");
    const auto c = buffers.u64();
    if (c != static_cast<std::uint64_t>(st->running_mean.size()))
      throw ValidationError("checkpoint buffer size mismatch for '" + name + "'");
    const auto mean = buffers.f64s(c);
    const auto var = buffers.f64s(c);
    for (std::size_t i = 0; i < c; ++i) {
      st->running_mean(static_cast<Eigen::Index>(i)) = mean[i];
      st->running_var(static_cast<Eigen::Index>(i)) = var[i];
    }
  }
  if (!buffers.done()) throw ValidationError("trailing bytes in buffers section");
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

Ranges to_ranges(const std::vector<std::pair<int, int>>& r) { return Ranges(r.begin(), r.end()); }

Ranges sample_ranges(std::span<const Sample> batch) {
  Ranges r;
  int at = 0;
  for (const Sample& s : batch) {
    const auto n = static_cast<int>(s.positions.rows());
    if (n < 1) throw ValidationError("empty point cloud in batch");
    r.emplace_back(at, at + n);
    at += n;
  }
  return r;
}

Matrix stack_rows(std::span<const Sample> batch, bool positions) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = positions ? 3 : kInputChannels;
  for (const Sample& s : batch) rows += s.positions.rows();
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Sample& s : batch) {
    const Matrix& m = positions ? s.positions : s.features;
    if (m.cols() != cols) throw ValidationError("sample has wrong column count");
    out.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return out;
}

std::shared_ptr<const std::vector<std::vector<int>>> map_to_lists(const KernelMap& map) {
  auto lists = std::make_shared<std::vector<std::vector<int>>>(map.n_out);
  for (const auto& pairs : map.pairs)
    for (const auto& [in, out] : pairs) (*lists)[static_cast<std::size_t>(out)].push_back(in);
  return lists;
}

}  // namespace

// ---------------------------------------------------------------------------
// SE bottleneck

SEBlock::SEBlock(ParamStore& store, const std::string& name, int in_channels_, int width_,
                 int stride_, int se_reduction)
    : in_channels(in_channels_), width(width_), stride(stride_) {
  const int out = 4 * width;
  conv1 = LinearLayer(store, name + ".conv1", in_channels, width);
  bn1 = BatchNormLayer(store, name + ".bn1", width);
  conv2_w = store.weight(name + ".conv2.weight", 27 * width, width, 27.0 * width);
  conv2_b = store.zeros(name + ".conv2.bias", 1, width, true);
  bn2 = BatchNormLayer(store, name + ".bn2", width);
  conv3 = LinearLayer(store, name + ".conv3", width, out);
  bn3 = BatchNormLayer(store, name + ".bn3", out);
  const int hidden = std::max(1, out / se_reduction);
  se_fc1 = LinearLayer(store, name + ".se.fc1", out, hidden);
  se_fc2 = LinearLayer(store, name + ".se.fc2", hidden, out);
  projection = stride != 1 || in_channels != out;
  if (projection) {
    // No bias: the normalization right after it cancels any constant shift.
    proj_w = store.weight(name + ".proj.weight", in_channels, out, in_channels);
    proj_bn = BatchNormLayer(store, name + ".proj.bn", out);
  }
}

Var squeeze_excite_gate(const SEBlock& block, const Var& x, const Ranges& ranges) {
  Var squeezed = nn::mean_reduce(x, ranges);
  return nn::sigmoid(block.se_fc2(nn::elu(block.se_fc1(squeezed))));
}

SEBlockOutput se_block_forward(const SEBlock& block, const Var& x,
                               std::span<const VoxelKey> keys, bool train,
                               std::optional<double> forced_scale) {
  if (x->value.cols() != block.in_channels)
    throw ValidationError("SE block input channel mismatch");
  std::vector<VoxelKey> out_keys = block.stride > 1
                                       ? sparse::strided_keys(keys, block.stride)
                                       : std::vector<VoxelKey>(keys.begin(), keys.end());
  Var h = block.bn1(nn::elu(block.conv1(x)), train);
  const auto offsets3 = sparse::cubic_offsets(3);
  auto map2 = std::make_shared<const KernelMap>(
      sparse::convolution_map(keys, out_keys, offsets3, block.stride));
  h = block.bn2(nn::elu(nn::sparse_conv(h, map2, block.conv2_w, block.conv2_b)), train);
  h = block.bn3(nn::elu(block.conv3(h)), train);

  const Ranges ranges = to_ranges(sparse::batch_ranges(out_keys));
  Var gate = forced_scale
                 ? nn::constant(Matrix::Constant(static_cast<Eigen::Index>(ranges.size()),
                                                 h->value.cols(), *forced_scale))
                 : squeeze_excite_gate(block, h, ranges);
  h = nn::mul(h, nn::broadcast_rows(gate, ranges));

  Var shortcut = x;
  if (block.projection) {
    Var p;
    if (block.stride == 1) {
      p = nn::matmul(x, block.proj_w);
    } else {
      const std::vector<sparse::Offset> center{{0, 0, 0}};
      auto map = std::make_shared<const KernelMap>(
          sparse::convolution_map(keys, out_keys, center, block.stride));
      p = nn::sparse_conv(x, map, block.proj_w,
                          nn::constant(Matrix::Zero(1, block.proj_w->value.cols())));
    }
    shortcut = block.proj_bn(p, train);
  }
  return {nn::add(h, shortcut), std::move(out_keys)};
}

// ---------------------------------------------------------------------------
// SENet

namespace {

class SENet final : public Model {
 public:
  SENet(const SENetConfig& cfg, std::uint64_t seed) : Model(seed), cfg_(cfg) {
    validate(cfg_);
    const int k3 = cfg_.stem_kernel * cfg_.stem_kernel * cfg_.stem_kernel;
    stem_w_ = store_.weight("stem.weight", static_cast<Eigen::Index>(k3) * kInputChannels,
                            cfg_.stem_width, static_cast<double>(k3) * kInputChannels);
    stem_b_ = store_.zeros("stem.bias", 1, cfg_.stem_width, true);
    stem_bn_ = BatchNormLayer(store_, "stem.bn", cfg_.stem_width);
    int channels = cfg_.stem_width;
    for (std::size_t s = 0; s < cfg_.blocks.size(); ++s) {
      for (int b = 0; b < cfg_.blocks[s]; ++b) {
        const int stride = b == 0 ? cfg_.strides[s] : 1;
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        blocks_.emplace_back(store_, name, channels, cfg_.widths[s], stride, cfg_.se_reduction);
        channels = blocks_.back().out_channels();
      }
    }
    head_ = LinearLayer(store_, "head", channels, kOutputs);
  }

  ModelKind kind() const override { return ModelKind::minkowski; }
  std::string config_text() const override { return to_text(cfg_); }

  Var forward(std::span<const Sample> batch, bool train) override {
    if (batch.empty()) throw ValidationError("empty batch");
    std::vector<sparse::SparseTensor> parts;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (batch[b].positions.rows() == 0) throw ValidationError("empty sparse tensor");
      parts.push_back(sparse::grid_sample(batch[b].positions, batch[b].features, cfg_.grid,
                                          static_cast<int>(b)));
    }
    sparse::SparseTensor t = sparse::concat_batch(parts);
    std::vector<VoxelKey> keys = std::move(t.keys);

    const auto stem_offsets = sparse::cubic_offsets(cfg_.stem_kernel);
    auto stem_map =
        std::make_shared<const KernelMap>(sparse::convolution_map(keys, keys, stem_offsets, 1));
    Var x = nn::constant(std::move(t.features));
    x = stem_bn_(nn::elu(nn::sparse_conv(x, stem_map, stem_w_, stem_b_)), train);

    std::vector<VoxelKey> pooled = sparse::strided_keys(keys, cfg_.pool_stride);
    const KernelMap pool = sparse::pooling_map(keys, pooled, cfg_.pool_stride, cfg_.pool_stride);
    x = nn::gather_max(x, map_to_lists(pool));
    keys = std::move(pooled);

    for (const SEBlock& block : blocks_) {
      SEBlockOutput o = se_block_forward(block, x, keys, train);
      x = std::move(o.out);
      keys = std::move(o.keys);
    }
    return head_(nn::mean_reduce(x, to_ranges(sparse::batch_ranges(keys))));
  }

 private:
  SENetConfig cfg_;
  Var stem_w_, stem_b_;
  BatchNormLayer stem_bn_;
  std::vector<SEBlock> blocks_;
  LinearLayer head_;
};

}  // namespace

std::unique_ptr<Model> make_senet(const SENetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<SENet>(cfg, seed);
}

// ---------------------------------------------------------------------------
// Kernel points

double kernel_influence(const Vector3& y, const Vector3& kernel_point, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("sigma must be > 0");
  return std::max(0.0, 1.0 - (y - kernel_point).norm() / sigma);
}

double repulsion_energy(std::span<const Vector3> points) {
  double e = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) e += 1.0 / (points[i] - points[j]).norm();
  return e;
}

double min_pairwise_distance(std::span<const Vector3> points) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j)
      best = std::min(best, (points[i] - points[j]).norm());
  return best;
}

std::vector<Vector3> rigid_kernel_points(int k, double r, std::uint64_t seed) {
  if (k < 1) throw ValidationError("kernel point count must be >= 1");
  if (!(r > 0.0)) throw ValidationError("kernel radius must be > 0");
  const double radius = 0.66 * r;
  std::vector<Vector3> pts{Vector3::Zero()};
  Rng rng(seed);
  while (static_cast<int>(pts.size()) < k) {
    Vector3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (p.squaredNorm() <= 1.0 && p.squaredNorm() > 1e-4) pts.push_back(radius * p);
  }
  // Projected descent on the inverse-distance energy; the center stays fixed.
  constexpr int kIterations = 3000;
  std::vector<Vector3> force(pts.size());
  for (int it = 0; it < kIterations && k > 1; ++it) {
    double max_force = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      force[i].setZero();
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (i == j) continue;
        const Vector3 d = pts[i] - pts[j];
        const double n = std::max(d.norm(), 1e-12 * radius);
        force[i] += d / (n * n * n);
      }
      max_force = std::max(max_force, force[i].norm());
    }
    if (max_force == 0.0) break;
    const double step = radius * 0.05 * (1.0 - static_cast<double>(it) / kIterations) + radius * 1e-5;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      pts[i] += step * force[i] / max_force;
      const double n = pts[i].norm();
      if (n > radius) pts[i] *= radius / n;
    }
  }
  std::sort(pts.begin(), pts.end(), [](const Vector3& a, const Vector3& b) {
    if (a.z() != b.z()) return a.z() < b.z();
    if (a.y() != b.y()) return a.y() < b.y();
    return a.x() < b.x();
  });
  return pts;
}

nn::SlotGather kpconv_gather(const Matrix& support, const Matrix& queries,
                             std::span<const Vector3> kernel_points, double r, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("sigma must be > 0");
  const auto neighbors = sparse::radius_neighbors(queries, support, r);
  nn::SlotGather g;
  g.n_out = static_cast<std::size_t>(queries.rows());
  g.n_in = static_cast<std::size_t>(support.rows());
  g.n_slots = kernel_points.size();
  g.row_start.reserve(g.n_out + 1);
  g.row_start.push_back(0);
  for (std::size_t q = 0; q < g.n_out; ++q) {
    const Vector3 center = queries.row(static_cast<Eigen::Index>(q)).transpose();
    for (int i : neighbors[q]) {
      const Vector3 y = support.row(i).transpose() - center;
      for (std::size_t k = 0; k < kernel_points.size(); ++k) {
        const double h = kernel_influence(y, kernel_points[k], sigma);
        if (h <= 0.0) continue;
        g.input.push_back(i);
        g.slot.push_back(static_cast<int>(k));
        g.weight.push_back(h);
      }
    }
    g.row_start.push_back(static_cast<int>(g.input.size()));
  }
  return g;
}

Matrix kpconv_apply(const Matrix& support, const Matrix& features, const Matrix& queries,
                    std::span<const Vector3> kernel_points, const Matrix& weights, double r,
                    double sigma) {
  if (support.rows() != features.rows()) throw ValidationError("support/feature row mismatch");
  if (weights.rows() != static_cast<Eigen::Index>(kernel_points.size()) * features.cols())
    throw ValidationError("kpconv weight shape mismatch");
  auto g = std::make_shared<const nn::SlotGather>(
      kpconv_gather(support, queries, kernel_points, r, sigma));
  return nn::slot_gather(nn::constant(features), g)->value * weights;
}

// ---------------------------------------------------------------------------
// KP-CNN

namespace {

class KPCNN final : public Model {
 public:
  KPCNN(const KPConvConfig& cfg, std::uint64_t seed) : Model(seed), cfg_(cfg) {
    validate(cfg_);
    unit_kernel_ = rigid_kernel_points(cfg_.kernel_points, 1.0);
    const int k = cfg_.kernel_points;
    int channels = kInputChannels;
    for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
      const std::string name = "stage" + std::to_string(s + 1);
      const int d = cfg_.widths[s];
      const int half = std::max(1, d / 2);
      Stage st;
      st.entry_w = store_.weight(name + ".entry.weight", static_cast<Eigen::Index>(k) * channels, d,
                                 static_cast<double>(k) * channels);
      st.entry_bn = BatchNormLayer(store_, name + ".entry.bn", d);
      st.unary1 = LinearLayer(store_, name + ".unary1", d, half);
      st.bn1 = BatchNormLayer(store_, name + ".bn1", half);
      st.conv_w = store_.weight(name + ".kpconv.weight", static_cast<Eigen::Index>(k) * half, half,
                                static_cast<double>(k) * half);
      st.bn2 = BatchNormLayer(store_, name + ".bn2", half);
      st.unary2 = LinearLayer(store_, name + ".unary2", half, d);
      st.bn3 = BatchNormLayer(store_, name + ".bn3", d);
      stages_.push_back(std::move(st));
      channels = d;
    }
    head_ = LinearLayer(store_, "head", channels, kOutputs);
  }

  ModelKind kind() const override { return ModelKind::kpconv; }
  std::string config_text() const override { return to_text(cfg_); }

  Var forward(std::span<const Sample> batch, bool train) override {
    if (batch.empty()) throw ValidationError("empty batch");
    std::vector<Matrix> level(batch.size());
    Matrix feats;
    {
      std::vector<Matrix> f(batch.size());
      Eigen::Index rows = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].positions.rows() < 1) throw ValidationError("cloud has no points");
        auto ps = sparse::grid_sample_mean_points(batch[b].positions, batch[b].features, cfg_.grid);
        level[b] = std::move(ps.positions);
        f[b] = std::move(ps.features);
        rows += f[b].rows();
      }
      feats.resize(rows, kInputChannels);
      Eigen::Index at = 0;
      for (const Matrix& m : f) {
        feats.middleRows(at, m.rows()) = m;
        at += m.rows();
      }
    }
    Var x = nn::constant(std::move(feats));
    double grid = cfg_.grid;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const Stage& st = stages_[s];
      // Entry convolution: same points at the first stage, pooled points after.
      std::vector<Matrix> next = level;
      double entry_grid = grid;
      if (s > 0) {
        entry_grid = grid;
        grid *= 2.0;
        for (std::size_t b = 0; b < batch.size(); ++b)
          next[b] = sparse::grid_sample_mean_points(level[b], Matrix(level[b].rows(), 0), grid).positions;
      }
      x = nn::elu(st.entry_bn(conv(x, level, next, entry_grid, st.entry_w), train));
      level = std::move(next);

      Var h = nn::elu(st.bn1(st.unary1(x), train));
      h = nn::elu(st.bn2(conv(h, level, level, grid, st.conv_w), train));
      h = st.bn3(st.unary2(h), train);
      x = nn::elu(nn::add(h, x));
    }
    Ranges ranges;
    int at = 0;
    for (const Matrix& m : level) {
      ranges.emplace_back(at, at + static_cast<int>(m.rows()));
      at += static_cast<int>(m.rows());
    }
    return head_(nn::mean_reduce(x, ranges));
  }

 private:
  struct Stage {
    Var entry_w;
    BatchNormLayer entry_bn;
    LinearLayer unary1;
    BatchNormLayer bn1;
    Var conv_w;
    BatchNormLayer bn2;
    LinearLayer unary2;
    BatchNormLayer bn3;
  };

  Var conv(const Var& x, const std::vector<Matrix>& support, const std::vector<Matrix>& queries,
           double grid, const Var& w) const {
    const double r = cfg_.radius_factor * grid;
    const double sigma = cfg_.sigma_factor * grid;
    std::vector<Vector3> kernel;
    for (const Vector3& p : unit_kernel_) kernel.push_back(r * p);
    auto g = std::make_shared<nn::SlotGather>();
    g->n_slots = kernel.size();
    g->row_start.push_back(0);
    int in_offset = 0;
    for (std::size_t b = 0; b < support.size(); ++b) {
      const nn::SlotGather part = kpconv_gather(support[b], queries[b], kernel, r, sigma);
      for (std::size_t q = 0; q < part.n_out; ++q) {
        for (int e = part.row_start[q]; e < part.row_start[q + 1]; ++e) {
          const auto ue = static_cast<std::size_t>(e);
          g->input.push_back(part.input[ue] + in_offset);
          g->slot.push_back(part.slot[ue]);
          g->weight.push_back(part.weight[ue]);
        }
        g->row_start.push_back(static_cast<int>(g->input.size()));
      }
      g->n_out += part.n_out;
      in_offset += static_cast<int>(part.n_in);
    }
    g->n_in = static_cast<std::size_t>(in_offset);
    return nn::matmul(nn::slot_gather(x, g), w);
  }

  KPConvConfig cfg_;
  std::vector<Vector3> unit_kernel_;
  std::vector<Stage> stages_;
  LinearLayer head_;
};

}  // namespace

std::unique_ptr<Model> make_kpcnn(const KPConvConfig& cfg, std::uint64_t seed) {
  return std::make_unique<KPCNN>(cfg, seed);
}

// ---------------------------------------------------------------------------
// PointNet

namespace {

struct SharedMap {
  LinearLayer fc;
  BatchNormLayer bn;

  SharedMap() = default;
  SharedMap(ParamStore& store, const std::string& name, int in, int out)
      : fc(store, name, in, out), bn(store, name + ".bn", out) {}
  Var operator()(const Var& x, bool train) const { return nn::relu(bn(fc(x), train)); }
};

/// Predicts one d x d matrix per cloud, initialized to the identity.
struct TransformNet {
  int dim = 0;
  std::vector<SharedMap> point_maps;
  std::vector<SharedMap> fc;
  LinearLayer out;

  TransformNet() = default;
  TransformNet(ParamStore& store, const std::string& name, int d, const PointNetConfig& cfg)
      : dim(d) {
    const int widths[] = {cfg.widths[0], cfg.widths[3], cfg.widths[4]};
    int in = d;
    for (int i = 0; i < 3; ++i) {
      point_maps.emplace_back(store, name + ".map" + std::to_string(i + 1), in, widths[i]);
      in = widths[i];
    }
    const int hidden[] = {cfg.head[0], cfg.head.size() > 1 ? cfg.head[1] : cfg.head[0]};
    for (int i = 0; i < 2; ++i) {
      fc.emplace_back(store, name + ".fc" + std::to_string(i + 1), in, hidden[i]);
      in = hidden[i];
    }
    out.weight = store.zeros(name + ".out.weight", in, static_cast<Eigen::Index>(d) * d, false);
    Matrix eye = Matrix::Zero(1, static_cast<Eigen::Index>(d) * d);
    for (int i = 0; i < d; ++i) eye(0, i * d + i) = 1.0;
    out.bias = store.constant_init(name + ".out.bias", std::move(eye), true);
  }

  Var operator()(const Var& x, const Ranges& ranges, bool train) const {
    Var h = x;
    for (const auto& m : point_maps) h = m(h, train);
    h = nn::max_reduce(h, ranges);
    for (const auto& m : fc) h = m(h, train);
    return out(h);
  }
};

class PointNet final : public Model {
 public:
  PointNet(const PointNetConfig& cfg, std::uint64_t seed) : Model(seed), cfg_(cfg) {
    validate(cfg_);
    if (cfg_.input_transform) input_tnet_ = TransformNet(store_, "input_transform", 3, cfg_);
    int in = 3 + kInputChannels;
    for (int i = 0; i < 5; ++i) {
      maps_.emplace_back(store_, "map" + std::to_string(i + 1), in, cfg_.widths[static_cast<std::size_t>(i)]);
      in = cfg_.widths[static_cast<std::size_t>(i)];
      if (i == 1 && cfg_.feature_transform)
        feature_tnet_ = TransformNet(store_, "feature_transform", in, cfg_);
    }
    for (std::size_t i = 0; i < cfg_.head.size(); ++i) {
      head_.emplace_back(store_, "head" + std::to_string(i + 1), in, cfg_.head[i]);
      in = cfg_.head[i];
    }
    out_ = LinearLayer(store_, "out", in, kOutputs);
  }

  ModelKind kind() const override { return ModelKind::pointnet; }
  std::string config_text() const override { return to_text(cfg_); }

  Var forward(std::span<const Sample> batch, bool train) override {
    if (batch.empty()) throw ValidationError("empty batch");
    const Ranges ranges = sample_ranges(batch);
    Var pos = nn::constant(stack_rows(batch, true));
    if (cfg_.input_transform) pos = nn::segment_matmul(pos, ranges, input_tnet_(pos, ranges, train));
    Var x = nn::concat_cols(pos, nn::constant(stack_rows(batch, false)));
    for (std::size_t i = 0; i < maps_.size(); ++i) {
      x = maps_[i](x, train);
      if (i == 1 && cfg_.feature_transform)
        x = nn::segment_matmul(x, ranges, feature_tnet_(x, ranges, train));
    }
    x = nn::max_reduce(x, ranges);
    for (const auto& m : head_) x = m(x, train);
    return out_(x);
  }

 private:
  PointNetConfig cfg_;
  TransformNet input_tnet_;
  TransformNet feature_tnet_;
  std::vector<SharedMap> maps_;
  std::vector<SharedMap> head_;
  LinearLayer out_;
};

}  // namespace

std::unique_ptr<Model> make_pointnet(const PointNetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<PointNet>(cfg, seed);
}

std::unique_ptr<Model> make_model(ModelKind kind, const std::string& config_text,
                                  std::uint64_t seed) {
  switch (kind) {
    case ModelKind::minkowski:
      return make_senet(config_text.empty() ? SENetConfig{} : senet_config_from_text(config_text), seed);
    case ModelKind::kpconv:
      return make_kpcnn(config_text.empty() ? KPConvConfig{} : kpconv_config_from_text(config_text), seed);
    case ModelKind::pointnet:
      return make_pointnet(
          config_text.empty() ? PointNetConfig{} : pointnet_config_from_text(config_text), seed);
  }
  throw ValidationError("unknown model kind");
}

}  // namespace canopy::models
