#pragma once

// The three regression networks: a sparse-voxel SE-ResNet, a kernel point
// convolution network and PointNet. Each maps a batch of clouds to B x 2
// outputs (AGB, volume) with no output nonlinearity.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canopy/container.hpp"
#include "canopy/core.hpp"
#include "canopy/nn.hpp"
#include "canopy/sparse.hpp"

namespace canopy::models {

using nn::Matrix;
using nn::Ranges;
using nn::Var;
using sparse::Vector3;

inline constexpr int kInputChannels = 4;  // return number, return count, height, time gap
inline constexpr int kOutputs = 2;

/// One cloud ready for a network: normalized positions and per-point features.
struct Sample {
  Matrix positions;  // n x 3
  Matrix features;   // n x 4
};

/// Positions are taken as-is (normalize first); features are
/// [return_number, return_count, z, time_gap].
Sample make_sample(const PointCloud& cloud);

enum class ModelKind { minkowski, kpconv, pointnet };

std::string model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

// ---------------------------------------------------------------------------
// Configs. Serialized as `key=value` lines.

struct SENetConfig {
  double grid = 0.025;
  int stem_kernel = 7;
  int stem_width = 64;
  int pool_stride = 3;
  std::vector<int> blocks{3, 4, 6, 3};
  std::vector<int> widths{64, 64, 128, 256};
  std::vector<int> strides{1, 2, 2, 2};
  int se_reduction = 16;

  static SENetConfig tiny();
};

struct KPConvConfig {
  double grid = 0.025;
  int kernel_points = 15;
  double radius_factor = 2.5;  // r = factor * grid at the layer
  double sigma_factor = 1.0;   // sigma = factor * grid at the layer
  std::vector<int> widths{64, 128, 256, 512, 1024};

  static KPConvConfig tiny();
};

struct PointNetConfig {
  std::vector<int> widths{64, 64, 64, 128, 1024};  // shared maps; feature transform after the 2nd
  std::vector<int> head{512, 256, 128};
  bool input_transform = true;
  bool feature_transform = true;

  static PointNetConfig tiny();
};

std::string to_text(const SENetConfig& c);
std::string to_text(const KPConvConfig& c);
std::string to_text(const PointNetConfig& c);

std::map<std::string, std::string> parse_key_values(const std::string& text);
SENetConfig senet_config_from_text(const std::string& text);
KPConvConfig kpconv_config_from_text(const std::string& text);
PointNetConfig pointnet_config_from_text(const std::string& text);

// ---------------------------------------------------------------------------
// Parameter storage shared by the layers of one model.

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Var weight(const std::string& name, Eigen::Index rows, Eigen::Index cols, double fan_in);
  Var zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay_exempt);
  Var constant_init(const std::string& name, Matrix value, bool decay_exempt);
  nn::BatchNormState& batch_norm_state(const std::string& name, Eigen::Index channels);

  std::vector<nn::Parameter>& parameters() { return params_; }
  const std::vector<nn::Parameter>& parameters() const { return params_; }
  std::vector<std::pair<std::string, nn::BatchNormState*>> buffers();

 private:
  void add(nn::Parameter p);

  Rng rng_;
  std::vector<nn::Parameter> params_;
  std::vector<std::pair<std::string, std::unique_ptr<nn::BatchNormState>>> bn_;
};

struct LinearLayer {
  Var weight;
  Var bias;

  LinearLayer() = default;
  LinearLayer(ParamStore& store, const std::string& name, int in, int out);
  Var operator()(const Var& x) const { return nn::fully_connected(x, weight, bias); }
};

struct BatchNormLayer {
  Var gamma;
  Var beta;
  nn::BatchNormState* state = nullptr;

  BatchNormLayer() = default;
  BatchNormLayer(ParamStore& store, const std::string& name, int channels);
  Var operator()(const Var& x, bool train) const {
    return nn::batch_norm(x, gamma, beta, *state, train);
  }
};

// ---------------------------------------------------------------------------

class Model {
 public:
  virtual ~Model() = default;

  virtual ModelKind kind() const = 0;
  virtual std::string config_text() const = 0;
  /// B x 2 outputs. Train mode uses batch statistics in normalization layers.
  virtual Var forward(std::span<const Sample> batch, bool train) = 0;

  std::vector<nn::Parameter>& parameters() { return store_.parameters(); }
  const std::vector<nn::Parameter>& parameters() const { return store_.parameters(); }
  std::vector<std::pair<std::string, nn::BatchNormState*>> buffers() { return store_.buffers(); }
  std::size_t parameter_count() const;

 protected:
  explicit Model(std::uint64_t seed) : store_(seed) {}
  ParamStore store_;
};

std::unique_ptr<Model> make_model(ModelKind kind, const std::string& config_text,
                                  std::uint64_t seed);
std::unique_ptr<Model> make_senet(const SENetConfig& cfg, std::uint64_t seed);
std::unique_ptr<Model> make_kpcnn(const KPConvConfig& cfg, std::uint64_t seed);
std::unique_ptr<Model> make_pointnet(const PointNetConfig& cfg, std::uint64_t seed);

/// Sections "params" (name, shape, row-major values) and "buffers"
/// (normalization running statistics).
std::vector<Section> model_state_sections(Model& model);
void load_model_state(Model& model, const std::vector<Section>& sections);

// ---------------------------------------------------------------------------
// SE bottleneck block, exposed for testing.

struct SEBlock {
  int in_channels = 0;
  int width = 0;
  int stride = 1;
  LinearLayer conv1;  // k1, stride 1: a shared dense map
  BatchNormLayer bn1;
  Var conv2_w, conv2_b;  // k3, stride `stride`
  BatchNormLayer bn2;
  LinearLayer conv3;
  BatchNormLayer bn3;
  LinearLayer se_fc1;
  LinearLayer se_fc2;
  bool projection = false;
  Var proj_w;  // k1, stride `stride`, no bias
  BatchNormLayer proj_bn;

  SEBlock() = default;
  SEBlock(ParamStore& store, const std::string& name, int in_channels, int width, int stride,
          int se_reduction);
  int out_channels() const { return 4 * width; }
};

struct SEBlockOutput {
  Var out;
  std::vector<sparse::VoxelKey> keys;
};

/// `forced_scale` replaces the sigmoid gate by a constant (testing only).
SEBlockOutput se_block_forward(const SEBlock& block, const Var& x,
                               std::span<const sparse::VoxelKey> keys, bool train,
                               std::optional<double> forced_scale = std::nullopt);

/// Channel gate: per-segment mean -> FC -> ELU -> FC -> sigmoid.
Var squeeze_excite_gate(const SEBlock& block, const Var& x, const Ranges& ranges);

// ---------------------------------------------------------------------------
// Kernel point convolution.

double kernel_influence(const Vector3& y, const Vector3& kernel_point, double sigma);

/// Center point plus K-1 points settled by inverse-distance repulsion inside
/// the ball of radius 0.66 r, sorted by (z, y, x).
std::vector<Vector3> rigid_kernel_points(int k, double r, std::uint64_t seed = 42);

double repulsion_energy(std::span<const Vector3> points);
double min_pairwise_distance(std::span<const Vector3> points);

/// Influence entries for every (query, neighbor within r, kernel point) with
/// positive weight, neighbors ascending.
nn::SlotGather kpconv_gather(const Matrix& support, const Matrix& queries,
                             std::span<const Vector3> kernel_points, double r, double sigma);

/// sum over neighbors x_i within r of sum_k h(x_i - x, k) W_k' f_i. `weights`
/// stacks the K (C_in x C_out) matrices vertically. Empty neighborhoods give
/// zero rows.
Matrix kpconv_apply(const Matrix& support, const Matrix& features, const Matrix& queries,
                    std::span<const Vector3> kernel_points, const Matrix& weights, double r,
                    double sigma);

}  // namespace canopy::models
