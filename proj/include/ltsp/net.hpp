#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ltsp/ops.hpp"
#include "ltsp/rng.hpp"
#include "ltsp/volume.hpp"

namespace ltsp {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Ablation axes: propagation distance (0/1/2 slices) x slice features passed
// through the gated cell or taken raw.
enum class AblationMode { none, one_slice, one_slice_cells, two_slices, two_slices_cells };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::none: return "none";
    case AblationMode::one_slice: return "one_slice";
    case AblationMode::one_slice_cells: return "one_slice_cells";
    case AblationMode::two_slices: return "two_slices";
    case AblationMode::two_slices_cells: return "two_slices_cells";
  }
  return "none";
}

inline AblationMode parse_ablation(const std::string& s) {
  for (auto m : {AblationMode::none, AblationMode::one_slice, AblationMode::one_slice_cells,
                 AblationMode::two_slices, AblationMode::two_slices_cells})
    if (s == to_string(m)) return m;
  raise(ErrorCategory::config, "bad_ablation", "unknown ablation mode '" + s + "'");
}

struct LtspNetConfig {
  int64_t input_cube_extent = 64;  // S0 = H0 = W0
  std::array<int64_t, 4> channel_schedule{16, 32, 64, 128};  // stem, down1, down2, down3
  int64_t coarse_channels = 32;  // C
  int propagation_kernel = 3;
  int64_t class_count = 2;

  void validate() const {
    require(input_cube_extent >= 8 && input_cube_extent % 8 == 0, ErrorCategory::config,
            "extent_divisibility",
            "input_cube_extent must be divisible by 8 (three poolings), got " +
                std::to_string(input_cube_extent));
    for (int64_t c : channel_schedule)
      require(c > 0, ErrorCategory::config, "bad_channels", "channel_schedule entries must be > 0");
    require(coarse_channels > 0, ErrorCategory::config, "bad_channels", "coarse_channels must be > 0");
    require(class_count == 2, ErrorCategory::config, "bad_classes",
            "binary segmentation only (class_count = 2)");
    require(propagation_kernel == 3, ErrorCategory::config, "bad_kernel",
            "propagation kernel is fixed at 3");
  }
};

// Batchnorm behavior per pass: batch statistics with/without running-stat
// updates, or frozen running statistics.
enum class Phase { train, gradcheck, eval };

// ---------------------------------------------------------------------------
// LTSP cell and propagation parameters
// ---------------------------------------------------------------------------

template <typename T>
struct LtspCellParams {
  Tensor<T> gate_weight;  // [4C, 2C, 3, 3]
  Tensor<T> gate_bias;    // [4C]

  int64_t channels() const { return gate_weight.extent(0) / 4; }

  void validate() const {
    require(gate_weight.rank() == 4 && gate_weight.extent(0) == 4 * channels() &&
                gate_weight.extent(1) == 2 * channels(),
            ErrorCategory::shape, "cell_params",
            "gate weight must be [4C,2C,k,k], got " + shape_str(gate_weight.shape()));
  }
};

template <typename T>
struct PropagationParams {
  Tensor<T> w1, b1;  // 1-distance weights [C,C,3,3] + bias
  Tensor<T> w2, b2;  // 2-distance weights
};

template <typename T>
struct CellState {
  Tensor<T> h;  // cell output H_i, values in (-1,1)
  Tensor<T> c;  // cell memory C_i

  static CellState zeros(int64_t channels, int64_t height, int64_t width) {
    return {Tensor<T>::zeros({channels, height, width}), Tensor<T>::zeros({channels, height, width})};
  }
};

// One gated update: gates from a single 2D convolution over the concatenation
// of the slice feature and the previous output, then
//   c = sigma(G1) o c_prev + sigma(G3) o tanh(G2)
//   h = sigma(G4) o tanh(c)
template <typename T>
CellState<T> ltsp_cell_step(const Tensor<T>& x_i, const CellState<T>& prev,
                            const LtspCellParams<T>& cell) {
  require(x_i.rank() == 3, ErrorCategory::shape, "cell_input",
          "cell input must be [C,H,W], got " + shape_str(x_i.shape()));
  require(x_i.extent(0) == cell.channels(), ErrorCategory::shape, "cell_channels",
          "cell channel mismatch: input " + shape_str(x_i.shape()) + " vs C=" +
              std::to_string(cell.channels()));
  require(prev.h.shape() == x_i.shape() && prev.c.shape() == x_i.shape(), ErrorCategory::shape,
          "cell_state", "previous cell state shape mismatch");

  auto gates = conv2d(concat_channels(x_i, prev.h), cell.gate_weight, cell.gate_bias, 1);
  auto pieces = chunk_channels(gates, 4);
  auto forget_gate = sigmoid(pieces[0]);
  auto candidate = tanh_act(pieces[1]);
  auto input_gate = sigmoid(pieces[2]);
  auto output_gate = sigmoid(pieces[3]);

  CellState<T> next;
  next.c = add(mul(forget_gate, prev.c), mul(input_gate, candidate));
  next.h = mul(output_gate, tanh_act(next.c));
  return next;
}

// Dense forward slice propagation:
//   X'_1 = X_1
//   X'_2 = X_2 + f(H_1 * W1)
//   X'_i = X_i + f(H_{i-1} * W1 + H_{i-2} * W2)   i >= 3
// with f = relu and H the cell outputs (or the raw slices when cells are
// disabled). distance=1 drops the W2 term.
template <typename T>
std::vector<Tensor<T>> propagate_slices(const std::vector<Tensor<T>>& slices,
                                        const LtspCellParams<T>& cell,
                                        const PropagationParams<T>& prop, bool use_cells = true,
                                        int distance = 2) {
  require(!slices.empty(), ErrorCategory::shape, "empty_slices",
          "propagate_slices requires at least one slice");
  require(distance == 1 || distance == 2, ErrorCategory::config, "bad_distance",
          "propagation distance must be 1 or 2");
  const int64_t s = static_cast<int64_t>(slices.size());

  std::vector<Tensor<T>> hidden;
  hidden.reserve(static_cast<size_t>(s));
  if (use_cells) {
    auto state = CellState<T>::zeros(slices[0].extent(0), slices[0].extent(1), slices[0].extent(2));
    for (int64_t i = 0; i < s; ++i) {
      state = ltsp_cell_step(slices[static_cast<size_t>(i)], state, cell);
      hidden.push_back(state.h);
    }
  } else {
    hidden = slices;
  }

  std::vector<Tensor<T>> out;
  out.reserve(static_cast<size_t>(s));
  out.push_back(slices[0]);
  for (int64_t i = 1; i < s; ++i) {
    auto msg = conv2d(hidden[static_cast<size_t>(i - 1)], prop.w1, prop.b1, 1);
    if (distance == 2 && i >= 2)
      msg = add(msg, conv2d(hidden[static_cast<size_t>(i - 2)], prop.w2, prop.b2, 1));
    out.push_back(add(slices[static_cast<size_t>(i)], relu(msg)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft dice loss on the foreground probability map
// ---------------------------------------------------------------------------

struct DiceLossConfig {
  double epsilon = 1e-5;
};

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& y, const DiceLossConfig& cfg = {}) {
  require(p.shape() == y.shape(), ErrorCategory::shape, "dice_shape",
          "dice_loss: prediction " + shape_str(p.shape()) + " vs labels " + shape_str(y.shape()));
  require(cfg.epsilon > 0, ErrorCategory::config, "dice_eps", "dice epsilon must be > 0");
  for (const T v : y.values())
    require(v == T(0) || v == T(1), ErrorCategory::numeric, "dice_labels",
            "dice_loss labels must be binary");
  const T eps = static_cast<T>(cfg.epsilon);
  auto intersection = sum(mul(p, y));
  auto total = add(sum(p), sum(y));
  auto ratio = divide(affine(intersection, T(2), eps), affine(total, T(1), eps));
  return affine(ratio, T(-1), T(1));
}

// ---------------------------------------------------------------------------
// Argmax prediction
// ---------------------------------------------------------------------------

// Voxel label = index of the max-probability channel; exact ties resolve to
// the background (first max wins in channel order).
template <typename T>
Volume predict(const Tensor<T>& x_prob) {
  require(x_prob.rank() == 5 && x_prob.extent(0) == 1, ErrorCategory::shape, "predict_rank",
          "predict expects [1,C,S,H,W] probabilities, got " + shape_str(x_prob.shape()));
  const int64_t c = x_prob.extent(1), s = x_prob.extent(2), h = x_prob.extent(3),
                w = x_prob.extent(4);
  Volume out = Volume::make_labels({s, h, w});
  const int64_t voxels = s * h * w;
  const T* p = x_prob.data();
  for (int64_t v = 0; v < voxels; ++v) {
    int best = 0;
    T best_p = p[v];
    for (int64_t ci = 1; ci < c; ++ci)
      if (p[ci * voxels + v] > best_p) {
        best_p = p[ci * voxels + v];
        best = static_cast<int>(ci);
      }
    out.labels[static_cast<size_t>(v)] = static_cast<uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// The two-stage network
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct ConvBlock {
  Tensor<T> w, b;
  BatchNormState<T> bn;

  Tensor<T> operator()(const Tensor<T>& x) { return relu(batchnorm(conv3d(x, w, b, 1), bn)); }
};

template <typename T>
ConvBlock<T> make_conv_block(int64_t cin, int64_t cout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * 27.0);
  std::vector<T> wv(static_cast<size_t>(cout * cin * 27));
  for (auto& v : wv) v = static_cast<T>(rng.uniform(-bound, bound));
  ConvBlock<T> blk;
  blk.w = Tensor<T>::from_data({cout, cin, 3, 3, 3}, std::move(wv), true);
  blk.b = Tensor<T>::zeros({cout}, true);
  blk.bn = BatchNormState<T>::create(cout);
  return blk;
}

template <typename T>
Tensor<T> make_conv_weight(int64_t cout, int64_t cin, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  std::vector<T> wv(static_cast<size_t>(cout * cin * k * k));
  for (auto& v : wv) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from_data({cout, cin, k, k}, std::move(wv), true);
}

}  // namespace detail

template <typename T>
class LtspNet {
 public:
  struct Stage1Out {
    Tensor<T> coarse;     // [1,C,S0/2,H0/2,W0/2]
    Tensor<T> stem_skip;  // full-resolution encoder feature for the fine decoder
  };

  LtspNet(LtspNetConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const auto [c0, c1, c2, c3] = cfg_.channel_schedule;
    const int64_t cc = cfg_.coarse_channels;

    stem1_ = detail::make_conv_block<T>(1, c0, rng);
    stem2_ = detail::make_conv_block<T>(c0, c0, rng);
    down1a_ = detail::make_conv_block<T>(c0, c1, rng);
    down1b_ = detail::make_conv_block<T>(c1, c1, rng);
    down2a_ = detail::make_conv_block<T>(c1, c2, rng);
    down2b_ = detail::make_conv_block<T>(c2, c2, rng);
    down3a_ = detail::make_conv_block<T>(c2, c3, rng);
    down3b_ = detail::make_conv_block<T>(c3, c3, rng);
    up1_ = detail::make_conv_block<T>(c3 + c2, c2, rng);
    up2_ = detail::make_conv_block<T>(c2 + c1, cc, rng);

    cell_.gate_weight = detail::make_conv_weight<T>(4 * cc, 2 * cc, 3, rng);
    cell_.gate_bias = Tensor<T>::zeros({4 * cc}, true);
    prop_.w1 = detail::make_conv_weight<T>(cc, cc, 3, rng);
    prop_.b1 = Tensor<T>::zeros({cc}, true);
    prop_.w2 = detail::make_conv_weight<T>(cc, cc, 3, rng);
    prop_.b2 = Tensor<T>::zeros({cc}, true);

    fine1_ = detail::make_conv_block<T>(cc + c0, c0, rng);
    fine2_ = detail::make_conv_block<T>(c0, c0, rng);
    {
      const double bound = 1.0 / std::sqrt(static_cast<double>(c0));
      std::vector<T> hv(static_cast<size_t>(cfg_.class_count * c0));
      for (auto& v : hv) v = static_cast<T>(rng.uniform(-bound, bound));
      head_w_ = Tensor<T>::from_data({cfg_.class_count, c0, 1, 1, 1}, std::move(hv), true);
      head_b_ = Tensor<T>::zeros({cfg_.class_count}, true);
    }
  }

  const LtspNetConfig& config() const { return cfg_; }
  LtspCellParams<T>& cell() { return cell_; }
  PropagationParams<T>& propagation() { return prop_; }

  void set_phase(Phase phase) {
    for (auto* blk : blocks()) {
      blk->bn.training_mode = phase != Phase::eval;
      blk->bn.update_running_stats = phase == Phase::train;
    }
  }

  // Stage 1: encoder (three poolings) + coarse decoder (two upsamplings).
  Stage1Out encode_coarse(const Tensor<T>& x0) {
    require(x0.rank() == 5 && x0.extent(0) == 1 && x0.extent(1) == 1, ErrorCategory::shape,
            "net_input", "network input must be [1,1,S,H,W], got " + shape_str(x0.shape()));
    for (int a = 2; a < 5; ++a)
      require(x0.extent(a) % 8 == 0, ErrorCategory::shape, "net_input_extent",
              "input spatial extents must be divisible by 8, got " + shape_str(x0.shape()));

    auto e0 = stem2_(stem1_(x0));                 // full res
    auto e1 = down1b_(down1a_(maxpool3d(e0)));    // 1/2
    auto e2 = down2b_(down2a_(maxpool3d(e1)));    // 1/4
    auto e3 = down3b_(down3a_(maxpool3d(e2)));    // 1/8

    auto d1 = up1_(concat_channels(upsample_trilinear(e3), e2));  // 1/4
    auto coarse = up2_(concat_channels(upsample_trilinear(d1), e1));  // 1/2, C channels
    return {coarse, e0};
  }

  // Stage 2 refinement; `none` bypasses propagation entirely.
  Tensor<T> propagate(const Tensor<T>& coarse, AblationMode mode) {
    if (mode == AblationMode::none) return coarse;
    const bool cells =
        mode == AblationMode::one_slice_cells || mode == AblationMode::two_slices_cells;
    const int distance =
        (mode == AblationMode::two_slices || mode == AblationMode::two_slices_cells) ? 2 : 1;
    auto refined = propagate_slices(split_slices(coarse), cell_, prop_, cells, distance);
    return stack_slices(refined);
  }

  // Fine decoder: one upsampling back to full resolution with the stem skip.
  Tensor<T> decode_fine(const Tensor<T>& x_fine, const Tensor<T>& stem_skip) {
    auto up = upsample_trilinear(x_fine);
    require(up.extent(2) == stem_skip.extent(2) && up.extent(3) == stem_skip.extent(3) &&
                up.extent(4) == stem_skip.extent(4),
            ErrorCategory::shape, "skip_mismatch",
            "fine decoder skip shape mismatch: " + shape_str(up.shape()) + " vs " +
                shape_str(stem_skip.shape()));
    auto y = fine2_(fine1_(concat_channels(up, stem_skip)));
    return softmax_channels(conv3d(y, head_w_, head_b_, 0));
  }

  Tensor<T> forward(const Tensor<T>& x0, AblationMode mode) {
    auto s1 = encode_coarse(x0);
    return decode_fine(propagate(s1.coarse, mode), s1.stem_skip);
  }

  // Foreground probability channel of a forward pass.
  Tensor<T> forward_foreground(const Tensor<T>& x0, AblationMode mode) {
    return chunk_channels(forward(x0, mode), 2)[1];
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto block = [&](const char* name, detail::ConvBlock<T>& blk) {
      out.emplace_back(std::string(name) + ".w", blk.w);
      out.emplace_back(std::string(name) + ".b", blk.b);
      out.emplace_back(std::string(name) + ".bn.scale", blk.bn.scale);
      out.emplace_back(std::string(name) + ".bn.shift", blk.bn.shift);
    };
    block("stem1", stem1_);
    block("stem2", stem2_);
    block("down1a", down1a_);
    block("down1b", down1b_);
    block("down2a", down2a_);
    block("down2b", down2b_);
    block("down3a", down3a_);
    block("down3b", down3b_);
    block("up1", up1_);
    block("up2", up2_);
    out.emplace_back("cell.gate.w", cell_.gate_weight);
    out.emplace_back("cell.gate.b", cell_.gate_bias);
    out.emplace_back("prop.w1", prop_.w1);
    out.emplace_back("prop.b1", prop_.b1);
    out.emplace_back("prop.w2", prop_.w2);
    out.emplace_back("prop.b2", prop_.b2);
    block("fine1", fine1_);
    block("fine2", fine2_);
    out.emplace_back("head.w", head_w_);
    out.emplace_back("head.b", head_b_);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // BN running statistics, saved alongside parameters in checkpoints.
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    auto block = [&](const char* name, detail::ConvBlock<T>& blk) {
      out.emplace_back(std::string(name) + ".bn.running_mean", &blk.bn.running_mean);
      out.emplace_back(std::string(name) + ".bn.running_var", &blk.bn.running_var);
    };
    block("stem1", stem1_);
    block("stem2", stem2_);
    block("down1a", down1a_);
    block("down1b", down1b_);
    block("down2a", down2a_);
    block("down2b", down2b_);
    block("down3a", down3a_);
    block("down3b", down3b_);
    block("up1", up1_);
    block("up2", up2_);
    block("fine1", fine1_);
    block("fine2", fine2_);
    return out;
  }

  // Parameter groups used by the gradient-check harness.
  std::vector<std::pair<std::string, std::vector<Tensor<T>>>> parameter_groups() {
    std::vector<std::pair<std::string, std::vector<Tensor<T>>>> groups;
    auto collect = [](std::initializer_list<detail::ConvBlock<T>*> blks) {
      std::vector<Tensor<T>> ps;
      for (auto* b : blks) {
        ps.push_back(b->w);
        ps.push_back(b->b);
        ps.push_back(b->bn.scale);
        ps.push_back(b->bn.shift);
      }
      return ps;
    };
    groups.emplace_back("encoder", collect({&stem1_, &stem2_, &down1a_, &down1b_, &down2a_,
                                            &down2b_, &down3a_, &down3b_}));
    groups.emplace_back("coarse_decoder", collect({&up1_, &up2_}));
    groups.emplace_back("cell", std::vector<Tensor<T>>{cell_.gate_weight, cell_.gate_bias});
    groups.emplace_back("prop_w1", std::vector<Tensor<T>>{prop_.w1, prop_.b1});
    groups.emplace_back("prop_w2", std::vector<Tensor<T>>{prop_.w2, prop_.b2});
    auto fine = collect({&fine1_, &fine2_});
    fine.push_back(head_w_);
    fine.push_back(head_b_);
    groups.emplace_back("fine_decoder", std::move(fine));
    return groups;
  }

 private:
  std::vector<detail::ConvBlock<T>*> blocks() {
    return {&stem1_, &stem2_, &down1a_, &down1b_, &down2a_, &down2b_, &down3a_, &down3b_,
            &up1_,   &up2_,   &fine1_,  &fine2_};
  }

  LtspNetConfig cfg_;
  detail::ConvBlock<T> stem1_, stem2_;
  detail::ConvBlock<T> down1a_, down1b_, down2a_, down2b_, down3a_, down3b_;
  detail::ConvBlock<T> up1_, up2_;
  LtspCellParams<T> cell_;
  PropagationParams<T> prop_;
  detail::ConvBlock<T> fine1_, fine2_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace ltsp
