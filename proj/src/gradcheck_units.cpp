// Named gradcheck units. Each builds small deterministic inputs and a scalar
// loss; the loss is a fixed random weighting of the output so that errors
// cannot cancel the way they would under a plain sum.
#include "tma/gradcheck.hpp"

#include <memory>
#include <optional>

#include "tma/attention.hpp"
#include "tma/loss.hpp"
#include "tma/network.hpp"

namespace tma {

namespace {

Tensor64 rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor64 t = Tensor64::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor64 weighted_sum(const Tensor64& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor64 w = Tensor64::zeros(y.shape());
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return sum_all(mul(y, w));
}

GradCheckUnit unit(std::string name, std::function<std::vector<Tensor64>()> make,
                   LossFn f) {
  auto run = [make = std::move(make), f = std::move(f),
              name](const GradCheckOptions& opts) {
    return check_gradients(name, make(), f, opts);
  };
  return GradCheckUnit{std::move(name), std::move(run)};
}

std::vector<GradCheckUnit> op_units() {
  std::vector<GradCheckUnit> units;

  units.push_back(unit(
      "op:add",
      [] {
        Rng rng(11);
        return std::vector<Tensor64>{rand_tensor({2, 3, 5}, rng), rand_tensor({2, 3, 5}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(add(in[0], in[1]), 11); }));

  units.push_back(unit(
      "op:sub",
      [] {
        Rng rng(12);
        return std::vector<Tensor64>{rand_tensor({4, 7}, rng), rand_tensor({4, 7}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(sub(in[0], in[1]), 12); }));

  units.push_back(unit(
      "op:mul",
      [] {
        Rng rng(13);
        return std::vector<Tensor64>{rand_tensor({2, 3, 5}, rng), rand_tensor({2, 3, 5}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(mul(in[0], in[1]), 13); }));

  units.push_back(unit(
      "op:div",
      [] {
        Rng rng(14);
        return std::vector<Tensor64>{rand_tensor({2, 3, 5}, rng),
                                     rand_tensor({2, 3, 5}, rng, 0.5, 1.5)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(div(in[0], in[1]), 14); }));

  units.push_back(unit(
      "op:scale",
      [] {
        Rng rng(15);
        return std::vector<Tensor64>{rand_tensor({6, 9}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(add_scalar(scale(in[0], 1.7), -0.3), 15);
      }));

  units.push_back(unit(
      "op:add_scalar",
      [] {
        Rng rng(14);
        return std::vector<Tensor64>{rand_tensor({6, 9}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(add_scalar(in[0], 0.731), 14);
      }));

  units.push_back(unit(
      "op:gelu",
      [] {
        Rng rng(16);
        return std::vector<Tensor64>{rand_tensor({3, 5, 7}, rng, -2.0, 2.0)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(gelu(in[0]), 16); }));

  units.push_back(unit(
      "op:sigmoid",
      [] {
        Rng rng(17);
        return std::vector<Tensor64>{rand_tensor({3, 5, 7}, rng, -3.0, 3.0)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(sigmoid(in[0]), 17); }));

  units.push_back(unit(
      "op:prelu",
      [] {
        Rng rng(18);
        return std::vector<Tensor64>{rand_tensor({2, 4, 3, 3, 3}, rng, -2.0, 2.0),
                                     rand_tensor({4}, rng, 0.1, 0.5)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(prelu(in[0], in[1]), 18); }));

  units.push_back(unit(
      "op:reshape",
      [] {
        Rng rng(19);
        return std::vector<Tensor64>{rand_tensor({4, 5, 3}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(reshape(in[0], {6, 10}), 19); }));

  units.push_back(unit(
      "op:permute",
      [] {
        Rng rng(20);
        return std::vector<Tensor64>{rand_tensor({2, 3, 4, 5}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(permute(in[0], {2, 0, 3, 1}), 20);
      }));

  units.push_back(unit(
      "op:narrow",
      [] {
        Rng rng(21);
        return std::vector<Tensor64>{rand_tensor({3, 5, 4}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(narrow(in[0], 1, 1, 3), 21); }));

  units.push_back(unit(
      "op:concat",
      [] {
        Rng rng(22);
        return std::vector<Tensor64>{rand_tensor({2, 3, 4}, rng), rand_tensor({2, 5, 4}, rng),
                                     rand_tensor({2, 2, 4}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(concat<double>({in[0], in[1], in[2]}, 1), 22);
      }));

  units.push_back(unit(
      "op:reduce_sum",
      [] {
        Rng rng(23);
        return std::vector<Tensor64>{rand_tensor({2, 3, 4, 5}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(reduce_sum(in[0], {1, 3}), 23);
      }));

  units.push_back(unit(
      "op:softmax",
      [] {
        Rng rng(24);
        return std::vector<Tensor64>{rand_tensor({2, 4, 7}, rng, -2.0, 2.0)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(softmax(in[0], 2), 24); }));

  units.push_back(unit(
      "op:linear",
      [] {
        Rng rng(25);
        return std::vector<Tensor64>{rand_tensor({2, 5, 6}, rng), rand_tensor({6, 4}, rng),
                                     rand_tensor({4}, rng)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(linear(in[0], in[1], in[2]), 25);
      }));

  units.push_back(unit(
      "op:bmm",
      [] {
        Rng rng(26);
        return std::vector<Tensor64>{rand_tensor({2, 3, 4, 5}, rng),
                                     rand_tensor({2, 3, 5, 6}, rng)};
      },
      [](const std::vector<Tensor64>& in) { return weighted_sum(bmm(in[0], in[1]), 26); }));

  units.push_back(unit(
      "op:layer_norm",
      [] {
        Rng rng(27);
        return std::vector<Tensor64>{rand_tensor({2, 4, 6}, rng), rand_tensor({6}, rng, 0.5, 1.5),
                                     rand_tensor({6}, rng, -0.2, 0.2)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(layer_norm(in[0], in[1], in[2]), 27);
      }));

  units.push_back(unit(
      "op:batch_norm-train",
      [] {
        Rng rng(28);
        return std::vector<Tensor64>{rand_tensor({2, 3, 2, 2, 2}, rng),
                                     rand_tensor({3}, rng, 0.5, 1.5),
                                     rand_tensor({3}, rng, -0.2, 0.2)};
      },
      [](const std::vector<Tensor64>& in) {
        auto state = BatchNormState<double>::init(3);
        return weighted_sum(batch_norm(in[0], in[1], in[2], state, NormMode::kTrain), 28);
      }));

  units.push_back(unit(
      "op:batch_norm-eval",
      [] {
        Rng rng(29);
        return std::vector<Tensor64>{rand_tensor({2, 3, 2, 2, 2}, rng),
                                     rand_tensor({3}, rng, 0.5, 1.5),
                                     rand_tensor({3}, rng, -0.2, 0.2)};
      },
      [](const std::vector<Tensor64>& in) {
        Rng rng(290);
        auto state = BatchNormState<double>::init(3);
        for (auto& v : state.running_mean.data()) v = rng.uniform(-0.5, 0.5);
        for (auto& v : state.running_var.data()) v = rng.uniform(0.5, 2.0);
        return weighted_sum(batch_norm(in[0], in[1], in[2], state, NormMode::kEval), 29);
      }));

  units.push_back(unit(
      "op:conv3d",
      [] {
        Rng rng(30);
        return std::vector<Tensor64>{rand_tensor({2, 3, 5, 5, 5}, rng),
                                     rand_tensor({4, 3, 3, 3, 3}, rng, -0.3, 0.3),
                                     rand_tensor({4}, rng, -0.1, 0.1)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(conv3d(in[0], in[1], in[2], ConvSpec::cubic(3, 4, 3, 1, 1)), 30);
      }));

  units.push_back(unit(
      "op:conv3d-strided",
      [] {
        Rng rng(31);
        return std::vector<Tensor64>{rand_tensor({1, 2, 6, 6, 6}, rng),
                                     rand_tensor({3, 2, 2, 2, 2}, rng, -0.3, 0.3),
                                     rand_tensor({3}, rng, -0.1, 0.1)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(conv3d(in[0], in[1], in[2], ConvSpec::cubic(2, 3, 2, 2, 0)), 31);
      }));

  units.push_back(unit(
      "op:conv3d-grouped",
      [] {
        Rng rng(32);
        return std::vector<Tensor64>{rand_tensor({1, 4, 4, 4, 4}, rng),
                                     rand_tensor({6, 2, 3, 3, 3}, rng, -0.3, 0.3),
                                     rand_tensor({6}, rng, -0.1, 0.1)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(conv3d(in[0], in[1], in[2], ConvSpec::cubic(4, 6, 3, 1, 1, 2)), 32);
      }));

  units.push_back(unit(
      "op:depthwise_conv3d",
      [] {
        Rng rng(33);
        return std::vector<Tensor64>{rand_tensor({1, 3, 4, 4, 4}, rng),
                                     rand_tensor({3, 1, 2, 2, 2}, rng, -0.5, 0.5),
                                     rand_tensor({3}, rng, -0.1, 0.1)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(depthwise_conv3d(in[0], in[1], in[2], 2), 33);
      }));

  units.push_back(unit(
      "op:transposed_conv3d",
      [] {
        Rng rng(34);
        return std::vector<Tensor64>{rand_tensor({1, 3, 2, 2, 2}, rng),
                                     rand_tensor({3, 4, 2, 2, 2}, rng, -0.5, 0.5),
                                     rand_tensor({4}, rng, -0.1, 0.1)};
      },
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(transposed_conv3d(in[0], in[1], in[2], 2), 34);
      }));

  return units;
}

// The module units pass the module's own parameter tensors as gradcheck
// inputs; the handles share storage, so finite-difference probes and analytic
// gradients both go through the live module.
std::vector<GradCheckUnit> module_units() {
  std::vector<GradCheckUnit> units;

  {
    struct State {
      std::optional<Tmsm<double>> layer;
      Tensor64 x;
    };
    auto state = std::make_shared<State>();
    units.push_back(unit(
        "attention:tmsm",
        [state] {
          Rng rng(41);
          state->layer = Tmsm<double>::create("g", 8, {4, 4, 4}, ScalePair{2, 1}, 4,
                                              ValueEnhance::kDepthwise3, rng);
          state->x = rand_tensor({1, 8, 4, 4, 4}, rng);
          std::vector<Tensor64> inputs{state->x};
          NamedTensors<double> params;
          state->layer->params("g", params);
          for (auto& [name, p] : params) inputs.push_back(p);
          return inputs;
        },
        [state](const std::vector<Tensor64>&) {
          return weighted_sum(state->layer->forward(state->x, NormMode::kTrain), 41);
        }));
  }

  {
    struct State {
      std::optional<Tmcm<double>> layer;
      Tensor64 q, kv;
    };
    auto state = std::make_shared<State>();
    units.push_back(unit(
        "attention:tmcm",
        [state] {
          Rng rng(42);
          state->layer = Tmcm<double>::create("g", 8, {4, 4, 4}, ScalePair{2, 1}, 4,
                                              ValueEnhance::kDepthwise3, rng);
          state->q = rand_tensor({1, 8, 4, 4, 4}, rng);
          state->kv = rand_tensor({1, 8, 4, 4, 4}, rng);
          std::vector<Tensor64> inputs{state->q, state->kv};
          NamedTensors<double> params;
          state->layer->params("g", params);
          for (auto& [name, p] : params) inputs.push_back(p);
          return inputs;
        },
        [state](const std::vector<Tensor64>&) {
          return weighted_sum(state->layer->forward(state->q, state->kv, NormMode::kTrain),
                              42);
        }));
  }

  {
    struct State {
      std::optional<Model<double>> model;
      Tensor64 x, target;
    };
    auto state = std::make_shared<State>();
    units.push_back(unit(
        "network:model",
        [state] {
          ModelConfig config;
          config.extents = {32, 32, 32};
          config.stage_channels = {8, 16, 32, 64};
          config.heads = 4;
          state->model = Model<double>::build(config, 43);
          Rng rng(43);
          // batch 2: at 32^3 the coarsest stage is a 1^3 grid, so train-mode
          // batch norm needs a second sample for its statistics
          state->x = rand_tensor({2, 4, 32, 32, 32}, rng);
          state->target = Tensor64::zeros({2, 3, 32, 32, 32});
          for (auto& v : state->target.data()) v = rng.bernoulli(0.35) ? 1.0 : 0.0;
          std::vector<Tensor64> inputs{state->x};
          NamedTensors<double> params;
          state->model->params(params);
          for (auto& [name, p] : params) inputs.push_back(p);
          return inputs;
        },
        [state](const std::vector<Tensor64>&) {
          StageOutputs<double> out = state->model->forward(state->x, NormMode::kTrain);
          return deep_supervision_loss(out, state->target);
        }));
  }

  {
    struct State {
      Tensor64 target;
    };
    auto state = std::make_shared<State>();
    units.push_back(unit(
        "loss:dice",
        [state] {
          Rng rng(44);
          state->target = Tensor64::zeros({2, 3, 4, 4, 4});
          for (auto& v : state->target.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
          return std::vector<Tensor64>{rand_tensor({2, 3, 4, 4, 4}, rng, 0.05, 0.95)};
        },
        [state](const std::vector<Tensor64>& in) {
          return dice_loss(in[0], state->target);
        }));
  }

  return units;
}

}  // namespace

std::vector<GradCheckUnit> gradcheck_units() {
  std::vector<GradCheckUnit> units = op_units();
  std::vector<GradCheckUnit> more = module_units();
  for (auto& u : more) units.push_back(std::move(u));
  return units;
}

}  // namespace tma
