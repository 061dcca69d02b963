#include <doctest.h>

#include "eqprop/spiking.hpp"
#include "helpers.hpp"

using namespace eqprop;
using namespace testutil;

namespace {

Batch<double> scalar(double v) { return Batch<double>::Constant(1, 1, v); }

}  // namespace

TEST_CASE("sigma-delta quantizer") {
  SUBCASE("below threshold accumulates") {
    auto q = sigma_delta_step(scalar(0.0), scalar(0.4), 0.5);
    CHECK(q.spikes(0, 0) == 0.0);
    CHECK(q.v_next(0, 0) == doctest::Approx(0.4));
  }
  SUBCASE("crossing the threshold fires and subtracts one") {
    auto q = sigma_delta_step(scalar(0.4), scalar(0.4), 0.5);
    CHECK(q.spikes(0, 0) == 1.0);
    CHECK(q.v_next(0, 0) == doctest::Approx(-0.2));
  }
  SUBCASE("a constant 0.4 for ten steps fires four times") {
    Batch<double> v = scalar(0.0);
    double spikes = 0.0;
    for (int t = 0; t < 10; ++t) {
      auto q = sigma_delta_step(v, scalar(0.4), 0.5);
      spikes += q.spikes(0, 0);
      v = q.v_next;
    }
    CHECK(spikes == 4.0);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(sigma_delta_step(Batch<double>(Batch<double>::Zero(2, 1)), scalar(0.1), 0.5), ShapeError);
  }
}

TEST_CASE("spike counts conserve the encoded signal") {
  // sum_t s_t = sum_t e_t - (V_end - V_start) over any window.
  auto rng = rng_stream(21, "test");
  std::uniform_int_distribution<int> len(1, 60);
  for (int trial = 0; trial < 100; ++trial) {
    Batch<double> v = uniform(5, 3, rng, -0.5, 0.5);
    const Batch<double> v_start = v;
    Batch<double> spikes = Batch<double>::Zero(5, 3), signal = Batch<double>::Zero(5, 3);
    const int steps = len(rng);
    for (int t = 0; t < steps; ++t) {
      const Batch<double> e = uniform(5, 3, rng, -0.5, 1.5);
      auto q = sigma_delta_step(v, e, 0.5);
      for (Eigen::Index i = 0; i < q.spikes.size(); ++i)
        CHECK((q.spikes.data()[i] == 0.0 || q.spikes.data()[i] == 1.0));
      spikes += q.spikes;
      signal += e;
      v = q.v_next;
    }
    CHECK((spikes - (signal - (v - v_start))).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("predictive decoder") {
  CHECK(predictive_decode(scalar(0.0), scalar(1.0), 0.6)(0, 0) == doctest::Approx(0.6));
  CHECK(predictive_decode(scalar(0.7), scalar(0.7), 0.3)(0, 0) == doctest::Approx(0.7));

  SUBCASE("contracts geometrically toward a constant input") {
    auto rng = rng_stream(22, "test");
    std::uniform_real_distribution<double> lam(0.05, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
      const double lambda = lam(rng);
      const Batch<double> c = uniform(4, 2, rng, -2.0, 2.0);
      Batch<double> d = uniform(4, 2, rng, -2.0, 2.0);
      const double d0 = (d - c).cwiseAbs().maxCoeff();
      for (int t = 1; t <= 30; ++t) {
        d = predictive_decode(d, c, lambda);
        CHECK((d - c).cwiseAbs().maxCoeff() <= std::pow(1.0 - lambda, t) * d0 + 1e-12);
      }
    }
  }
}

TEST_CASE("predictive encoder") {
  CHECK(predictive_encode(scalar(0.6), scalar(0.0), 0.6)(0, 0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(predictive_encode(scalar(0.6), scalar(0.0), 0.0), ConfigError);

  SUBCASE("a constant state encodes to itself for any prediction factor") {
    auto rng = rng_stream(23, "test");
    std::uniform_real_distribution<double> lam(1e-3, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
      const Batch<double> c = uniform(6, 2, rng, 0.0, 1.0);
      const Batch<double> e = predictive_encode(c, c, lam(rng));
      CHECK((e - c).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK((predictive_encode(scalar(0.3), scalar(0.3), 1.0) - scalar(0.3)).norm() == 0.0);
  }
}

TEST_CASE("encode, spike and decode recovers a constant weighted activation") {
  auto rng = rng_stream(24, "test");
  const double lambda = 0.6;
  for (int trial = 0; trial < 100; ++trial) {
    const Batch<double> c = uniform(8, 1, rng, 0.0, 1.0);
    const Matrix<double> w = uniform(3, 8, rng, -1.0, 1.0) / std::sqrt(8.0);
    Batch<double> rho_prev = Batch<double>::Zero(8, 1), v = rho_prev;
    Batch<double> d = Batch<double>::Zero(3, 1), mean = d;
    const int steps = 200;
    for (int t = 0; t < steps; ++t) {
      auto q = sigma_delta_step(v, predictive_encode(c, rho_prev, lambda), 0.5);
      v = q.v_next;
      rho_prev = c;
      d = predictive_decode(d, Batch<double>(w * q.spikes), lambda);
      mean += d;
    }
    mean /= steps;
    CHECK((mean - w * c).cwiseAbs().maxCoeff() < 0.02);
  }
}

TEST_CASE("spiking step") {
  auto rng = rng_stream(25, "test");
  DynamicsConfig dyn;
  SpikingConfig spk;

  SUBCASE("a silent network stays silent") {
    const Topology topo = make_net({1, 6, 6}, {conv(2, 1, maxp()), linear(3)});
    const auto params = random_params(topo, rng);
    auto st = NeuronState<double>::with_input(topo, Batch<double>::Zero(36, 2));
    relax_snn(st, topo, params, dyn, spk, 20);
    for (int n = 0; n <= topo.depth(); ++n) {
      CHECK(st.xi[n].isZero(0.0));
      CHECK(st.s[n].isZero(0.0));
      CHECK(st.v[n].isZero(0.0));
    }
  }

  SUBCASE("a zero nudge leaves a step bitwise unchanged") {
    for (int trial = 0; trial < 100; ++trial) {
      const Topology topo = make_net({1, 6, 6}, {conv(2, 1, avg()), linear(3)});
      const auto params = random_params(topo, rng, 0.3);
      const Batch<double> y = one_hot(3, {1, 2});
      auto a = NeuronState<double>::with_input(topo, uniform(36, 2, rng, 0.0, 1.0));
      relax_snn(a, topo, params, dyn, spk, 4);
      auto b = a;
      Nudge<double> zero{0.0, &y, LossKind::mse};
      step_snn(a, topo, params, dyn, spk);
      step_snn(b, topo, params, dyn, spk, &zero);
      for (int n = 1; n <= topo.depth(); ++n) {
        CHECK(a.xi[n] == b.xi[n]);
        CHECK(a.v[n] == b.v[n]);
        CHECK(a.s[n] == b.s[n]);
      }
    }
  }

  SUBCASE("every layer exchanges binary spikes only") {
    for (int trial = 0; trial < 100; ++trial) {
      const Topology topo = make_net({1, 6, 6}, {conv(3, 1, maxp()), linear(5), linear(3)}, 2.0);
      const auto params = random_params(topo, rng, 0.5);
      auto st = NeuronState<double>::with_input(topo, uniform(36, 2, rng, 0.0, 1.0));
      for (int t = 0; t < 5; ++t) {
        step_snn(st, topo, params, dyn, spk);
        for (int n = 0; n <= topo.depth(); ++n) {
          CHECK((st.s[n].array() * (1.0 - st.s[n].array())).abs().maxCoeff() == 0.0);
          CHECK(st.xi[n].minCoeff() >= 0.0);
          CHECK(st.xi[n].maxCoeff() <= 1.0);
        }
      }
    }
  }

  SUBCASE("the input layer emits its pixel intensities as spike rates") {
    const Topology topo = make_net({1, 2, 2}, {linear(2)});
    const auto params = Parameters<double>::zeros(topo);
    Batch<double> x(4, 1);
    x << 0.0, 0.25, 0.5, 1.0;
    auto st = NeuronState<double>::with_input(topo, x);
    Batch<double> count = Batch<double>::Zero(4, 1);
    const int steps = 400;
    for (int t = 0; t < steps; ++t) {
      step_snn(st, topo, params, dyn, spk);
      count += st.s[0];
    }
    CHECK((count / steps - x).cwiseAbs().maxCoeff() <= 1.0 / steps + 1e-12);
  }
}

TEST_CASE("spiking and non-spiking relaxations settle near the same state") {
  // Calibrated at the published step size and prediction factor: the residual
  // is sigma-delta quantization noise, averaged over nets.
  auto rng = rng_stream(26, "test");
  DynamicsConfig dyn;
  SpikingConfig spk;
  const Topology topo = make_net({1, 10, 10}, {conv(4, 1, avg()), linear(10)});
  double total = 0.0;
  int count = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto params = random_params(topo, rng, 0.2);
    const Batch<double> x = uniform(100, 4, rng, 0.0, 1.0);
    auto crnn = NeuronState<double>::with_input(topo, x);
    auto snn = crnn;
    relax_crnn(crnn, topo, params, dyn, 250);
    relax_snn(snn, topo, params, dyn, spk, 250);
    for (int n = 1; n <= topo.depth(); ++n) {
      total += std::sqrt((snn.xi[n] - crnn.xi[n]).squaredNorm() / double(crnn.xi[n].size()));
      ++count;
    }
  }
  MESSAGE("mean layerwise RMS difference " << total / count);
  CHECK(total / count <= 0.05);
}

TEST_CASE("spiking config validation") {
  SpikingConfig spk;
  CHECK_NOTHROW(spk.validate());
  spk.lambda = 0.0;
  CHECK_THROWS_AS(spk.validate(), ConfigError);
  spk.lambda = 1.2;
  CHECK_THROWS_AS(spk.validate(), ConfigError);
}
