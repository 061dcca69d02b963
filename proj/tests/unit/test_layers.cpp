#include <doctest.h>

#include "eqprop/network.hpp"
#include "helpers.hpp"

using namespace eqprop;
using namespace testutil;

namespace {

double inner(const Batch<double>& a, const Batch<double>& b) { return a.cwiseProduct(b).sum(); }

ConvGeometry geometry(Shape3 in, int out, int k, int stride, int pad) { return ConvGeometry{in, out, k, stride, pad}; }

}  // namespace

TEST_CASE("convolution forward") {
  SUBCASE("a 1x1 kernel of value 2 doubles the map") {
    auto rng = rng_stream(31, "test");
    const auto g = geometry({2, 5, 4}, 2, 1, 1, 0);
    Matrix<double> w = Matrix<double>::Zero(2, 2);
    w(0, 0) = 2.0;
    w(1, 1) = 2.0;
    const Batch<double> x = uniform(40, 3, rng);
    CHECK((conv_forward(w, x, g) - 2.0 * x).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((conv_transpose(w, x, g) - 2.0 * x).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("a centred delta kernel reproduces the input") {
    auto rng = rng_stream(32, "test");
    const auto g = geometry({1, 6, 6}, 1, 3, 1, 1);
    Matrix<double> w = Matrix<double>::Zero(1, 9);
    w(0, 4) = 1.0;
    const Batch<double> x = uniform(36, 2, rng);
    CHECK((conv_forward(w, x, g) - x).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("matches a direct loop") {
    auto rng = rng_stream(33, "test");
    std::uniform_int_distribution<int> pick(0, 2);
    for (int trial = 0; trial < 100; ++trial) {
      const int stride = 1 + pick(rng) % 2, pad = pick(rng), k = 1 + 2 * (pick(rng) % 2);
      const auto g = geometry({1 + pick(rng), 4 + pick(rng), 4 + pick(rng)}, 1 + pick(rng), k, stride, pad);
      const Matrix<double> w = uniform(g.out_channels, g.patch(), rng);
      const Batch<double> x = uniform(g.input.size(), 2, rng);
      const Batch<double> y = conv_forward(w, x, g);
      for (int b = 0; b < 2; ++b) CHECK((y.col(b) - loop_conv(w, x.col(b), g)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("rejects mismatched weights and inputs") {
    const auto g = geometry({1, 4, 4}, 2, 3, 1, 0);
    CHECK_THROWS_AS(conv_forward(Matrix<double>(Matrix<double>::Zero(2, 4)), Batch<double>(Batch<double>::Zero(16, 1)), g),
                    ShapeError);
    CHECK_THROWS_AS(conv_forward(Matrix<double>(Matrix<double>::Zero(2, 9)), Batch<double>(Batch<double>::Zero(15, 1)), g),
                    ShapeError);
  }
}

TEST_CASE("convolution adjoints hold for random shapes") {
  auto rng = rng_stream(34, "test");
  std::uniform_int_distribution<int> pick(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + 2 * (pick(rng) % 2);
    const auto g = geometry({1 + pick(rng), 5 + pick(rng), 4 + pick(rng)}, 1 + pick(rng), k, 1 + pick(rng) % 2,
                            pick(rng) % 2);
    const Matrix<double> w = uniform(g.out_channels, g.patch(), rng);
    const Batch<double> x = uniform(g.input.size(), 3, rng);
    const Batch<double> y = uniform(g.output().size(), 3, rng);
    // input adjoint
    CHECK(inner(conv_forward(w, x, g), y) == doctest::Approx(inner(x, conv_transpose(w, y, g))).epsilon(1e-10));
    // kernel adjoint
    const Matrix<double> dw = uniform(g.out_channels, g.patch(), rng);
    CHECK(inner(conv_forward(dw, x, g), y) ==
          doctest::Approx(inner(dw, conv_kernel_grad(y, x, g))).epsilon(1e-10));
  }
  const auto g = geometry({2, 4, 4}, 3, 3, 1, 1);
  CHECK(conv_transpose(Matrix<double>(Matrix<double>::Ones(3, 18)), Batch<double>(Batch<double>::Zero(48, 2)), g)
            .isZero(0.0));
}

TEST_CASE("linear layers") {
  const Topology topo = make_net({1, 1, 2}, {linear(2), linear(2)});
  auto params = Parameters<double>::zeros(topo);
  params.w(1) << 1, 2, 3, 4;
  params.w(2).setIdentity();
  Batch<double> x(2, 1);
  x << 1, 1;
  const Batch<double> y = forward_drive(topo, params, 1, x);
  CHECK(y(0, 0) == 7.0 - 4.0);
  CHECK(y(1, 0) == 7.0);
  CHECK(forward_drive(topo, params, 2, x) == x);

  auto rng = rng_stream(35, "test");
  for (int trial = 0; trial < 100; ++trial) {
    const Topology t = make_net({1, 3, 3}, {linear(5), linear(4)});
    const auto p = random_params(t, rng);
    const Batch<double> lower = uniform(5, 2, rng), upper = uniform(4, 2, rng);
    // backward_drive(1, .) is the transpose of forward_drive(2, .)
    CHECK(inner(forward_drive(t, p, 2, lower), upper) ==
          doctest::Approx(inner(lower, backward_drive(t, p, 1, upper))).epsilon(1e-10));
  }
}

TEST_CASE("max pooling") {
  SUBCASE("picks the zone maximum and its offset") {
    Batch<double> x(4, 1);
    x << 1, 3, 2, 0;
    auto [y, idx] = max_pool(x, Shape3{1, 2, 2}, 2);
    CHECK(y(0, 0) == 3.0);
    CHECK(idx.at(0, 0) == std::pair<int, int>{0, 1});
  }
  SUBCASE("ties go to the first element in row-major order") {
    Batch<double> x(4, 1);
    x << 5, 5, 0, 0;
    auto [y, idx] = max_pool(x, Shape3{1, 2, 2}, 2);
    CHECK(y(0, 0) == 5.0);
    CHECK(idx.at(0, 0) == std::pair<int, int>{0, 0});
    Batch<double> z = Batch<double>::Constant(4, 1, 0.25);
    CHECK(max_pool(z, Shape3{1, 2, 2}, 2).second.at(0, 0) == std::pair<int, int>{0, 0});
  }
  SUBCASE("matches a direct loop, indices stay inside their zones") {
    auto rng = rng_stream(36, "test");
    for (int trial = 0; trial < 100; ++trial) {
      const int f = 2 + trial % 2;
      const Shape3 in{1 + trial % 3, 4 * f, 2 * f};
      Batch<double> x = uniform(in.size(), 2, rng);
      if (trial % 4 == 0) x = x.array().round();  // force ties
      auto [y, idx] = max_pool(x, in, f);
      for (int b = 0; b < 2; ++b) {
        auto [ly, lidx] = loop_max_pool(x.col(b), in, f);
        CHECK((y.col(b) - ly).cwiseAbs().maxCoeff() == 0.0);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          CHECK(idx.offset(r, b) == lidx[std::size_t(r)]);
          const auto [p, q] = idx.at(r, b);
          CHECK((p >= 0 && p < f && q >= 0 && q < f));
        }
      }
    }
  }
  SUBCASE("tied zones always resolve to their first maximum") {
    auto rng = rng_stream(37, "test");
    std::uniform_int_distribution<int> level(0, 2);
    for (int trial = 0; trial < 100; ++trial) {
      const int f = 2 + trial % 2;
      const Shape3 in{1 + trial % 2, 2 * f, 3 * f};
      Batch<double> x(in.size(), 3);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 0.5 * level(rng);
      const auto first = max_pool(x, in, f);
      const auto again = max_pool(x, in, f);
      for (int b = 0; b < 3; ++b)
        for (Eigen::Index r = 0; r < first.first.rows(); ++r) {
          CHECK(first.second.offset(r, b) == again.second.offset(r, b));
          // no earlier element of the zone reaches the maximum
          const auto [p, q] = first.second.at(r, b);
          const int c = int(r) / ((in.height / f) * (in.width / f));
          const int zone = int(r) % ((in.height / f) * (in.width / f));
          const int zy = zone / (in.width / f), zx = zone % (in.width / f);
          for (int k = 0; k < p * f + q; ++k) {
            const int iy = zy * f + k / f, ix = zx * f + k % f;
            CHECK(x(c * in.spatial() + iy * in.width + ix, b) < first.first(r, b));
          }
        }
    }
  }
  SUBCASE("rejects dims the filter does not divide") {
    CHECK_THROWS_AS(max_pool(Batch<double>(Batch<double>::Zero(15, 1)), Shape3{1, 3, 5}, 2), ConfigError);
  }
}

TEST_CASE("max unpooling") {
  SUBCASE("places the value at its index") {
    Batch<double> y = Batch<double>::Constant(1, 1, 3.0);
    PoolIndices idx;
    idx.filter = 2;
    idx.offset = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>::Constant(1, 1, 1);
    const Batch<double> x = max_unpool(y, idx, Shape3{1, 2, 2});
    Batch<double> expected(4, 1);
    expected << 0, 3, 0, 0;
    CHECK(x == expected);
  }
  SUBCASE("unpooling the pooled map keeps each maximum in place") {
    auto rng = rng_stream(37, "test");
    for (int trial = 0; trial < 100; ++trial) {
      const Shape3 in{2, 6, 4};
      const Batch<double> x = uniform(in.size(), 2, rng);
      auto [y, idx] = max_pool(x, in, 2);
      const Batch<double> back = max_unpool(y, idx, in);
      for (int b = 0; b < 2; ++b)
        for (Eigen::Index i = 0; i < x.rows(); ++i) CHECK((back(i, b) == 0.0 || back(i, b) == x(i, b)));
      CHECK((back.colwise().sum() - y.colwise().sum()).cwiseAbs().maxCoeff() < 1e-12);
      // unpool is the adjoint of gathering at the indices
      const Batch<double> z = uniform(in.size(), 2, rng), u = uniform(y.rows(), 2, rng);
      CHECK(inner(max_gather(z, idx, in), u) == doctest::Approx(inner(z, max_unpool(u, idx, in))).epsilon(1e-12));
      CHECK(max_gather(x, idx, in) == y);
    }
  }
  SUBCASE("rejects indices of another shape") {
    PoolIndices idx;
    idx.filter = 2;
    idx.offset = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>::Zero(2, 1);
    CHECK_THROWS_AS(max_unpool(Batch<double>(Batch<double>::Zero(1, 1)), idx, Shape3{1, 2, 2}), ShapeError);
  }
}

TEST_CASE("average pooling and its scaled inverse") {
  Batch<double> zone(4, 1);
  zone << 1, 2, 3, 4;
  CHECK(avg_pool(zone, Shape3{1, 2, 2}, 2)(0, 0) == 2.5);
  CHECK(avg_pool(Batch<double>(Batch<double>::Constant(32, 1, 0.7)), Shape3{2, 4, 4}, 2).isConstant(0.7, 1e-15));

  const Batch<double> up = avg_unpool(Batch<double>(Batch<double>::Constant(1, 1, 2.5)), Shape3{1, 2, 2}, 2, 4.0);
  CHECK(up.isConstant(0.625, 0.0));
  const Batch<double> rep = avg_unpool(Batch<double>(Batch<double>::Constant(1, 1, 2.5)), Shape3{1, 2, 2}, 2, 1.0);
  CHECK(rep.isConstant(2.5, 0.0));
  CHECK_THROWS_AS(avg_unpool(Batch<double>(Batch<double>::Zero(1, 1)), Shape3{1, 2, 2}, 2, 0.0), ConfigError);

  auto rng = rng_stream(38, "test");
  std::uniform_real_distribution<double> alpha(0.5, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int f = 2 + trial % 2;
    const Shape3 in{1 + trial % 3, 2 * f, 3 * f};
    const Shape3 out = pooled_shape(in, f);
    const double a = alpha(rng);
    const Batch<double> x = uniform(in.size(), 2, rng), y = uniform(out.size(), 2, rng);
    for (int b = 0; b < 2; ++b) CHECK((avg_pool(x, in, f).col(b) - loop_avg_pool(x.col(b), in, f)).norm() < 1e-12);
    // pool(unpool(y)) = y / alpha
    CHECK((avg_pool(avg_unpool(y, in, f, a), in, f) - y / a).cwiseAbs().maxCoeff() < 1e-12);
    // unpool is (F^2 / alpha) times the adjoint of pool
    CHECK(inner(avg_unpool(y, in, f, a), x) ==
          doctest::Approx(double(f * f) / a * inner(y, avg_pool(x, in, f))).epsilon(1e-10));
    // max pooling dominates average pooling on non-negative input
    const Batch<double> pos = x.cwiseAbs();
    CHECK((max_pool(pos, in, f).first - avg_pool(pos, in, f)).minCoeff() >= -1e-15);
  }
}

TEST_CASE("layer input function") {
  auto rng = rng_stream(39, "test");

  SUBCASE("a single layer sees only its input") {
    const Topology topo = make_net({1, 3, 3}, {linear(4)});
    const auto p = random_params(topo, rng);
    const Batch<double> x = uniform(9, 2, rng, 0.0, 1.0);
    std::vector<Batch<double>> s{x, uniform(4, 2, rng)};
    CHECK((phi(topo, p, s, 1) - p.w(1) * x).cwiseAbs().maxCoeff() < 1e-14);
    CHECK_THROWS_AS(phi(topo, p, s, 2), ConfigError);
    CHECK_THROWS_AS(phi(topo, p, s, 0), ConfigError);
  }

  SUBCASE("silent signals give zero input") {
    const Topology topo = make_net({1, 6, 6}, {conv(2, 1, maxp()), conv(2, 1, avg(3)), linear(3)});
    const auto p = random_params(topo, rng);
    std::vector<Batch<double>> s;
    for (int n = 0; n <= 3; ++n) s.push_back(Batch<double>::Zero(topo.state_shape(n).size(), 2));
    for (int n = 1; n <= 3; ++n) CHECK(phi(topo, p, s, n).isZero(0.0));
  }

  SUBCASE("matches the hand-composed pipeline") {
    for (PoolKind kind : {PoolKind::max, PoolKind::avg})
      for (int trial = 0; trial < 50; ++trial) {
        const PoolingSpec pool{kind, 2, kind == PoolKind::avg ? 3.0 : 0.0};
        const Topology topo = make_net({1, 8, 8}, {conv(3, 1, pool), conv(2, 1, pool), linear(4)});
        const auto p = random_params(topo, rng);
        std::vector<Batch<double>> s;
        for (int n = 0; n <= 3; ++n) s.push_back(uniform(topo.state_shape(n).size(), 2, rng, 0.0, 1.0));
        const auto& g1 = topo.layer(1);
        const auto& g2 = topo.layer(2);

        // layer 1: P(w1 * s0) + w2 ~* P^-1(s2), with P^-1 using layer 2's own forward indices
        PoolIndices idx2;
        Batch<double> f1, b1;
        Batch<double> pre2 = conv_forward(p.w(2), s[1], g2.conv);
        Batch<double> up2;
        if (kind == PoolKind::max) {
          f1 = max_pool(conv_forward(p.w(1), s[0], g1.conv), g1.pre_pool, 2).first;
          idx2 = max_pool(pre2, g2.pre_pool, 2).second;
          up2 = max_unpool(s[2], idx2, g2.pre_pool);
        } else {
          f1 = avg_pool(conv_forward(p.w(1), s[0], g1.conv), g1.pre_pool, 2);
          up2 = avg_unpool(s[2], g2.pre_pool, 2, 3.0);
        }
        b1 = conv_transpose(p.w(2), up2, g2.conv);
        CHECK((phi(topo, p, s, 1) - (f1 + b1)).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(f1.rows() == b1.rows());

        // boundary layer: pooled conv output flattened channel-major, then linear top-down term
        const Batch<double> f2 = kind == PoolKind::max ? max_pool(pre2, g2.pre_pool, 2).first
                                                       : avg_pool(pre2, g2.pre_pool, 2);
        const Batch<double> b2 = p.w(3).transpose() * s[3];
        CHECK((phi(topo, p, s, 2) - (f2 + b2)).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((phi(topo, p, s, 3) - p.w(3) * s[2]).cwiseAbs().maxCoeff() < 1e-12);

        // layer_inputs agrees with phi and keeps the summands congruent
        const auto in = layer_inputs(topo, p, s);
        for (int n = 1; n <= 3; ++n) {
          CHECK((in.phi(n) - phi(topo, p, s, n)).cwiseAbs().maxCoeff() < 1e-12);
          if (n < 3) CHECK(in.forward[n].rows() == in.backward[n].rows());
        }
      }
  }
}

TEST_CASE("network shape algebra") {
  const Topology topo = make_net({1, 28, 28}, {conv(16, 1, avg()), conv(32, 0, avg()), linear(128), linear(10)});
  CHECK(topo.depth() == 4);
  CHECK(topo.conv_count() == 2);
  CHECK(topo.state_shape(1) == Shape3{16, 14, 14});
  CHECK(topo.state_shape(2) == Shape3{32, 6, 6});
  CHECK(topo.output_size() == 10);
  CHECK(topo.layer(3).weight_cols() == 32 * 36);

  CHECK_THROWS_AS(make_net({1, 8, 8}, {linear(4), conv(2, 1)}), ConfigError);
  CHECK_THROWS_AS(make_net({1, 7, 7}, {conv(2, 1, avg())}), ConfigError);
  CHECK_THROWS_AS(make_net({1, 8, 8}, {}), ConfigError);
}

TEST_CASE("Kaiming-uniform initialisation") {
  const Topology topo = make_net({1, 6, 6}, {conv(4, 1, avg()), linear(10)}, 2.0);
  auto rng = rng_stream(40, "init");
  const auto p = init_parameters<double>(topo, rng);
  for (int n = 1; n <= 2; ++n) {
    const double bound = 2.0 / std::sqrt(double(topo.layer(n).fan_in()));
    CHECK(p.w(n).cwiseAbs().maxCoeff() <= bound);
    CHECK(p.w(n).cwiseAbs().maxCoeff() > 0.5 * bound);
    CHECK(p.b(n).isZero(0.0));
  }
  auto again = rng_stream(40, "init");
  CHECK(init_parameters<double>(topo, again).w(2) == p.w(2));
}
