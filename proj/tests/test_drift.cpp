#include <cmath>
#include <memory>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stmap/drift.hpp"

using namespace stmap;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

ConstPoint pt(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

SampleBank normal_bank(std::size_t n, std::size_t d, std::uint64_t seed) {
  return draw_bank(*std::make_shared<GaussianMixture>(GaussianMixture::standard_normal(d)), n, seed);
}

const NoiseConfig kUnitNoise{1.0, 1.0, 1.0};

// -(pi/3) x: single standard Gaussian, cosine schedule, t = 1/2, eps = gamma = 1.
Vector example_one(const Vector& x) { return -(kPi / 3.0) * x; }

std::vector<Vector> probe_points_2d() {
  return {vec({1.0, 0.0}), vec({0.0, 0.5}), vec({-0.7, 0.3}), vec({0.4, -1.2}), vec({1.5, 1.0})};
}

}  // namespace

// ---------------------------------------------------------------------------
// weighted_ratio

TEST(WeightedRatio, EqualWeightsGiveMean) {
  Matrix v(3, 2);
  v << 1, 2, 3, 4, 5, 9;
  std::vector<double> lw(3, -7.5);
  const Vector r = weighted_ratio(lw, v);
  EXPECT_NEAR(r[0], 3.0, 1e-15);
  EXPECT_NEAR(r[1], 5.0, 1e-15);
}

TEST(WeightedRatio, SingleFiniteWeightSelectsRow) {
  Matrix v(4, 1);
  v << 1, 2, 3, 4;
  std::vector<double> lw{-kInf, -kInf, 3.0, -kInf};
  EXPECT_EQ(weighted_ratio(lw, v)[0], 3.0);
}

TEST(WeightedRatio, AllMinusInfinityIsDegenerate) {
  Matrix v = Matrix::Ones(3, 1);
  std::vector<double> lw(3, -kInf);
  EXPECT_THROW(weighted_ratio(lw, v), DegenerateWeightsError);
}

TEST(WeightedRatio, MatchesDirectDomainOnBenignWeights) {
  CounterRng rng(1);
  const int n = 100;
  Matrix v(n, 3);
  std::vector<double> w(n), lw(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 + 1.5 * rng.uniform();
    lw[i] = std::log(w[i]);
    for (int j = 0; j < 3; ++j) v(i, j) = 2.0 * rng.uniform() - 0.5;
  }
  Vector num = Vector::Zero(3);
  double den = 0;
  for (int i = 0; i < n; ++i) {
    num += w[i] * v.row(i).transpose();
    den += w[i];
  }
  const Vector direct = num / den;
  const Vector r = weighted_ratio(lw, v);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r[j], direct[j], 1e-12 * std::abs(direct[j]));
}

TEST(WeightedRatio, ShiftInvariance) {
  CounterRng rng(2);
  Matrix v(50, 2);
  std::vector<double> lw(50), shifted(50);
  for (int i = 0; i < 50; ++i) {
    lw[i] = 10.0 * rng.uniform() - 5.0;
    shifted[i] = lw[i] + 500.0;
    v(i, 0) = rng.uniform();
    v(i, 1) = -3.0 * rng.uniform();
  }
  EXPECT_LT((weighted_ratio(lw, v) - weighted_ratio(shifted, v)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WeightedRatio, OutputInConvexHull) {
  CounterRng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 1 + static_cast<int>(rng.uniform() * 30);
    Matrix v(n, 2);
    std::vector<double> lw(n);
    for (int i = 0; i < n; ++i) {
      lw[i] = rng.uniform() < 0.2 ? -kInf : 40.0 * rng.uniform() - 20.0;
      v(i, 0) = 10.0 * rng.uniform() - 5.0;
      v(i, 1) = rng.uniform();
    }
    lw[0] = 0.0;
    const Vector r = weighted_ratio(lw, v);
    for (int j = 0; j < 2; ++j) {
      EXPECT_GE(r[j], v.col(j).minCoeff() - 1e-12);
      EXPECT_LE(r[j], v.col(j).maxCoeff() + 1e-12);
    }
  }
}

TEST(WeightedRatio, StandardErrorOfEqualWeightsIsStandardErrorOfMean) {
  Matrix v(4, 1);
  v << 1, 2, 3, 4;
  std::vector<double> lw(4, 0.0);
  const auto e = weighted_ratio_with_error(lw, v);
  // sqrt(sum (v - mean)^2) / n
  EXPECT_NEAR(e.standard_error[0], std::sqrt(5.0) / 4.0, 1e-15);
  EXPECT_NEAR(e.effective_size, 4.0, 1e-12);
}

// ---------------------------------------------------------------------------
// ODE drift

TEST(OdeDrift, InitialTimeUsesBankMean) {
  const SampleBank bank(vec({0.1, 0.4, 0.9}), "test");
  Cauchy1d rho0;
  const auto lin = Schedule::linear();
  const double x = 2.0;
  const Vector b = drift_ode(0.0, {&x, 1}, bank, rho0, lin);
  const double mean = (0.1 + 0.4 + 0.9) / 3.0;
  EXPECT_NEAR(b[0], -1.0 * (x - mean), 1e-15);
}

TEST(OdeDrift, SingleAtomBank) {
  const SampleBank bank(vec({1.0}), "atom");
  Cauchy1d rho0;
  const double x = 0.0;
  // Linear schedule at t = 1/2: sigma = 0.5, sigma' = -1.
  EXPECT_NEAR(drift_ode(0.5, {&x, 1}, bank, rho0, Schedule::linear())[0], 2.0, 1e-15);
}

TEST(OdeDrift, TimeOneIsDomainError) {
  const SampleBank bank(vec({1.0}), "atom");
  Cauchy1d rho0;
  const double x = 0.0;
  EXPECT_THROW(drift_ode(1.0, {&x, 1}, bank, rho0, Schedule::cosine_squared()), DomainError);
}

TEST(OdeDrift, ShiftInvarianceAtTimeZero) {
  const SampleBank bank = normal_bank(200, 2, 5);
  IsotropicGaussian rho0(2, 1.0);
  const Vector x = vec({0.3, -0.4}), c = vec({2.0, -1.0});
  Matrix shifted = bank.samples.rowwise() + c.transpose();
  const SampleBank bank_c(shifted, "shifted");
  const Vector xc = x + c;
  const auto lin = Schedule::linear();
  EXPECT_LT((drift_ode(0.0, pt(x), bank, rho0, lin) - drift_ode(0.0, pt(xc), bank_c, rho0, lin)).norm(), 1e-12);
}

// Oracle: the drift with the expectation over eta ~ rho_1 done by adaptive
// quadrature instead of the bank.
TEST(OdeDrift, BankEstimateMatchesQuadrature) {
  Sinusoid1d rho1;
  Cauchy1d rho0;
  const SampleBank bank = draw_bank(rho1, 100000, 17);
  const auto sched = Schedule::cosine_squared();
  using boost::math::quadrature::gauss_kronrod;
  for (double t : {0.2, 0.5, 0.8}) {
    const auto s = sched.evaluate(t);
    for (double x : {-1.0, 0.1, 0.4, 0.7, 2.0}) {
      auto kern = [&](double eta) {
        const double u = (x - s.beta * eta) / s.sigma;
        return Sinusoid1d::density(eta) / (kPi * (1.0 + u * u));
      };
      const double den = gauss_kronrod<double, 61>::integrate(kern, 0.0, 1.0, 12, 1e-13);
      const double num = gauss_kronrod<double, 61>::integrate(
          [&](double eta) { return (x - eta) * kern(eta); }, 0.0, 1.0, 12, 1e-13);
      const double exact = s.sigma_prime / s.sigma * num / den;
      const auto est = drift_ode_with_error(t, {&x, 1}, bank, rho0, sched);
      EXPECT_LE(std::abs(est.value[0] - exact), 3.0 * est.standard_error[0] + 1e-12)
          << "t=" << t << " x=" << x << " se=" << est.standard_error[0];
    }
  }
}

// Dual route: the tree code against direct summation of the same bank.
TEST(OdeDrift, TreeCodeMatchesDirectSum) {
  Sinusoid1d rho1;
  const SampleBank bank = draw_bank(rho1, 20000, 9);
  const auto sched = Schedule::cosine_squared();
  const auto fast = DriftScheme::ode(bank, std::make_shared<Cauchy1d>(), sched, true);
  const auto slow = DriftScheme::ode(bank, std::make_shared<Cauchy1d>(), sched, false);
  ASSERT_TRUE(fast.accelerated());
  ASSERT_FALSE(slow.accelerated());
  Matrix x(7, 1);
  x << -3.0, -0.2, 0.0, 0.31, 0.5, 0.97, 5.0;
  for (int k : {1, 50, 250, 450, 499}) {
    const double t = k / 500.0;
    Matrix bf, bs;
    fast.prepare(t)->evaluate(x, bf);
    slow.prepare(t)->evaluate(x, bs);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      EXPECT_NEAR(bf(i, 0), bs(i, 0), 1e-9 * std::max(1.0, std::abs(bs(i, 0)))) << "t=" << t << " x=" << x(i, 0);
  }
}

TEST(CauchyTree, SumsMatchDirect) {
  CounterRng rng(4);
  std::vector<double> atoms(5000);
  for (auto& a : atoms) a = std::tan(kPi * (rng.uniform() - 0.5));  // wide spread
  CauchyTree tree(atoms);
  for (double h : {1e-6, 1e-3, 0.1, 10.0})
    for (double x : {-100.0, -1.0, 0.0, 0.5, 3.0, 1e4}) {
      const auto a = tree.evaluate(x, h), b = tree.evaluate_direct(x, h);
      EXPECT_NEAR(a.weight, b.weight, 1e-10 * b.weight) << h << " " << x;
      EXPECT_NEAR(a.first, b.first, 1e-10 * std::max(std::abs(b.first), b.weight)) << h << " " << x;
    }
}

// ---------------------------------------------------------------------------
// Zero-order drift

TEST(ZeroOrder, SingleAtom) {
  const SampleBank bank(vec({0.7, -0.2}).transpose(), "atom");
  const auto sched = Schedule::cosine_squared();
  const Vector x = vec({1.0, 2.0});
  for (double t : {0.1, 0.5, 0.9}) {
    const auto s = sched.evaluate(t);
    const Vector expected = s.sigma_prime / s.sigma * (x - vec({0.7, -0.2}));
    EXPECT_LT((drift_zero_order(t, pt(x), bank, sched, kUnitNoise) - expected).norm(), 1e-14);
  }
}

TEST(ZeroOrder, SymmetricBankAtOrigin) {
  const SampleBank half = normal_bank(500, 2, 3);
  Matrix both(1000, 2);
  both << half.samples, -half.samples;
  const SampleBank bank(both, "symmetric");
  const Vector x = Vector::Zero(2);
  EXPECT_LT(drift_zero_order(0.4, pt(x), bank, Schedule::cosine_squared(), kUnitNoise).norm(), 1e-14);
}

TEST(ZeroOrder, EndpointsAreDomainErrors) {
  const SampleBank bank(vec({0.0}), "atom");
  const double x = 0.0;
  EXPECT_THROW(drift_zero_order(0.0, {&x, 1}, bank, Schedule::linear(), kUnitNoise), DomainError);
  EXPECT_THROW(drift_zero_order(1.0, {&x, 1}, bank, Schedule::linear(), kUnitNoise), DomainError);
}

TEST(ZeroOrder, MatchesClosedFormWithinMonteCarloError) {
  const SampleBank bank = normal_bank(100000, 2, 21);
  for (const Vector& x : probe_points_2d()) {
    const auto est = drift_zero_order_with_error(0.5, pt(x), bank, Schedule::cosine_squared(), kUnitNoise);
    const Vector exact = example_one(x);
    for (int j = 0; j < 2; ++j)
      EXPECT_LE(std::abs(est.value[j] - exact[j]), 3.0 * est.standard_error[j] + 1e-14) << x.transpose();
  }
}

TEST(ZeroOrder, ReflectionEquivariance) {
  const SampleBank bank = normal_bank(300, 3, 8);
  const SampleBank mirrored(Matrix(-bank.samples), "mirror");
  const Vector x = vec({0.2, -0.5, 1.1});
  const Vector mx = -x;
  for (double t : {0.1, 0.6, 0.95}) {
    const Vector a = drift_zero_order(t, pt(x), bank, Schedule::cosine_squared(), kUnitNoise);
    const Vector b = drift_zero_order(t, pt(mx), mirrored, Schedule::cosine_squared(), kUnitNoise);
    EXPECT_LT((a + b).norm(), 1e-12);
  }
}

TEST(ZeroOrder, BlockEvaluationMatchesPointEvaluation) {
  const SampleBank bank = normal_bank(3000, 2, 10);
  const auto scheme = DriftScheme::zero_order(bank, Schedule::cosine_squared(), kUnitNoise);
  Matrix x(130, 2);
  CounterRng rng(5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 4.0 * rng.uniform() - 2.0;
  Matrix out;
  scheme.prepare(0.3)->evaluate(x, out);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector p = x.row(i).transpose();
    const Vector b = drift_zero_order(0.3, pt(p), bank, Schedule::cosine_squared(), kUnitNoise);
    EXPECT_LT((out.row(i).transpose() - b).norm(), 1e-12);
  }
}

// Particle drift RMSE against the closed form scales as N^{-1/2}.
TEST(ZeroOrder, MonteCarloRate) {
  const Vector x = vec({1.0, 0.5});
  const Vector exact = example_one(x);
  std::vector<double> ns{100, 1000, 10000}, rmse;
  for (double n : ns) {
    double acc = 0.0;
    for (int rep = 0; rep < 64; ++rep) {
      const SampleBank bank = normal_bank(static_cast<std::size_t>(n), 2, 1000 + rep);
      acc += (drift_zero_order(0.5, pt(x), bank, Schedule::cosine_squared(), kUnitNoise) - exact).squaredNorm();
    }
    rmse.push_back(std::sqrt(acc / 64));
  }
  const double slope = oracle::log_log_slope(ns, rmse);
  EXPECT_NEAR(slope, -0.5, 0.15);
}

// ---------------------------------------------------------------------------
// First- and second-order drifts

TEST(FirstOrder, ZeroBankGivesZero) {
  const GaussianBank g(Matrix::Zero(10, 2), 1.0);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  const Vector x = vec({0.3, 0.2});
  EXPECT_EQ(drift_first_order(0.4, pt(x), g, target, Schedule::cosine_squared(), kUnitNoise).norm(), 0.0);
}

TEST(FirstOrder, SymmetricProbesAtOrigin) {
  const GaussianBank half = GaussianBank::draw(200, 2, 1.0, 4);
  Matrix both(400, 2);
  both << half.xi, -half.xi;
  const GaussianBank g(both, 1.0);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  const Vector x = Vector::Zero(2);
  EXPECT_LT(drift_first_order(0.4, pt(x), g, target, Schedule::cosine_squared(), kUnitNoise).norm(), 1e-14);
}

TEST(FirstOrder, MatchesClosedFormWithinMonteCarloError) {
  const GaussianBank g = GaussianBank::draw(100000, 2, 1.0, 31);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  for (const Vector& x : probe_points_2d()) {
    const auto est = drift_first_order_with_error(0.5, pt(x), g, target, Schedule::cosine_squared(), kUnitNoise);
    const Vector exact = example_one(x);
    for (int j = 0; j < 2; ++j)
      EXPECT_LE(std::abs(est.value[j] - exact[j]), 3.0 * est.standard_error[j]) << x.transpose();
  }
}

TEST(FirstOrder, ProbesOutsideSupportAreDegenerate) {
  const GaussianBank g = GaussianBank::draw(50, 1, 1.0, 2);
  Sinusoid1d target;
  const double x = -40.0;
  EXPECT_THROW(drift_first_order(0.3, {&x, 1}, g, target, Schedule::cosine_squared(), kUnitNoise),
               DegenerateWeightsError);
}

TEST(FirstOrder, DiracStartAtTimeZero) {
  // gamma = 0: ell_0 = 0, every probe sits at x.
  const GaussianBank g = GaussianBank::draw(50, 1, 1.0, 2);
  Sinusoid1d target;
  const NoiseConfig noise{0.5, 0.0, 1.0};
  const double inside = 0.0, outside = -0.5;
  EXPECT_EQ(drift_first_order(0.0, {&inside, 1}, g, target, Schedule::cosine_squared(), noise)[0], 0.0);
  EXPECT_THROW(drift_first_order(0.0, {&outside, 1}, g, target, Schedule::cosine_squared(), noise),
               DegenerateWeightsError);
}

TEST(FirstOrder, FunnelFastPathMatchesGenericDensity) {
  const auto funnel = std::make_shared<Funnel>(5, 0.8);
  // Same density without the Funnel type, so the generic probe path runs.
  FunctionDensity generic(5, [&](ConstPoint y) { return funnel->log_density(y); });
  const GaussianBank g = GaussianBank::draw(2000, 5, 1.0, 6);
  const Vector x = vec({0.3, -0.2, 0.5, 0.1, -1.0});
  const NoiseConfig noise{1.0, 2.0, 1.0};
  for (double t : {0.0, 0.3, 0.7}) {
    const Vector a = drift_first_order(t, pt(x), g, *funnel, Schedule::cosine_squared(), noise);
    const Vector b = drift_first_order(t, pt(x), g, generic, Schedule::cosine_squared(), noise);
    EXPECT_LT((a - b).norm(), 1e-9 * std::max(1.0, b.norm())) << t;
  }
}

TEST(SecondOrder, GaussianScoreCancelsAtTimeOne) {
  const GaussianBank g = GaussianBank::draw(100, 2, 1.0, 3);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  const Vector x = vec({0.8, -1.3});
  const Vector b = drift_second_order(1.0, pt(x), g, target, Schedule::linear(), kUnitNoise);
  EXPECT_LT(b.norm(), 1e-14);
}

TEST(SecondOrder, ShiftedGaussianAtTimeOne) {
  const GaussianBank g = GaussianBank::draw(100, 2, 1.0, 3);
  const Vector m = vec({0.5, -2.0});
  const auto target = GaussianMixture::gaussian(m, Covariance::diagonal(Vector::Ones(2)));
  const Vector x = vec({0.8, -1.3});
  // beta'_1 = 1 for the linear schedule; eps = 1.
  const Vector b = drift_second_order(1.0, pt(x), g, target, Schedule::linear(), kUnitNoise);
  EXPECT_LT((b - m).norm(), 1e-14);
}

TEST(SecondOrder, TimeZeroIsDomainError) {
  const GaussianBank g = GaussianBank::draw(10, 1, 1.0, 3);
  const auto target = GaussianMixture::standard_normal(1);
  const double x = 0.0;
  EXPECT_THROW(drift_second_order(0.0, {&x, 1}, g, target, Schedule::linear(), kUnitNoise), DomainError);
}

TEST(SecondOrder, NeedsGradient) {
  const GaussianBank g = GaussianBank::draw(10, 1, 1.0, 3);
  auto f = std::make_shared<FunctionDensity>(1, [](ConstPoint x) { return -x[0] * x[0]; });
  EXPECT_THROW(DriftScheme::second_order(g, f, Schedule::linear(), kUnitNoise), CapabilityError);
}

TEST(SecondOrder, AgreesWithFirstOrderInTheInterior) {
  const GaussianBank g1 = GaussianBank::draw(100000, 2, 1.0, 41);
  const GaussianBank g2 = GaussianBank::draw(100000, 2, 1.0, 42);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  const auto sched = Schedule::cosine_squared();
  for (const Vector& x : probe_points_2d()) {
    const auto a = drift_first_order_with_error(0.6, pt(x), g1, target, sched, kUnitNoise);
    const auto b = drift_second_order_with_error(0.6, pt(x), g2, target, sched, kUnitNoise);
    for (int j = 0; j < 2; ++j) {
      const double se = std::hypot(a.standard_error[j], b.standard_error[j]);
      EXPECT_LE(std::abs(a.value[j] - b.value[j]), 3.0 * se) << x.transpose();
    }
  }
}

TEST(Piecewise, Dispatch) {
  const GaussianBank g = GaussianBank::draw(500, 2, 1.0, 12);
  const GaussianMixture target = GaussianMixture::standard_normal(2);
  const auto sched = Schedule::cosine_squared();
  const Vector x = vec({0.4, -0.3});
  EXPECT_EQ(drift_piecewise(0.25, pt(x), g, target, sched, kUnitNoise),
            drift_first_order(0.25, pt(x), g, target, sched, kUnitNoise));
  EXPECT_EQ(drift_piecewise(0.75, pt(x), g, target, sched, kUnitNoise),
            drift_second_order(0.75, pt(x), g, target, sched, kUnitNoise));
  EXPECT_EQ(drift_piecewise(0.5, pt(x), g, target, sched, kUnitNoise),
            drift_second_order(0.5, pt(x), g, target, sched, kUnitNoise));
}

// ---------------------------------------------------------------------------
// Closed-form mixture drift

TEST(MixtureClosed, ExampleOne) {
  const auto g = GaussianMixture::standard_normal(2);
  for (const Vector& x : probe_points_2d())
    EXPECT_LT((drift_mixture_closed(0.5, pt(x), g, Schedule::cosine_squared(), kUnitNoise) - example_one(x)).norm(),
              1e-14);
}

// Adaptive quadrature of the zero-order ratio with eta ~ N(m, s^2) against
// the closed form. Near t = 1 the kernel is much narrower than the prior, so
// the integration window is centred on the kernel.
TEST(MixtureClosed, MatchesQuadrature) {
  using boost::math::quadrature::gauss_kronrod;
  const double m = 0.7, var = 1.8;
  const auto g = GaussianMixture::gaussian(vec({m}), Covariance::diagonal(vec({var})));
  const NoiseConfig noise{0.5, 2.0, 1.0};
  const auto sched = Schedule::cosine_squared();
  for (double t : {0.1, 0.5, 0.9})
    for (double x : {-1.0, 0.3, 2.5}) {
      const auto s = sched.evaluate(t);
      const double l = noise.epsilon * s.beta + noise.gamma * s.sigma;
      auto w = [&](double eta) {
        const double r = x - s.beta * eta;
        return std::exp(-r * r / (2 * l * s.sigma) - (eta - m) * (eta - m) / (2 * var));
      };
      // Posterior of eta is Gaussian; integrate +-15 posterior sd around its mean.
      const double prec = s.beta * s.beta / (l * s.sigma) + 1.0 / var;
      const double centre = (s.beta * x / (l * s.sigma) + m / var) / prec;
      const double half = 15.0 / std::sqrt(prec);
      const double den = gauss_kronrod<double, 61>::integrate(w, centre - half, centre + half, 15, 1e-14);
      const double num = gauss_kronrod<double, 61>::integrate(
          [&](double eta) { return (x - eta) * w(eta); }, centre - half, centre + half, 15, 1e-14);
      const double expected = s.sigma_prime / s.sigma * num / den;
      EXPECT_NEAR(drift_mixture_closed(t, {&x, 1}, g, sched, noise)[0], expected,
                  1e-10 * std::max(1.0, std::abs(expected)))
          << t << " " << x;
    }
}

// Dense oracle: A_i assembled and solved with a full LU for each component.
TEST(MixtureClosed, MatchesDenseFormula) {
  Matrix c1(3, 3), b2(3, 2);
  c1 << 1.0, 0.3, 0.0, 0.3, 0.8, 0.2, 0.0, 0.2, 1.5;
  b2 << 1.0, 0.0, 0.5, 1.0, 0.0, -0.4;  // rank 2
  const GaussianMixture mix({{0.25, vec({1.0, 0.0, -1.0}), Covariance::full(c1)},
                             {0.35, vec({-0.5, 0.5, 0.0}), Covariance::factor(b2)},
                             {0.40, vec({0.0, -1.0, 0.5}), Covariance::diagonal(vec({0.2, 0.0, 3.0}))}});
  const NoiseConfig noise{1.0, 2.0, 1.0};
  const auto sched = Schedule::cosine_squared();
  const Vector x = vec({0.3, -0.2, 0.9});
  for (double t : {0.0, 0.2, 0.6, 0.95}) {
    const auto s = sched.evaluate(t);
    const double l = noise.epsilon * s.beta + noise.gamma * s.sigma;
    std::vector<double> lw;
    std::vector<Vector> vals;
    for (const auto& c : mix.components()) {
      const Eigen::MatrixXd sig = c.cov.dense();
      const Eigen::MatrixXd a = l * s.sigma * Eigen::MatrixXd::Identity(3, 3) + s.beta * s.beta * sig;
      const Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
      const Vector r = x - s.beta * c.mean;
      lw.push_back(std::log(c.weight) - 0.5 * std::log(a.determinant()) - 0.5 * r.dot(lu.solve(r)));
      vals.push_back(lu.solve(Vector((l * Eigen::MatrixXd::Identity(3, 3) - s.beta * sig) * x - l * c.mean)));
    }
    const double mx = *std::max_element(lw.begin(), lw.end());
    Vector num = Vector::Zero(3);
    double den = 0;
    for (std::size_t i = 0; i < lw.size(); ++i) {
      num += std::exp(lw[i] - mx) * vals[i];
      den += std::exp(lw[i] - mx);
    }
    const Vector expected = s.sigma_prime * num / den;
    EXPECT_LT((drift_mixture_closed(t, pt(x), mix, sched, noise) - expected).norm(), 1e-12) << t;
  }
}

TEST(MixtureClosed, InitialTime) {
  Matrix c(2, 2);
  c << 2.0, 0.5, 0.5, 1.0;
  const auto g = GaussianMixture::gaussian(vec({0.5, -1.0}), Covariance::full(c));
  const Vector x = vec({1.0, 1.0});
  // Linear schedule: sigma'_0 = -1.
  const Vector b = drift_mixture_closed(0.0, pt(x), g, Schedule::linear(), NoiseConfig{1.0, 3.0, 1.0});
  EXPECT_LT((b + (x - vec({0.5, -1.0}))).norm(), 1e-14);
}

TEST(MixtureClosed, SymmetricPairAtOrigin) {
  const GaussianMixture mix({{0.5, vec({1.0, 2.0}), Covariance::diagonal(vec({0.5, 1.0}))},
                             {0.5, vec({-1.0, -2.0}), Covariance::diagonal(vec({0.5, 1.0}))}});
  const Vector x = Vector::Zero(2);
  EXPECT_LT(drift_mixture_closed(0.4, pt(x), mix, Schedule::cosine_squared(), kUnitNoise).norm(), 1e-15);
}

TEST(ScoreRelation, Residuals) {
  const auto sched = Schedule::cosine_squared();
  const auto iso = GaussianMixture::standard_normal(3);
  const auto aniso = GaussianMixture::gaussian(vec({0.5, -1.0, 2.0}), Covariance::diagonal(vec({0.1, 2.0, 5.0})));
  const NoiseConfig noise{0.7, 1.5, 1.0};
  for (double t : {0.05, 0.3, 0.5, 0.8, 0.99})
    for (const Vector& x : {vec({1.0, 0.0, -2.0}), vec({3.0, 1.0, 0.2})}) {
      EXPECT_LE(score_relation_check(t, pt(x), iso, sched, noise), 1e-10);
      EXPECT_LE(score_relation_check(t, pt(x), aniso, sched, noise), 1e-10);
    }
  const Vector zero = Vector::Zero(3);
  EXPECT_EQ(score_relation_check(0.5, pt(zero), iso, sched, noise), 0.0);
  EXPECT_EQ(drift_mixture_closed(0.5, pt(zero), iso, sched, noise).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// Reduced funnel drift

TEST(FunnelReduced, ZeroTailGivesZeroTailDrift) {
  Funnel f(6, 1.0);
  CounterRng rng(3);
  Vector xi(1000);
  fill_standard_normal(rng, xi);
  const Vector x = vec({0.4, 0, 0, 0, 0, 0});
  const Vector b = drift_funnel_reduced(0.3, pt(x), f, xi, Schedule::cosine_squared(), NoiseConfig{});
  EXPECT_EQ(b.tail(5).norm(), 0.0);
}

// alpha -> 0: the funnel becomes N(0, I). The tail drift is then exact; the
// first coordinate is a bank average, checked against its standard error.
TEST(FunnelReduced, SmallAlphaMatchesStandardNormal) {
  Funnel f(2, 1e-10);
  CounterRng rng(13);
  Vector xi(100000);
  fill_standard_normal(rng, xi);
  const auto g = GaussianMixture::standard_normal(2);
  const auto sched = Schedule::cosine_squared();
  const NoiseConfig noise{1.0, 2.0, 1.0};
  for (const Vector& x : probe_points_2d())
    for (double t : {0.2, 0.5, 0.8}) {
      const auto est = drift_funnel_reduced_with_error(t, pt(x), f, xi, sched, noise);
      const Vector exact = drift_mixture_closed(t, pt(x), g, sched, noise);
      EXPECT_NEAR(est.value[1], exact[1], 1e-6);
      EXPECT_LE(std::abs(est.value[0] - exact[0]), 3.0 * est.standard_error[0]) << t << " " << x.transpose();
    }
}

// The reduced drift integrates the tail coordinates analytically; the
// zero-order drift over a funnel sample bank is the same ratio by plain Monte
// Carlo with bounded weights.
TEST(FunnelReduced, AgreesWithZeroOrderOnFunnelBank) {
  Funnel f(7, 1.0);
  CounterRng rng(77);
  Vector xi(1000000);
  fill_standard_normal(rng, xi);
  const SampleBank bank = draw_bank(f, 1000000, 78);
  const auto sched = Schedule::cosine_squared();
  const NoiseConfig noise{1.0, 2.0, 1.0};
  const std::vector<Vector> points{vec({0.0, 0.1, -0.2, 0.3, 0.0, 0.5, -0.1}),
                                   vec({1.0, 1.0, -1.0, 2.0, 0.5, 0.0, 1.5}),
                                   vec({-1.0, 0.2, 0.1, 0.0, -0.2, 0.1, 0.3}),
                                   vec({0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5}),
                                   vec({-0.3, 0.8, 0.0, 0.0, 0.0, -0.4, 0.2})};
  for (double t : {0.4, 0.8})
    for (const Vector& x : points) {
      const auto a = drift_funnel_reduced_with_error(t, pt(x), f, xi, sched, noise);
      const auto b = drift_zero_order_with_error(t, pt(x), bank, sched, noise);
      for (int j = 0; j < 7; ++j) {
        const double se = std::hypot(a.standard_error[j], b.standard_error[j]);
        EXPECT_LE(std::abs(a.value[j] - b.value[j]), 3.0 * se)
            << "t=" << t << " coord " << j << " at " << x.transpose();
      }
    }
}

TEST(DriftScheme, ResampleDrawsFreshBanks) {
  const auto target = std::make_shared<GaussianMixture>(GaussianMixture::standard_normal(1));
  const auto s = DriftScheme::first_order(GaussianBank::draw(20, 1, 1.0, 1), target, Schedule::cosine_squared(),
                                          kUnitNoise, ResamplePolicy::PerStep);
  const auto r1 = s.resample(5, 1), r2 = s.resample(5, 1), r3 = s.resample(5, 2);
  EXPECT_EQ(r1.gaussian_bank()->xi, r2.gaussian_bank()->xi);
  EXPECT_NE(r1.gaussian_bank()->xi, r3.gaussian_bank()->xi);
  EXPECT_NE(r1.gaussian_bank()->xi, s.gaussian_bank()->xi);
}

TEST(DriftScheme, Names) {
  for (const char* n : {"ode", "zero", "first", "second", "piecewise", "mixture-closed", "funnel-reduced"})
    EXPECT_EQ(scheme_name(scheme_from_name(n)), std::string(n));
  EXPECT_THROW(scheme_from_name("third"), ConfigError);
}
